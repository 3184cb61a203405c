#ifndef TODRL_ENVGEN_HPP_
#define TODRL_ENVGEN_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "todrl/metrics.hpp"
#include "todrl/schema.hpp"

namespace todrl {

struct GenConfig {
  std::uint64_t seed = 1;
  std::size_t dialogues = 625;
  // Probability of a goal spanning 1, 2, ... domains.
  std::vector<double> domains_per_dialogue{0.6, 0.4};
  std::pair<std::size_t, std::size_t> turns_per_dialogue{2, 12};
  std::pair<std::size_t, std::size_t> constraints_per_domain{1, 3};
  std::pair<std::size_t, std::size_t> requests_per_domain{1, 2};
  std::string template_set = "default";
  std::vector<double> split{0.8, 0.1, 0.1};
  // Chance that the gold system answers a multi-attribute request only in
  // part, leaving the user to ask again in the next turn.
  double partial_answer_probability = 0.5;
  // Chance that a domain opens with a bare request the system follows up on.
  double open_request_probability = 0.2;

  void validate() const;
};

GenConfig gen_config_from_json(const nlohmann::json& j);
nlohmann::json gen_config_to_json(const GenConfig& config);

// One gold turn in the token convention of the linearizer.
struct GoldTurn {
  std::string domain;
  std::string user;
  std::string belief;
  std::string acts;
  std::string response;
  std::vector<std::string> requests;

  friend bool operator==(const GoldTurn&, const GoldTurn&) = default;
};

struct Dialogue {
  std::string id;
  DialogueGoal goal;
  std::vector<GoldTurn> turns;

  friend bool operator==(const Dialogue&, const Dialogue&) = default;
};

struct Corpus {
  std::vector<Dialogue> train;
  std::vector<Dialogue> dev;
  std::vector<Dialogue> test;
};

// Deterministic under config.seed. Throws ConfigError when the config cannot
// be satisfied by the schema.
Corpus generate_corpus(const GenConfig& config, const DialogueSchema& schema,
                       const EntityDatabase& db);

nlohmann::json turn_to_json(const GoldTurn& t);
GoldTurn turn_from_json(const nlohmann::json& j);
nlohmann::json dialogue_to_json(const Dialogue& d);
Dialogue dialogue_from_json(const nlohmann::json& j);
std::string dialogues_to_jsonl(const std::vector<Dialogue>& dialogues);
std::vector<Dialogue> dialogues_from_jsonl(std::string_view text);

// train.jsonl / dev.jsonl / test.jsonl under `dir`.
void write_corpus(const Corpus& corpus, const std::string& dir);
Corpus read_corpus(const std::string& dir);

AnnotatedTurn annotate_turn(const GoldTurn& turn, const DialogueSchema& schema);
TurnGoal gold_turn_goal(const GoldTurn& turn, const DialogueSchema& schema);
// Concatenated belief, act (when the schema has acts) and response spans.
std::vector<std::string> gold_output(const GoldTurn& turn, const DialogueSchema& schema);
TurnOutput gold_turn_output(const GoldTurn& turn, const DialogueSchema& schema);
PredictionCorpus gold_predictions(const std::vector<Dialogue>& dialogues,
                                  const DialogueSchema& schema);

inline constexpr std::size_t kDefaultMaxOutputLength = 64;
inline constexpr std::size_t kMultiWozMaxOutputLength = 256;
inline constexpr std::size_t kInCarMaxOutputLength = 168;

// Instruction tokens opening every model input.
const std::vector<std::string>& context_prefix();

// One turn treated as an independent episode with a teacher-forced context.
struct EpisodeState {
  std::string domain;
  std::vector<std::string> prev_user;
  std::vector<std::string> prev_belief;
  std::vector<std::string> prev_acts;
  std::vector<std::string> prev_response;
  std::vector<std::string> user;
  TurnGoal goal;
  std::vector<std::string> output;
  std::size_t step = 0;
  std::size_t max_length = kDefaultMaxOutputLength;
  bool done = false;

  // prefix : u_{t-1} : bs_{t-1} : da_{t-1} : sr_{t-1} : u_t
  std::vector<std::string> context() const;
};

EpisodeState reset_episode(const Dialogue& dialogue, std::size_t turn,
                           const DialogueSchema& schema,
                           std::size_t max_length = kDefaultMaxOutputLength);

struct StepResult {
  EpisodeState state;
  bool done = false;
};

// Appends `action`; done on <eos_r> or when the output reaches max_length.
StepResult env_step(EpisodeState state, std::string action);

}  // namespace todrl

#endif  // TODRL_ENVGEN_HPP_
