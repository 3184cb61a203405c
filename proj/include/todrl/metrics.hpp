#ifndef TODRL_METRICS_HPP_
#define TODRL_METRICS_HPP_

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "todrl/schema.hpp"

namespace todrl {

// Token spans of one turn; each span carries its region markers.
struct TurnOutput {
  std::vector<std::string> belief;
  std::vector<std::string> acts;
  std::vector<std::string> response;

  friend bool operator==(const TurnOutput&, const TurnOutput&) = default;
};

struct TurnPrediction {
  std::string domain;
  TurnOutput pred;
  TurnOutput gold;
};

struct DialoguePrediction {
  std::string id;
  DialogueGoal goal;
  std::vector<TurnPrediction> turns;
};

using PredictionCorpus = std::vector<DialoguePrediction>;

enum class EvalMode { kMultiWoz, kInCar };

struct DialogueFlags {
  std::string id;
  bool informed = false;
  bool success = false;
  bool matched = false;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
};

struct EvalReport {
  EvalMode mode = EvalMode::kMultiWoz;
  double inform = 0.0;   // percentage
  double success = 0.0;  // percentage
  double match = 0.0;    // percentage
  double succ_f1 = 0.0;  // [0, 1]
  double bleu = 0.0;     // [0, 100]
  double combined = 0.0;
  std::vector<DialogueFlags> dialogues;

  nlohmann::json to_json() const;
};

// Smoothing rule applied by corpus_bleu, reported with every EvalReport.
inline constexpr std::string_view kBleuSmoothing =
    "orders n>=2 with zero matches use precision 1/(2*candidate n-gram count); "
    "orders without candidate n-grams are dropped and the remaining weights renormalized";

double inform_rate(const PredictionCorpus& corpus, const DialogueSchema& schema,
                   const EntityDatabase& db);
double success_rate(const PredictionCorpus& corpus, const DialogueSchema& schema,
                    const EntityDatabase& db);
double match_rate(const PredictionCorpus& corpus, const DialogueSchema& schema);
double succ_f1(const PredictionCorpus& corpus, const DialogueSchema& schema);

// Corpus BLEU-4 on [0, 100] with one reference per candidate.
double corpus_bleu(std::span<const std::vector<std::string>> candidates,
                   std::span<const std::vector<std::string>> references);

double combined_score(double inform, double success, double match, double succ_f1_value,
                      double bleu, EvalMode mode);

EvalMode mode_for(const DialogueSchema& schema);

// Full report; throws EvaluationError on an empty corpus or unknown goal domains.
EvalReport evaluate(const PredictionCorpus& corpus, const DialogueSchema& schema,
                    const EntityDatabase& db);

// Predictions JSONL line <-> DialoguePrediction.
DialoguePrediction prediction_from_json(const nlohmann::json& j);
nlohmann::json prediction_to_json(const DialoguePrediction& p);
nlohmann::json goal_to_json(const DialogueGoal& goal);
DialogueGoal goal_from_json(const nlohmann::json& j);

}  // namespace todrl

#endif  // TODRL_METRICS_HPP_
