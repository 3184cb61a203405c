#ifndef TODRL_TRAINER_HPP_
#define TODRL_TRAINER_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "todrl/envgen.hpp"
#include "todrl/metrics.hpp"
#include "todrl/policy.hpp"
#include "todrl/random.hpp"
#include "todrl/reward.hpp"
#include "todrl/schema.hpp"

namespace todrl {

enum class RewardMode { kFull, kUnderstandingOnly, kGenerationOnly, kSparseTerminal };

std::string_view reward_mode_name(RewardMode mode);
// Accepts the long names and the CLI aliases no-ru, no-rg and sparse.
RewardMode parse_reward_mode(std::string_view name);

struct TrainConfig {
  std::size_t episodes = 20000;
  std::size_t batch_size = 8;
  std::size_t ppo_epochs = 5;
  double learning_rate = 0.02;
  double value_learning_rate = 0.05;
  double gamma = 0.99;
  double clip_epsilon = 0.2;
  bool whiten_advantages = true;  // rescale each batch to zero mean, unit variance
  bool nlpo = false;
  double nlpo_top_p = 0.9;
  std::size_t mask_refresh = 10;  // updates between masked-policy refreshes
  RewardMode reward_mode = RewardMode::kFull;
  std::uint64_t seed = 1;
  RewardConfig reward;
  SamplingConfig sampling;
  std::size_t max_length = kDefaultMaxOutputLength;
  std::size_t eval_every = 1000;  // episodes; 0 evaluates only at start and end
  std::size_t eval_dialogues = 0;  // 0 uses the whole evaluation split
  DecodeConfig eval_decode;

  // Throws ConfigError when an invariant does not hold.
  void validate() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& config);

// One sampled turn. Feature arrays are cached so updates can rescore the
// trajectory under new weights.
struct EpisodeRollout {
  std::string dialogue_id;
  std::size_t turn = 0;
  std::vector<TokenId> actions;
  std::vector<std::vector<std::uint32_t>> candidate_features;
  std::vector<std::vector<std::uint32_t>> state_features;
  std::vector<std::vector<TokenId>> masks;  // NLPO candidate sets, empty without NLPO
  std::vector<double> logprobs;             // behavior policy
  std::vector<double> ref_logprobs;         // frozen reference policy
  std::vector<double> task_rewards;         // mode-dependent, before KL shaping
  std::vector<double> rewards;              // shaped
  std::vector<double> returns;
  std::vector<double> values;
  std::vector<double> advantages;
  RewardTrace trace;

  std::size_t size() const { return actions.size(); }
};

struct RolloutBatch {
  std::vector<EpisodeRollout> episodes;
  double mean_kl = 0.0;  // mean sampled log-ratio per token
  double mean_task_return = 0.0;

  std::size_t tokens() const;
};

// Everything an episode needs besides the policies.
struct RolloutEnv {
  const DialogueSchema* schema = nullptr;
  const FeatureModel* model = nullptr;
  const std::vector<Dialogue>* dialogues = nullptr;
};

// Task reward per token for one trace under `mode`: the tracker delta in full
// mode, the kept component's share of it in the ablations, and the final
// cumulative R_tod on the last token in sparse mode.
std::vector<double> task_rewards(const RewardTrace& trace, const TurnGoal& goal, RewardMode mode);

// G_t = sum_k gamma^k r_{t+k}.
std::vector<double> discounted_returns(std::span<const double> rewards, double gamma);

// Smallest probability-sorted prefix with cumulative mass >= p. Ties break by
// token id; the top token is always included.
std::vector<TokenId> nucleus_set(std::span<const double> probs, double p);

// Runs one episode on `dialogue.turns[turn]`. When `forced` is given those
// tokens are replayed instead of sampling.
EpisodeRollout run_episode(const PolicySnapshot& policy, const PolicySnapshot& reference,
                           const PolicySnapshot* masked, const RolloutEnv& env,
                           const Dialogue& dialogue, std::size_t turn, const TrainConfig& config,
                           double beta, Rng& rng,
                           const std::vector<std::string>* forced = nullptr);

RolloutBatch collect_rollouts(const PolicySnapshot& policy, const PolicySnapshot& reference,
                              const PolicySnapshot* masked, const RolloutEnv& env,
                              std::size_t n_episodes, const TrainConfig& config, double beta,
                              Rng& rng);

// Fills returns, values and advantages from rewards and the value weights.
void finish_episode(EpisodeRollout& episode, const PolicySnapshot& policy, double gamma);

// Rescales advantages to zero mean and unit variance across the batch; a
// batch with (near) zero spread is only centred.
void whiten_advantages(RolloutBatch& batch);

// Mean clipped surrogate over every token of the batch.
double ppo_surrogate(const PolicySnapshot& policy, const RolloutBatch& batch, double clip_epsilon);
// Ascent direction of ppo_surrogate with respect to the policy weights.
void ppo_surrogate_gradient(const PolicySnapshot& policy, const RolloutBatch& batch,
                            double clip_epsilon, SparseGradient& grad);

struct UpdateStats {
  double surrogate = 0.0;
  double value_loss = 0.0;  // mean squared error before the last value step
  double clip_fraction = 0.0;
};

// ppo_epochs gradient steps on the surrogate and value regression.
// Throws TrainingError on a non-finite gradient.
UpdateStats ppo_update(PolicySnapshot& policy, const RolloutBatch& batch,
                       const TrainConfig& config);

struct LogRecord {
  std::size_t episode = 0;
  EvalReport report;
  double beta = 0.0;
  double mean_kl = 0.0;
  RewardMode reward_mode = RewardMode::kFull;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

// Trainer state between updates; enough to resume a run bit-exactly.
struct TrainerState {
  PolicySnapshot policy;
  PolicySnapshot reference;
  std::optional<PolicySnapshot> masked;
  std::size_t episode = 0;
  std::size_t updates = 0;
  double beta = 0.0;
  double last_kl = 0.0;
  std::string rng_state;
};

void save_checkpoint(const TrainerState& state, const std::string& path);
TrainerState load_checkpoint(const std::string& path);

struct TrainData {
  const DialogueSchema* schema = nullptr;
  const EntityDatabase* db = nullptr;
  const FeatureModel* model = nullptr;
  std::vector<Dialogue> train;
  std::vector<Dialogue> eval;
};

struct TrainHooks {
  std::function<void(const LogRecord&)> on_log;
  // Written after every evaluation when non-empty.
  std::string checkpoint_path;
  // Stops after this many episodes (simulated interruption) when nonzero.
  std::size_t stop_after = 0;
};

struct TrainResult {
  TrainerState state;
  std::vector<LogRecord> log;
};

TrainerState initial_state(const PolicySnapshot& sft, const TrainConfig& config);

TrainResult train(const TrainConfig& config, const TrainData& data, TrainerState state,
                  const TrainHooks& hooks = {});

// Decodes every turn of `dialogues` with a teacher-forced context.
PredictionCorpus predict_corpus(const PolicySnapshot& snapshot, const FeatureModel& model,
                                const std::vector<Dialogue>& dialogues,
                                const DecodeConfig& decode, std::uint64_t seed,
                                std::size_t max_length = kDefaultMaxOutputLength);

EvalReport evaluate_snapshot(const PolicySnapshot& snapshot, const TrainData& data,
                             const DecodeConfig& decode, std::uint64_t seed,
                             std::size_t max_dialogues = 0,
                             std::size_t max_length = kDefaultMaxOutputLength);

}  // namespace todrl

#endif  // TODRL_TRAINER_HPP_
