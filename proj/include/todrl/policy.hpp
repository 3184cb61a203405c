#ifndef TODRL_POLICY_HPP_
#define TODRL_POLICY_HPP_

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "todrl/envgen.hpp"
#include "todrl/linearizer.hpp"
#include "todrl/random.hpp"
#include "todrl/schema.hpp"

namespace todrl {

using TokenId = std::int32_t;
inline constexpr TokenId kNoToken = -1;

// Output vocabulary of the token policy.
class Vocabulary {
 public:
  // Always contains the six region markers.
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);

  // Markers, acts, domain brackets, slots, value tokens and placeholders of
  // the schema plus every token of the gold outputs.
  static Vocabulary build(const std::vector<Dialogue>& dialogues, const DialogueSchema& schema);

  TokenId add(std::string_view token);
  TokenId id(std::string_view token) const;  // kNoToken when absent
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Weights of the log-linear policy and its linear value baseline.
struct PolicySnapshot {
  std::shared_ptr<const Vocabulary> vocab;
  std::uint32_t feature_bits = 18;
  std::vector<double> policy_weights;
  std::vector<double> value_weights;
  std::uint64_t version = 0;

  // Zero weights over a 2^bits hashed feature space.
  static PolicySnapshot zeros(std::shared_ptr<const Vocabulary> vocab, std::uint32_t bits = 18);
};

// Deep copy with an incremented version tag.
PolicySnapshot clone_snapshot(const PolicySnapshot& snapshot);

// JSON dump: {"format":"todrl-snapshot","format_version":1,"version",
// "feature_bits","vocabulary":[...],"policy":{"index":[...],"value":[...]},
// "value":{...}} with only non-zero weights listed.
std::string snapshot_to_json(const PolicySnapshot& snapshot);
PolicySnapshot snapshot_from_json(std::string_view document);
void save_snapshot(const PolicySnapshot& snapshot, const std::string& path);
PolicySnapshot load_snapshot(const std::string& path);

class FeatureContext;

// Static token tables shared by every episode of one vocabulary and schema.
class FeatureModel {
 public:
  static constexpr std::size_t kFeaturesPerCandidate = 12;
  static constexpr std::size_t kStateFeatures = 8;

  FeatureModel(std::shared_ptr<const Vocabulary> vocab, const DialogueSchema& schema,
               std::uint32_t feature_bits = 18);

  const Vocabulary& vocab() const { return *vocab_; }
  std::shared_ptr<const Vocabulary> vocab_ptr() const { return vocab_; }
  const DialogueSchema& schema() const { return schema_; }
  std::uint32_t feature_bits() const { return bits_; }
  std::uint64_t mask() const { return (std::uint64_t{1} << bits_) - 1; }

  FeatureContext start(const EpisodeState& state) const;

 private:
  friend class FeatureContext;

  enum class TokenClass : std::uint8_t {
    kWord, kMarker, kDomain, kAct, kSlot, kValue, kPlaceholder, kNamePlaceholder
  };

  struct SlotValues {
    int domain = -1;
    std::string slot;
    std::vector<std::vector<TokenId>> values;
    std::vector<std::string> texts;
  };

  int domain_index(std::string_view name) const;
  const SlotValues* slot_values(int domain, std::string_view slot) const;

  std::shared_ptr<const Vocabulary> vocab_;
  DialogueSchema schema_;
  std::uint32_t bits_;
  std::vector<std::string> domain_names_;
  std::vector<TokenClass> classes_;
  std::vector<int> bracket_domain_;       // domain index for "[d]" tokens
  std::vector<std::string> slot_name_;    // slot tokens and placeholder slots
  std::vector<int> slot_rank_;            // lexicographic rank of slot tokens
  std::vector<SlotValues> slot_values_;   // per informable (domain, slot)
  TokenId eos_belief_ = kNoToken;
};

// Incremental feature state of one episode. Holds a reference to its model.
class FeatureContext {
 public:
  FeatureContext(const FeatureModel& model, const EpisodeState& state);

  // Records an emitted token.
  void push(TokenId token);

  const FeatureModel& model() const { return *model_; }
  Region region() const { return extractor_.region(); }
  std::size_t length() const { return length_; }

  // Hashed feature indices, kFeaturesPerCandidate per vocabulary entry.
  const std::vector<std::uint32_t>& candidate_features() const;
  // Hashed indices of the value-baseline features.
  const std::vector<std::uint32_t>& state_features() const;

 private:
  void refresh() const;

  const FeatureModel* model_;
  int turn_domain_ = -1;
  std::vector<std::uint8_t> in_user_;
  std::vector<std::uint8_t> in_prev_belief_;
  std::vector<std::uint8_t> in_prev_user_;
  std::vector<std::uint8_t> emitted_;
  std::vector<std::uint8_t> emitted_in_region_;
  // Slot-values indices whose value text occurs in the current user turn.
  std::vector<std::vector<std::uint8_t>> user_value_hits_;
  std::vector<std::uint8_t> user_slot_cue_;    // per slot-values entry
  std::vector<int> prev_value_index_;          // per slot-values entry, -1 if absent
  std::vector<std::uint8_t> prev_domain_;      // per domain
  std::vector<std::string> requested_cues_;    // requestable slot names mentioned by the user
  std::uint32_t user_flags_ = 0;

  ExtractorState extractor_;
  std::size_t length_ = 0;
  TokenId prev_[3] = {kNoToken, kNoToken, kNoToken};
  std::vector<int> block_slots_;  // slot ranks emitted in the open belief block
  int last_slot_rank_ = -1;
  int last_domain_ = -1;
  std::vector<std::uint8_t> belief_domains_;
  Region counted_region_ = Region::kPending;

  mutable bool dirty_ = true;
  mutable std::vector<std::uint32_t> candidate_features_;
  mutable std::vector<std::uint32_t> state_features_;
};

// Unnormalized scores of every vocabulary entry.
std::vector<double> action_scores(const PolicySnapshot& snapshot, const FeatureContext& ctx);

// Softmax over scores; entries outside `mask` get probability zero.
// Throws ConfigError for an empty mask.
std::vector<double> softmax(std::span<const double> scores,
                            const std::vector<TokenId>* mask = nullptr);

std::vector<double> action_distribution(const PolicySnapshot& snapshot, const FeatureContext& ctx,
                                        const std::vector<TokenId>* mask = nullptr);
// Convenience overload replaying the state's output into a fresh context.
std::vector<double> action_distribution(const PolicySnapshot& snapshot, const FeatureModel& model,
                                        const EpisodeState& state,
                                        const std::vector<TokenId>* mask = nullptr);

double state_value(const PolicySnapshot& snapshot, const FeatureContext& ctx);

// Same quantities over feature arrays copied out of a context, so rollouts
// can be rescored without replaying episodes.
std::vector<double> scores_from_features(const PolicySnapshot& snapshot,
                                         std::span<const std::uint32_t> candidate_features);
double value_from_features(const PolicySnapshot& snapshot,
                           std::span<const std::uint32_t> state_features);

struct SamplingConfig {
  int top_k = 50;
  double top_p = 1.0;
  double temperature = 1.0;

  // Throws ConfigError for top_k < 1, top_p outside (0, 1] or temperature <= 0.
  void validate() const;
};

struct SampledAction {
  TokenId token = kNoToken;
  double logprob = 0.0;  // under the truncated, renormalized distribution
};

// Temperature, then top-k, then nucleus truncation over `scores`.
std::vector<double> truncated_distribution(std::span<const double> scores,
                                           const SamplingConfig& config,
                                           const std::vector<TokenId>* mask = nullptr);
SampledAction sample_from_scores(std::span<const double> scores, const SamplingConfig& config,
                                 Rng& rng, const std::vector<TokenId>* mask = nullptr);
SampledAction sample_action(const PolicySnapshot& snapshot, const FeatureContext& ctx,
                            const SamplingConfig& config, Rng& rng,
                            const std::vector<TokenId>* mask = nullptr);

enum class DecodeMode { kGreedy, kSample };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  SamplingConfig sampling;
};

// Generates one turn's output tokens from a reset episode.
std::vector<std::string> decode_turn(const PolicySnapshot& snapshot, const FeatureModel& model,
                                     EpisodeState state, const DecodeConfig& config, Rng& rng);

// Sparse accumulator over the hashed weight space.
class SparseGradient {
 public:
  explicit SparseGradient(std::size_t dim = 0) : dense_(dim, 0.0) {}

  void add(std::uint32_t index, double value) {
    if (dense_[index] == 0.0 && value != 0.0) touched_.push_back(index);
    dense_[index] += value;
  }
  double at(std::uint32_t index) const { return dense_[index]; }
  const std::vector<std::uint32_t>& touched() const { return touched_; }
  std::size_t dim() const { return dense_.size(); }
  // w += scale * g, then resets the accumulator.
  void apply_and_clear(std::vector<double>& weights, double scale);
  void clear();
  bool finite() const;

 private:
  std::vector<double> dense_;
  std::vector<std::uint32_t> touched_;
};

// Adds scale * (phi(s, a) - E_pi[phi(s, .)]) for one step, where `probs`
// is the distribution the features were scored under.
void accumulate_logprob_gradient(const FeatureContext& ctx, std::span<const double> probs,
                                 TokenId action, double scale, SparseGradient& grad);
void accumulate_logprob_gradient(std::span<const std::uint32_t> candidate_features,
                                 std::span<const double> probs, TokenId action, double scale,
                                 SparseGradient& grad);

struct SftExample {
  EpisodeState state;
  std::vector<std::string> target;
};

std::vector<SftExample> sft_examples(const std::vector<Dialogue>& dialogues,
                                     const DialogueSchema& schema,
                                     std::size_t max_length = kDefaultMaxOutputLength);

// Mean per-token negative log-likelihood of `example.target`. When `grad` is
// given, the ascent direction of the mean log-likelihood (minus the NLL
// gradient) is accumulated into it.
double example_nll(const PolicySnapshot& snapshot, const FeatureModel& model,
                   const SftExample& example, SparseGradient* grad = nullptr);

struct SftConfig {
  std::size_t epochs = 8;
  double learning_rate = 0.5;
  std::uint64_t seed = 1;
};

struct SftResult {
  PolicySnapshot snapshot;
  std::vector<double> epoch_nll;  // mean token NLL seen during each epoch
};

// Maximum-likelihood training of the policy weights, one step per turn.
// Throws TrainingError on a non-finite loss or gradient.
SftResult sft_train(const std::vector<SftExample>& examples, const FeatureModel& model,
                    PolicySnapshot initial, const SftConfig& config);

}  // namespace todrl

#endif  // TODRL_POLICY_HPP_
