#ifndef TODRL_REWARD_HPP_
#define TODRL_REWARD_HPP_

#include <string>
#include <string_view>
#include <vector>

#include "todrl/linearizer.hpp"
#include "todrl/schema.hpp"

namespace todrl {

struct RewardConfig {
  double alpha_u = 1.0;  // penalty sensitivity of the understanding reward
  double alpha_g = 1.0;  // penalty sensitivity of the generation reward
  double kl_beta_init = 0.01;
  double kl_target = 0.05;
  double kl_update_rate = 0.2;
  double kl_clip = 0.2;

  // Throws ConfigError when an invariant does not hold.
  void validate() const;
};

// matched * exp(-alpha * missing / total) / total, and 1 when total == 0.
double progressive_reward(std::size_t total, std::size_t matched, double alpha);

double understanding_reward(const BeliefSet& sv_gt, const BeliefSet& sv_hat, double alpha_u);
double generation_reward(const RequestSet& s_gt, const RequestSet& s_hat, double alpha_g);
// Weighted combination of both rewards; 0 when both ground-truth sets are empty.
double tod_reward(const BeliefSet& sv_gt, const BeliefSet& sv_hat, const RequestSet& s_gt,
                  const RequestSet& s_hat, const RewardConfig& config);

struct TraceRecord {
  std::string token;
  double delta_tod = 0.0;
  double cum_u = 0.0;
  double cum_g = 0.0;
  double cum_tod = 0.0;
  Region region = Region::kPending;
};

using RewardTrace = std::vector<TraceRecord>;

// Per-token reward bookkeeping for one episode.
class RewardTracker {
 public:
  RewardTracker(TurnGoal goal, RewardConfig config, std::string default_domain);

  // Feeds one generated token and returns the change in cumulative R_tod.
  double step(std::string_view token, const DialogueSchema& schema);

  const TurnGoal& goal() const { return goal_; }
  const RewardConfig& config() const { return config_; }
  const ExtractorState& extractor() const { return extractor_; }
  double cum_u() const { return cum_u_; }
  double cum_g() const { return cum_g_; }
  double cum_tod() const { return cum_tod_; }
  // Last per-token changes of the component rewards.
  double last_delta_u() const { return last_delta_u_; }
  double last_delta_g() const { return last_delta_g_; }
  const RewardTrace& trace() const { return trace_; }

 private:
  void recompute();

  TurnGoal goal_;
  RewardConfig config_;
  ExtractorState extractor_;
  double cum_u_ = 0.0;
  double cum_g_ = 0.0;
  double cum_tod_ = 0.0;
  double last_delta_u_ = 0.0;
  double last_delta_g_ = 0.0;
  RewardTrace trace_;
};

// Per-token estimate of R_t - beta * KL(pi || pi_ref) from the sampled action.
double shaped_step(double delta, double logprob_policy, double logprob_ref, double beta);

// Adaptive KL coefficient: beta <- beta * (1 + rate * clip((kl - target) / target)).
class AdaptiveKL {
 public:
  AdaptiveKL() : AdaptiveKL(RewardConfig{}) {}
  explicit AdaptiveKL(const RewardConfig& config);
  AdaptiveKL(double beta, double target, double update_rate, double clip);

  double beta() const { return beta_; }
  double target() const { return target_; }
  double update_rate() const { return update_rate_; }
  double clip() const { return clip_; }

  // observed_kl must be non-negative.
  void update(double observed_kl);

 private:
  double beta_;
  double target_;
  double update_rate_;
  double clip_;
};

AdaptiveKL kl_update(AdaptiveKL kl, double observed_kl);

}  // namespace todrl

#endif  // TODRL_REWARD_HPP_
