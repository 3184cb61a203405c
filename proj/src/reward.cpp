#include "todrl/reward.hpp"

#include <algorithm>
#include <cmath>

#include "todrl/errors.hpp"

namespace todrl {

namespace {

template <typename Set>
std::size_t intersection_size(const Set& a, const Set& b) {
  std::size_t n = 0;
  // Both sets are ordered; walk them together.
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++n;
      ++ia;
      ++ib;
    }
  }
  return n;
}

double penalty(std::size_t total, std::size_t matched, double alpha) {
  return std::exp(-alpha * static_cast<double>(total - matched) / static_cast<double>(total));
}

}  // namespace

void RewardConfig::validate() const {
  if (!(alpha_u >= 0.0) || !(alpha_g >= 0.0)) throw ConfigError("alpha_u/alpha_g must be >= 0");
  if (!(kl_beta_init > 0.0)) throw ConfigError("kl_beta_init must be > 0");
  if (!(kl_target > 0.0)) throw ConfigError("kl_target must be > 0");
  if (!(kl_clip > 0.0)) throw ConfigError("kl_clip must be > 0");
  if (!(kl_update_rate >= 0.0)) throw ConfigError("kl_update_rate must be >= 0");
}

double progressive_reward(std::size_t total, std::size_t matched, double alpha) {
  if (total == 0) return 1.0;
  return static_cast<double>(matched) * penalty(total, matched, alpha) /
         static_cast<double>(total);
}

double understanding_reward(const BeliefSet& sv_gt, const BeliefSet& sv_hat, double alpha_u) {
  return progressive_reward(sv_gt.size(), intersection_size(sv_gt, sv_hat), alpha_u);
}

double generation_reward(const RequestSet& s_gt, const RequestSet& s_hat, double alpha_g) {
  return progressive_reward(s_gt.size(), intersection_size(s_gt, s_hat), alpha_g);
}

double tod_reward(const BeliefSet& sv_gt, const BeliefSet& sv_hat, const RequestSet& s_gt,
                  const RequestSet& s_hat, const RewardConfig& config) {
  std::size_t total = sv_gt.size() + s_gt.size();
  if (total == 0) return 0.0;
  double sum = 0.0;
  if (!sv_gt.empty()) {
    std::size_t m = intersection_size(sv_gt, sv_hat);
    sum += static_cast<double>(m) * penalty(sv_gt.size(), m, config.alpha_u);
  }
  if (!s_gt.empty()) {
    std::size_t m = intersection_size(s_gt, s_hat);
    sum += static_cast<double>(m) * penalty(s_gt.size(), m, config.alpha_g);
  }
  return sum / static_cast<double>(total);
}

RewardTracker::RewardTracker(TurnGoal goal, RewardConfig config, std::string default_domain)
    : goal_(std::move(goal)), config_(config), extractor_(std::move(default_domain)) {
  recompute();
}

void RewardTracker::recompute() {
  cum_u_ = understanding_reward(goal_.sv_gt, extractor_.sv_hat(), config_.alpha_u);
  cum_g_ = generation_reward(goal_.s_gt, extractor_.s_hat(), config_.alpha_g);
  cum_tod_ = tod_reward(goal_.sv_gt, extractor_.sv_hat(), goal_.s_gt, extractor_.s_hat(), config_);
}

double RewardTracker::step(std::string_view token, const DialogueSchema& schema) {
  double prev_u = cum_u_;
  double prev_g = cum_g_;
  double prev_tod = cum_tod_;
  Completion completed = extractor_.advance(token, schema);
  if (!completed.empty()) recompute();
  last_delta_u_ = cum_u_ - prev_u;
  last_delta_g_ = cum_g_ - prev_g;
  double delta = cum_tod_ - prev_tod;
  trace_.push_back({std::string(token), delta, cum_u_, cum_g_, cum_tod_, extractor_.region()});
  return delta;
}

double shaped_step(double delta, double logprob_policy, double logprob_ref, double beta) {
  return delta - beta * (logprob_policy - logprob_ref);
}

AdaptiveKL::AdaptiveKL(const RewardConfig& config)
    : AdaptiveKL(config.kl_beta_init, config.kl_target, config.kl_update_rate, config.kl_clip) {}

AdaptiveKL::AdaptiveKL(double beta, double target, double update_rate, double clip)
    : beta_(beta), target_(target), update_rate_(update_rate), clip_(clip) {
  if (!(beta_ >= 0.0) || !(target_ > 0.0) || !(clip_ > 0.0) || !(update_rate_ >= 0.0) ||
      update_rate_ * clip_ >= 1.0) {
    throw ConfigError("adaptive KL: invalid controller parameters");
  }
}

void AdaptiveKL::update(double observed_kl) {
  if (!(observed_kl >= 0.0)) throw ConfigError("adaptive KL: observed KL must be >= 0");
  double error = std::clamp((observed_kl - target_) / target_, -clip_, clip_);
  beta_ *= 1.0 + update_rate_ * error;
}

AdaptiveKL kl_update(AdaptiveKL kl, double observed_kl) {
  kl.update(observed_kl);
  return kl;
}

}  // namespace todrl
