#include "todrl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "todrl/errors.hpp"
#include "todrl/linearizer.hpp"

namespace todrl {

using nlohmann::json;

std::string_view reward_mode_name(RewardMode mode) {
  switch (mode) {
    case RewardMode::kFull: return "full";
    case RewardMode::kUnderstandingOnly: return "understanding_only";
    case RewardMode::kGenerationOnly: return "generation_only";
    case RewardMode::kSparseTerminal: return "sparse_terminal";
  }
  return "full";
}

RewardMode parse_reward_mode(std::string_view name) {
  if (name == "full") return RewardMode::kFull;
  // Dropping R_g leaves understanding only, and the reverse.
  if (name == "understanding_only" || name == "no-rg") return RewardMode::kUnderstandingOnly;
  if (name == "generation_only" || name == "no-ru") return RewardMode::kGenerationOnly;
  if (name == "sparse_terminal" || name == "sparse") return RewardMode::kSparseTerminal;
  throw ConfigError("unknown reward mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (ppo_epochs == 0) throw ConfigError("ppo_epochs must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and non-negative");
  }
  if (!(value_learning_rate >= 0.0) || !std::isfinite(value_learning_rate)) {
    throw ConfigError("value_learning_rate must be finite and non-negative");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(clip_epsilon > 0.0)) throw ConfigError("clip_epsilon must be positive");
  if (!(nlpo_top_p > 0.0 && nlpo_top_p <= 1.0)) throw ConfigError("nlpo_top_p must lie in (0, 1]");
  if (mask_refresh == 0) throw ConfigError("mask_refresh must be positive");
  if (max_length == 0) throw ConfigError("max_length must be positive");
  reward.validate();
  sampling.validate();
  eval_decode.sampling.validate();
}

namespace {

json sampling_to_json(const SamplingConfig& s) {
  return {{"top_k", s.top_k}, {"top_p", s.top_p}, {"temperature", s.temperature}};
}

SamplingConfig sampling_from_json(const json& j, SamplingConfig s) {
  for (const auto& [k, v] : j.items()) {
    if (k == "top_k") s.top_k = v.get<int>();
    else if (k == "top_p") s.top_p = v.get<double>();
    else if (k == "temperature") s.temperature = v.get<double>();
    else if (k != "mode") throw ConfigError("unknown sampling key '" + k + "'");
  }
  return s;
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "episodes") c.episodes = v.get<std::size_t>();
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "ppo_epochs") c.ppo_epochs = v.get<std::size_t>();
      else if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "value_learning_rate") c.value_learning_rate = v.get<double>();
      else if (k == "gamma") c.gamma = v.get<double>();
      else if (k == "clip_epsilon") c.clip_epsilon = v.get<double>();
      else if (k == "nlpo") c.nlpo = v.get<bool>();
      else if (k == "whiten_advantages") c.whiten_advantages = v.get<bool>();
      else if (k == "nlpo_top_p") c.nlpo_top_p = v.get<double>();
      else if (k == "mask_refresh") c.mask_refresh = v.get<std::size_t>();
      else if (k == "reward_mode") c.reward_mode = parse_reward_mode(v.get<std::string>());
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "max_length") c.max_length = v.get<std::size_t>();
      else if (k == "eval_every") c.eval_every = v.get<std::size_t>();
      else if (k == "eval_dialogues") c.eval_dialogues = v.get<std::size_t>();
      else if (k == "sampling") c.sampling = sampling_from_json(v, c.sampling);
      else if (k == "eval_decode") {
        std::string mode = v.value("mode", "greedy");
        if (mode == "greedy") c.eval_decode.mode = DecodeMode::kGreedy;
        else if (mode == "sample") c.eval_decode.mode = DecodeMode::kSample;
        else throw ConfigError("unknown eval decode mode '" + mode + "'");
        c.eval_decode.sampling = sampling_from_json(v, c.eval_decode.sampling);
      } else if (k == "reward") {
        for (const auto& [rk, rv] : v.items()) {
          if (rk == "alpha_u") c.reward.alpha_u = rv.get<double>();
          else if (rk == "alpha_g") c.reward.alpha_g = rv.get<double>();
          else if (rk == "kl_beta_init") c.reward.kl_beta_init = rv.get<double>();
          else if (rk == "kl_target") c.reward.kl_target = rv.get<double>();
          else if (rk == "kl_update_rate") c.reward.kl_update_rate = rv.get<double>();
          else if (rk == "kl_clip") c.reward.kl_clip = rv.get<double>();
          else throw ConfigError("unknown reward key '" + rk + "'");
        }
      } else {
        throw ConfigError("unknown train config key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  json decode = sampling_to_json(c.eval_decode.sampling);
  decode["mode"] = c.eval_decode.mode == DecodeMode::kGreedy ? "greedy" : "sample";
  return {{"episodes", c.episodes},
          {"batch_size", c.batch_size},
          {"ppo_epochs", c.ppo_epochs},
          {"learning_rate", c.learning_rate},
          {"value_learning_rate", c.value_learning_rate},
          {"gamma", c.gamma},
          {"clip_epsilon", c.clip_epsilon},
          {"whiten_advantages", c.whiten_advantages},
          {"nlpo", c.nlpo},
          {"nlpo_top_p", c.nlpo_top_p},
          {"mask_refresh", c.mask_refresh},
          {"reward_mode", reward_mode_name(c.reward_mode)},
          {"seed", c.seed},
          {"max_length", c.max_length},
          {"eval_every", c.eval_every},
          {"eval_dialogues", c.eval_dialogues},
          {"sampling", sampling_to_json(c.sampling)},
          {"eval_decode", decode},
          {"reward",
           {{"alpha_u", c.reward.alpha_u},
            {"alpha_g", c.reward.alpha_g},
            {"kl_beta_init", c.reward.kl_beta_init},
            {"kl_target", c.reward.kl_target},
            {"kl_update_rate", c.reward.kl_update_rate},
            {"kl_clip", c.reward.kl_clip}}}};
}

// ---------------------------------------------------------------------------
// Rewards and returns

std::size_t RolloutBatch::tokens() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.size();
  return n;
}

std::vector<double> task_rewards(const RewardTrace& trace, const TurnGoal& goal, RewardMode mode) {
  std::vector<double> out(trace.size(), 0.0);
  if (trace.empty()) return out;
  const double n_u = static_cast<double>(goal.sv_gt.size());
  const double n_g = static_cast<double>(goal.s_gt.size());
  const double total = n_u + n_g;
  switch (mode) {
    case RewardMode::kFull:
      for (std::size_t i = 0; i < trace.size(); ++i) out[i] = trace[i].delta_tod;
      break;
    case RewardMode::kSparseTerminal:
      out.back() = trace.back().cum_tod;
      break;
    case RewardMode::kUnderstandingOnly:
    case RewardMode::kGenerationOnly: {
      // R_tod = (|SV| R_u + |S| R_g) / (|SV| + |S|), so each component owns
      // its weighted share of every delta.
      if (total == 0.0) break;
      bool understanding = mode == RewardMode::kUnderstandingOnly;
      double weight = (understanding ? n_u : n_g) / total;
      if (weight == 0.0) break;
      double prev = 0.0;
      for (std::size_t i = 0; i < trace.size(); ++i) {
        double cum = understanding ? trace[i].cum_u : trace[i].cum_g;
        out[i] = weight * (cum - prev);
        prev = cum;
      }
      break;
    }
  }
  return out;
}

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
  std::vector<double> out(rewards.size(), 0.0);
  double g = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    g = rewards[i] + gamma * g;
    out[i] = g;
  }
  return out;
}

std::vector<TokenId> nucleus_set(std::span<const double> probs, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("nucleus p must lie in (0, 1]");
  std::vector<TokenId> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
  });
  if (p >= 1.0) {
    std::sort(order.begin(), order.end());
    return order;
  }
  double cumulative = 0.0;
  std::size_t keep = order.size();
  for (std::size_t r = 0; r < order.size(); ++r) {
    cumulative += probs[static_cast<std::size_t>(order[r])];
    if (cumulative >= p) {
      keep = r + 1;
      break;
    }
  }
  order.resize(std::max<std::size_t>(keep, 1));
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// Rollouts

void finish_episode(EpisodeRollout& episode, const PolicySnapshot& policy, double gamma) {
  episode.returns = discounted_returns(episode.rewards, gamma);
  episode.values.resize(episode.size());
  episode.advantages.resize(episode.size());
  for (std::size_t t = 0; t < episode.size(); ++t) {
    episode.values[t] = value_from_features(policy, episode.state_features[t]);
    episode.advantages[t] = episode.returns[t] - episode.values[t];
  }
}

EpisodeRollout run_episode(const PolicySnapshot& policy, const PolicySnapshot& reference,
                           const PolicySnapshot* masked, const RolloutEnv& env,
                           const Dialogue& dialogue, std::size_t turn, const TrainConfig& config,
                           double beta, Rng& rng, const std::vector<std::string>* forced) {
  const FeatureModel& model = *env.model;
  const Vocabulary& vocab = model.vocab();
  EpisodeState state = reset_episode(dialogue, turn, *env.schema, config.max_length);
  FeatureContext ctx(model, state);
  RewardTracker tracker(state.goal, config.reward, state.domain);

  EpisodeRollout ep;
  ep.dialogue_id = dialogue.id;
  ep.turn = turn;
  while (!state.done) {
    if (forced != nullptr && ep.size() >= forced->size()) break;
    const auto& features = ctx.candidate_features();
    ep.candidate_features.push_back(features);
    ep.state_features.push_back(ctx.state_features());
    std::vector<double> scores = scores_from_features(policy, features);
    const std::vector<TokenId>* mask = nullptr;
    if (masked != nullptr) {
      ep.masks.push_back(nucleus_set(softmax(scores_from_features(*masked, features)),
                                     config.nlpo_top_p));
      mask = &ep.masks.back();
    }
    std::vector<double> probs = softmax(scores, mask);
    TokenId action;
    if (forced != nullptr) {
      action = vocab.id((*forced)[ep.size()]);
      if (action == kNoToken) {
        throw ValidationError("forced token '" + (*forced)[ep.size()] + "' is not in the vocabulary");
      }
    } else {
      action = sample_from_scores(scores, config.sampling, rng, mask).token;
    }
    auto a = static_cast<std::size_t>(action);
    std::vector<double> ref_probs = softmax(scores_from_features(reference, features));
    ep.actions.push_back(action);
    ep.logprobs.push_back(std::log(probs[a]));
    ep.ref_logprobs.push_back(std::log(ref_probs[a]));
    tracker.step(vocab.token(action), *env.schema);
    ctx.push(action);
    state = env_step(std::move(state), vocab.token(action)).state;
  }

  ep.trace = tracker.trace();
  ep.task_rewards = task_rewards(ep.trace, tracker.goal(), config.reward_mode);
  ep.rewards.resize(ep.size());
  for (std::size_t t = 0; t < ep.size(); ++t) {
    ep.rewards[t] = shaped_step(ep.task_rewards[t], ep.logprobs[t], ep.ref_logprobs[t], beta);
  }
  finish_episode(ep, policy, config.gamma);
  return ep;
}

RolloutBatch collect_rollouts(const PolicySnapshot& policy, const PolicySnapshot& reference,
                              const PolicySnapshot* masked, const RolloutEnv& env,
                              std::size_t n_episodes, const TrainConfig& config, double beta,
                              Rng& rng) {
  if (policy.vocab->tokens() != reference.vocab->tokens()) {
    throw ValidationError("policy and reference use different vocabularies");
  }
  const auto& dialogues = *env.dialogues;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& d : dialogues) {
    offsets.push_back(total);
    total += d.turns.size();
  }
  if (total == 0) throw ConfigError("rollout corpus has no turns");

  RolloutBatch batch;
  double kl_sum = 0.0;
  double return_sum = 0.0;
  for (std::size_t i = 0; i < n_episodes; ++i) {
    std::size_t flat = rng.index(total);
    auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
    std::size_t d = static_cast<std::size_t>(it - offsets.begin()) - 1;
    EpisodeRollout ep = run_episode(policy, reference, masked, env, dialogues[d], flat - offsets[d],
                                    config, beta, rng);
    for (std::size_t t = 0; t < ep.size(); ++t) kl_sum += ep.logprobs[t] - ep.ref_logprobs[t];
    return_sum += std::accumulate(ep.task_rewards.begin(), ep.task_rewards.end(), 0.0);
    batch.episodes.push_back(std::move(ep));
  }
  std::size_t tokens = batch.tokens();
  batch.mean_kl = tokens == 0 ? 0.0 : kl_sum / static_cast<double>(tokens);
  batch.mean_task_return = n_episodes == 0 ? 0.0 : return_sum / static_cast<double>(n_episodes);
  return batch;
}

void whiten_advantages(RolloutBatch& batch) {
  std::size_t n = batch.tokens();
  if (n == 0) return;
  double mean = 0.0;
  for (const auto& ep : batch.episodes) {
    for (double a : ep.advantages) mean += a;
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const auto& ep : batch.episodes) {
    for (double a : ep.advantages) var += (a - mean) * (a - mean);
  }
  double sd = std::sqrt(var / static_cast<double>(n));
  double scale = sd > 1e-8 ? 1.0 / sd : 1.0;
  for (auto& ep : batch.episodes) {
    for (double& a : ep.advantages) a = (a - mean) * scale;
  }
}

// ---------------------------------------------------------------------------
// PPO

namespace {

struct StepView {
  double logprob;
  std::vector<double> probs;
};

StepView rescore(const PolicySnapshot& policy, const EpisodeRollout& ep, std::size_t t) {
  const std::vector<TokenId>* mask = ep.masks.empty() ? nullptr : &ep.masks[t];
  std::vector<double> probs = softmax(scores_from_features(policy, ep.candidate_features[t]), mask);
  double lp = std::log(probs[static_cast<std::size_t>(ep.actions[t])]);
  return {lp, std::move(probs)};
}

bool clip_active(double ratio, double advantage, double eps) {
  return (advantage > 0.0 && ratio > 1.0 + eps) || (advantage < 0.0 && ratio < 1.0 - eps);
}

}  // namespace

double ppo_surrogate(const PolicySnapshot& policy, const RolloutBatch& batch, double clip_epsilon) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ep : batch.episodes) {
    for (std::size_t t = 0; t < ep.size(); ++t) {
      double ratio = std::exp(rescore(policy, ep, t).logprob - ep.logprobs[t]);
      double a = ep.advantages[t];
      double clipped = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
      sum += std::min(ratio * a, clipped * a);
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

void ppo_surrogate_gradient(const PolicySnapshot& policy, const RolloutBatch& batch,
                            double clip_epsilon, SparseGradient& grad) {
  const std::size_t n = batch.tokens();
  if (n == 0) return;
  const double inv = 1.0 / static_cast<double>(n);
  for (const auto& ep : batch.episodes) {
    for (std::size_t t = 0; t < ep.size(); ++t) {
      double a = ep.advantages[t];
      if (a == 0.0) continue;
      StepView view = rescore(policy, ep, t);
      double ratio = std::exp(view.logprob - ep.logprobs[t]);
      if (clip_active(ratio, a, clip_epsilon)) continue;
      // d(rho A) = rho A d log pi
      accumulate_logprob_gradient(ep.candidate_features[t], view.probs, ep.actions[t],
                                  ratio * a * inv, grad);
    }
  }
}

UpdateStats ppo_update(PolicySnapshot& policy, const RolloutBatch& batch,
                       const TrainConfig& config) {
  if (batch.episodes.empty() || batch.tokens() == 0) throw TrainingError("ppo_update: empty batch");
  UpdateStats stats;
  SparseGradient grad(policy.policy_weights.size());
  for (std::size_t epoch = 0; epoch < config.ppo_epochs; ++epoch) {
    ppo_surrogate_gradient(policy, batch, config.clip_epsilon, grad);
    if (!grad.finite()) {
      grad.clear();
      std::ostringstream msg;
      msg << "ppo_update: non-finite gradient in epoch " << epoch << " (episodes "
          << batch.episodes.size() << ", tokens " << batch.tokens() << ", mean_kl "
          << batch.mean_kl << ")";
      throw TrainingError(msg.str());
    }
    grad.apply_and_clear(policy.policy_weights, config.learning_rate);
  }

  std::size_t clipped = 0;
  std::size_t n = 0;
  for (const auto& ep : batch.episodes) {
    for (std::size_t t = 0; t < ep.size(); ++t) {
      double ratio = std::exp(rescore(policy, ep, t).logprob - ep.logprobs[t]);
      if (clip_active(ratio, ep.advantages[t], config.clip_epsilon)) ++clipped;
      ++n;
    }
  }
  stats.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
  stats.surrogate = ppo_surrogate(policy, batch, config.clip_epsilon);

  // Value regression: plain SGD on squared error, one sweep per PPO epoch.
  for (std::size_t epoch = 0; epoch < config.ppo_epochs; ++epoch) {
    double sq = 0.0;
    for (const auto& ep : batch.episodes) {
      for (std::size_t t = 0; t < ep.size(); ++t) {
        const auto& f = ep.state_features[t];
        double err = ep.returns[t] - value_from_features(policy, f);
        sq += err * err;
        double step = config.value_learning_rate * err / static_cast<double>(f.size());
        for (std::uint32_t i : f) policy.value_weights[i] += step;
      }
    }
    if (epoch == config.ppo_epochs - 1) stats.value_loss = sq / static_cast<double>(n);
  }
  if (!std::isfinite(stats.value_loss)) throw TrainingError("ppo_update: non-finite value loss");
  ++policy.version;
  return stats;
}

// ---------------------------------------------------------------------------
// Logs and checkpoints

json LogRecord::to_json() const {
  return {{"episode", episode},
          {"inform", report.inform},
          {"success", report.success},
          {"match", report.match},
          {"succ_f1", report.succ_f1},
          {"bleu", report.bleu},
          {"combined", report.combined},
          {"beta", beta},
          {"mean_kl", mean_kl},
          {"reward_mode", reward_mode_name(reward_mode)},
          {"seed", seed}};
}

void save_checkpoint(const TrainerState& state, const std::string& path) {
  json doc = {{"format", "todrl-checkpoint"},
              {"format_version", 1},
              {"episode", state.episode},
              {"updates", state.updates},
              {"beta", state.beta},
              {"last_kl", state.last_kl},
              {"rng", state.rng_state},
              {"policy", json::parse(snapshot_to_json(state.policy))},
              {"reference", json::parse(snapshot_to_json(state.reference))},
              {"masked", state.masked ? json::parse(snapshot_to_json(*state.masked)) : json()}};
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out << doc.dump();
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint to " + path);
}

TrainerState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open checkpoint " + path);
  json doc;
  try {
    doc = json::parse(in);
    if (doc.at("format") != "todrl-checkpoint") throw ParseError("not a checkpoint: " + path);
    TrainerState s{snapshot_from_json(doc.at("policy").dump()),
                   snapshot_from_json(doc.at("reference").dump()),
                   std::nullopt,
                   doc.at("episode").get<std::size_t>(),
                   doc.at("updates").get<std::size_t>(),
                   doc.at("beta").get<double>(),
                   doc.at("last_kl").get<double>(),
                   doc.at("rng").get<std::string>()};
    if (!doc.at("masked").is_null()) s.masked = snapshot_from_json(doc.at("masked").dump());
    // Both snapshots must share one vocabulary object for rollouts.
    s.reference.vocab = s.policy.vocab;
    if (s.masked) s.masked->vocab = s.policy.vocab;
    return s;
  } catch (const json::exception& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Evaluation and the training loop

PredictionCorpus predict_corpus(const PolicySnapshot& snapshot, const FeatureModel& model,
                                const std::vector<Dialogue>& dialogues,
                                const DecodeConfig& decode, std::uint64_t seed,
                                std::size_t max_length) {
  PredictionCorpus corpus;
  corpus.reserve(dialogues.size());
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    const Dialogue& d = dialogues[i];
    Rng rng(seed * 0x9e3779b97f4a7c15ULL + i);
    DialoguePrediction p;
    p.id = d.id;
    p.goal = d.goal;
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      EpisodeState state = reset_episode(d, t, model.schema(), max_length);
      auto tokens = decode_turn(snapshot, model, state, decode, rng);
      OutputSpans spans = split_output(tokens);
      TurnOutput pred{spans.belief, spans.acts, spans.response};
      p.turns.push_back({d.turns[t].domain, std::move(pred),
                         gold_turn_output(d.turns[t], model.schema())});
    }
    corpus.push_back(std::move(p));
  }
  return corpus;
}

EvalReport evaluate_snapshot(const PolicySnapshot& snapshot, const TrainData& data,
                             const DecodeConfig& decode, std::uint64_t seed,
                             std::size_t max_dialogues, std::size_t max_length) {
  std::vector<Dialogue> subset = data.eval;
  if (max_dialogues > 0 && subset.size() > max_dialogues) subset.resize(max_dialogues);
  return evaluate(predict_corpus(snapshot, *data.model, subset, decode, seed, max_length),
                  *data.schema, *data.db);
}

TrainerState initial_state(const PolicySnapshot& sft, const TrainConfig& config) {
  TrainerState s{sft, clone_snapshot(sft), std::nullopt, 0, 0, config.reward.kl_beta_init, 0.0,
                 Rng(config.seed).state()};
  s.reference.vocab = s.policy.vocab;
  return s;
}

TrainResult train(const TrainConfig& config, const TrainData& data, TrainerState state,
                  const TrainHooks& hooks) {
  config.validate();
  if (data.schema == nullptr || data.db == nullptr || data.model == nullptr) {
    throw ConfigError("train: incomplete training data");
  }
  if (data.train.empty() || data.eval.empty()) throw ConfigError("train: empty corpus split");

  TrainResult result;
  Rng rng;
  rng.restore(state.rng_state);
  AdaptiveKL kl(state.beta, config.reward.kl_target, config.reward.kl_update_rate,
                config.reward.kl_clip);
  RolloutEnv env{data.schema, data.model, &data.train};

  auto evaluate_now = [&]() {
    LogRecord rec;
    rec.episode = state.episode;
    rec.report = evaluate_snapshot(state.policy, data, config.eval_decode,
                                   config.seed * 1000003ULL + state.episode, config.eval_dialogues,
                                   config.max_length);
    rec.beta = kl.beta();
    rec.mean_kl = state.last_kl;
    rec.reward_mode = config.reward_mode;
    rec.seed = config.seed;
    if (hooks.on_log) hooks.on_log(rec);
    result.log.push_back(std::move(rec));
  };
  auto checkpoint = [&]() {
    state.beta = kl.beta();
    state.rng_state = rng.state();
    if (!hooks.checkpoint_path.empty()) save_checkpoint(state, hooks.checkpoint_path);
  };

  if (state.episode == 0) evaluate_now();
  bool evaluated_last = true;
  while (state.episode < config.episodes) {
    std::size_t n = std::min(config.batch_size, config.episodes - state.episode);
    if (config.nlpo && (!state.masked || state.updates % config.mask_refresh == 0)) {
      state.masked = clone_snapshot(state.policy);
    }
    const PolicySnapshot* masked = config.nlpo ? &*state.masked : nullptr;
    RolloutBatch batch;
    UpdateStats stats;
    try {
      batch = collect_rollouts(state.policy, state.reference, masked, env, n, config, kl.beta(),
                               rng);
      if (config.whiten_advantages) whiten_advantages(batch);
      stats = ppo_update(state.policy, batch, config);
    } catch (const TrainingError&) {
      checkpoint();
      throw;
    }
    state.last_kl = batch.mean_kl;
    // The sampled estimate can dip below zero; the controller clips the
    // error at -clip for any kl <= target * (1 - clip) anyway.
    kl.update(std::max(0.0, batch.mean_kl));
    std::size_t before = state.episode;
    state.episode += n;
    ++state.updates;
    evaluated_last = false;
    if (config.eval_every > 0 && state.episode / config.eval_every > before / config.eval_every) {
      state.beta = kl.beta();
      evaluate_now();
      checkpoint();
      evaluated_last = true;
    }
    if (hooks.stop_after > 0 && state.episode >= hooks.stop_after) {
      checkpoint();
      result.state = std::move(state);
      return result;
    }
  }
  state.beta = kl.beta();
  if (!evaluated_last) {
    evaluate_now();
    checkpoint();
  }
  result.state = std::move(state);
  return result;
}

}  // namespace todrl
