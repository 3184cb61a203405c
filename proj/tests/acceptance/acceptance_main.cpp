// Acceptance suite: one PASS/FAIL line per criterion 1-10.
//
// Criteria 1-7 are deterministic checks. Criteria 8-10 run the RL experiments
// (4 reward modes x 5 seeds on the default toy corpus) and report honestly;
// by default only a failure in 1-7 makes the exit status non-zero, and
// --strict extends that to every criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "todrl/envgen.hpp"
#include "todrl/linearizer.hpp"
#include "todrl/metrics.hpp"
#include "todrl/policy.hpp"
#include "todrl/random.hpp"
#include "todrl/reward.hpp"
#include "todrl/schema.hpp"
#include "todrl/trainer.hpp"

using namespace todrl;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << x;
  return os.str();
}

struct Env {
  std::string data_dir;
  DialogueSchema schema;
  EntityDatabase db;
  Corpus corpus;  // default toy corpus
};

// ---------------------------------------------------------------------------
// 1. reward formulas vs a brute-force oracle

// Items are flattened to strings and matched by linear scan, so the oracle
// shares no set code with the engine.
double oracle_tod(const std::vector<std::string>& sv_gt, const std::vector<std::string>& sv_hat,
                  const std::vector<std::string>& s_gt, const std::vector<std::string>& s_hat,
                  double alpha_u, double alpha_g, double* ru, double* rg) {
  auto matched = [](const std::vector<std::string>& gt, const std::vector<std::string>& hat) {
    double m = 0;
    for (const auto& g : gt) {
      for (const auto& h : hat) {
        if (g == h) {
          m += 1;
          break;
        }
      }
    }
    return m;
  };
  double nu = static_cast<double>(sv_gt.size()), ng = static_cast<double>(s_gt.size());
  double mu = matched(sv_gt, sv_hat), mg = matched(s_gt, s_hat);
  double rho_u = nu == 0 ? 1.0 : std::exp(-alpha_u * (nu - mu) / nu);
  double rho_g = ng == 0 ? 1.0 : std::exp(-alpha_g * (ng - mg) / ng);
  *ru = nu == 0 ? 1.0 : mu * rho_u / nu;
  *rg = ng == 0 ? 1.0 : mg * rho_g / ng;
  if (nu + ng == 0) return 0.0;
  return (mu * rho_u + mg * rho_g) / (nu + ng);
}

Outcome criterion1(const Env& env) {
  auto t0 = Clock::now();
  Rng rng(101);
  std::vector<SlotValue> triples;
  std::vector<DomainSlot> requests;
  for (const auto& [d, spec] : env.schema.domains()) {
    for (const auto& [slot, values] : spec.informable) {
      for (const auto& v : values) triples.push_back({d, slot, v});
    }
    for (const auto& r : spec.requestable) requests.push_back({d, r});
  }
  double worst = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    BeliefSet sv_gt, sv_hat;
    RequestSet s_gt, s_hat;
    std::size_t k_gt = rng.index(6), k_hat = rng.index(7), r_gt = rng.index(4), r_hat = rng.index(5);
    for (std::size_t k = 0; k < k_gt; ++k) sv_gt.insert(rng.pick(triples));
    for (std::size_t k = 0; k < r_gt; ++k) s_gt.insert(rng.pick(requests));
    // predictions overlap the goal more often than chance
    for (std::size_t k = 0; k < k_hat; ++k) {
      if (!sv_gt.empty() && rng.chance(0.5)) {
        sv_hat.insert(*std::next(sv_gt.begin(), static_cast<long>(rng.index(sv_gt.size()))));
      } else {
        sv_hat.insert(rng.pick(triples));
      }
    }
    for (std::size_t k = 0; k < r_hat; ++k) {
      if (!s_gt.empty() && rng.chance(0.5)) {
        s_hat.insert(*std::next(s_gt.begin(), static_cast<long>(rng.index(s_gt.size()))));
      } else {
        s_hat.insert(rng.pick(requests));
      }
    }
    RewardConfig cfg;
    cfg.alpha_u = 0.05 + 3.0 * rng.unit();
    cfg.alpha_g = 0.05 + 3.0 * rng.unit();

    auto flat_sv = [](const BeliefSet& s) {
      std::vector<std::string> out;
      for (const auto& t : s) out.push_back(t.domain + "\x1f" + t.slot + "\x1f" + t.value);
      return out;
    };
    auto flat_s = [](const RequestSet& s) {
      std::vector<std::string> out;
      for (const auto& t : s) out.push_back(t.domain + "\x1f" + t.slot);
      return out;
    };
    double ru = 0, rg = 0;
    double tod = oracle_tod(flat_sv(sv_gt), flat_sv(sv_hat), flat_s(s_gt), flat_s(s_hat), cfg.alpha_u,
                            cfg.alpha_g, &ru, &rg);
    worst = std::max(worst, std::abs(understanding_reward(sv_gt, sv_hat, cfg.alpha_u) - ru));
    worst = std::max(worst, std::abs(generation_reward(s_gt, s_hat, cfg.alpha_g) - rg));
    worst = std::max(worst, std::abs(tod_reward(sv_gt, sv_hat, s_gt, s_hat, cfg) - tod));
  }
  double secs = seconds_since(t0);
  return {worst <= 1e-12 && secs < 5.0,
          std::to_string(n) + " pairs, max |err| " + fmt(worst) + ", " + fmt(secs, 3) + " s (limit 5 s)"};
}

// ---------------------------------------------------------------------------
// 2. streaming deltas vs batch reward

std::vector<std::string> token_pool(const DialogueSchema& schema) {
  std::vector<std::string> pool{"<sos_b>", "<eos_b>", "<sos_a>", "<eos_a>", "<sos_r>", "<eos_r>",
                                "[offer]", "[inform]", "[request]", "the", "is", ".", "?",
                                "[spaceship]", "colour", "[value_colour]", "[value_name]"};
  for (const auto& [d, spec] : schema.domains()) {
    pool.push_back("[" + d + "]");
    for (const auto& [slot, values] : spec.informable) {
      pool.push_back(slot);
      for (const auto& v : values) pool.push_back(v);
    }
    for (const auto& r : spec.requestable) pool.push_back(make_placeholder(r));
  }
  return pool;
}

// Region markers in canonical order with nothing between the regions.
bool canonical_markers(const std::vector<std::string>& stream) {
  static const std::vector<std::string> order{"<sos_b>", "<eos_b>", "<sos_a>",
                                              "<eos_a>", "<sos_r>", "<eos_r>"};
  std::vector<std::string> seen;
  bool open = false;
  for (const auto& t : stream) {
    if (is_marker(t)) {
      seen.push_back(t);
      open = t.rfind("<sos_", 0) == 0;
    } else if (!open) {
      return false;
    }
  }
  return seen == order;
}

Outcome criterion2(const Env& env) {
  auto t0 = Clock::now();
  Rng rng(202);
  std::vector<const GoldTurn*> turns;
  for (const auto& d : env.corpus.train) {
    for (const auto& t : d.turns) turns.push_back(&t);
  }
  const auto pool = token_pool(env.schema);
  double worst_sum = 0.0, worst_batch = 0.0;
  std::size_t malformed = 0, canonical = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const GoldTurn& turn = *rng.pick(turns);
    TurnGoal goal = gold_turn_goal(turn, env.schema);
    std::vector<std::string> stream = gold_output(turn, env.schema);
    switch (i % 4) {
      case 0:  // light token noise
        for (auto& t : stream) {
          if (rng.chance(0.1)) t = rng.pick(pool);
        }
        break;
      case 1:  // insertions and deletions
        for (int k = 0; k < 4; ++k) {
          std::size_t at = rng.index(stream.size() + 1);
          if (rng.chance(0.5) && !stream.empty() && at < stream.size()) {
            stream.erase(stream.begin() + static_cast<long>(at));
          } else {
            stream.insert(stream.begin() + static_cast<long>(at), rng.pick(pool));
          }
        }
        break;
      case 2:  // truncation
        stream.resize(rng.index(stream.size() + 1));
        break;
      default:  // unstructured
        stream.clear();
        for (std::size_t k = 1 + rng.index(40); k > 0; --k) stream.push_back(rng.pick(pool));
        break;
    }
    RewardConfig cfg;
    cfg.alpha_u = 0.5 + rng.unit();
    cfg.alpha_g = 0.5 + rng.unit();
    RewardTracker tracker(goal, cfg, turn.domain);
    double sum = 0.0;
    for (const auto& t : stream) sum += tracker.step(t, env.schema);
    const ExtractorState& ex = tracker.extractor();
    malformed += ex.malformed() ? 1 : 0;
    double batch = tod_reward(goal.sv_gt, ex.sv_hat(), goal.s_gt, ex.s_hat(), cfg);
    worst_sum = std::max(worst_sum, std::abs(sum - batch));

    // Where the region markers are intact, the offline parser gives a second
    // batch path that never touches the incremental extractor.
    if (!stream.empty() && canonical_markers(stream)) {
      ++canonical;
      OutputSpans spans = split_output(stream);
      BeliefParse parsed = parse_belief(spans.belief, env.schema);
      // a malformed belief freezes the rest of the turn
      RequestSet s_hat = parsed.malformed
                             ? RequestSet{}
                             : collect_placeholders(spans.acts, spans.response, turn.domain, env.schema);
      double offline = tod_reward(goal.sv_gt, parsed.triples, goal.s_gt, s_hat, cfg);
      worst_batch = std::max(worst_batch, std::abs(sum - offline));
    }
  }
  double secs = seconds_since(t0);
  bool ok = worst_sum <= 1e-9 && worst_batch <= 1e-9 && malformed > 0 && secs < 10.0;
  return {ok, std::to_string(n) + " streams (" + std::to_string(malformed) + " malformed, " +
                  std::to_string(canonical) + " also parsed offline), max |sum - batch| " +
                  fmt(worst_sum) + ", max |sum - offline| " + fmt(worst_batch) + ", " + fmt(secs, 3) +
                  " s (limit 10 s)"};
}

// ---------------------------------------------------------------------------
// 3. plateau structure of the per-token trace on gold turns

Outcome criterion3(const Env& env) {
  std::size_t turns = 0, steps = 0, multi_step = 0, violations = 0;
  std::string first_violation;
  for (const auto* split : {&env.corpus.dev, &env.corpus.test}) {
    for (const auto& d : *split) {
      for (std::size_t ti = 0; ti < d.turns.size(); ++ti) {
        const GoldTurn& turn = d.turns[ti];
        TurnGoal goal = gold_turn_goal(turn, env.schema);
        if (goal.sv_gt.empty() && goal.s_gt.empty()) continue;
        ++turns;
        RewardTracker tracker(goal, {}, turn.domain);
        ExtractorState shadow(turn.domain);
        BeliefSet got_sv;
        RequestSet got_s;
        double prev = 0.0;
        std::size_t turn_steps = 0;
        for (const auto& tok : gold_output(turn, env.schema)) {
          double delta = tracker.step(tok, env.schema);
          FeedResult fr = feed(shadow, tok, env.schema);
          shadow = fr.state;
          bool completes_goal_item = false;
          for (const auto& t : fr.completed.triples) {
            if (goal.sv_gt.count(t) && got_sv.insert(t).second) completes_goal_item = true;
          }
          for (const auto& r : fr.completed.requests) {
            if (goal.s_gt.count(r) && got_s.insert(r).second) completes_goal_item = true;
          }
          double cum = tracker.cum_tod();
          bool bad = cum < prev || (completes_goal_item != (delta != 0.0)) || (delta != 0.0 && delta <= 0.0);
          if (bad) {
            if (violations == 0) {
              first_violation = d.id + " turn " + std::to_string(ti) + " token '" + tok + "'";
            }
            ++violations;
          }
          if (delta != 0.0) ++turn_steps;
          prev = cum;
        }
        steps += turn_steps;
        multi_step += turn_steps >= 2 ? 1 : 0;
      }
    }
  }
  bool ok = violations == 0 && turns > 0 && multi_step > 0;
  std::string detail = std::to_string(turns) + " gold turns, " + std::to_string(steps) +
                       " reward steps, " + std::to_string(multi_step) + " turns with >= 2 plateaus, " +
                       std::to_string(violations) + " violations";
  if (violations > 0) detail += " (first: " + first_violation + ")";
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 4. gold-vs-gold evaluation

Outcome criterion4(const Env& env, const GenConfig& base) {
  std::size_t checked = 0;
  std::string failure;
  auto check = [&](const std::vector<Dialogue>& split, const std::string& label) {
    EvalReport r = evaluate(gold_predictions(split, env.schema), env.schema, env.db);
    ++checked;
    if (!(r.inform == 100.0 && r.success == 100.0 && r.match == 100.0 && r.succ_f1 == 1.0 &&
          r.bleu == 100.0 && r.combined == 200.0) &&
        failure.empty()) {
      failure = label + ": " + r.to_json().dump();
    }
  };
  check(env.corpus.train, "default/train");
  check(env.corpus.dev, "default/dev");
  check(env.corpus.test, "default/test");
  for (std::uint64_t seed : {2u, 3u, 4u, 5u}) {
    GenConfig g = base;
    g.seed = seed;
    g.dialogues = 200;
    Corpus c = generate_corpus(g, env.schema, env.db);
    std::vector<Dialogue> all = c.train;
    all.insert(all.end(), c.dev.begin(), c.dev.end());
    all.insert(all.end(), c.test.begin(), c.test.end());
    check(all, "seed " + std::to_string(seed));
  }
  // an in-car style schema: no dialogue acts, Match/SuccF1 combined score
  DialogueSchema in_car(env.schema.domains(), false);
  GenConfig g = base;
  g.seed = 9;
  g.dialogues = 100;
  Corpus c = generate_corpus(g, in_car, env.db);
  check(c.train, "in-car");
  return {failure.empty(), std::to_string(checked) + " corpora/splits exact" +
                               (failure.empty() ? "" : ", mismatch " + failure)};
}

// ---------------------------------------------------------------------------
// 5. published Combined arithmetic

Outcome criterion5() {
  double woz = combined_score(96.1, 92.4, 0.0, 0.0, 17.2, EvalMode::kMultiWoz);
  double car = combined_score(0.0, 0.0, 86.2, 0.861, 23.0, EvalMode::kInCar);
  // hand arithmetic: (96.1 + 92.4) / 2 + 17.2 and (86.2 + 86.1) / 2 + 23.0
  bool ok = std::abs(woz - 111.45) < 1e-9 && std::abs(car - 109.15) < 1e-9 &&
            std::abs(woz - 111.5) <= 0.05 + 1e-9 && std::abs(car - 109.2) <= 0.05 + 1e-9;
  return {ok, "MultiWOZ row " + fmt(woz, 8) + " (table 111.5), In-Car row " + fmt(car, 8) +
                  " (table 109.2)"};
}

// ---------------------------------------------------------------------------
// 6. gradient checks

double max_rel_error(std::vector<double>& weights, const SparseGradient& g, std::size_t top,
                     const std::function<double()>& objective) {
  std::vector<std::uint32_t> idx = g.touched();
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return std::abs(g.at(a)) > std::abs(g.at(b)); });
  idx.resize(std::min(idx.size(), top));
  if (idx.empty()) return std::numeric_limits<double>::infinity();
  const double h = 1e-5;
  double worst = 0.0;
  for (auto i : idx) {
    double saved = weights[i];
    weights[i] = saved + h;
    double up = objective();
    weights[i] = saved - h;
    double down = objective();
    weights[i] = saved;
    double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(numeric - g.at(i)) / std::max(std::abs(numeric), std::abs(g.at(i))));
  }
  return worst;
}

Outcome criterion6(const Env& env, const GenConfig& base) {
  GenConfig g = base;
  g.seed = 21;
  g.dialogues = 30;
  Corpus small = generate_corpus(g, env.schema, env.db);
  auto vocab = std::make_shared<Vocabulary>(Vocabulary::build(small.train, env.schema));
  FeatureModel model(vocab, env.schema);
  auto examples = sft_examples(small.train, env.schema);
  SftConfig warm_cfg;
  warm_cfg.epochs = 1;
  warm_cfg.learning_rate = 0.3;
  PolicySnapshot w = sft_train(examples, model, PolicySnapshot::zeros(vocab), warm_cfg).snapshot;

  double sft_err = 0.0;
  std::size_t sft_cases = 0;
  for (std::size_t e = 0; e < examples.size() && sft_cases < 5; e += 3, ++sft_cases) {
    SftExample ex = examples[e];
    ex.target.resize(std::min<std::size_t>(ex.target.size(), 8));
    SparseGradient grad(w.policy_weights.size());
    example_nll(w, model, ex, &grad);
    // grad is the ascent direction of the log-likelihood, i.e. of -nll
    sft_err = std::max(sft_err, max_rel_error(w.policy_weights, grad, 20,
                                              [&] { return -example_nll(w, model, ex); }));
  }

  // rollouts need a policy that earns some reward, or every advantage is zero
  SftConfig ppo_cfg;
  ppo_cfg.epochs = 3;
  PolicySnapshot behavior = sft_train(examples, model, PolicySnapshot::zeros(vocab), ppo_cfg).snapshot;
  TrainConfig c;
  RolloutEnv renv{&env.schema, &model, &small.train};
  double ppo_err = 0.0;
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    Rng rng(seed);
    RolloutBatch b = collect_rollouts(behavior, behavior, nullptr, renv, 8, c, 0.01, rng);
    whiten_advantages(b);
    PolicySnapshot p = behavior;
    Rng noise(seed + 100);
    for (const auto& ep : b.episodes) {
      for (const auto& feats : ep.candidate_features) {
        for (auto i : feats) p.policy_weights[i] += 0.02 * (noise.unit() - 0.5);
      }
    }
    SparseGradient grad(p.policy_weights.size());
    ppo_surrogate_gradient(p, b, c.clip_epsilon, grad);
    ppo_err = std::max(ppo_err, max_rel_error(p.policy_weights, grad, 30,
                                              [&] { return ppo_surrogate(p, b, c.clip_epsilon); }));
  }
  return {sft_err < 1e-4 && ppo_err < 1e-4,
          "max relative error SFT " + fmt(sft_err) + " (" + std::to_string(sft_cases) +
              " examples), PPO surrogate " + fmt(ppo_err) + " (3 batches), limit 1e-4"};
}

// ---------------------------------------------------------------------------
// 7. adaptive KL controller

Outcome criterion7() {
  RewardConfig defaults;
  double lo = 1.0, hi = 1.0;
  for (double factor : {0.0, 1e-3, 0.1, 0.5, 0.8, 0.9, 1.0, 1.1, 1.2, 1.5, 2.0, 10.0, 1e3}) {
    AdaptiveKL kl(defaults);
    kl.update(factor * defaults.kl_target);
    double ratio = kl.beta() / defaults.kl_beta_init;
    lo = std::min(lo, ratio);
    hi = std::max(hi, ratio);
  }
  bool step_ok = lo >= 0.96 - 1e-12 && hi <= 1.04 + 1e-12 && defaults.kl_beta_init == 0.01;

  // Synthetic plant: the true KL is inversely proportional to beta with a
  // slowly drifting scale; the controller sees a noisy estimate of it.
  std::size_t scenarios = 0, converged = 0, worst_at = 0;
  for (double start : {5.0, 2.0, 0.5, 0.2}) {
    for (double drift : {0.0, 1e-3, -1e-3}) {
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ++scenarios;
        Rng rng(seed * 977 + static_cast<std::uint64_t>(start * 10));
        AdaptiveKL kl(defaults);
        double scale = start * defaults.kl_target * kl.beta();
        std::size_t entered = 0;
        bool inside = false, left_after_200 = false;
        for (std::size_t u = 1; u <= 400; ++u) {
          double true_kl = scale / kl.beta();
          // Box-Muller, sigma 0.1 lognormal noise
          double z = std::sqrt(-2.0 * std::log(1.0 - rng.unit())) * std::cos(2.0 * M_PI * rng.unit());
          kl.update(true_kl * std::exp(0.1 * z - 0.005));
          scale *= 1.0 + drift;
          double err = std::abs(scale / kl.beta() - defaults.kl_target) / defaults.kl_target;
          if (err <= 0.2) {
            if (!inside) entered = u;
            inside = true;
          } else {
            inside = false;
            if (u > 200) left_after_200 = true;
          }
        }
        if (inside && entered <= 200 && !left_after_200) {
          ++converged;
          worst_at = std::max(worst_at, entered);
        }
      }
    }
  }
  bool ok = step_ok && converged == scenarios;
  return {ok, "single-step ratio in [" + fmt(lo, 6) + ", " + fmt(hi, 6) + "]; drift simulation " +
                  std::to_string(converged) + "/" + std::to_string(scenarios) +
                  " scenarios within 20% of target by update " + std::to_string(worst_at) +
                  " and stayed there to update 400"};
}

// ---------------------------------------------------------------------------
// 8-10. RL experiments

constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();
constexpr double kSuccessThreshold = 90.0;  // dev Success, fixed before the runs

struct RunResult {
  RewardMode mode = RewardMode::kFull;
  std::uint64_t seed = 0;
  double test_combined = 0.0;
  double test_success = 0.0;
  std::size_t episodes_to_threshold = kNever;
  double seconds = 0.0;
};

struct Experiments {
  double sft_test_combined = 0.0;
  double sft_test_success = 0.0;
  double sft_seconds = 0.0;
  std::vector<RunResult> runs;

  std::vector<const RunResult*> of(RewardMode mode) const {
    std::vector<const RunResult*> out;
    for (const auto& r : runs) {
      if (r.mode == mode) out.push_back(&r);
    }
    return out;
  }
  double mean_combined(RewardMode mode) const {
    double s = 0;
    auto rs = of(mode);
    for (const auto* r : rs) s += r->test_combined;
    return rs.empty() ? 0.0 : s / static_cast<double>(rs.size());
  }
};

std::string episodes_str(std::size_t e) { return e == kNever ? "never" : std::to_string(e); }

Experiments run_experiments(const Env& env, const TrainConfig& base, std::size_t n_seeds) {
  Experiments ex;
  auto t0 = Clock::now();
  auto vocab = std::make_shared<Vocabulary>(Vocabulary::build(env.corpus.train, env.schema));
  FeatureModel model(vocab, env.schema);
  SftConfig sft_cfg;  // 8 epochs, lr 0.5, seed 1
  PolicySnapshot sft =
      sft_train(sft_examples(env.corpus.train, env.schema), model, PolicySnapshot::zeros(vocab), sft_cfg)
          .snapshot;
  TrainData dev_data{&env.schema, &env.db, &model, env.corpus.train, env.corpus.dev};
  TrainData test_data{&env.schema, &env.db, &model, env.corpus.train, env.corpus.test};
  EvalReport sft_test = evaluate_snapshot(sft, test_data, base.eval_decode, 1, 0, base.max_length);
  ex.sft_test_combined = sft_test.combined;
  ex.sft_test_success = sft_test.success;
  ex.sft_seconds = seconds_since(t0);
  std::cout << "  SFT: test Combined " << fmt(sft_test.combined) << ", test Success "
            << fmt(sft_test.success) << ", " << fmt(ex.sft_seconds, 3) << " s\n"
            << std::flush;

  for (RewardMode mode : {RewardMode::kFull, RewardMode::kSparseTerminal, RewardMode::kGenerationOnly,
                          RewardMode::kUnderstandingOnly}) {
    for (std::uint64_t seed = 1; seed <= n_seeds; ++seed) {
      auto r0 = Clock::now();
      TrainConfig cfg = base;
      cfg.reward_mode = mode;
      cfg.seed = seed;
      TrainResult result = train(cfg, dev_data, initial_state(sft, cfg));
      RunResult run;
      run.mode = mode;
      run.seed = seed;
      for (const auto& rec : result.log) {
        if (rec.report.success >= kSuccessThreshold) {
          run.episodes_to_threshold = rec.episode;
          break;
        }
      }
      EvalReport test = evaluate_snapshot(result.state.policy, test_data, cfg.eval_decode, seed, 0,
                                          cfg.max_length);
      run.test_combined = test.combined;
      run.test_success = test.success;
      run.seconds = seconds_since(r0);
      std::cout << "  run " << reward_mode_name(mode) << " seed " << seed << ": test Combined "
                << fmt(run.test_combined) << ", test Success " << fmt(run.test_success)
                << ", dev Success >= " << kSuccessThreshold << " at episode "
                << episodes_str(run.episodes_to_threshold) << ", " << fmt(run.seconds, 3) << " s\n"
                << std::flush;
      ex.runs.push_back(run);
    }
  }
  return ex;
}

Outcome criterion8(const Experiments& ex) {
  auto full = ex.of(RewardMode::kFull);
  double gain = ex.mean_combined(RewardMode::kFull) - ex.sft_test_combined;
  double secs = ex.sft_seconds;
  for (const auto* r : full) secs += r->seconds;
  bool ok = gain >= 5.0 && secs < 600.0;
  return {ok, "mean test Combined " + fmt(ex.mean_combined(RewardMode::kFull)) + " vs SFT " +
                  fmt(ex.sft_test_combined) + ", gain " + fmt(gain) + " (need >= 5) over " +
                  std::to_string(full.size()) + " seeds; SFT + full-mode runs " + fmt(secs, 3) +
                  " s (limit 600 s)"};
}

Outcome criterion9(const Experiments& ex) {
  auto dense = ex.of(RewardMode::kFull);
  auto sparse = ex.of(RewardMode::kSparseTerminal);
  std::size_t wins = 0;
  std::string pairs;
  for (std::size_t i = 0; i < dense.size() && i < sparse.size(); ++i) {
    std::size_t a = dense[i]->episodes_to_threshold, b = sparse[i]->episodes_to_threshold;
    if (a < b) ++wins;  // strict; never-reached counts as infinity
    pairs += (i ? ", " : "") + episodes_str(a) + " vs " + episodes_str(b);
  }
  return {wins >= 4, "dense faster in " + std::to_string(wins) + "/" + std::to_string(dense.size()) +
                         " seed pairs (need >= 4); episodes to dev Success >= " +
                         fmt(kSuccessThreshold) + " dense vs sparse: " + pairs};
}

Outcome criterion10(const Experiments& ex) {
  double full = ex.mean_combined(RewardMode::kFull);
  double no_ru = ex.mean_combined(RewardMode::kGenerationOnly);
  double no_rg = ex.mean_combined(RewardMode::kUnderstandingOnly);
  bool ok = full > no_ru && full > no_rg;
  return {ok, "mean test Combined full " + fmt(full) + ", no-R_u " + fmt(no_ru) + " (margin " +
                  fmt(full - no_ru) + "), no-R_g " + fmt(no_rg) + " (margin " + fmt(full - no_rg) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"todrl acceptance suite"};
  std::string data_dir = TODRL_DATA_DIR;
  bool strict = false;
  std::vector<int> only;
  std::size_t seeds = 5;
  app.add_option("--data-dir", data_dir, "Directory with toy_schema.json, toy_db.json, toy_gen.json, rl_config.json");
  app.add_flag("--strict", strict, "Exit non-zero when any criterion fails, not only 1-7");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  app.add_option("--seeds", seeds, "Seeds per reward mode for criteria 8-10")->check(CLI::Range(1, 100));
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  Env env;
  GenConfig gen;
  TrainConfig rl;
  try {
    env.schema = load_schema_file(data_dir + "/toy_schema.json");
    env.db = load_database_file(data_dir + "/toy_db.json", env.schema);
    std::ifstream gen_in(data_dir + "/toy_gen.json"), rl_in(data_dir + "/rl_config.json");
    if (!gen_in || !rl_in) throw std::runtime_error("missing toy_gen.json or rl_config.json in " + data_dir);
    gen = gen_config_from_json(json::parse(gen_in));
    rl = train_config_from_json(json::parse(rl_in));
    env.corpus = generate_corpus(gen, env.schema, env.db);
  } catch (const std::exception& e) {
    std::cerr << "acceptance: setup failed: " << e.what() << "\n";
    return 2;
  }
  std::cout << "default corpus: " << env.corpus.train.size() << " train / " << env.corpus.dev.size()
            << " dev / " << env.corpus.test.size() << " test dialogues\n";

  std::map<int, Outcome> results;
  auto record = [&](int c, const std::function<Outcome()>& fn) {
    if (!wanted(c)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    results[c] = o;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c << ": " << o.detail << "\n" << std::flush;
  };

  record(1, [&] { return criterion1(env); });
  record(2, [&] { return criterion2(env); });
  record(3, [&] { return criterion3(env); });
  record(4, [&] { return criterion4(env, gen); });
  record(5, [&] { return criterion5(); });
  record(6, [&] { return criterion6(env, gen); });
  record(7, [&] { return criterion7(); });

  if (wanted(8) || wanted(9) || wanted(10)) {
    std::cout << "RL experiments: " << rl.episodes << " episodes per run, " << seeds
              << " seeds x 4 reward modes\n";
    Experiments ex;
    std::string error;
    try {
      ex = run_experiments(env, rl, seeds);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto guarded = [&](const std::function<Outcome()>& fn) {
      return error.empty() ? fn() : Outcome{false, "experiments failed: " + error};
    };
    record(8, [&] { return guarded([&] { return criterion8(ex); }); });
    record(9, [&] { return guarded([&] { return criterion9(ex); }); });
    record(10, [&] { return guarded([&] { return criterion10(ex); }); });
  }

  int passed = 0, failed_core = 0, failed_stat = 0;
  for (const auto& [c, o] : results) {
    if (o.pass) {
      ++passed;
    } else if (c <= 7) {
      ++failed_core;
    } else {
      ++failed_stat;
    }
  }
  std::cout << "summary: " << passed << "/" << results.size() << " passed";
  if (failed_stat > 0 && !strict) std::cout << " (statistical failures reported, not fatal without --strict)";
  std::cout << "\n";
  return (failed_core > 0 || (strict && failed_stat > 0)) ? 1 : 0;
}
