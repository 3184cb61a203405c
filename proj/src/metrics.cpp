#include "todrl/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>

#include "todrl/errors.hpp"
#include "todrl/linearizer.hpp"
#include "todrl/text.hpp"

namespace todrl {

using nlohmann::json;

namespace {

BeliefSet final_belief(const DialoguePrediction& d, const DialogueSchema& schema) {
  if (d.turns.empty()) return {};
  try {
    return parse_belief(d.turns.back().pred.belief, schema).triples;
  } catch (const ParseError&) {
    return {};
  }
}

// Domains in which some system turn offers an entity.
std::set<std::string> offered_domains(const DialoguePrediction& d) {
  std::set<std::string> offered;
  for (const auto& turn : d.turns) {
    std::string active = turn.domain;
    for (const auto& t : turn.pred.acts) {
      if (auto dom = bracket_domain(t)) {
        active = *dom;
      } else if (t == acts::kOffer || t == kNamePlaceholder) {
        offered.insert(active);
      }
    }
    for (const auto& t : turn.pred.response) {
      if (t == kNamePlaceholder) offered.insert(active);
    }
  }
  return offered;
}

RequestSet provided_requests(const DialoguePrediction& d, const DialogueSchema& schema) {
  RequestSet out;
  for (const auto& turn : d.turns) {
    RequestSet r = collect_placeholders(turn.pred.acts, turn.pred.response, turn.domain, schema);
    out.insert(r.begin(), r.end());
  }
  return out;
}

bool domain_informed(std::string_view domain, const BeliefSet& belief, const DialogueGoal& goal,
                     const DialogueSchema& schema, const EntityDatabase& db) {
  Constraints predicted;
  for (const auto& t : belief) {
    if (t.domain != domain) continue;
    if (!schema.allows(t.domain, t.slot, t.value)) return false;
    predicted.emplace_back(t.slot, t.value);
  }
  auto goal_it = goal.constraints.find(std::string(domain));
  for (const Entity& e : lookup_entities(db, schema, domain, predicted)) {
    if (goal_it == goal.constraints.end()) return true;
    bool consistent = std::all_of(goal_it->second.begin(), goal_it->second.end(),
                                  [&](const auto& c) {
                                    auto it = e.slots.find(c.first);
                                    return it != e.slots.end() && it->second == c.second;
                                  });
    if (consistent) return true;
  }
  return false;
}

DialogueFlags analyze(const DialoguePrediction& d, const DialogueSchema& schema,
                      const EntityDatabase* db) {
  DialogueFlags flags;
  flags.id = d.id;
  BeliefSet belief = final_belief(d, schema);
  std::set<std::string> domains = d.goal.domains();
  for (const auto& domain : domains) {
    if (!schema.has_domain(domain)) {
      throw EvaluationError("dialogue '" + d.id + "': unknown goal domain '" + domain + "'");
    }
  }
  if (db != nullptr) {
    std::set<std::string> offered = offered_domains(d);
    flags.informed = !domains.empty();
    for (const auto& domain : domains) {
      if (!offered.contains(domain) || !domain_informed(domain, belief, d.goal, schema, *db)) {
        flags.informed = false;
        break;
      }
    }
  }
  RequestSet requested = d.goal.request_pairs();
  RequestSet provided = provided_requests(d, schema);
  for (const auto& r : requested) {
    if (provided.contains(r)) {
      ++flags.true_positives;
    } else {
      ++flags.false_negatives;
    }
  }
  for (const auto& p : provided) {
    if (!requested.contains(p)) ++flags.false_positives;
  }
  flags.success = flags.informed && flags.false_negatives == 0;
  flags.matched = belief == d.goal.constraint_triples();
  return flags;
}

std::vector<DialogueFlags> analyze_corpus(const PredictionCorpus& corpus,
                                          const DialogueSchema& schema, const EntityDatabase* db) {
  if (corpus.empty()) throw EvaluationError("empty corpus: rates are undefined");
  std::vector<DialogueFlags> out;
  out.reserve(corpus.size());
  for (const auto& d : corpus) out.push_back(analyze(d, schema, db));
  return out;
}

template <typename Pred>
double percentage(const std::vector<DialogueFlags>& flags, Pred pred) {
  auto n = std::count_if(flags.begin(), flags.end(), pred);
  return 100.0 * static_cast<double>(n) / static_cast<double>(flags.size());
}

double f1_of(const std::vector<DialogueFlags>& flags) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& f : flags) {
    tp += f.true_positives;
    fp += f.false_positives;
    fn += f.false_negatives;
  }
  double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

std::vector<std::string> strip_markers(const std::vector<std::string>& tokens) {
  std::vector<std::string> out;
  for (const auto& t : tokens) {
    if (!is_marker(t)) out.push_back(t);
  }
  return out;
}

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return counts;
}

TurnOutput output_from_json(const json& j) {
  TurnOutput out;
  out.belief = split_tokens(normalize_text(j.value("belief", "")));
  out.acts = split_tokens(normalize_text(j.value("acts", "")));
  out.response = split_tokens(normalize_text(j.value("response", "")));
  return out;
}

json output_to_json(const TurnOutput& out) {
  return {{"belief", join_tokens(out.belief)},
          {"acts", join_tokens(out.acts)},
          {"response", join_tokens(out.response)}};
}

}  // namespace

json EvalReport::to_json() const {
  json per_dialogue = json::array();
  for (const auto& f : dialogues) {
    per_dialogue.push_back({{"id", f.id},
                            {"informed", f.informed},
                            {"success", f.success},
                            {"matched", f.matched},
                            {"tp", f.true_positives},
                            {"fp", f.false_positives},
                            {"fn", f.false_negatives}});
  }
  return {{"mode", mode == EvalMode::kMultiWoz ? "multiwoz" : "incar"},
          {"inform", inform},
          {"success", success},
          {"match", match},
          {"succ_f1", succ_f1},
          {"succ_f1_x100", 100.0 * succ_f1},
          {"bleu", bleu},
          {"combined", combined},
          {"bleu_smoothing", std::string(kBleuSmoothing)},
          {"dialogues", per_dialogue}};
}

double inform_rate(const PredictionCorpus& corpus, const DialogueSchema& schema,
                   const EntityDatabase& db) {
  return percentage(analyze_corpus(corpus, schema, &db), [](const auto& f) { return f.informed; });
}

double success_rate(const PredictionCorpus& corpus, const DialogueSchema& schema,
                    const EntityDatabase& db) {
  return percentage(analyze_corpus(corpus, schema, &db), [](const auto& f) { return f.success; });
}

double match_rate(const PredictionCorpus& corpus, const DialogueSchema& schema) {
  return percentage(analyze_corpus(corpus, schema, nullptr),
                    [](const auto& f) { return f.matched; });
}

double succ_f1(const PredictionCorpus& corpus, const DialogueSchema& schema) {
  return f1_of(analyze_corpus(corpus, schema, nullptr));
}

double corpus_bleu(std::span<const std::vector<std::string>> candidates,
                   std::span<const std::vector<std::string>> references) {
  if (candidates.size() != references.size()) {
    throw EvaluationError("bleu: candidate and reference counts differ");
  }
  constexpr std::size_t kMaxOrder = 4;
  std::array<std::size_t, kMaxOrder> matches{};
  std::array<std::size_t, kMaxOrder> totals{};
  std::size_t cand_len = 0;
  std::size_t ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += candidates[i].size();
    ref_len += references[i].size();
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      NgramCounts cand = count_ngrams(candidates[i], n);
      NgramCounts ref = count_ngrams(references[i], n);
      for (const auto& [gram, count] : cand) {
        totals[n - 1] += count;
        auto it = ref.find(gram);
        if (it != ref.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (cand_len == 0 || matches[0] == 0) return 0.0;

  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    if (totals[n] == 0) continue;
    double p = matches[n] > 0 ? static_cast<double>(matches[n]) / static_cast<double>(totals[n])
                              : 1.0 / (2.0 * static_cast<double>(totals[n]));
    log_sum += std::log(p);
    ++orders;
  }
  double brevity = cand_len < ref_len
                       ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len))
                       : 1.0;
  return 100.0 * brevity * std::exp(log_sum / static_cast<double>(orders));
}

double combined_score(double inform, double success, double match, double succ_f1_value,
                      double bleu, EvalMode mode) {
  if (mode == EvalMode::kMultiWoz) return 0.5 * (inform + success) + bleu;
  return 0.5 * (match + 100.0 * succ_f1_value) + bleu;
}

EvalMode mode_for(const DialogueSchema& schema) {
  return schema.has_dialogue_acts() ? EvalMode::kMultiWoz : EvalMode::kInCar;
}

EvalReport evaluate(const PredictionCorpus& corpus, const DialogueSchema& schema,
                    const EntityDatabase& db) {
  EvalReport report;
  report.mode = mode_for(schema);
  report.dialogues = analyze_corpus(corpus, schema, &db);
  report.inform = percentage(report.dialogues, [](const auto& f) { return f.informed; });
  report.success = percentage(report.dialogues, [](const auto& f) { return f.success; });
  report.match = percentage(report.dialogues, [](const auto& f) { return f.matched; });
  report.succ_f1 = f1_of(report.dialogues);

  std::vector<std::vector<std::string>> candidates;
  std::vector<std::vector<std::string>> references;
  for (const auto& d : corpus) {
    for (const auto& t : d.turns) {
      candidates.push_back(strip_markers(t.pred.response));
      references.push_back(strip_markers(t.gold.response));
    }
  }
  report.bleu = corpus_bleu(candidates, references);
  report.combined = combined_score(report.inform, report.success, report.match, report.succ_f1,
                                   report.bleu, report.mode);
  return report;
}

json goal_to_json(const DialogueGoal& goal) {
  json requests = json::object();
  for (const auto& [domain, slots] : goal.requests) {
    requests[domain] = std::vector<std::string>(slots.begin(), slots.end());
  }
  return {{"constraints", goal.constraints}, {"requests", requests}};
}

DialogueGoal goal_from_json(const json& j) {
  DialogueGoal goal;
  try {
    if (j.contains("constraints")) {
      for (const auto& [domain, slots] : j.at("constraints").items()) {
        auto& out = goal.constraints[domain];
        for (const auto& [slot, value] : slots.items()) {
          out[slot] = normalize_text(value.get<std::string>());
        }
      }
    }
    if (j.contains("requests")) {
      for (const auto& [domain, slots] : j.at("requests").items()) {
        auto& out = goal.requests[domain];
        for (const auto& slot : slots) out.insert(slot.get<std::string>());
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("goal: ") + e.what());
  }
  return goal;
}

DialoguePrediction prediction_from_json(const json& j) {
  DialoguePrediction p;
  try {
    p.id = j.value("id", "");
    p.goal = goal_from_json(j.at("goal"));
    for (const auto& t : j.at("turns")) {
      TurnPrediction turn;
      turn.domain = t.at("domain").get<std::string>();
      turn.pred = output_from_json(t.at("pred"));
      turn.gold = output_from_json(t.at("gold"));
      p.turns.push_back(std::move(turn));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("prediction: ") + e.what());
  }
  return p;
}

json prediction_to_json(const DialoguePrediction& p) {
  json turns = json::array();
  for (const auto& t : p.turns) {
    turns.push_back(
        {{"domain", t.domain}, {"pred", output_to_json(t.pred)}, {"gold", output_to_json(t.gold)}});
  }
  return {{"id", p.id}, {"goal", goal_to_json(p.goal)}, {"turns", turns}};
}

}  // namespace todrl
