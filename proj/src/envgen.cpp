#include "todrl/envgen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "todrl/errors.hpp"
#include "todrl/linearizer.hpp"
#include "todrl/random.hpp"
#include "todrl/text.hpp"

namespace todrl {

using nlohmann::json;

namespace {

using Draw = Rng;

using Phrases = std::vector<std::string>;

std::string fill(std::string_view pattern, std::string_view key, std::string_view value) {
  std::string out(pattern);
  for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
    out.replace(pos, key.size(), value);
  }
  return out;
}

// Surface templates of the default set. Unknown slots and domains fall back
// to generic phrasings built from the identifiers.
struct Templates {
  Phrases openers{"i am looking for a {d}", "i need a {d}", "can you help me find a {d}",
                  "i want a {d}", "please find me a {d}"};
  Phrases continuations{"i would also like it", "it should also be", "make sure it is"};
  Phrases bare_openers{"i am looking for a {d} .", "i need to find a {d} ."};
  Phrases single_requests{"what is the {w} ?", "can i get the {w} ?", "could you tell me the {w} ?"};
  Phrases follow_ups{"and the {w} ?", "what about the {w} ?", "you forgot the {w} ."};
  Phrases goodbyes{"thank you , goodbye .", "that is all i need , thanks .",
                   "thanks for your help , bye ."};
  Phrases offers{"how about [value_name] ?", "i recommend [value_name] .",
                 "[value_name] is a good choice .", "[value_name] matches your request .",
                 "you might like [value_name] ."};
  Phrases farewells{"you are welcome . goodbye .", "have a nice day .",
                    "glad i could help . goodbye ."};
  std::map<std::string, Phrases> slot_phrases{
      {"area", {"in the {v}", "in the {v} of town", "in the {v} area"}},
      {"price", {"in the {v} price range", "that is {v}", "with {v} prices"}},
      {"food", {"serving {v} food", "with {v} food"}},
      {"stars", {"with {v} stars", "rated {v} stars"}},
      {"type", {"that is a {v}", "of the {v} type"}}};
  std::map<std::string, Phrases> questions{
      {"area", {"which area would you like ?", "what part of town do you prefer ?"}},
      {"price", {"what price range are you looking for ?"}},
      {"food", {"what kind of food would you like ?"}},
      {"stars", {"how many stars should it have ?"}},
      {"type", {"what type of place are you interested in ?"}}};
  std::map<std::string, std::string> request_words{{"phone", "phone number"},
                                                   {"address", "address"},
                                                   {"postcode", "postcode"},
                                                   {"parking", "parking"},
                                                   {"hours", "opening hours"}};
  std::map<std::string, Phrases> info_phrases{
      {"phone", {"the phone number is [value_phone]", "you can call them on [value_phone]"}},
      {"address", {"the address is [value_address]", "they are located at [value_address]"}},
      {"postcode", {"the postcode is [value_postcode]", "their postcode is [value_postcode]"}},
      {"parking", {"parking is [value_parking]"}},
      {"hours", {"they are open [value_hours]", "the opening hours are [value_hours]"}}};

  std::string slot_phrase(Draw& draw, const std::string& slot, const std::string& value) const {
    auto it = slot_phrases.find(slot);
    if (it == slot_phrases.end()) return "with " + slot + " " + value;
    return fill(draw.pick(it->second), "{v}", value);
  }

  std::string question(Draw& draw, const std::string& slot) const {
    auto it = questions.find(slot);
    if (it == questions.end()) return "what " + slot + " would you like ?";
    return draw.pick(it->second);
  }

  std::string request_word(const std::string& slot) const {
    auto it = request_words.find(slot);
    return it == request_words.end() ? slot : it->second;
  }

  std::string info(Draw& draw, const std::string& slot) const {
    auto it = info_phrases.find(slot);
    if (it == info_phrases.end()) return "the " + slot + " is " + make_placeholder(slot);
    return draw.pick(it->second);
  }
};

std::string join_with(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

class DialogueBuilder {
 public:
  DialogueBuilder(const GenConfig& config, const DialogueSchema& schema, const EntityDatabase& db,
                  const Templates& templates, Draw& draw)
      : config_(config), schema_(schema), db_(db), t_(templates), draw_(draw) {}

  Dialogue build(std::string id) {
    Dialogue d;
    d.id = std::move(id);
    d.goal = sample_goal();
    belief_.clear();
    turns_.clear();
    std::vector<std::string> order;
    for (const auto& [domain, slots] : d.goal.constraints) order.push_back(domain);
    draw_.shuffle(order);
    for (const auto& domain : order) {
      play_domain(domain, d.goal.constraints.at(domain), d.goal.requests[domain]);
    }
    add_turn(order.back(), draw_.pick(t_.goodbyes), "", draw_.pick(t_.farewells), {});
    d.turns = std::move(turns_);
    return d;
  }

 private:
  DialogueGoal sample_goal() {
    // Goal constraints are copied from a real entity, so the goal is solvable.
    double r = draw_.unit();
    std::size_t n_domains = config_.domains_per_dialogue.size();
    for (std::size_t i = 0; i < config_.domains_per_dialogue.size(); ++i) {
      if (r < config_.domains_per_dialogue[i]) {
        n_domains = i + 1;
        break;
      }
      r -= config_.domains_per_dialogue[i];
    }
    std::vector<std::string> domains;
    for (const auto& [name, spec] : schema_.domains()) {
      if (!db_.domain(name).empty()) domains.push_back(name);
    }
    draw_.shuffle(domains);
    domains.resize(std::min(domains.size(), n_domains));

    DialogueGoal goal;
    for (const auto& domain : domains) {
      const DomainSpec& spec = schema_.domain(domain);
      const Entity& entity = draw_.pick(db_.domain(domain));
      std::vector<std::string> slots;
      for (const auto& [slot, values] : spec.informable) slots.push_back(slot);
      draw_.shuffle(slots);
      std::size_t nc = draw_.between(config_.constraints_per_domain.first,
                                     std::min(config_.constraints_per_domain.second, slots.size()));
      auto& constraints = goal.constraints[domain];
      for (std::size_t i = 0; i < nc; ++i) constraints[slots[i]] = entity.slots.at(slots[i]);

      std::vector<std::string> requestable(spec.requestable.begin(), spec.requestable.end());
      draw_.shuffle(requestable);
      std::size_t nr = draw_.between(config_.requests_per_domain.first,
                                     std::min(config_.requests_per_domain.second,
                                              requestable.size()));
      auto& requests = goal.requests[domain];
      for (std::size_t i = 0; i < nr; ++i) requests.insert(requestable[i]);
    }
    return goal;
  }

  std::vector<std::string> ordered(const std::set<std::string>& slots) {
    std::vector<std::string> out(slots.begin(), slots.end());
    draw_.shuffle(out);
    return out;
  }

  std::string request_utterance(const std::vector<std::string>& slots) {
    std::vector<std::string> words;
    for (const auto& s : slots) words.push_back(t_.request_word(s));
    return fill(draw_.pick(t_.single_requests), "{w}", join_with(words, " and "));
  }

  std::string info_sentence(const std::vector<std::string>& slots) {
    std::vector<std::string> parts;
    for (const auto& s : slots) parts.push_back(t_.info(draw_, s));
    return join_with(parts, " and ") + " .";
  }

  std::string inform_acts(const std::vector<std::string>& slots) {
    std::string out;
    if (!slots.empty()) out += " [inform]";
    for (const auto& s : slots) out += " " + make_placeholder(s);
    return out;
  }

  void play_domain(const std::string& domain, const std::map<std::string, std::string>& constraints,
                   const std::set<std::string>& request_set) {
    std::string dword = domain;
    std::vector<std::string> slots;
    for (const auto& [slot, value] : constraints) slots.push_back(slot);
    draw_.shuffle(slots);

    std::vector<std::vector<std::string>> chunks;
    if (slots.size() >= 2 && draw_.chance(0.4)) {
      std::size_t cut = draw_.between(1, slots.size() - 1);
      chunks.emplace_back(slots.begin(), slots.begin() + static_cast<long>(cut));
      chunks.emplace_back(slots.begin() + static_cast<long>(cut), slots.end());
    } else {
      chunks.push_back(slots);
    }

    bool opened = false;
    if (draw_.chance(config_.open_request_probability)) {
      const std::string& asked = chunks.front().front();
      add_turn(domain, fill(draw_.pick(t_.bare_openers), "{d}", dword),
               "[" + domain + "] [request] " + asked, t_.question(draw_, asked), {});
      opened = true;
    }

    std::vector<std::string> requests = ordered(request_set);
    std::vector<std::string> provided = requests;
    std::vector<std::string> missed;
    if (requests.size() >= 2 && draw_.chance(config_.partial_answer_probability)) {
      missed.push_back(provided.back());
      provided.pop_back();
    }
    bool attach = draw_.chance(0.3);

    for (std::size_t c = 0; c < chunks.size(); ++c) {
      std::vector<std::string> phrases;
      for (const auto& slot : chunks[c]) {
        belief_.insert({domain, slot, constraints.at(slot)});
        phrases.push_back(t_.slot_phrase(draw_, slot, constraints.at(slot)));
      }
      std::string head = (c == 0 && !opened) ? fill(draw_.pick(t_.openers), "{d}", dword)
                                             : draw_.pick(t_.continuations);
      std::string user = head + " " + join_with(phrases, " and ") + " .";
      std::string acts = "[" + domain + "] [offer] [value_name]";
      std::string response = draw_.pick(t_.offers);
      bool last = c + 1 == chunks.size();
      if (last && attach) {
        user += " " + request_utterance(requests);
        acts += inform_acts(provided);
        response += " " + info_sentence(provided);
        add_turn(domain, user, acts, response, requests);
      } else {
        add_turn(domain, user, acts, response, {});
      }
    }
    if (!attach) {
      std::string response = info_sentence(provided);
      if (draw_.chance(0.5)) response += " anything else ?";
      add_turn(domain, request_utterance(requests), "[" + domain + "]" + inform_acts(provided),
               response, requests);
    }
    if (!missed.empty()) {
      add_turn(domain, fill(draw_.pick(t_.follow_ups), "{w}", t_.request_word(missed.front())),
               "[" + domain + "]" + inform_acts(missed), info_sentence(missed), missed);
    }
  }

  void add_turn(const std::string& domain, const std::string& user, const std::string& acts,
                const std::string& response, std::vector<std::string> requests) {
    GoldTurn turn;
    turn.domain = domain;
    turn.user = normalize_text(user);
    turn.belief = join_tokens(serialize_belief(belief_));
    if (schema_.has_dialogue_acts()) {
      turn.acts = normalize_text(std::string(markers::kSosAct) + " " + acts + " " +
                                 std::string(markers::kEosAct));
    }
    turn.response = normalize_text(std::string(markers::kSosResponse) + " " + response + " " +
                                   std::string(markers::kEosResponse));
    std::sort(requests.begin(), requests.end());
    turn.requests = std::move(requests);
    turns_.push_back(std::move(turn));
  }

  const GenConfig& config_;
  const DialogueSchema& schema_;
  const EntityDatabase& db_;
  const Templates& t_;
  Draw& draw_;
  BeliefSet belief_;
  std::vector<GoldTurn> turns_;
};

std::pair<std::size_t, std::size_t> range_from_json(const json& j) {
  return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()};
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> span_tokens(const std::string& text) { return split_tokens(text); }

}  // namespace

void GenConfig::validate() const {
  if (dialogues == 0) throw ConfigError("gen config: dialogue count must be positive");
  if (split.size() != 3) throw ConfigError("gen config: split needs train/dev/test fractions");
  double sum = std::accumulate(split.begin(), split.end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-9 || std::any_of(split.begin(), split.end(),
                                                 [](double f) { return f < 0.0; })) {
    throw ConfigError("gen config: split fractions must be non-negative and sum to 1");
  }
  if (domains_per_dialogue.empty()) throw ConfigError("gen config: empty domain distribution");
  double dsum = std::accumulate(domains_per_dialogue.begin(), domains_per_dialogue.end(), 0.0);
  if (std::abs(dsum - 1.0) > 1e-9) {
    throw ConfigError("gen config: domains_per_dialogue must sum to 1");
  }
  auto check_range = [](const auto& r, std::string_view name, std::size_t min_lo) {
    if (r.first < min_lo || r.first > r.second) {
      throw ConfigError("gen config: invalid range for " + std::string(name));
    }
  };
  check_range(turns_per_dialogue, "turns_per_dialogue", 1);
  check_range(constraints_per_domain, "constraints_per_domain", 1);
  check_range(requests_per_domain, "requests_per_domain", 1);
  if (template_set != "default") throw ConfigError("gen config: unknown template set '" +
                                                   template_set + "'");
  if (partial_answer_probability < 0.0 || partial_answer_probability > 1.0 ||
      open_request_probability < 0.0 || open_request_probability > 1.0) {
    throw ConfigError("gen config: probabilities must lie in [0, 1]");
  }
}

GenConfig gen_config_from_json(const json& j) {
  GenConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.dialogues = j.value("dialogues", c.dialogues);
    if (j.contains("domains_per_dialogue")) {
      c.domains_per_dialogue = j["domains_per_dialogue"].get<std::vector<double>>();
    }
    if (j.contains("turns_per_dialogue")) c.turns_per_dialogue = range_from_json(j["turns_per_dialogue"]);
    if (j.contains("constraints_per_domain")) {
      c.constraints_per_domain = range_from_json(j["constraints_per_domain"]);
    }
    if (j.contains("requests_per_domain")) {
      c.requests_per_domain = range_from_json(j["requests_per_domain"]);
    }
    c.template_set = j.value("template_set", c.template_set);
    if (j.contains("split")) c.split = j["split"].get<std::vector<double>>();
    c.partial_answer_probability = j.value("partial_answer_probability", c.partial_answer_probability);
    c.open_request_probability = j.value("open_request_probability", c.open_request_probability);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gen config: ") + e.what());
  }
  c.validate();
  return c;
}

json gen_config_to_json(const GenConfig& c) {
  return {{"seed", c.seed},
          {"dialogues", c.dialogues},
          {"domains_per_dialogue", c.domains_per_dialogue},
          {"turns_per_dialogue", {c.turns_per_dialogue.first, c.turns_per_dialogue.second}},
          {"constraints_per_domain",
           {c.constraints_per_domain.first, c.constraints_per_domain.second}},
          {"requests_per_domain", {c.requests_per_domain.first, c.requests_per_domain.second}},
          {"template_set", c.template_set},
          {"split", c.split},
          {"partial_answer_probability", c.partial_answer_probability},
          {"open_request_probability", c.open_request_probability}};
}

Corpus generate_corpus(const GenConfig& config, const DialogueSchema& schema,
                       const EntityDatabase& db) {
  config.validate();
  std::size_t usable_domains = 0;
  for (const auto& [name, spec] : schema.domains()) {
    if (db.domain(name).empty()) continue;
    ++usable_domains;
    if (spec.informable.size() < config.constraints_per_domain.first ||
        spec.requestable.size() < config.requests_per_domain.first) {
      throw ConfigError("gen config: domain '" + name +
                        "' has fewer slots than the minimum constraint/request count");
    }
  }
  if (usable_domains < config.domains_per_dialogue.size() &&
      config.domains_per_dialogue.back() > 0.0) {
    throw ConfigError("gen config: more domains per dialogue than the database covers");
  }

  Templates templates;
  Draw draw(config.seed);
  DialogueBuilder builder(config, schema, db, templates, draw);
  std::vector<Dialogue> all;
  all.reserve(config.dialogues);
  for (std::size_t i = 0; i < config.dialogues; ++i) {
    // Resample until the dialogue length falls inside the configured range.
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      Dialogue d = builder.build("d" + std::to_string(i));
      if (d.turns.size() >= config.turns_per_dialogue.first &&
          d.turns.size() <= config.turns_per_dialogue.second) {
        all.push_back(std::move(d));
        ok = true;
      }
    }
    if (!ok) throw ConfigError("gen config: turns_per_dialogue range cannot be satisfied");
  }

  auto n = static_cast<double>(config.dialogues);
  auto n_train = static_cast<std::size_t>(std::floor(n * config.split[0] + 1e-9));
  auto n_dev = static_cast<std::size_t>(std::floor(n * config.split[1] + 1e-9));
  Corpus corpus;
  corpus.train.assign(all.begin(), all.begin() + static_cast<long>(n_train));
  corpus.dev.assign(all.begin() + static_cast<long>(n_train),
                    all.begin() + static_cast<long>(n_train + n_dev));
  corpus.test.assign(all.begin() + static_cast<long>(n_train + n_dev), all.end());
  return corpus;
}

json turn_to_json(const GoldTurn& t) {
  return {{"domain", t.domain},     {"user", t.user},         {"belief", t.belief},
          {"acts", t.acts},         {"response", t.response}, {"requests", t.requests}};
}

GoldTurn turn_from_json(const json& t) {
  GoldTurn turn;
  try {
    turn.domain = t.at("domain").get<std::string>();
    turn.user = normalize_text(t.value("user", ""));
    turn.belief = normalize_text(t.at("belief").get<std::string>());
    turn.acts = normalize_text(t.value("acts", ""));
    turn.response = normalize_text(t.at("response").get<std::string>());
    turn.requests = t.value("requests", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw ParseError(std::string("turn: ") + e.what());
  }
  return turn;
}

json dialogue_to_json(const Dialogue& d) {
  json turns = json::array();
  for (const auto& t : d.turns) turns.push_back(turn_to_json(t));
  return {{"id", d.id}, {"goal", goal_to_json(d.goal)}, {"turns", turns}};
}

Dialogue dialogue_from_json(const json& j) {
  Dialogue d;
  try {
    d.id = j.value("id", "");
    d.goal = goal_from_json(j.at("goal"));
    for (const auto& t : j.at("turns")) d.turns.push_back(turn_from_json(t));
  } catch (const json::exception& e) {
    throw ParseError(std::string("dialogue: ") + e.what());
  }
  return d;
}

std::string dialogues_to_jsonl(const std::vector<Dialogue>& dialogues) {
  std::string out;
  for (const auto& d : dialogues) {
    out += dialogue_to_json(d).dump();
    out += '\n';
  }
  return out;
}

std::vector<Dialogue> dialogues_from_jsonl(std::string_view text) {
  std::vector<Dialogue> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(dialogue_from_json(j));
  }
  return out;
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::vector<Dialogue>& part, const std::string& name) {
    std::ofstream out(std::filesystem::path(dir) / name, std::ios::binary);
    if (!out) throw Error("cannot write " + name + " in " + dir);
    out << dialogues_to_jsonl(part);
  };
  write(corpus.train, "train.jsonl");
  write(corpus.dev, "dev.jsonl");
  write(corpus.test, "test.jsonl");
}

Corpus read_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  Corpus corpus;
  corpus.train = dialogues_from_jsonl(read_text((fs::path(dir) / "train.jsonl").string()));
  corpus.dev = dialogues_from_jsonl(read_text((fs::path(dir) / "dev.jsonl").string()));
  corpus.test = dialogues_from_jsonl(read_text((fs::path(dir) / "test.jsonl").string()));
  return corpus;
}

AnnotatedTurn annotate_turn(const GoldTurn& turn, const DialogueSchema& schema) {
  auto tokens = span_tokens(turn.belief);
  BeliefParse parsed = parse_belief(tokens, schema);
  if (parsed.malformed) throw ValidationError("gold belief is malformed: " + turn.belief);
  return {turn.domain, std::move(parsed.triples), turn.requests};
}

TurnGoal gold_turn_goal(const GoldTurn& turn, const DialogueSchema& schema) {
  return derive_turn_goal(annotate_turn(turn, schema), schema);
}

std::vector<std::string> gold_output(const GoldTurn& turn, const DialogueSchema& schema) {
  std::vector<std::string> out = span_tokens(turn.belief);
  if (schema.has_dialogue_acts()) {
    auto a = span_tokens(turn.acts);
    out.insert(out.end(), a.begin(), a.end());
  }
  auto r = span_tokens(turn.response);
  out.insert(out.end(), r.begin(), r.end());
  return out;
}

TurnOutput gold_turn_output(const GoldTurn& turn, const DialogueSchema& schema) {
  TurnOutput out;
  out.belief = span_tokens(turn.belief);
  if (schema.has_dialogue_acts()) out.acts = span_tokens(turn.acts);
  out.response = span_tokens(turn.response);
  return out;
}

PredictionCorpus gold_predictions(const std::vector<Dialogue>& dialogues,
                                  const DialogueSchema& schema) {
  PredictionCorpus out;
  for (const auto& d : dialogues) {
    DialoguePrediction p;
    p.id = d.id;
    p.goal = d.goal;
    for (const auto& t : d.turns) {
      TurnOutput gold = gold_turn_output(t, schema);
      p.turns.push_back({t.domain, gold, gold});
    }
    out.push_back(std::move(p));
  }
  return out;
}

const std::vector<std::string>& context_prefix() {
  static const std::vector<std::string> kPrefix = split_tokens(
      "translate dialogue to belief state , dialogue action , and system response :");
  return kPrefix;
}

std::vector<std::string> EpisodeState::context() const {
  std::vector<std::string> out = context_prefix();
  for (const auto* part : {&prev_user, &prev_belief, &prev_acts, &prev_response, &user}) {
    out.insert(out.end(), part->begin(), part->end());
  }
  return out;
}

EpisodeState reset_episode(const Dialogue& dialogue, std::size_t turn,
                           const DialogueSchema& schema, std::size_t max_length) {
  if (turn >= dialogue.turns.size()) {
    throw NotFoundError("dialogue '" + dialogue.id + "' has no turn " + std::to_string(turn));
  }
  if (max_length == 0) throw ConfigError("episode max length must be positive");
  const GoldTurn& current = dialogue.turns[turn];
  EpisodeState state;
  state.domain = current.domain;
  state.user = span_tokens(current.user);
  if (turn > 0) {
    const GoldTurn& prev = dialogue.turns[turn - 1];
    state.prev_user = span_tokens(prev.user);
    state.prev_belief = span_tokens(prev.belief);
    if (schema.has_dialogue_acts()) state.prev_acts = span_tokens(prev.acts);
    state.prev_response = span_tokens(prev.response);
  }
  state.goal = gold_turn_goal(current, schema);
  state.max_length = max_length;
  return state;
}

StepResult env_step(EpisodeState state, std::string action) {
  bool end = action == markers::kEosResponse;
  state.output.push_back(std::move(action));
  ++state.step;
  state.done = end || state.output.size() >= state.max_length;
  bool done = state.done;
  return {std::move(state), done};
}

}  // namespace todrl
