#include "todrl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "todrl/errors.hpp"
#include "todrl/text.hpp"

namespace todrl {

using nlohmann::json;

namespace {

constexpr std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t combine(std::uint64_t h, std::int64_t v) {
  return mix(h ^ (static_cast<std::uint64_t>(v) + 0x632be59bd9b4e019ULL + (h << 6) + (h >> 2)));
}

template <typename... Parts>
std::uint64_t key(std::uint64_t family, Parts... parts) {
  std::uint64_t h = mix(family);
  ((h = combine(h, static_cast<std::int64_t>(parts))), ...);
  return h;
}

int region_code(Region region, bool closed) { return static_cast<int>(region) * 2 + (closed ? 1 : 0); }

bool contains_run(const std::vector<std::string>& haystack, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
         haystack.end();
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (auto m : {markers::kSosBelief, markers::kEosBelief, markers::kSosAct, markers::kEosAct,
                 markers::kSosResponse, markers::kEosResponse}) {
    add(m);
  }
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
  for (const auto& t : tokens) add(t);
}

TokenId Vocabulary::add(std::string_view token) {
  auto it = ids_.find(std::string(token));
  if (it != ids_.end()) return it->second;
  auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kNoToken : it->second;
}

Vocabulary Vocabulary::build(const std::vector<Dialogue>& dialogues, const DialogueSchema& schema) {
  Vocabulary v;
  for (auto a : {acts::kInform, acts::kRequest, acts::kOffer, kNamePlaceholder}) v.add(a);
  for (const auto& [domain, spec] : schema.domains()) {
    v.add("[" + domain + "]");
    for (const auto& [slot, values] : spec.informable) {
      v.add(slot);
      for (const auto& value : values) {
        for (const auto& t : split_tokens(value)) v.add(t);
      }
    }
    for (const auto& slot : spec.requestable) v.add(make_placeholder(slot));
  }
  for (const auto& d : dialogues) {
    for (const auto& turn : d.turns) {
      for (const auto& t : gold_output(turn, schema)) v.add(t);
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Snapshots

PolicySnapshot PolicySnapshot::zeros(std::shared_ptr<const Vocabulary> vocab, std::uint32_t bits) {
  if (bits < 4 || bits > 28) throw ConfigError("feature bits must lie in [4, 28]");
  PolicySnapshot s;
  s.vocab = std::move(vocab);
  s.feature_bits = bits;
  s.policy_weights.assign(std::size_t{1} << bits, 0.0);
  s.value_weights.assign(std::size_t{1} << bits, 0.0);
  return s;
}

PolicySnapshot clone_snapshot(const PolicySnapshot& snapshot) {
  PolicySnapshot copy = snapshot;
  ++copy.version;
  return copy;
}

namespace {

json sparse_weights(const std::vector<double>& w) {
  std::vector<std::uint32_t> index;
  std::vector<double> value;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] != 0.0) {
      index.push_back(static_cast<std::uint32_t>(i));
      value.push_back(w[i]);
    }
  }
  return {{"index", index}, {"value", value}};
}

std::vector<double> dense_weights(const json& j, std::size_t dim) {
  std::vector<double> w(dim, 0.0);
  auto index = j.at("index").get<std::vector<std::uint32_t>>();
  auto value = j.at("value").get<std::vector<double>>();
  if (index.size() != value.size()) throw ParseError("snapshot: index/value length mismatch");
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= dim) throw ParseError("snapshot: weight index out of range");
    if (!std::isfinite(value[i])) throw ValidationError("snapshot: non-finite weight");
    w[index[i]] = value[i];
  }
  return w;
}

}  // namespace

std::string snapshot_to_json(const PolicySnapshot& snapshot) {
  json doc = {{"format", "todrl-snapshot"},
              {"format_version", 1},
              {"version", snapshot.version},
              {"feature_bits", snapshot.feature_bits},
              {"vocabulary", snapshot.vocab->tokens()},
              {"policy", sparse_weights(snapshot.policy_weights)},
              {"value", sparse_weights(snapshot.value_weights)}};
  return doc.dump();
}

PolicySnapshot snapshot_from_json(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("snapshot: ") + e.what());
  }
  try {
    if (doc.at("format") != "todrl-snapshot" || doc.at("format_version") != 1) {
      throw ParseError("snapshot: unsupported format");
    }
    auto vocab = std::make_shared<Vocabulary>(doc.at("vocabulary").get<std::vector<std::string>>());
    PolicySnapshot s = PolicySnapshot::zeros(vocab, doc.at("feature_bits").get<std::uint32_t>());
    s.version = doc.at("version").get<std::uint64_t>();
    s.policy_weights = dense_weights(doc.at("policy"), s.policy_weights.size());
    s.value_weights = dense_weights(doc.at("value"), s.value_weights.size());
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("snapshot: ") + e.what());
  }
}

void save_snapshot(const PolicySnapshot& snapshot, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write snapshot " + path);
  out << snapshot_to_json(snapshot);
}

PolicySnapshot load_snapshot(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open snapshot " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return snapshot_from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Feature model

FeatureModel::FeatureModel(std::shared_ptr<const Vocabulary> vocab, const DialogueSchema& schema,
                           std::uint32_t feature_bits)
    : vocab_(std::move(vocab)), schema_(schema), bits_(feature_bits) {
  for (const auto& [name, spec] : schema_.domains()) domain_names_.push_back(name);

  std::set<std::string> slot_set;
  for (const auto& [name, spec] : schema_.domains()) {
    for (const auto& [slot, values] : spec.informable) slot_set.insert(slot);
  }
  std::set<std::string> value_tokens;
  for (const auto& [name, spec] : schema_.domains()) {
    for (const auto& [slot, values] : spec.informable) {
      SlotValues sv;
      sv.domain = domain_index(name);
      sv.slot = slot;
      for (const auto& value : values) {
        std::vector<TokenId> ids;
        for (const auto& t : split_tokens(value)) {
          ids.push_back(vocab_->id(t));
          value_tokens.insert(t);
        }
        sv.values.push_back(std::move(ids));
        sv.texts.push_back(value);
      }
      slot_values_.push_back(std::move(sv));
    }
  }

  std::size_t n = vocab_->size();
  classes_.assign(n, TokenClass::kWord);
  bracket_domain_.assign(n, -1);
  slot_name_.assign(n, "");
  slot_rank_.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& t = vocab_->token(static_cast<TokenId>(i));
    if (is_marker(t)) {
      classes_[i] = TokenClass::kMarker;
    } else if (is_act(t)) {
      classes_[i] = TokenClass::kAct;
    } else if (t == kNamePlaceholder) {
      classes_[i] = TokenClass::kNamePlaceholder;
    } else if (auto slot = placeholder_slot(t)) {
      classes_[i] = TokenClass::kPlaceholder;
      slot_name_[i] = *slot;
    } else if (auto d = bracket_domain(t)) {
      classes_[i] = TokenClass::kDomain;
      bracket_domain_[i] = domain_index(*d);
    } else if (slot_set.contains(t)) {
      classes_[i] = TokenClass::kSlot;
      slot_name_[i] = t;
      slot_rank_[i] = static_cast<int>(std::distance(slot_set.begin(), slot_set.find(t)));
    } else if (value_tokens.contains(t)) {
      classes_[i] = TokenClass::kValue;
    }
  }
  eos_belief_ = vocab_->id(markers::kEosBelief);
}

int FeatureModel::domain_index(std::string_view name) const {
  auto it = std::find(domain_names_.begin(), domain_names_.end(), name);
  return it == domain_names_.end() ? -1 : static_cast<int>(it - domain_names_.begin());
}

const FeatureModel::SlotValues* FeatureModel::slot_values(int domain, std::string_view slot) const {
  for (const auto& sv : slot_values_) {
    if (sv.domain == domain && sv.slot == slot) return &sv;
  }
  return nullptr;
}

FeatureContext FeatureModel::start(const EpisodeState& state) const {
  return FeatureContext(*this, state);
}

// ---------------------------------------------------------------------------
// Feature context

FeatureContext::FeatureContext(const FeatureModel& model, const EpisodeState& state)
    : model_(&model), extractor_(state.domain) {
  const Vocabulary& vocab = model.vocab();
  std::size_t n = vocab.size();
  turn_domain_ = model.domain_index(state.domain);
  auto mark = [&](const std::vector<std::string>& tokens, std::vector<std::uint8_t>& out) {
    out.assign(n, 0);
    for (const auto& t : tokens) {
      if (TokenId id = vocab.id(t); id != kNoToken) out[static_cast<std::size_t>(id)] = 1;
    }
  };
  mark(state.user, in_user_);
  mark(state.prev_belief, in_prev_belief_);
  mark(state.prev_user, in_prev_user_);
  emitted_.assign(n, 0);
  emitted_in_region_.assign(n, 0);

  BeliefSet prev;
  if (!state.prev_belief.empty()) {
    try {
      prev = parse_belief(state.prev_belief, model.schema()).triples;
    } catch (const ParseError&) {
    }
  }
  prev_domain_.assign(model.domain_names_.size(), 0);
  belief_domains_.assign(model.domain_names_.size(), 0);
  for (const auto& t : prev) {
    if (int d = model.domain_index(t.domain); d >= 0) prev_domain_[static_cast<std::size_t>(d)] = 1;
  }

  std::size_t m = model.slot_values_.size();
  user_value_hits_.assign(m, {});
  user_slot_cue_.assign(m, 0);
  prev_value_index_.assign(m, -1);
  bool has_value = false;
  bool new_constraint = false;
  for (std::size_t k = 0; k < m; ++k) {
    const auto& sv = model.slot_values_[k];
    const std::string& domain = model.domain_names_[static_cast<std::size_t>(sv.domain)];
    user_value_hits_[k].assign(sv.values.size(), 0);
    for (std::size_t v = 0; v < sv.texts.size(); ++v) {
      if (prev.contains(SlotValue{domain, sv.slot, sv.texts[v]})) {
        prev_value_index_[k] = static_cast<int>(v);
      }
      if (contains_run(state.user, split_tokens(sv.texts[v]))) {
        user_value_hits_[k][v] = 1;
        user_slot_cue_[k] = 1;
      }
    }
    if (sv.domain == turn_domain_ && user_slot_cue_[k]) {
      has_value = true;
      for (std::size_t v = 0; v < sv.values.size(); ++v) {
        if (user_value_hits_[k][v] && prev_value_index_[k] != static_cast<int>(v)) {
          new_constraint = true;
        }
      }
    }
  }
  if (turn_domain_ >= 0) {
    for (const auto& slot : model.schema().domain(state.domain).requestable) {
      if (std::find(state.user.begin(), state.user.end(), slot) != state.user.end()) {
        requested_cues_.push_back(slot);
      }
    }
  }
  user_flags_ = (has_value ? 1u : 0u) | (requested_cues_.empty() ? 0u : 2u) |
                (new_constraint ? 4u : 0u);

  for (const auto& t : state.output) {
    TokenId id = vocab.id(t);
    if (id == kNoToken) throw ValidationError("output token '" + t + "' is not in the vocabulary");
    push(id);
  }
}

void FeatureContext::push(TokenId token) {
  const FeatureModel& model = *model_;
  const std::string& text = model.vocab().token(token);
  auto c = static_cast<std::size_t>(token);
  std::string slot_before = extractor_.pending_slot();
  Region region_before = extractor_.region();
  bool closed_before = extractor_.region_closed();
  extractor_.advance(text, model.schema());

  if (region_before == Region::kBelief && !closed_before && !extractor_.malformed()) {
    if (model.classes_[c] == FeatureModel::TokenClass::kDomain && model.bracket_domain_[c] >= 0) {
      block_slots_.clear();
      last_slot_rank_ = -1;
      last_domain_ = model.bracket_domain_[c];
      belief_domains_[static_cast<std::size_t>(last_domain_)] = 1;
    } else if (model.classes_[c] == FeatureModel::TokenClass::kSlot &&
               extractor_.pending_slot() == text && slot_before != text) {
      block_slots_.push_back(model.slot_rank_[c]);
      last_slot_rank_ = model.slot_rank_[c];
    }
  }
  if (extractor_.region() != counted_region_) {
    std::fill(emitted_in_region_.begin(), emitted_in_region_.end(), 0);
    counted_region_ = extractor_.region();
  }
  emitted_[c] = 1;
  emitted_in_region_[c] = 1;
  prev_[2] = prev_[1];
  prev_[1] = prev_[0];
  prev_[0] = token;
  ++length_;
  dirty_ = true;
}

const std::vector<std::uint32_t>& FeatureContext::candidate_features() const {
  if (dirty_) refresh();
  return candidate_features_;
}

const std::vector<std::uint32_t>& FeatureContext::state_features() const {
  if (dirty_) refresh();
  return state_features_;
}

void FeatureContext::refresh() const {
  using TC = FeatureModel::TokenClass;
  const FeatureModel& model = *model_;
  const std::size_t n = model.vocab().size();
  const std::uint64_t mask = model.mask();
  const Region region = extractor_.region();
  const bool closed = extractor_.region_closed();
  const bool open_belief = region == Region::kBelief && !closed;
  const bool open_system = (region == Region::kAct || region == Region::kResponse) && !closed;
  const int reg = region_code(region, closed);
  const TokenId p1 = prev_[0], p2 = prev_[1], p3 = prev_[2];

  // Belief-side summaries.
  int cur_domain = open_belief ? model.domain_index(extractor_.pending_domain()) : -1;
  const std::string& pending_slot = extractor_.pending_slot();
  const bool slot_open = open_belief && !pending_slot.empty();
  std::vector<std::pair<TokenId, std::uint32_t>> extensions;
  bool pending_complete = false;
  int pending_entry = -1;
  if (slot_open && cur_domain >= 0) {
    for (std::size_t k = 0; k < model.slot_values_.size(); ++k) {
      const auto& sv = model.slot_values_[k];
      if (sv.domain == cur_domain && sv.slot == pending_slot) pending_entry = static_cast<int>(k);
    }
  }
  if (pending_entry >= 0) {
    const auto& sv = model.slot_values_[static_cast<std::size_t>(pending_entry)];
    const auto& buffer = extractor_.pending_value();
    std::vector<TokenId> buffer_ids;
    for (const auto& t : buffer) buffer_ids.push_back(model.vocab().id(t));
    std::size_t len = buffer_ids.size();
    for (std::size_t v = 0; v < sv.values.size(); ++v) {
      const auto& value = sv.values[v];
      if (value.size() < len || !std::equal(buffer_ids.begin(), buffer_ids.end(), value.begin())) {
        continue;
      }
      if (value.size() == len) {
        pending_complete = len > 0;
        continue;
      }
      std::uint32_t bits = 1u |
                           (user_value_hits_[static_cast<std::size_t>(pending_entry)][v] ? 2u : 0u) |
                           (prev_value_index_[static_cast<std::size_t>(pending_entry)] ==
                                    static_cast<int>(v)
                                ? 4u
                                : 0u) |
                           (value.size() == len + 1 ? 8u : 0u);
      extensions.emplace_back(value[len], bits);
    }
  }
  bool remaining_slots = false;
  if (cur_domain >= 0) {
    for (std::size_t k = 0; k < model.slot_values_.size(); ++k) {
      const auto& sv = model.slot_values_[k];
      if (sv.domain != cur_domain) continue;
      bool cued = (user_slot_cue_[k] && cur_domain == turn_domain_) || prev_value_index_[k] >= 0;
      TokenId slot_id = model.vocab().id(sv.slot);
      int rank = slot_id == kNoToken ? -1 : model.slot_rank_[static_cast<std::size_t>(slot_id)];
      bool done = std::find(block_slots_.begin(), block_slots_.end(), rank) != block_slots_.end();
      if (cued && !done) remaining_slots = true;
    }
  }
  bool remaining_domains = false;
  for (std::size_t d = 0; d < prev_domain_.size(); ++d) {
    bool wanted = prev_domain_[d] || (static_cast<int>(d) == turn_domain_ && (user_flags_ & 1u));
    if (wanted && !belief_domains_[d]) remaining_domains = true;
  }

  // System-side summaries.
  const std::string& active = extractor_.active_domain();
  bool pending_req = false;
  if (open_system) {
    for (const auto& slot : requested_cues_) {
      if (!model.schema().is_requestable(active, slot)) continue;
      TokenId ph = model.vocab().id(make_placeholder(slot));
      if (ph == kNoToken || !emitted_in_region_[static_cast<std::size_t>(ph)]) pending_req = true;
    }
  }
  const std::uint32_t remaining_bits = (remaining_slots ? 1u : 0u) |
                                       (remaining_domains ? 2u : 0u) |
                                       (pending_complete ? 4u : 0u) | (slot_open ? 8u : 0u);

  auto bits_for = [&](std::size_t c) -> std::uint32_t {
    TC cls = model.classes_[c];
    if (open_belief) {
      if (cls == TC::kSlot) {
        if (cur_domain < 0 || !model.schema().is_informable(extractor_.pending_domain(),
                                                             model.slot_name_[c])) {
          return 0x80u;
        }
        std::size_t k = 0;
        for (; k < model.slot_values_.size(); ++k) {
          const auto& sv = model.slot_values_[k];
          if (sv.domain == cur_domain && sv.slot == model.slot_name_[c]) break;
        }
        int rank = model.slot_rank_[c];
        bool in_block = std::find(block_slots_.begin(), block_slots_.end(), rank) != block_slots_.end();
        return 1u | ((user_slot_cue_[k] && cur_domain == turn_domain_) ? 2u : 0u) |
               (prev_value_index_[k] >= 0 ? 4u : 0u) | (in_block ? 8u : 0u) |
               (rank > last_slot_rank_ ? 16u : 0u) | (pending_complete ? 32u : 0u) |
               (slot_open ? 0u : 64u);
      }
      if (cls == TC::kDomain) {
        int d = model.bracket_domain_[c];
        if (d < 0) return 0x100u;
        auto du = static_cast<std::size_t>(d);
        return 1u | (d == turn_domain_ ? 2u : 0u) | (prev_domain_[du] ? 4u : 0u) |
               (belief_domains_[du] ? 8u : 0u) | (d > last_domain_ ? 16u : 0u) |
               (pending_complete ? 32u : 0u) | (slot_open ? 0u : 64u) |
               ((d == turn_domain_ && (user_flags_ & 1u)) ? 128u : 0u);
      }
      if (static_cast<TokenId>(c) == model.eos_belief_) return 0x200u | remaining_bits;
      if (slot_open) {
        for (const auto& [id, bits] : extensions) {
          if (static_cast<std::size_t>(id) == c) return 0x400u | bits;
        }
        return 0x400u;
      }
      return 0;
    }
    if (open_system) {
      if (cls == TC::kPlaceholder) {
        const std::string& slot = model.slot_name_[c];
        bool cue = std::find(requested_cues_.begin(), requested_cues_.end(), slot) !=
                   requested_cues_.end();
        return 1u | (cue ? 2u : 0u) | (emitted_in_region_[c] ? 4u : 0u) |
               (model.schema().is_requestable(active, slot) ? 8u : 0u) |
               (pending_req ? 16u : 0u);
      }
      if (cls == TC::kNamePlaceholder) return 0x40u | (emitted_in_region_[c] ? 4u : 0u);
      if (cls == TC::kDomain) {
        return 0x80u | (model.bracket_domain_[c] == turn_domain_ ? 2u : 0u) |
               (emitted_in_region_[c] ? 4u : 0u);
      }
      if (cls == TC::kMarker) return 0x100u | (pending_req ? 2u : 0u);
    }
    return 0;
  };

  const std::uint64_t k_bias = key(1);
  const std::uint64_t k_uni = key(2, p1);
  const std::uint64_t k_bi = key(3, p2, p1);
  const std::uint64_t k_tri = key(4, p3, p2, p1);
  const std::uint64_t k_reg = key(5, reg);
  const std::uint64_t k_flags = key(6, user_flags_, p1);
  const std::uint64_t k_req = key(7, pending_req, reg, p1);
  const std::uint64_t k_ind = key(8, reg);
  const std::uint64_t k_cls = key(9, reg);
  const std::uint64_t k_bits = key(10);
  const int p1_class = p1 == kNoToken ? -1 : static_cast<int>(model.classes_[static_cast<std::size_t>(p1)]);
  const std::uint64_t k_trans = key(11, p1_class, reg);
  const std::uint64_t k_dom = key(12, turn_domain_, reg);

  candidate_features_.resize(n * FeatureModel::kFeaturesPerCandidate);
  for (std::size_t c = 0; c < n; ++c) {
    auto cid = static_cast<std::int64_t>(c);
    auto cls = static_cast<std::int64_t>(model.classes_[c]);
    std::uint32_t bits = bits_for(c);
    std::uint32_t ind = in_user_[c] | (in_prev_belief_[c] << 1) | (in_prev_user_[c] << 2) |
                        (emitted_[c] << 3);
    std::uint32_t* out = &candidate_features_[c * FeatureModel::kFeaturesPerCandidate];
    out[0] = static_cast<std::uint32_t>(combine(k_bias, cid) & mask);
    out[1] = static_cast<std::uint32_t>(combine(k_uni, cid) & mask);
    out[2] = static_cast<std::uint32_t>(combine(k_bi, cid) & mask);
    out[3] = static_cast<std::uint32_t>(combine(k_tri, cid) & mask);
    out[4] = static_cast<std::uint32_t>(combine(k_reg, cid) & mask);
    out[5] = static_cast<std::uint32_t>(combine(k_flags, cid) & mask);
    out[6] = static_cast<std::uint32_t>(combine(k_req, cid) & mask);
    out[7] = static_cast<std::uint32_t>(combine(combine(k_ind, cls), ind) & mask);
    out[8] = static_cast<std::uint32_t>(combine(combine(k_cls, cls), bits) & mask);
    out[9] = static_cast<std::uint32_t>(combine(combine(k_bits, bits), cid) & mask);
    out[10] = static_cast<std::uint32_t>(combine(k_trans, cls) & mask);
    out[11] = static_cast<std::uint32_t>(combine(k_dom, cid) & mask);
  }

  state_features_.resize(FeatureModel::kStateFeatures);
  state_features_[0] = static_cast<std::uint32_t>(key(50, reg) & mask);
  state_features_[1] = static_cast<std::uint32_t>(key(51, reg, p1) & mask);
  state_features_[2] = static_cast<std::uint32_t>(key(52, user_flags_, reg) & mask);
  state_features_[3] = static_cast<std::uint32_t>(key(53, pending_req, reg) & mask);
  state_features_[4] = static_cast<std::uint32_t>(key(54, remaining_bits, reg) & mask);
  state_features_[5] = static_cast<std::uint32_t>(key(55, std::min<std::size_t>(length_, 63) / 4) & mask);
  state_features_[6] = static_cast<std::uint32_t>(key(56) & mask);
  state_features_[7] = static_cast<std::uint32_t>(key(57, reg, p2, p1) & mask);
  dirty_ = false;
}

// ---------------------------------------------------------------------------
// Distributions and sampling

std::vector<double> action_scores(const PolicySnapshot& snapshot, const FeatureContext& ctx) {
  return scores_from_features(snapshot, ctx.candidate_features());
}

std::vector<double> scores_from_features(const PolicySnapshot& snapshot,
                                         std::span<const std::uint32_t> features) {
  constexpr std::size_t F = FeatureModel::kFeaturesPerCandidate;
  const std::size_t n = features.size() / F;
  std::vector<double> scores(n, 0.0);
  const double* w = snapshot.policy_weights.data();
  for (std::size_t c = 0; c < n; ++c) {
    const std::uint32_t* f = &features[c * F];
    double s = 0.0;
    for (std::size_t k = 0; k < F; ++k) s += w[f[k]];
    scores[c] = s;
  }
  return scores;
}

std::vector<double> softmax(std::span<const double> scores, const std::vector<TokenId>* mask) {
  std::vector<double> probs(scores.size(), 0.0);
  if (mask != nullptr) {
    if (mask->empty()) throw ConfigError("action mask is empty");
    double top = -std::numeric_limits<double>::infinity();
    for (TokenId id : *mask) top = std::max(top, scores[static_cast<std::size_t>(id)]);
    double z = 0.0;
    for (TokenId id : *mask) {
      double e = std::exp(scores[static_cast<std::size_t>(id)] - top);
      probs[static_cast<std::size_t>(id)] = e;
      z += e;
    }
    for (TokenId id : *mask) probs[static_cast<std::size_t>(id)] /= z;
    return probs;
  }
  double top = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    probs[i] = std::exp(scores[i] - top);
    z += probs[i];
  }
  for (double& p : probs) p /= z;
  return probs;
}

std::vector<double> action_distribution(const PolicySnapshot& snapshot, const FeatureContext& ctx,
                                        const std::vector<TokenId>* mask) {
  auto scores = action_scores(snapshot, ctx);
  return softmax(scores, mask);
}

std::vector<double> action_distribution(const PolicySnapshot& snapshot, const FeatureModel& model,
                                        const EpisodeState& state,
                                        const std::vector<TokenId>* mask) {
  if (state.done) throw ValidationError("episode is already done");
  FeatureContext ctx(model, state);
  return action_distribution(snapshot, ctx, mask);
}

double state_value(const PolicySnapshot& snapshot, const FeatureContext& ctx) {
  return value_from_features(snapshot, ctx.state_features());
}

double value_from_features(const PolicySnapshot& snapshot,
                           std::span<const std::uint32_t> state_features) {
  double v = 0.0;
  for (std::uint32_t f : state_features) v += snapshot.value_weights[f];
  return v;
}

void SamplingConfig::validate() const {
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
}

std::vector<double> truncated_distribution(std::span<const double> scores,
                                           const SamplingConfig& config,
                                           const std::vector<TokenId>* mask) {
  config.validate();
  std::vector<double> scaled(scores.begin(), scores.end());
  for (double& s : scaled) s /= config.temperature;
  std::vector<double> probs = softmax(scaled, mask);

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  if (order.size() > static_cast<std::size_t>(config.top_k)) {
    order.resize(static_cast<std::size_t>(config.top_k));
  }
  double kept = 0.0;
  for (std::size_t i : order) kept += probs[i];
  std::size_t keep = order.size();
  if (config.top_p < 1.0) {
    double cumulative = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      cumulative += probs[order[r]] / kept;
      if (cumulative >= config.top_p) {
        keep = r + 1;
        break;
      }
    }
  }
  std::vector<double> out(probs.size(), 0.0);
  double z = 0.0;
  for (std::size_t r = 0; r < keep; ++r) z += probs[order[r]];
  for (std::size_t r = 0; r < keep; ++r) out[order[r]] = probs[order[r]] / z;
  return out;
}

SampledAction sample_from_scores(std::span<const double> scores, const SamplingConfig& config,
                                 Rng& rng, const std::vector<TokenId>* mask) {
  std::vector<double> probs = truncated_distribution(scores, config, mask);
  double u = rng.unit();
  double cumulative = 0.0;
  std::size_t last = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last = i;
    cumulative += probs[i];
    if (u < cumulative) return {static_cast<TokenId>(i), std::log(probs[i])};
  }
  // Rounding left u above the final cumulative mass.
  return {static_cast<TokenId>(last), std::log(probs[last])};
}

SampledAction sample_action(const PolicySnapshot& snapshot, const FeatureContext& ctx,
                            const SamplingConfig& config, Rng& rng,
                            const std::vector<TokenId>* mask) {
  auto scores = action_scores(snapshot, ctx);
  return sample_from_scores(scores, config, rng, mask);
}

std::vector<std::string> decode_turn(const PolicySnapshot& snapshot, const FeatureModel& model,
                                     EpisodeState state, const DecodeConfig& config, Rng& rng) {
  FeatureContext ctx(model, state);
  while (!state.done) {
    TokenId token;
    if (config.mode == DecodeMode::kGreedy) {
      auto scores = action_scores(snapshot, ctx);
      token = static_cast<TokenId>(std::max_element(scores.begin(), scores.end()) - scores.begin());
    } else {
      token = sample_action(snapshot, ctx, config.sampling, rng).token;
    }
    ctx.push(token);
    state = env_step(std::move(state), model.vocab().token(token)).state;
  }
  return state.output;
}

// ---------------------------------------------------------------------------
// Gradients and supervised training

void SparseGradient::apply_and_clear(std::vector<double>& weights, double scale) {
  for (std::uint32_t i : touched_) {
    weights[i] += scale * dense_[i];
    dense_[i] = 0.0;
  }
  touched_.clear();
}

void SparseGradient::clear() {
  for (std::uint32_t i : touched_) dense_[i] = 0.0;
  touched_.clear();
}

bool SparseGradient::finite() const {
  return std::all_of(touched_.begin(), touched_.end(),
                     [&](std::uint32_t i) { return std::isfinite(dense_[i]); });
}

void accumulate_logprob_gradient(const FeatureContext& ctx, std::span<const double> probs,
                                 TokenId action, double scale, SparseGradient& grad) {
  accumulate_logprob_gradient(ctx.candidate_features(), probs, action, scale, grad);
}

void accumulate_logprob_gradient(std::span<const std::uint32_t> features,
                                 std::span<const double> probs, TokenId action, double scale,
                                 SparseGradient& grad) {
  constexpr std::size_t F = FeatureModel::kFeaturesPerCandidate;
  const std::uint32_t* fa = &features[static_cast<std::size_t>(action) * F];
  for (std::size_t k = 0; k < F; ++k) grad.add(fa[k], scale);
  for (std::size_t c = 0; c < probs.size(); ++c) {
    if (probs[c] == 0.0) continue;
    const std::uint32_t* fc = &features[c * F];
    double s = -scale * probs[c];
    for (std::size_t k = 0; k < F; ++k) grad.add(fc[k], s);
  }
}

std::vector<SftExample> sft_examples(const std::vector<Dialogue>& dialogues,
                                     const DialogueSchema& schema, std::size_t max_length) {
  std::vector<SftExample> out;
  for (const auto& d : dialogues) {
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      SftExample ex{reset_episode(d, t, schema, max_length), gold_output(d.turns[t], schema)};
      if (ex.target.size() > max_length) ex.target.resize(max_length);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

double example_nll(const PolicySnapshot& snapshot, const FeatureModel& model,
                   const SftExample& example, SparseGradient* grad) {
  if (example.target.empty()) return 0.0;
  FeatureContext ctx(model, example.state);
  const double inv = 1.0 / static_cast<double>(example.target.size());
  double nll = 0.0;
  for (const auto& token : example.target) {
    TokenId a = model.vocab().id(token);
    if (a == kNoToken) throw ValidationError("target token '" + token + "' is not in the vocabulary");
    auto probs = action_distribution(snapshot, ctx);
    nll -= std::log(probs[static_cast<std::size_t>(a)]);
    if (grad != nullptr) accumulate_logprob_gradient(ctx, probs, a, inv, *grad);
    ctx.push(a);
  }
  return nll * inv;
}

SftResult sft_train(const std::vector<SftExample>& examples, const FeatureModel& model,
                    PolicySnapshot initial, const SftConfig& config) {
  if (examples.empty()) throw ConfigError("sft: empty corpus");
  SftResult result{std::move(initial), {}};
  PolicySnapshot& snapshot = result.snapshot;
  SparseGradient grad(snapshot.policy_weights.size());
  Rng rng(config.seed);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    // Linear decay to a tenth of the base rate over the run.
    double progress = config.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(config.epochs - 1) : 0.0;
    double lr = config.learning_rate * (1.0 - 0.9 * progress);
    double total = 0.0;
    std::size_t tokens = 0;
    for (std::size_t i : order) {
      const SftExample& ex = examples[i];
      double nll = example_nll(snapshot, model, ex, &grad);
      if (!std::isfinite(nll) || !grad.finite()) {
        throw TrainingError("sft: non-finite loss in epoch " + std::to_string(epoch) +
                            " at example " + std::to_string(i) + " (nll=" + std::to_string(nll) +
                            ")");
      }
      total += nll * static_cast<double>(ex.target.size());
      tokens += ex.target.size();
      grad.apply_and_clear(snapshot.policy_weights, lr);
    }
    result.epoch_nll.push_back(tokens == 0 ? 0.0 : total / static_cast<double>(tokens));
  }
  if (config.epochs > 0) ++snapshot.version;
  return result;
}

}  // namespace todrl
