#include "todrl/linearizer.hpp"

#include <algorithm>
#include <map>

#include "todrl/errors.hpp"
#include "todrl/text.hpp"

namespace todrl {

namespace {

constexpr std::string_view kPlaceholderPrefix = "[value_";

bool is_bracketed(std::string_view token) {
  return token.size() > 2 && token.front() == '[' && token.back() == ']';
}

}  // namespace

std::string_view region_name(Region region) {
  switch (region) {
    case Region::kPending:
      return "PENDING";
    case Region::kBelief:
      return "BELIEF";
    case Region::kAct:
      return "ACT";
    case Region::kResponse:
      return "RESPONSE";
    case Region::kDone:
      return "DONE";
  }
  return "UNKNOWN";
}

bool is_marker(std::string_view token) {
  return token == markers::kSosBelief || token == markers::kEosBelief ||
         token == markers::kSosAct || token == markers::kEosAct ||
         token == markers::kSosResponse || token == markers::kEosResponse;
}

bool is_act(std::string_view token) {
  return token == acts::kInform || token == acts::kRequest || token == acts::kOffer;
}

std::optional<std::string> bracket_domain(std::string_view token) {
  if (!is_bracketed(token) || is_act(token) || token.starts_with(kPlaceholderPrefix)) {
    return std::nullopt;
  }
  return std::string(token.substr(1, token.size() - 2));
}

std::optional<std::string> placeholder_slot(std::string_view token) {
  if (!is_bracketed(token) || !token.starts_with(kPlaceholderPrefix) ||
      token.size() == kPlaceholderPrefix.size() + 1) {
    return std::nullopt;
  }
  return std::string(token.substr(kPlaceholderPrefix.size(),
                                  token.size() - kPlaceholderPrefix.size() - 1));
}

std::string make_placeholder(std::string_view slot) {
  return std::string(kPlaceholderPrefix) + std::string(slot) + "]";
}

std::vector<std::string> serialize_belief(const BeliefSet& triples) {
  // BeliefSet is ordered by (domain, slot, value) already.
  std::vector<std::string> out{std::string(markers::kSosBelief)};
  const std::string* current = nullptr;
  for (const auto& t : triples) {
    if (current == nullptr || *current != t.domain) {
      out.push_back("[" + t.domain + "]");
      current = &t.domain;
    }
    out.push_back(t.slot);
    for (auto& v : split_tokens(t.value)) out.push_back(std::move(v));
  }
  out.emplace_back(markers::kEosBelief);
  return out;
}

BeliefParse parse_belief(std::span<const std::string> tokens, const DialogueSchema& schema) {
  if (tokens.size() < 2 || tokens.front() != markers::kSosBelief ||
      tokens.back() != markers::kEosBelief) {
    throw ParseError("belief span must be delimited by <sos_b> ... <eos_b>");
  }
  BeliefParse result;
  auto body = tokens.subspan(1, tokens.size() - 2);

  // Cut the body into domain blocks, then each block into slot runs.
  std::size_t i = 0;
  while (i < body.size()) {
    auto domain = bracket_domain(body[i]);
    if (!domain || !schema.has_domain(*domain) || is_marker(body[i])) {
      result.malformed = true;
      return result;
    }
    std::size_t end = i + 1;
    while (end < body.size() && !bracket_domain(body[end]) && !is_marker(body[end])) ++end;
    auto block = body.subspan(i + 1, end - i - 1);

    std::vector<std::size_t> slot_positions;
    for (std::size_t k = 0; k < block.size(); ++k) {
      if (schema.is_informable(*domain, block[k])) slot_positions.push_back(k);
    }
    if (!block.empty() && (slot_positions.empty() || slot_positions.front() != 0)) {
      result.malformed = true;
      return result;
    }
    // A stray marker cuts the block; its last run never terminated.
    bool cut = end < body.size() && is_marker(body[end]);
    std::size_t runs = slot_positions.size();
    if (cut && runs > 0) --runs;
    for (std::size_t s = 0; s < runs; ++s) {
      std::size_t from = slot_positions[s] + 1;
      std::size_t to = s + 1 < slot_positions.size() ? slot_positions[s + 1] : block.size();
      if (from == to) {
        result.malformed = true;
        return result;
      }
      result.triples.insert({*domain, block[slot_positions[s]],
                             join_tokens(block.subspan(from, to - from))});
    }
    if (cut) {
      result.malformed = true;
      return result;
    }
    i = end;
  }
  return result;
}

RequestSet collect_placeholders(std::span<const std::string> act_tokens,
                                std::span<const std::string> response_tokens,
                                std::string_view default_domain, const DialogueSchema& schema) {
  RequestSet out;
  std::string domain(default_domain);
  for (const auto& token : act_tokens) {
    if (auto d = bracket_domain(token)) {
      domain = *d;
    } else if (auto slot = placeholder_slot(token); slot && schema.is_requestable(domain, *slot)) {
      out.insert({domain, *slot});
    }
  }
  for (const auto& token : response_tokens) {
    if (auto slot = placeholder_slot(token); slot && schema.is_requestable(domain, *slot)) {
      out.insert({domain, *slot});
    }
  }
  return out;
}

OutputSpans split_output(std::span<const std::string> tokens) {
  OutputSpans spans;
  std::vector<std::string>* current = nullptr;
  for (const auto& t : tokens) {
    if (t == markers::kSosBelief) {
      current = &spans.belief;
    } else if (t == markers::kSosAct) {
      current = &spans.acts;
    } else if (t == markers::kSosResponse) {
      current = &spans.response;
    }
    if (current != nullptr) current->push_back(t);
    if (t == markers::kEosBelief || t == markers::kEosAct || t == markers::kEosResponse) {
      current = nullptr;
    }
  }
  return spans;
}

ExtractorState::ExtractorState(std::string default_domain)
    : default_domain_(std::move(default_domain)), active_domain_(default_domain_) {}

Completion ExtractorState::advance(std::string_view token, const DialogueSchema& schema) {
  Completion out;
  if (region_ == Region::kDone) return out;
  if (is_marker(token)) {
    handle_marker(token, schema, out);
    return out;
  }
  if (region_ == Region::kPending || closed_) {
    // Content outside any open region.
    malformed_ = true;
    return out;
  }
  if (malformed_) return out;
  if (region_ == Region::kBelief) {
    handle_belief(token, schema, out);
  } else {
    handle_system(token, schema, out);
  }
  return out;
}

void ExtractorState::handle_marker(std::string_view token, const DialogueSchema& schema,
                                   Completion& out) {
  bool legal = false;
  if (token == markers::kSosBelief) {
    legal = region_ == Region::kPending;
    if (legal) region_ = Region::kBelief;
  } else if (token == markers::kEosBelief) {
    legal = region_ == Region::kBelief && !closed_;
    if (legal && !malformed_) flush_pending(out);
  } else if (token == markers::kSosAct) {
    legal = schema.has_dialogue_acts() && region_ == Region::kBelief && closed_;
    if (legal) region_ = Region::kAct;
  } else if (token == markers::kEosAct) {
    legal = region_ == Region::kAct && !closed_;
  } else if (token == markers::kSosResponse) {
    Region before = schema.has_dialogue_acts() ? Region::kAct : Region::kBelief;
    legal = region_ == before && closed_;
    if (legal) region_ = Region::kResponse;
  } else if (token == markers::kEosResponse) {
    legal = region_ == Region::kResponse && !closed_;
    if (legal) region_ = Region::kDone;
  }
  if (!legal) {
    malformed_ = true;
    return;
  }
  // Start markers open a region, end markers close it.
  closed_ = token == markers::kEosBelief || token == markers::kEosAct;
}

void ExtractorState::flush_pending(Completion& out) {
  if (pending_slot_.empty()) return;
  if (pending_value_.empty()) {
    malformed_ = true;
    return;
  }
  SlotValue triple{pending_domain_, pending_slot_, join_tokens(pending_value_)};
  pending_slot_.clear();
  pending_value_.clear();
  if (sv_hat_.insert(triple).second) out.triples.push_back(std::move(triple));
}

void ExtractorState::handle_belief(std::string_view token, const DialogueSchema& schema,
                                   Completion& out) {
  if (auto domain = bracket_domain(token)) {
    flush_pending(out);
    if (malformed_) return;
    if (!schema.has_domain(*domain)) {
      malformed_ = true;
      return;
    }
    pending_domain_ = *domain;
    return;
  }
  if (!pending_domain_.empty() && schema.is_informable(pending_domain_, token)) {
    flush_pending(out);
    if (malformed_) return;
    pending_slot_ = std::string(token);
    return;
  }
  if (pending_slot_.empty()) {
    // Value text without a slot, or anything before the first domain.
    malformed_ = true;
    return;
  }
  pending_value_.emplace_back(token);
}

void ExtractorState::handle_system(std::string_view token, const DialogueSchema& schema,
                                   Completion& out) {
  if (region_ == Region::kAct) {
    if (auto domain = bracket_domain(token)) {
      active_domain_ = *domain;
      return;
    }
  }
  auto slot = placeholder_slot(token);
  if (!slot || !schema.is_requestable(active_domain_, *slot)) return;
  DomainSlot item{active_domain_, *slot};
  if (s_hat_.insert(item).second) out.requests.push_back(std::move(item));
}

FeedResult feed(ExtractorState state, std::string_view token, const DialogueSchema& schema) {
  Completion completed = state.advance(token, schema);
  return {std::move(state), std::move(completed)};
}

}  // namespace todrl
