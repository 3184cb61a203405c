#ifndef TODRL_LINEARIZER_HPP_
#define TODRL_LINEARIZER_HPP_

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "todrl/schema.hpp"

namespace todrl {

namespace markers {
inline constexpr std::string_view kSosBelief = "<sos_b>";
inline constexpr std::string_view kEosBelief = "<eos_b>";
inline constexpr std::string_view kSosAct = "<sos_a>";
inline constexpr std::string_view kEosAct = "<eos_a>";
inline constexpr std::string_view kSosResponse = "<sos_r>";
inline constexpr std::string_view kEosResponse = "<eos_r>";
}  // namespace markers

namespace acts {
inline constexpr std::string_view kInform = "[inform]";
inline constexpr std::string_view kRequest = "[request]";
inline constexpr std::string_view kOffer = "[offer]";
}  // namespace acts

// Placeholder standing for the offered entity's name.
inline constexpr std::string_view kNamePlaceholder = "[value_name]";

enum class Region { kPending, kBelief, kAct, kResponse, kDone };

std::string_view region_name(Region region);

bool is_marker(std::string_view token);
bool is_act(std::string_view token);
// "[restaurant]" -> "restaurant"; acts and placeholders are not domain brackets.
std::optional<std::string> bracket_domain(std::string_view token);
// "[value_phone]" -> "phone".
std::optional<std::string> placeholder_slot(std::string_view token);
std::string make_placeholder(std::string_view slot);

// Canonical belief span: `<sos_b> [d1] s1 v1 s2 v2 [d2] ... <eos_b>`, domains
// and slots in lexicographic order.
std::vector<std::string> serialize_belief(const BeliefSet& triples);

struct BeliefParse {
  BeliefSet triples;
  bool malformed = false;

  friend bool operator==(const BeliefParse&, const BeliefParse&) = default;
};

// Inverse of serialize_belief. `tokens` must start with <sos_b> and end with
// <eos_b> (ParseError otherwise). Parsing stops at the first grammar error and
// keeps the triples completed before it.
BeliefParse parse_belief(std::span<const std::string> tokens, const DialogueSchema& schema);

// Requestable placeholders of act and response spans, attributed to the last
// domain bracket of the act span or to `default_domain`.
RequestSet collect_placeholders(std::span<const std::string> act_tokens,
                                std::span<const std::string> response_tokens,
                                std::string_view default_domain, const DialogueSchema& schema);

// Model output cut at the region markers. Each span keeps its own markers;
// missing spans are empty.
struct OutputSpans {
  std::vector<std::string> belief;
  std::vector<std::string> acts;
  std::vector<std::string> response;
};

OutputSpans split_output(std::span<const std::string> tokens);

struct Completion {
  std::vector<SlotValue> triples;
  std::vector<DomainSlot> requests;

  bool empty() const { return triples.empty() && requests.empty(); }
};

// Incremental extractor for one generated turn. Feeding is strictly ordered;
// sv_hat/s_hat only grow, and malformed is sticky and freezes extraction.
class ExtractorState {
 public:
  ExtractorState() = default;
  explicit ExtractorState(std::string default_domain);

  Region region() const { return region_; }
  bool region_closed() const { return closed_; }
  bool malformed() const { return malformed_; }
  const BeliefSet& sv_hat() const { return sv_hat_; }
  const RequestSet& s_hat() const { return s_hat_; }
  const std::string& pending_domain() const { return pending_domain_; }
  const std::string& pending_slot() const { return pending_slot_; }
  const std::vector<std::string>& pending_value() const { return pending_value_; }
  const std::string& active_domain() const { return active_domain_; }
  const std::string& default_domain() const { return default_domain_; }

  // In-place transition; returns the items completed by `token`.
  Completion advance(std::string_view token, const DialogueSchema& schema);

  friend bool operator==(const ExtractorState&, const ExtractorState&) = default;

 private:
  void handle_marker(std::string_view token, const DialogueSchema& schema, Completion& out);
  void handle_belief(std::string_view token, const DialogueSchema& schema, Completion& out);
  void handle_system(std::string_view token, const DialogueSchema& schema, Completion& out);
  void flush_pending(Completion& out);

  Region region_ = Region::kPending;
  bool closed_ = false;
  bool malformed_ = false;
  std::string default_domain_;
  std::string active_domain_;
  std::string pending_domain_;
  std::string pending_slot_;
  std::vector<std::string> pending_value_;
  BeliefSet sv_hat_;
  RequestSet s_hat_;
};

struct FeedResult {
  ExtractorState state;
  Completion completed;
};

FeedResult feed(ExtractorState state, std::string_view token, const DialogueSchema& schema);

}  // namespace todrl

#endif  // TODRL_LINEARIZER_HPP_
