#include "doctest.h"
#include "fixtures.hpp"
#include "todrl/errors.hpp"
#include "todrl/linearizer.hpp"
#include "todrl/random.hpp"
#include "todrl/text.hpp"

using namespace todrl;

namespace {

const DialogueSchema& S() { return fixtures::toy_schema(); }

std::vector<std::string> T(const char* text) { return split_tokens(text); }

BeliefSet random_belief(Rng& rng) {
  BeliefSet out;
  for (const auto& [domain, spec] : S().domains()) {
    if (!rng.chance(0.5)) continue;
    for (const auto& [slot, values] : spec.informable) {
      if (!rng.chance(0.6)) continue;
      auto it = values.begin();
      std::advance(it, static_cast<long>(rng.index(values.size())));
      out.insert({domain, slot, *it});
    }
  }
  return out;
}

ExtractorState run(const std::vector<std::string>& tokens, std::string domain = "restaurant") {
  ExtractorState st(std::move(domain));
  for (const auto& t : tokens) st.advance(t, S());
  return st;
}

}  // namespace

TEST_CASE("serialize_belief canonical form") {
  CHECK(join_tokens(serialize_belief({{"restaurant", "area", "centre"}})) ==
        "<sos_b> [restaurant] area centre <eos_b>");
  CHECK(join_tokens(serialize_belief({})) == "<sos_b> <eos_b>");
  CHECK(join_tokens(serialize_belief({{"restaurant", "area", "centre"}, {"hotel", "price", "cheap"}})) ==
        "<sos_b> [hotel] price cheap [restaurant] area centre <eos_b>");
  // slots sorted inside a block, multiword values kept whole
  CHECK(join_tokens(serialize_belief({{"restaurant", "price", "cheap"},
                                      {"restaurant", "food", "modern european"}})) ==
        "<sos_b> [restaurant] food modern european price cheap <eos_b>");
}

TEST_CASE("parse_belief") {
  BeliefParse p = parse_belief(T("<sos_b> [restaurant] area centre price cheap <eos_b>"), S());
  CHECK_FALSE(p.malformed);
  CHECK(p.triples == BeliefSet{{"restaurant", "area", "centre"}, {"restaurant", "price", "cheap"}});

  BeliefParse dangling = parse_belief(T("<sos_b> [restaurant] area <eos_b>"), S());
  CHECK(dangling.triples.empty());
  CHECK(dangling.malformed);

  BeliefParse unknown = parse_belief(T("<sos_b> [restaurant] area north [taxi] area centre <eos_b>"), S());
  CHECK(unknown.malformed);
  CHECK(unknown.triples == BeliefSet{{"restaurant", "area", "north"}});

  CHECK_THROWS_AS(parse_belief(T("[restaurant] area centre <eos_b>"), S()), ParseError);
  CHECK_THROWS_AS(parse_belief(T("<sos_b> [restaurant] area centre"), S()), ParseError);

  Rng rng(11);
  for (int i = 0; i < 300; ++i) {
    BeliefSet x = random_belief(rng);
    BeliefParse back = parse_belief(serialize_belief(x), S());
    CHECK_FALSE(back.malformed);
    CHECK(back.triples == x);
  }
}

TEST_CASE("token helpers") {
  CHECK(bracket_domain("[restaurant]") == std::optional<std::string>("restaurant"));
  CHECK_FALSE(bracket_domain("[inform]"));
  CHECK_FALSE(bracket_domain("[value_phone]"));
  CHECK(placeholder_slot("[value_phone]") == std::optional<std::string>("phone"));
  CHECK_FALSE(placeholder_slot("phone"));
  CHECK(make_placeholder("postcode") == "[value_postcode]");
  CHECK(is_marker("<eos_r>"));
  CHECK(is_act("[offer]"));
}

TEST_CASE("feed completes a pair at the next boundary token") {
  ExtractorState st("restaurant");
  for (const char* t : {"<sos_b>", "[restaurant]", "area", "centre"}) {
    auto r = feed(st, t, S());
    CHECK(r.completed.empty());
    st = r.state;
  }
  CHECK(st.pending_value() == std::vector<std::string>{"centre"});
  auto r = feed(st, "price", S());
  REQUIRE(r.completed.triples.size() == 1);
  CHECK(r.completed.triples[0] == SlotValue{"restaurant", "area", "centre"});
  // feed is pure: the input state is untouched
  CHECK(st.sv_hat().empty());
  CHECK(feed(st, "price", S()).state == r.state);
}

TEST_CASE("placeholders and region transitions") {
  ExtractorState st = run(T("<sos_b> <eos_b> <sos_a> [hotel] [inform] [value_phone] <eos_a> <sos_r> "
                            "the number is [value_address]"), "restaurant");
  CHECK(st.region() == Region::kResponse);
  CHECK(st.s_hat() == RequestSet{{"hotel", "address"}, {"hotel", "phone"}});

  auto done = feed(st, "<eos_r>", S());
  CHECK(done.completed.empty());
  CHECK(done.state.region() == Region::kDone);

  // no act bracket: attributed to the default domain
  ExtractorState d = run(T("<sos_b> <eos_b> <sos_a> [inform] <eos_a> <sos_r> [value_phone] <eos_r>"));
  CHECK(d.s_hat() == RequestSet{{"restaurant", "phone"}});

  // not requestable in the domain: ignored, no error
  ExtractorState spurious = run(T("<sos_b> <eos_b> <sos_a> <eos_a> <sos_r> [value_stars] [value_name] <eos_r>"));
  CHECK(spurious.s_hat().empty());
  CHECK_FALSE(spurious.malformed());
}

TEST_CASE("malformed streams are sticky and freeze extraction") {
  ExtractorState st = run(T("<sos_b> [restaurant] area centre <sos_r> [value_phone] price cheap"));
  CHECK(st.malformed());
  CHECK(st.sv_hat().empty());
  CHECK(st.s_hat().empty());

  ExtractorState early = run(T("<sos_a> <sos_b> [restaurant] area centre <eos_b>"));
  CHECK(early.malformed());
  CHECK(early.sv_hat().empty());

  // items completed before the error keep their credit
  ExtractorState later = run(T("<sos_b> [restaurant] area centre price cheap [taxi] <eos_b>"));
  CHECK(later.malformed());
  CHECK(later.sv_hat() == BeliefSet{{"restaurant", "area", "centre"}, {"restaurant", "price", "cheap"}});
}

TEST_CASE("no-act schemas go straight from belief to response") {
  DialogueSchema in_car(S().domains(), false);
  ExtractorState st("hotel");
  for (const auto& t : T("<sos_b> [hotel] area north <eos_b> <sos_r> [value_phone] <eos_r>")) st.advance(t, in_car);
  CHECK_FALSE(st.malformed());
  CHECK(st.region() == Region::kDone);
  CHECK(st.s_hat() == RequestSet{{"hotel", "phone"}});

  ExtractorState bad("hotel");
  for (const auto& t : T("<sos_b> <eos_b> <sos_a>")) bad.advance(t, in_car);
  CHECK(bad.malformed());
}

TEST_CASE("incremental extraction equals batch parsing on well-formed outputs") {
  Rng rng(5);
  std::vector<std::string> words{"the", "number", "is", "[value_phone]", "[value_address]",
                                 "[value_postcode]", "[value_hours]", "[value_parking]"};
  for (int trial = 0; trial < 300; ++trial) {
    BeliefSet b = random_belief(rng);
    std::vector<std::string> out = serialize_belief(b);
    std::vector<std::string> acts{"<sos_a>"};
    if (rng.chance(0.7)) acts.push_back("[" + std::next(S().domains().begin(),
                                                        static_cast<long>(rng.index(3)))->first + "]");
    for (std::size_t k = rng.index(4); k > 0; --k) acts.push_back(rng.pick(words));
    acts.push_back("<eos_a>");
    std::vector<std::string> resp{"<sos_r>"};
    for (std::size_t k = rng.index(6); k > 0; --k) resp.push_back(rng.pick(words));
    resp.push_back("<eos_r>");
    out.insert(out.end(), acts.begin(), acts.end());
    out.insert(out.end(), resp.begin(), resp.end());

    ExtractorState st = run(out, "attraction");
    std::size_t prev_sv = 0, prev_s = 0;
    ExtractorState mono("attraction");
    for (const auto& t : out) {
      mono.advance(t, S());
      CHECK(mono.sv_hat().size() >= prev_sv);
      CHECK(mono.s_hat().size() >= prev_s);
      prev_sv = mono.sv_hat().size();
      prev_s = mono.s_hat().size();
    }
    OutputSpans spans = split_output(out);
    CHECK_FALSE(st.malformed());
    CHECK(st.sv_hat() == parse_belief(spans.belief, S()).triples);
    CHECK(st.s_hat() == collect_placeholders(spans.acts, spans.response, "attraction", S()));
  }
}

TEST_CASE("split_output keeps markers per span") {
  OutputSpans s = split_output(T("<sos_b> [hotel] area north <eos_b> <sos_a> [inform] <eos_a> <sos_r> ok <eos_r>"));
  CHECK(join_tokens(s.belief) == "<sos_b> [hotel] area north <eos_b>");
  CHECK(join_tokens(s.acts) == "<sos_a> [inform] <eos_a>");
  CHECK(join_tokens(s.response) == "<sos_r> ok <eos_r>");
  CHECK(split_output(T("<sos_b> [hotel]")).acts.empty());
}
