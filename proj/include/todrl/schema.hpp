#ifndef TODRL_SCHEMA_HPP_
#define TODRL_SCHEMA_HPP_

#include <compare>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace todrl {

// One informable constraint, e.g. (restaurant, area, centre).
struct SlotValue {
  std::string domain;
  std::string slot;
  std::string value;

  auto operator<=>(const SlotValue&) const = default;
};

// One requestable attribute, e.g. (restaurant, phone).
struct DomainSlot {
  std::string domain;
  std::string slot;

  auto operator<=>(const DomainSlot&) const = default;
};

using BeliefSet = std::set<SlotValue>;
using RequestSet = std::set<DomainSlot>;

struct DomainSpec {
  std::map<std::string, std::set<std::string, std::less<>>, std::less<>> informable;
  std::set<std::string, std::less<>> requestable;

  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

using DomainMap = std::map<std::string, DomainSpec, std::less<>>;

class DialogueSchema {
 public:
  DialogueSchema() = default;
  // Throws ValidationError when an invariant does not hold.
  DialogueSchema(DomainMap domains, bool has_dialogue_acts);

  const DomainMap& domains() const { return domains_; }
  bool has_dialogue_acts() const { return has_dialogue_acts_; }

  bool has_domain(std::string_view domain) const;
  // Throws NotFoundError for unknown domains.
  const DomainSpec& domain(std::string_view domain) const;

  bool is_informable(std::string_view domain, std::string_view slot) const;
  bool is_requestable(std::string_view domain, std::string_view slot) const;
  bool allows(std::string_view domain, std::string_view slot, std::string_view value) const;

  friend bool operator==(const DialogueSchema&, const DialogueSchema&) = default;

 private:
  DomainMap domains_;
  bool has_dialogue_acts_ = true;
};

// Parses and validates a schema JSON document.
// Throws ParseError on malformed JSON, ValidationError on invariant violations.
DialogueSchema load_schema(std::string_view document);
DialogueSchema load_schema_file(const std::string& path);
std::string serialize_schema(const DialogueSchema& schema);

struct Entity {
  std::string name;
  std::map<std::string, std::string> slots;

  friend bool operator==(const Entity&, const Entity&) = default;
};

class EntityDatabase {
 public:
  EntityDatabase() = default;
  // Entities are validated against `schema` and sorted by name.
  EntityDatabase(std::map<std::string, std::vector<Entity>, std::less<>> entities,
                 const DialogueSchema& schema);

  const std::map<std::string, std::vector<Entity>, std::less<>>& entities() const { return entities_; }
  const std::vector<Entity>& domain(std::string_view domain) const;

 private:
  std::map<std::string, std::vector<Entity>, std::less<>> entities_;
};

EntityDatabase load_database(std::string_view document, const DialogueSchema& schema);
EntityDatabase load_database_file(const std::string& path, const DialogueSchema& schema);
std::string serialize_database(const EntityDatabase& db);

using Constraints = std::vector<std::pair<std::string, std::string>>;

// Entities of `domain` matching every (slot, value) constraint, ordered by name.
// Throws NotFoundError for an unknown domain and ValidationError when a
// constraint is not allowed by the schema.
std::vector<Entity> lookup_entities(const EntityDatabase& db, const DialogueSchema& schema,
                                    std::string_view domain, const Constraints& constraints);

// Ground truth of one turn: informable triples and requested attributes.
struct TurnGoal {
  BeliefSet sv_gt;
  RequestSet s_gt;

  friend bool operator==(const TurnGoal&, const TurnGoal&) = default;
};

// A gold turn after its belief span has been parsed.
struct AnnotatedTurn {
  std::string domain;
  BeliefSet belief;
  std::vector<std::string> requests;
};

// User goal of a whole dialogue: constraints and requested attributes per domain.
struct DialogueGoal {
  std::map<std::string, std::map<std::string, std::string>> constraints;
  std::map<std::string, std::set<std::string>> requests;

  BeliefSet constraint_triples() const;
  RequestSet request_pairs() const;
  std::set<std::string> domains() const;

  friend bool operator==(const DialogueGoal&, const DialogueGoal&) = default;
};

TurnGoal derive_turn_goal(const AnnotatedTurn& turn, const DialogueSchema& schema);

}  // namespace todrl

#endif  // TODRL_SCHEMA_HPP_
