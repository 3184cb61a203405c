#include "todrl/schema.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "todrl/errors.hpp"
#include "todrl/text.hpp"

namespace todrl {

using nlohmann::json;

namespace {

// nlohmann keeps the last of duplicated object keys; schemas must reject them.
json parse_strict(std::string_view document, std::string_view what) {
  std::vector<std::set<std::string>> keys;
  std::string duplicate;
  json::parser_callback_t cb = [&](int /*depth*/, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        keys.emplace_back();
        break;
      case json::parse_event_t::object_end:
        if (!keys.empty()) keys.pop_back();
        break;
      case json::parse_event_t::key:
        if (!keys.empty() && !keys.back().insert(parsed.get<std::string>()).second &&
            duplicate.empty()) {
          duplicate = parsed.get<std::string>();
        }
        break;
      default:
        break;
    }
    return true;
  };
  json doc;
  try {
    doc = json::parse(document.begin(), document.end(), cb);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string(what) + ": malformed document at byte " +
                     std::to_string(e.byte) + ": " + e.what());
  }
  if (!duplicate.empty()) {
    throw ValidationError(std::string(what) + ": duplicate key '" + duplicate + "'");
  }
  return doc;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_identifier(std::string_view id, std::string_view what) {
  if (!is_identifier(id)) {
    throw ValidationError(std::string(what) + " '" + std::string(id) +
                          "' must be lowercase without whitespace");
  }
}

}  // namespace

DialogueSchema::DialogueSchema(DomainMap domains, bool has_dialogue_acts)
    : domains_(std::move(domains)), has_dialogue_acts_(has_dialogue_acts) {
  if (domains_.empty()) throw ValidationError("schema: at least one domain is required");
  for (const auto& [name, spec] : domains_) {
    require_identifier(name, "domain");
    for (const auto& [slot, values] : spec.informable) {
      require_identifier(slot, "slot");
      if (values.empty()) {
        throw ValidationError("schema: informable slot '" + name + "." + slot +
                              "' has no allowed values");
      }
      for (const auto& v : values) {
        if (v.empty() || normalize_text(v) != v) {
          throw ValidationError("schema: value '" + v + "' of slot '" + name + "." + slot +
                                "' is not normalized");
        }
      }
    }
    for (const auto& slot : spec.requestable) require_identifier(slot, "slot");
  }
}

bool DialogueSchema::has_domain(std::string_view domain) const {
  return domains_.find(domain) != domains_.end();
}

const DomainSpec& DialogueSchema::domain(std::string_view domain) const {
  auto it = domains_.find(domain);
  if (it == domains_.end()) throw NotFoundError("unknown domain '" + std::string(domain) + "'");
  return it->second;
}

bool DialogueSchema::is_informable(std::string_view domain, std::string_view slot) const {
  auto it = domains_.find(domain);
  return it != domains_.end() && it->second.informable.contains(slot);
}

bool DialogueSchema::is_requestable(std::string_view domain, std::string_view slot) const {
  auto it = domains_.find(domain);
  return it != domains_.end() && it->second.requestable.contains(slot);
}

bool DialogueSchema::allows(std::string_view domain, std::string_view slot,
                            std::string_view value) const {
  auto it = domains_.find(domain);
  if (it == domains_.end()) return false;
  auto slot_it = it->second.informable.find(slot);
  return slot_it != it->second.informable.end() && slot_it->second.contains(value);
}

DialogueSchema load_schema(std::string_view document) {
  json doc = parse_strict(document, "schema");
  if (!doc.is_object() || !doc.contains("domains") || !doc["domains"].is_object()) {
    throw ParseError("schema: expected an object with a 'domains' object");
  }
  DomainMap domains;
  try {
    for (const auto& [name, body] : doc["domains"].items()) {
      DomainSpec spec;
      for (const auto& [slot, values] : body.at("informable").items()) {
        auto& allowed = spec.informable[slot];
        for (const auto& v : values) {
          if (!allowed.insert(normalize_text(v.get<std::string>())).second) {
            throw ValidationError("schema: duplicate value '" + v.get<std::string>() +
                                  "' in slot '" + name + "." + slot + "'");
          }
        }
      }
      for (const auto& slot : body.at("requestable")) {
        if (!spec.requestable.insert(slot.get<std::string>()).second) {
          throw ValidationError("schema: duplicate requestable slot '" + slot.get<std::string>() +
                                "' in domain '" + name + "'");
        }
      }
      domains.emplace(name, std::move(spec));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("schema: ") + e.what());
  }
  bool acts = doc.value("has_dialogue_acts", true);
  return DialogueSchema(std::move(domains), acts);
}

DialogueSchema load_schema_file(const std::string& path) { return load_schema(read_file(path)); }

std::string serialize_schema(const DialogueSchema& schema) {
  json domains = json::object();
  for (const auto& [name, spec] : schema.domains()) {
    json informable = json::object();
    for (const auto& [slot, values] : spec.informable) {
      informable[slot] = std::vector<std::string>(values.begin(), values.end());
    }
    domains[name] = {
        {"informable", informable},
        {"requestable", std::vector<std::string>(spec.requestable.begin(), spec.requestable.end())}};
  }
  json doc = {{"domains", domains}, {"has_dialogue_acts", schema.has_dialogue_acts()}};
  return doc.dump(2);
}

EntityDatabase::EntityDatabase(std::map<std::string, std::vector<Entity>, std::less<>> entities,
                               const DialogueSchema& schema)
    : entities_(std::move(entities)) {
  for (auto& [domain, list] : entities_) {
    const DomainSpec& spec = schema.domain(domain);
    std::sort(list.begin(), list.end(),
              [](const Entity& a, const Entity& b) { return a.name < b.name; });
    for (std::size_t i = 0; i < list.size(); ++i) {
      const Entity& e = list[i];
      if (e.name.empty()) throw ValidationError("database: entity without a name in " + domain);
      if (i > 0 && list[i - 1].name == e.name) {
        throw ValidationError("database: duplicate entity name '" + e.name + "' in " + domain);
      }
      for (const auto& [slot, values] : spec.informable) {
        auto it = e.slots.find(slot);
        if (it == e.slots.end()) {
          throw ValidationError("database: entity '" + e.name + "' lacks informable slot '" +
                                slot + "'");
        }
        if (!values.contains(it->second)) {
          throw ValidationError("database: entity '" + e.name + "' has disallowed value '" +
                                it->second + "' for slot '" + slot + "'");
        }
      }
      for (const auto& slot : spec.requestable) {
        if (!e.slots.contains(slot)) {
          throw ValidationError("database: entity '" + e.name + "' lacks requestable slot '" +
                                slot + "'");
        }
      }
    }
  }
}

const std::vector<Entity>& EntityDatabase::domain(std::string_view domain) const {
  static const std::vector<Entity> kEmpty;
  auto it = entities_.find(domain);
  return it == entities_.end() ? kEmpty : it->second;
}

EntityDatabase load_database(std::string_view document, const DialogueSchema& schema) {
  json doc = parse_strict(document, "database");
  if (!doc.is_object()) throw ParseError("database: expected a top-level object");
  std::map<std::string, std::vector<Entity>, std::less<>> entities;
  try {
    for (const auto& [domain, list] : doc.items()) {
      auto& out = entities[domain];
      for (const auto& item : list) {
        Entity e;
        e.name = item.at("name").get<std::string>();
        for (const auto& [slot, value] : item.at("slots").items()) {
          e.slots[slot] = normalize_text(value.get<std::string>());
        }
        out.push_back(std::move(e));
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("database: ") + e.what());
  }
  return EntityDatabase(std::move(entities), schema);
}

EntityDatabase load_database_file(const std::string& path, const DialogueSchema& schema) {
  return load_database(read_file(path), schema);
}

std::string serialize_database(const EntityDatabase& db) {
  json doc = json::object();
  for (const auto& [domain, list] : db.entities()) {
    json arr = json::array();
    for (const auto& e : list) arr.push_back({{"name", e.name}, {"slots", e.slots}});
    doc[domain] = arr;
  }
  return doc.dump(2);
}

std::vector<Entity> lookup_entities(const EntityDatabase& db, const DialogueSchema& schema,
                                    std::string_view domain, const Constraints& constraints) {
  if (!schema.has_domain(domain)) {
    throw NotFoundError("domain not found: '" + std::string(domain) + "'");
  }
  for (const auto& [slot, value] : constraints) {
    if (!schema.allows(domain, slot, value)) {
      throw ValidationError("constraint " + slot + "=" + value + " is not allowed in domain '" +
                            std::string(domain) + "'");
    }
  }
  std::vector<Entity> out;
  for (const Entity& e : db.domain(domain)) {
    bool ok = std::all_of(constraints.begin(), constraints.end(), [&](const auto& c) {
      auto it = e.slots.find(c.first);
      return it != e.slots.end() && it->second == c.second;
    });
    if (ok) out.push_back(e);
  }
  return out;
}

BeliefSet DialogueGoal::constraint_triples() const {
  BeliefSet out;
  for (const auto& [domain, slots] : constraints) {
    for (const auto& [slot, value] : slots) out.insert({domain, slot, value});
  }
  return out;
}

RequestSet DialogueGoal::request_pairs() const {
  RequestSet out;
  for (const auto& [domain, slots] : requests) {
    for (const auto& slot : slots) out.insert({domain, slot});
  }
  return out;
}

std::set<std::string> DialogueGoal::domains() const {
  std::set<std::string> out;
  for (const auto& [domain, slots] : constraints) out.insert(domain);
  for (const auto& [domain, slots] : requests) out.insert(domain);
  return out;
}

TurnGoal derive_turn_goal(const AnnotatedTurn& turn, const DialogueSchema& schema) {
  TurnGoal goal;
  for (const auto& t : turn.belief) {
    if (!schema.allows(t.domain, t.slot, t.value)) {
      throw ValidationError("gold triple (" + t.domain + ", " + t.slot + ", " + t.value +
                            ") is not allowed by the schema");
    }
    goal.sv_gt.insert(t);
  }
  for (const auto& slot : turn.requests) {
    if (!schema.is_requestable(turn.domain, slot)) {
      throw ValidationError("gold request '" + slot + "' is not requestable in domain '" +
                            turn.domain + "'");
    }
    goal.s_gt.insert({turn.domain, slot});
  }
  return goal;
}

}  // namespace todrl
