// Shared fixtures for the unit suites.
#ifndef TODRL_TESTS_FIXTURES_HPP_
#define TODRL_TESTS_FIXTURES_HPP_

#include <string>
#include <vector>

#include "todrl/envgen.hpp"
#include "todrl/schema.hpp"
#include "todrl/text.hpp"

namespace fixtures {

inline const todrl::DialogueSchema& toy_schema() {
  static const todrl::DialogueSchema schema =
      todrl::load_schema_file(std::string(TODRL_DATA_DIR) + "/toy_schema.json");
  return schema;
}

inline const todrl::EntityDatabase& toy_db() {
  static const todrl::EntityDatabase db =
      todrl::load_database_file(std::string(TODRL_DATA_DIR) + "/toy_db.json", toy_schema());
  return db;
}

// Small corpus, shared across cases of one binary.
inline const todrl::Corpus& small_corpus() {
  static const todrl::Corpus corpus = [] {
    todrl::GenConfig config;
    config.seed = 7;
    config.dialogues = 50;
    return todrl::generate_corpus(config, toy_schema(), toy_db());
  }();
  return corpus;
}

}  // namespace fixtures

#endif  // TODRL_TESTS_FIXTURES_HPP_
