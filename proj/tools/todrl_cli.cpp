// todrl: corpus generation, training, evaluation and the reward service.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "todrl/envgen.hpp"
#include "todrl/errors.hpp"
#include "todrl/metrics.hpp"
#include "todrl/policy.hpp"
#include "todrl/reward.hpp"
#include "todrl/service.hpp"
#include "todrl/text.hpp"
#include "todrl/trainer.hpp"

#ifndef TODRL_DATA_DIR
#define TODRL_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace todrl;

namespace {

const std::string kDefaultSchema = std::string(TODRL_DATA_DIR) + "/toy_schema.json";
const std::string kDefaultDb = std::string(TODRL_DATA_DIR) + "/toy_db.json";

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json_file(const std::string& path) {
  try {
    return json::parse(slurp(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop.store(true); }

// Turn goal and default domain from either a corpus turn or a bare goal
// object {"domain", "sv_gt": [[d, s, v]], "s_gt": [[d, s]]}.
std::pair<TurnGoal, std::string> turn_goal_from_json(const json& j, const DialogueSchema& schema,
                                                     std::optional<GoldTurn>& turn) {
  if (j.contains("belief")) {
    turn = turn_from_json(j);
    return {gold_turn_goal(*turn, schema), turn->domain};
  }
  TurnGoal goal;
  for (const auto& t : j.value("sv_gt", json::array())) {
    goal.sv_gt.insert({t.at(0).get<std::string>(), t.at(1).get<std::string>(),
                       t.at(2).get<std::string>()});
  }
  for (const auto& t : j.value("s_gt", json::array())) {
    goal.s_gt.insert({t.at(0).get<std::string>(), t.at(1).get<std::string>()});
  }
  return {goal, j.value("domain", std::string())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-level task-oriented dialogue rewards and RL harness"};
  app.require_subcommand(1);

  std::string schema_path = kDefaultSchema;
  std::string db_path = kDefaultDb;

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic train/dev/test corpus");
  std::string gen_config_path, gen_out;
  gen->add_option("--config", gen_config_path, "generator config JSON")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--schema", schema_path, "schema JSON");
  gen->add_option("--db", db_path, "entity database JSON");

  // sft
  auto* sft = app.add_subcommand("sft", "supervised training of the token policy");
  std::string sft_corpus, sft_out;
  SftConfig sft_config;
  std::uint32_t feature_bits = 18;
  sft->add_option("--corpus", sft_corpus, "corpus directory")->required();
  sft->add_option("--out", sft_out, "snapshot file to write")->required();
  sft->add_option("--schema", schema_path, "schema JSON");
  sft->add_option("--epochs", sft_config.epochs, "passes over the training split");
  sft->add_option("--lr", sft_config.learning_rate, "learning rate");
  sft->add_option("--seed", sft_config.seed, "shuffle seed");
  sft->add_option("--feature-bits", feature_bits, "log2 of the hashed feature space");

  // rl-train
  auto* rl = app.add_subcommand("rl-train", "PPO / NLPO fine-tuning with token-level rewards");
  std::string rl_config_path, rl_snapshot, rl_out, rl_corpus, rl_mode;
  std::uint64_t rl_seed = 0;
  bool rl_nlpo = false, rl_resume = false;
  std::size_t rl_episodes = 0;
  rl->add_option("--config", rl_config_path, "train config JSON")->required();
  rl->add_option("--snapshot", rl_snapshot, "initial (SFT) snapshot")->required();
  rl->add_option("--out", rl_out, "output directory")->required();
  rl->add_option("--corpus", rl_corpus, "corpus directory")->required();
  rl->add_option("--schema", schema_path, "schema JSON");
  rl->add_option("--db", db_path, "entity database JSON");
  rl->add_option("--reward-mode", rl_mode, "full|no-ru|no-rg|sparse")
      ->check(CLI::IsMember({"full", "no-ru", "no-rg", "sparse", "understanding_only",
                             "generation_only", "sparse_terminal"}));
  rl->add_flag("--nlpo", rl_nlpo, "enable the NLPO masked policy");
  rl->add_option("--seed", rl_seed, "run seed (overrides the config)");
  rl->add_option("--episodes", rl_episodes, "episode budget (overrides the config)");
  rl->add_flag("--resume", rl_resume, "continue from <out>/checkpoint.json");

  // predict
  auto* pred = app.add_subcommand("predict", "decode a corpus split into a predictions file");
  std::string pred_snapshot, pred_corpus, pred_split = "test", pred_out, pred_mode = "greedy";
  std::uint64_t pred_seed = 1;
  pred->add_option("--snapshot", pred_snapshot, "policy snapshot")->required();
  pred->add_option("--corpus", pred_corpus, "corpus directory")->required();
  pred->add_option("--split", pred_split, "train|dev|test")
      ->check(CLI::IsMember({"train", "dev", "test"}));
  pred->add_option("--out", pred_out, "predictions JSONL")->required();
  pred->add_option("--decode", pred_mode, "greedy|sample")->check(CLI::IsMember({"greedy", "sample"}));
  pred->add_option("--seed", pred_seed, "sampling seed");
  pred->add_option("--schema", schema_path, "schema JSON");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score a predictions file");
  std::string ev_predictions, ev_out;
  ev->add_option("--predictions", ev_predictions, "predictions JSONL")->required();
  ev->add_option("--schema", schema_path, "schema JSON");
  ev->add_option("--db", db_path, "entity database JSON");
  ev->add_option("--out", ev_out, "write the report here instead of stdout");

  // reward-trace
  auto* tr = app.add_subcommand("reward-trace", "per-token reward trace of one turn");
  std::string tr_turn, tr_tokens;
  tr->add_option("--turn", tr_turn, "corpus turn or goal as one JSON line, or a file holding it")
      ->required();
  tr->add_option("--tokens", tr_tokens, "token file, '-' for stdin; default: the gold output");
  tr->add_option("--schema", schema_path, "schema JSON");

  // serve
  auto* sv = app.add_subcommand("serve", "reward service over NDJSON");
  bool sv_stdio = false;
  int sv_port = -1;
  double sv_idle = 600.0;
  auto* stdio_flag = sv->add_flag("--stdio", sv_stdio, "serve standard input/output");
  auto* port_opt = sv->add_option("--port", sv_port, "serve TCP on 127.0.0.1:<port>")
                       ->check(CLI::Range(0, 65535));
  stdio_flag->excludes(port_opt);
  port_opt->excludes(stdio_flag);
  sv->add_option("--schema", schema_path, "schema JSON");
  sv->add_option("--db", db_path, "entity database JSON (for the metrics op)");
  sv->add_option("--idle-timeout", sv_idle, "seconds before an idle session expires");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      DialogueSchema schema = load_schema_file(schema_path);
      EntityDatabase db = load_database_file(db_path, schema);
      GenConfig config = gen_config_from_json(read_json_file(gen_config_path));
      Corpus corpus = generate_corpus(config, schema, db);
      write_corpus(corpus, gen_out);
      std::cout << json{{"train", corpus.train.size()},
                        {"dev", corpus.dev.size()},
                        {"test", corpus.test.size()},
                        {"out", gen_out}}
                       .dump()
                << '\n';
    } else if (*sft) {
      DialogueSchema schema = load_schema_file(schema_path);
      Corpus corpus = read_corpus(sft_corpus);
      auto vocab = std::make_shared<Vocabulary>(Vocabulary::build(corpus.train, schema));
      FeatureModel model(vocab, schema, feature_bits);
      SftResult result = sft_train(sft_examples(corpus.train, schema), model,
                                   PolicySnapshot::zeros(vocab, feature_bits), sft_config);
      for (std::size_t e = 0; e < result.epoch_nll.size(); ++e) {
        std::cerr << json{{"epoch", e + 1}, {"nll", result.epoch_nll[e]}}.dump() << '\n';
      }
      save_snapshot(result.snapshot, sft_out);
    } else if (*rl) {
      DialogueSchema schema = load_schema_file(schema_path);
      EntityDatabase db = load_database_file(db_path, schema);
      json raw = read_json_file(rl_config_path);
      if (!rl_mode.empty()) raw["reward_mode"] = rl_mode;
      if (rl_nlpo) raw["nlpo"] = true;
      if (rl->count("--seed") > 0) raw["seed"] = rl_seed;
      if (rl_episodes > 0) raw["episodes"] = rl_episodes;
      TrainConfig config = train_config_from_json(raw);
      Corpus corpus = read_corpus(rl_corpus);

      fs::create_directories(rl_out);
      const std::string checkpoint = (fs::path(rl_out) / "checkpoint.json").string();
      TrainerState state = rl_resume ? load_checkpoint(checkpoint)
                                     : initial_state(load_snapshot(rl_snapshot), config);
      FeatureModel model(state.policy.vocab, schema, state.policy.feature_bits);
      TrainData data{&schema, &db, &model, corpus.train, corpus.dev};
      {
        std::ofstream cfg(fs::path(rl_out) / "config.json");
        cfg << train_config_to_json(config).dump(2) << '\n';
      }
      std::ofstream log(fs::path(rl_out) / "log.jsonl", rl_resume ? std::ios::app : std::ios::trunc);
      TrainHooks hooks;
      hooks.checkpoint_path = checkpoint;
      hooks.on_log = [&](const LogRecord& r) {
        std::string line = r.to_json().dump();
        log << line << '\n';
        log.flush();
        std::cout << line << '\n';
      };
      TrainResult result = train(config, data, std::move(state), hooks);
      save_snapshot(result.state.policy, (fs::path(rl_out) / "final_snapshot.json").string());
    } else if (*pred) {
      DialogueSchema schema = load_schema_file(schema_path);
      PolicySnapshot snapshot = load_snapshot(pred_snapshot);
      FeatureModel model(snapshot.vocab, schema, snapshot.feature_bits);
      Corpus corpus = read_corpus(pred_corpus);
      const auto& split = pred_split == "train" ? corpus.train
                          : pred_split == "dev" ? corpus.dev
                                                : corpus.test;
      DecodeConfig decode;
      decode.mode = pred_mode == "sample" ? DecodeMode::kSample : DecodeMode::kGreedy;
      PredictionCorpus predictions = predict_corpus(snapshot, model, split, decode, pred_seed);
      std::ofstream out(pred_out, std::ios::binary);
      if (!out) throw Error("cannot write " + pred_out);
      for (const auto& p : predictions) out << prediction_to_json(p).dump() << '\n';
    } else if (*ev) {
      DialogueSchema schema = load_schema_file(schema_path);
      EntityDatabase db = load_database_file(db_path, schema);
      PredictionCorpus predictions;
      std::istringstream lines(slurp(ev_predictions));
      std::string line;
      std::size_t line_no = 0;
      while (std::getline(lines, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          predictions.push_back(prediction_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
          throw ParseError(ev_predictions + ":" + std::to_string(line_no) + ": " + e.what());
        }
      }
      std::string report = evaluate(predictions, schema, db).to_json().dump(2);
      if (ev_out.empty()) {
        std::cout << report << '\n';
      } else {
        std::ofstream out(ev_out);
        out << report << '\n';
      }
    } else if (*tr) {
      DialogueSchema schema = load_schema_file(schema_path);
      std::string text = tr_turn;
      if (text.find_first_not_of(" \t") == std::string::npos || text[text.find_first_not_of(" \t")] != '{') {
        text = slurp(tr_turn);
        // A JSONL file contributes its first line.
        if (!json::accept(text)) text = text.substr(0, text.find('\n'));
      }
      json turn_json;
      try {
        turn_json = json::parse(text);
      } catch (const json::parse_error& e) {
        throw ParseError(std::string("--turn: ") + e.what());
      }
      std::optional<GoldTurn> turn;
      auto [goal, domain] = turn_goal_from_json(turn_json, schema, turn);
      std::vector<std::string> tokens;
      if (tr_tokens.empty()) {
        if (!turn) throw ConfigError("--tokens is required when --turn holds a bare goal");
        tokens = gold_output(*turn, schema);
      } else {
        std::ostringstream ss;
        if (tr_tokens == "-") {
          ss << std::cin.rdbuf();
        } else {
          ss << slurp(tr_tokens);
        }
        tokens = split_tokens(ss.str());
      }
      RewardTracker tracker(goal, RewardConfig{}, domain);
      for (const auto& token : tokens) {
        double delta = tracker.step(token, schema);
        std::cout << json{{"token", token},
                          {"delta", delta},
                          {"cum_u", tracker.cum_u()},
                          {"cum_g", tracker.cum_g()},
                          {"cum_tod", tracker.cum_tod()},
                          {"region", region_name(tracker.extractor().region())}}
                         .dump()
                  << '\n';
      }
    } else if (*sv) {
      if (!sv_stdio && sv_port < 0) throw ConfigError("serve needs --stdio or --port");
      DialogueSchema schema = load_schema_file(schema_path);
      std::optional<EntityDatabase> db;
      if (fs::exists(db_path)) db = load_database_file(db_path, schema);
      ServiceOptions options;
      options.idle_timeout =
          std::chrono::milliseconds(static_cast<long long>(sv_idle * 1000.0));
      RewardService service(std::move(schema), std::move(db), options);
      if (sv_stdio) {
        serve_stream(service, std::cin, std::cout);
      } else {
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        serve_tcp(service, static_cast<std::uint16_t>(sv_port), g_stop, [](std::uint16_t port) {
          std::cout << json{{"listening", port}}.dump() << std::endl;
        });
      }
    }
  } catch (const Error& e) {
    std::cerr << "todrl: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "todrl: unexpected error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
