#include "todrl/service.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <istream>
#include <ostream>
#include <thread>
#include <vector>

#include "todrl/errors.hpp"
#include "todrl/linearizer.hpp"
#include "todrl/metrics.hpp"

namespace todrl {

using nlohmann::json;

namespace {

// Raised inside handlers and mapped to an error response.
struct RequestError {
  std::string code;
  std::string message;
};

[[noreturn]] void bad_request(std::string message) { throw RequestError{"bad_request", std::move(message)}; }

const json& field(const json& request, const char* name) {
  auto it = request.find(name);
  if (it == request.end()) bad_request(std::string("missing field '") + name + "'");
  return *it;
}

std::string string_field(const json& request, const char* name) {
  const json& v = field(request, name);
  if (!v.is_string()) bad_request(std::string("field '") + name + "' must be a string");
  return v.get<std::string>();
}

TurnGoal parse_goal(const json& j, const DialogueSchema& schema) {
  if (!j.is_object()) bad_request("goal must be an object");
  TurnGoal goal;
  for (const auto& [key, value] : j.items()) {
    if (key != "sv_gt" && key != "s_gt") bad_request("unknown goal field '" + key + "'");
    if (!value.is_array()) bad_request("goal." + key + " must be an array");
  }
  if (auto it = j.find("sv_gt"); it != j.end()) {
    for (const auto& t : *it) {
      if (!t.is_array() || t.size() != 3 || !t[0].is_string() || !t[1].is_string() ||
          !t[2].is_string()) {
        bad_request("sv_gt entries must be [domain, slot, value]");
      }
      SlotValue sv{t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>()};
      if (!schema.allows(sv.domain, sv.slot, sv.value)) {
        bad_request("sv_gt entry (" + sv.domain + ", " + sv.slot + ", " + sv.value +
                    ") is not in the schema");
      }
      goal.sv_gt.insert(std::move(sv));
    }
  }
  if (auto it = j.find("s_gt"); it != j.end()) {
    for (const auto& t : *it) {
      if (!t.is_array() || t.size() != 2 || !t[0].is_string() || !t[1].is_string()) {
        bad_request("s_gt entries must be [domain, slot]");
      }
      DomainSlot ds{t[0].get<std::string>(), t[1].get<std::string>()};
      if (!schema.is_requestable(ds.domain, ds.slot)) {
        bad_request("s_gt entry (" + ds.domain + ", " + ds.slot + ") is not requestable");
      }
      goal.s_gt.insert(std::move(ds));
    }
  }
  return goal;
}

RewardConfig parse_reward_config(const json& j) {
  if (!j.is_object()) bad_request("config must be an object");
  RewardConfig config;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) bad_request("config." + key + " must be a number");
    if (key == "alpha_u") config.alpha_u = value.get<double>();
    else if (key == "alpha_g") config.alpha_g = value.get<double>();
    else bad_request("unknown config field '" + key + "'");
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    bad_request(e.what());
  }
  return config;
}

json triples_json(const BeliefSet& triples) {
  json out = json::array();
  for (const auto& t : triples) out.push_back({t.domain, t.slot, t.value});
  return out;
}

json requests_json(const RequestSet& requests) {
  json out = json::array();
  for (const auto& r : requests) out.push_back({r.domain, r.slot});
  return out;
}

}  // namespace

json error_response(std::string_view code, std::string_view message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

RewardService::RewardService(DialogueSchema schema, std::optional<EntityDatabase> db,
                             ServiceOptions options)
    : schema_(std::move(schema)), db_(std::move(db)), options_(std::move(options)) {}

std::string RewardService::handle_line(std::string_view line) {
  json request;
  try {
    request = json::parse(line);
  } catch (const json::parse_error& e) {
    return error_response("bad_request", std::string("malformed JSON: ") + e.what()).dump();
  }
  return handle(request).dump();
}

json RewardService::handle(const json& request) {
  try {
    expire_idle();
    if (!request.is_object()) bad_request("request must be a JSON object");
    std::string op = string_field(request, "op");
    if (op == "ping") return {{"ok", true}, {"version", kServiceVersion}};
    if (op == "init_session") return init_session(request);
    if (op == "step") return step(request);
    if (op == "finalize") return finalize(request);
    if (op == "metrics") return metrics(request);
    return error_response("unknown_op", "unknown op '" + op + "'");
  } catch (const RequestError& e) {
    return error_response(e.code, e.message);
  } catch (const std::exception& e) {
    return error_response("bad_request", e.what());
  }
}

std::size_t RewardService::live_sessions() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

std::size_t RewardService::expire_idle() {
  auto now = options_.now();
  std::lock_guard lock(mutex_);
  std::size_t dropped = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    // A session busy in another thread is by definition not idle.
    std::unique_lock session_lock(it->second->mutex, std::try_to_lock);
    if (session_lock.owns_lock() && now - it->second->last_used > options_.idle_timeout) {
      session_lock.unlock();
      it = sessions_.erase(it);
      ++dropped;
    } else {
      ++it;
    }
  }
  return dropped;
}

json RewardService::init_session(const json& request) {
  std::string id = string_field(request, "session");
  if (id.empty()) bad_request("session id must not be empty");
  TurnGoal goal = parse_goal(field(request, "goal"), schema_);
  RewardConfig config;
  if (auto it = request.find("config"); it != request.end()) config = parse_reward_config(*it);
  std::string domain;
  if (request.contains("domain")) {
    domain = string_field(request, "domain");
    if (!schema_.has_domain(domain)) bad_request("unknown domain '" + domain + "'");
  } else if (!goal.s_gt.empty()) {
    domain = goal.s_gt.begin()->domain;
  } else if (!goal.sv_gt.empty()) {
    domain = goal.sv_gt.begin()->domain;
  }
  auto session = std::make_shared<Session>(std::move(goal), config, domain, options_.now());
  std::lock_guard lock(mutex_);
  if (sessions_.contains(id)) bad_request("session '" + id + "' already exists");
  sessions_.emplace(id, std::move(session));
  return {{"ok", true}, {"session", id}};
}

std::shared_ptr<RewardService::Session> RewardService::find(const json& request) {
  std::string id = string_field(request, "session");
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw RequestError{"no_session", "no live session '" + id + "'"};
  return it->second;
}

json RewardService::step(const json& request) {
  auto session = find(request);
  std::string token = string_field(request, "token");
  std::lock_guard lock(session->mutex);
  session->last_used = options_.now();
  RewardTracker& t = session->tracker;
  double delta = t.step(token, schema_);
  return {{"delta", delta},
          {"cum_u", t.cum_u()},
          {"cum_g", t.cum_g()},
          {"cum_tod", t.cum_tod()},
          {"region", region_name(t.extractor().region())}};
}

json RewardService::finalize(const json& request) {
  auto session = find(request);
  json out;
  {
    std::lock_guard lock(session->mutex);
    const RewardTracker& t = session->tracker;
    out = {{"cum_u", t.cum_u()},
           {"cum_g", t.cum_g()},
           {"cum_tod", t.cum_tod()},
           {"steps", t.trace().size()},
           {"region", region_name(t.extractor().region())},
           {"malformed", t.extractor().malformed()},
           {"sv_hat", triples_json(t.extractor().sv_hat())},
           {"s_hat", requests_json(t.extractor().s_hat())}};
  }
  std::lock_guard lock(mutex_);
  sessions_.erase(request.at("session").get<std::string>());
  return out;
}

json RewardService::metrics(const json& request) {
  if (!db_) bad_request("metrics needs a database; start the service with one");
  const json& corpus = field(request, "corpus");
  if (!corpus.is_array()) bad_request("corpus must be an array of dialogues");
  PredictionCorpus predictions;
  for (const auto& d : corpus) predictions.push_back(prediction_from_json(d));
  return evaluate(predictions, schema_, *db_).to_json();
}

// ---------------------------------------------------------------------------
// Transports

void serve_stream(RewardService& service, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out << service.handle_line(line) << '\n';
    out.flush();
  }
}

namespace {

bool send_all(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

void serve_connection(RewardService& service, int fd, const std::atomic<bool>& stop) {
  std::string buffer;
  char chunk[4096];
  while (!stop.load()) {
    pollfd p{fd, POLLIN, 0};
    int ready = ::poll(&p, 1, 100);
    if (ready < 0 && errno != EINTR) break;
    if (ready <= 0) continue;
    ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    buffer.append(chunk, static_cast<std::size_t>(n));
    std::size_t start = 0;
    for (std::size_t nl; (nl = buffer.find('\n', start)) != std::string::npos; start = nl + 1) {
      std::string_view line(buffer.data() + start, nl - start);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (line.empty()) continue;
      if (!send_all(fd, service.handle_line(line) + "\n")) {
        ::close(fd);
        return;
      }
    }
    buffer.erase(0, start);
  }
  ::close(fd);
}

}  // namespace

void serve_tcp(RewardService& service, std::uint16_t port, const std::atomic<bool>& stop,
               const std::function<void(std::uint16_t)>& on_ready) {
  int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener < 0) throw Error(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listener, 16) != 0) {
    std::string why = std::strerror(errno);
    ::close(listener);
    throw Error("cannot listen on port " + std::to_string(port) + ": " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
  if (on_ready) on_ready(ntohs(addr.sin_port));

  std::vector<std::thread> workers;
  while (!stop.load()) {
    pollfd p{listener, POLLIN, 0};
    int ready = ::poll(&p, 1, 100);
    if (ready <= 0) continue;
    int fd = ::accept(listener, nullptr, nullptr);
    if (fd < 0) continue;
    workers.emplace_back(serve_connection, std::ref(service), fd, std::cref(stop));
  }
  ::close(listener);
  for (auto& w : workers) w.join();
}

}  // namespace todrl
