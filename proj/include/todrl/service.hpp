#ifndef TODRL_SERVICE_HPP_
#define TODRL_SERVICE_HPP_

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"
#include "todrl/reward.hpp"
#include "todrl/schema.hpp"

namespace todrl {

inline constexpr std::string_view kServiceVersion = "1.0.0";

using ServiceClock = std::chrono::steady_clock;

struct ServiceOptions {
  std::chrono::milliseconds idle_timeout = std::chrono::minutes(10);
  // Injectable for expiry tests.
  std::function<ServiceClock::time_point()> now = [] { return ServiceClock::now(); };
};

// Newline-delimited JSON front end over RewardTracker sessions.
//
//   {"op":"ping"}                      -> {"ok":true,"version":...}
//   {"op":"init_session","session","goal":{"sv_gt","s_gt"},"config"?,"domain"?}
//   {"op":"step","session","token"}    -> {"delta","cum_u","cum_g","cum_tod","region"}
//   {"op":"finalize","session"}        -> totals and extracted sets; closes the session
//   {"op":"metrics","corpus":[...]}    -> EvalReport
//
// Failures answer {"error":{"code","message"}} with code unknown_op,
// no_session or bad_request, and never stop the service.
class RewardService {
 public:
  RewardService(DialogueSchema schema, std::optional<EntityDatabase> db,
                ServiceOptions options = {});

  // One request line in, one response line out (no trailing newline).
  std::string handle_line(std::string_view line);
  nlohmann::json handle(const nlohmann::json& request);

  std::size_t live_sessions() const;
  // Drops sessions idle for longer than the timeout; returns how many.
  std::size_t expire_idle();

 private:
  struct Session {
    std::mutex mutex;
    RewardTracker tracker;
    ServiceClock::time_point created;
    ServiceClock::time_point last_used;

    Session(TurnGoal goal, RewardConfig config, std::string domain, ServiceClock::time_point t)
        : tracker(std::move(goal), config, std::move(domain)), created(t), last_used(t) {}
  };

  nlohmann::json init_session(const nlohmann::json& request);
  nlohmann::json step(const nlohmann::json& request);
  nlohmann::json finalize(const nlohmann::json& request);
  nlohmann::json metrics(const nlohmann::json& request);
  std::shared_ptr<Session> find(const nlohmann::json& request);

  DialogueSchema schema_;
  std::optional<EntityDatabase> db_;
  ServiceOptions options_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>, std::less<>> sessions_;
};

nlohmann::json error_response(std::string_view code, std::string_view message);

// Serves `in` line by line until end of input.
void serve_stream(RewardService& service, std::istream& in, std::ostream& out);

// Listens on 127.0.0.1:`port` (0 picks a free port) with one thread per
// connection. `on_ready` receives the bound port. Returns once `stop` is set.
void serve_tcp(RewardService& service, std::uint16_t port, const std::atomic<bool>& stop,
               const std::function<void(std::uint16_t)>& on_ready = {});

}  // namespace todrl

#endif  // TODRL_SERVICE_HPP_
