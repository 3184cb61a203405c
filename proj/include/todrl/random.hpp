#ifndef TODRL_RANDOM_HPP_
#define TODRL_RANDOM_HPP_

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace todrl {

// Seeded generator with draws that do not depend on the standard library's
// distribution implementations, so runs are reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  // Uniform on [0, 1).
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  bool chance(double p) { return unit() < p; }
  std::size_t between(std::size_t lo, std::size_t hi) { return lo + index(hi - lo + 1); }

  template <typename T>
  const T& pick(const std::vector<T>& items) {
    return items[index(items.size())];
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[index(i)]);
  }

  // Textual engine state, for checkpoints.
  std::string state() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
  }
  void restore(const std::string& state) {
    std::istringstream in(state);
    in >> engine_;
  }

  // Independent stream for worker `k`.
  Rng split(std::uint64_t k) {
    return Rng(engine_() ^ (0x9e3779b97f4a7c15ULL * (k + 1)));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace todrl

#endif  // TODRL_RANDOM_HPP_
