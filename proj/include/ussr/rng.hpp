#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ussr/tensor.hpp"

namespace ussr {

/// Seeded generator whose outputs are identical across standard libraries.
///
/// Only the raw 64-bit engine stream is taken from <random>; uniform, normal
/// and integer draws are derived here because the standard distributions are
/// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1).
  double open_uniform() {
    double u = uniform();
    while (u == 0.0) u = uniform();
    return u;
  }

  /// Standard normal by Box-Muller; one draw per call, no cached spare.
  double normal() {
    const double u1 = open_uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double gumbel() { return -std::log(-std::log(open_uniform())); }

  /// Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::below requires n > 0");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  Tensor normal_tensor(const Shape& shape, double stddev = 1.0) {
    Tensor t(shape);
    for (double& v : t.data()) v = stddev * normal();
    return t;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[static_cast<std::size_t>(below(i))]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& text) {
    std::istringstream is(text);
    std::mt19937_64 restored;
    is >> restored;
    if (is.fail()) throw Error("invalid random-number-generator state");
    engine_ = restored;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ussr
