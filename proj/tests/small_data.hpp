#pragma once

// Small encoded datasets for module-level tests: two latent modes with
// different label rules, two dense and two sparse fields.

#include <cmath>
#include <vector>

#include "ussr/features.hpp"
#include "ussr/rng.hpp"
#include "ussr/universal.hpp"

namespace ussr::testing {

inline FeatureLayout small_layout() {
  FeatureLayout l;
  l.dense = 2;
  l.vocab_rows = {6, 4};
  l.embed_dim = 3;
  return l;
}

/// `mode` < 0 draws the mode uniformly from {0, 1}; otherwise fixed.
inline std::vector<EncodedExample> small_dataset(std::size_t n, std::uint64_t seed, int mode = -1,
                                                 std::uint32_t segments = 1) {
  Rng rng(seed);
  std::vector<EncodedExample> out(n);
  for (auto& ex : out) {
    const int m = mode >= 0 ? mode : static_cast<int>(rng.below(2));
    const double cx = m == 0 ? -1.5 : m == 1 ? 1.5 : 0.0;
    const double cy = m == 2 ? 2.5 : 0.0;
    ex.dense = {cx + 0.5 * rng.normal(), cy + 0.5 * rng.normal()};
    ex.sparse = {static_cast<std::uint32_t>(1 + rng.below(5)), static_cast<std::uint32_t>(m == 0 ? 1 + rng.below(2) : 2 + rng.below(2))};
    ex.segment = static_cast<std::uint32_t>(rng.below(segments));
    const double seg_shift = segments > 1 ? (ex.segment % 2 == 0 ? 1.5 : -1.5) : 0.0;
    const double logit = (m == 0 ? 2.0 * ex.dense[1] : m == 1 ? -2.0 * ex.dense[1] : 8.0 * ex.dense[0] - 2.0) +
                         seg_shift * (ex.dense[0] - cx) + 0.3 * (ex.sparse[0] == 1 ? 1.0 : -0.2);
    ex.label = rng.bernoulli(1.0 / (1.0 + std::exp(-logit))) ? 1 : 0;
  }
  return out;
}

}  // namespace ussr::testing
