#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "ussr/graph.hpp"

namespace ussr {

struct SgdOptions {
  double learning_rate = 0.05;
  /// Global gradient-norm threshold; 0 disables clipping.
  double clip_norm = 0.0;
};

inline double global_norm(const Gradients& grads) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (double v : g.data()) sq += v * v;
  }
  return std::sqrt(sq);
}

/// Subset of `grads` whose names satisfy `keep`.
inline Gradients select(const Gradients& grads,
                        const std::function<bool(const std::string&)>& keep) {
  Gradients out;
  for (const auto& [name, g] : grads) {
    if (keep(name)) out.emplace(name, g);
  }
  return out;
}

/// p <- p - lr * g for every gradient entry. Parameters without an entry are
/// left untouched. When clipping is enabled and the global norm exceeds the
/// threshold, all gradients are scaled by threshold / norm first.
inline void sgd_step(ParamStore& params, const Gradients& grads, const SgdOptions& options) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw Error("sgd_step: no parameter named '" + name + "'");
    if (params.get(name).shape() != g.shape()) {
      throw Error("sgd_step: gradient for '" + name + "' has shape " + shape_str(g.shape()) +
                  ", parameter has " + shape_str(params.get(name).shape()));
    }
  }
  double factor = 1.0;
  if (options.clip_norm > 0.0) {
    const double norm = global_norm(grads);
    if (norm > options.clip_norm) factor = options.clip_norm / norm;
  }
  const double step = options.learning_rate * factor;
  for (const auto& [name, g] : grads) {
    Tensor& p = params.get(name);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= step * g[i];
  }
}

}  // namespace ussr
