#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ussr/graph.hpp"
#include "ussr/rng.hpp"

namespace ussr::nn {

enum class Output { Linear, Relu };

// He-style normal init for weights, zero bias.
inline void init_linear(ParamStore& store, const std::string& prefix, std::size_t in,
                        std::size_t out, Rng& rng) {
  const double scale = std::sqrt(2.0 / static_cast<double>(in + out));
  store.set(prefix + ".w", rng.normal_tensor({in, out}, scale));
  store.set(prefix + ".b", Tensor({1, out}, 0.0));
}

inline NodeId linear(Graph& g, NodeId x, const std::string& prefix) {
  return g.add(g.matmul(x, g.param(prefix + ".w")), g.param(prefix + ".b"));
}

/// Perceptron with layer sizes `dims` (input first). Parameters are named
/// `<prefix>.l<i>.w` / `.b`.
inline void init_mlp(ParamStore& store, const std::string& prefix,
                     const std::vector<std::size_t>& dims, Rng& rng) {
  if (dims.size() < 2) throw Error("perceptron '" + prefix + "' needs at least two layer sizes");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    init_linear(store, prefix + ".l" + std::to_string(i), dims[i], dims[i + 1], rng);
  }
}

inline std::size_t mlp_depth(const ParamStore& store, const std::string& prefix) {
  std::size_t depth = 0;
  while (store.contains(prefix + ".l" + std::to_string(depth) + ".w")) ++depth;
  if (depth == 0) throw Error("no perceptron named '" + prefix + "'");
  return depth;
}

inline std::size_t mlp_output_dim(const ParamStore& store, const std::string& prefix) {
  const std::size_t depth = mlp_depth(store, prefix);
  return store.get(prefix + ".l" + std::to_string(depth - 1) + ".w").dim(1);
}

/// Relu between layers; `out` selects the activation after the last layer.
inline NodeId mlp(Graph& g, NodeId x, const ParamStore& store, const std::string& prefix,
                  Output out = Output::Linear) {
  const std::size_t depth = mlp_depth(store, prefix);
  NodeId h = x;
  for (std::size_t i = 0; i < depth; ++i) {
    h = linear(g, h, prefix + ".l" + std::to_string(i));
    if (i + 1 < depth || out == Output::Relu) h = g.relu(h);
  }
  return h;
}

/// Names in `store` that belong to the module `prefix` (prefix followed by '.').
inline bool owned_by(const std::string& name, const std::string& prefix) {
  return name.size() > prefix.size() && name.compare(0, prefix.size(), prefix) == 0 &&
         name[prefix.size()] == '.';
}

}  // namespace ussr::nn
