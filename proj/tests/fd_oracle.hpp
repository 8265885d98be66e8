#pragma once

// Central finite differences over a recorded graph. Independent of the
// backward pass: it only perturbs parameter/input values and replays the
// forward computation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "ussr/graph.hpp"

namespace ussr::testing {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;
// Gradients smaller than this are compared on an absolute scale.
inline constexpr double kFdFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kFdFloor});
}

struct FdReport {
  double max_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Compares `analytic` against central differences of the scalar node
/// `output` for every element of every parameter accepted by `filter`.
inline FdReport check_param_gradients(Graph& graph, NodeId output, ParamStore& store,
                                      const Gradients& analytic,
                                      const std::function<bool(const std::string&)>& filter =
                                          [](const std::string&) { return true; },
                                      double step = kFdStep) {
  FdReport report;
  for (auto& [name, tensor] : store) {
    if (!filter(name)) continue;
    const Tensor& grad = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + step;
      graph.forward();
      const double plus = graph.value(output)[0];
      tensor[i] = saved - step;
      graph.forward();
      const double minus = graph.value(output)[0];
      tensor[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = relative_error(grad[i], numeric);
      ++report.checked;
      if (err > report.max_error) {
        report.max_error = err;
        report.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(grad[i]) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  graph.forward();
  return report;
}

/// Same comparison for named graph inputs.
inline FdReport check_input_gradients(Graph& graph, NodeId output,
                                      std::map<std::string, Tensor> inputs,
                                      const Gradients& analytic, double step = kFdStep) {
  FdReport report;
  for (auto& [name, tensor] : inputs) {
    const Tensor& grad = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + step;
      graph.forward(inputs);
      const double plus = graph.value(output)[0];
      tensor[i] = saved - step;
      graph.forward(inputs);
      const double minus = graph.value(output)[0];
      tensor[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = relative_error(grad[i], numeric);
      ++report.checked;
      if (err > report.max_error) {
        report.max_error = err;
        report.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(grad[i]) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  graph.forward(inputs);
  return report;
}

}  // namespace ussr::testing
