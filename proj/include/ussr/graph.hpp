#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ussr/tensor.hpp"

namespace ussr {

/// Named parameter tensors. Iteration order is lexicographic by name, which
/// keeps serialization and update order stable.
class ParamStore {
 public:
  void set(const std::string& name, Tensor value) { tensors_[name] = std::move(value); }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor& get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  void erase(const std::string& name) { tensors_.erase(name); }
  std::size_t size() const noexcept { return tensors_.size(); }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [name, _] : tensors_) out.push_back(name);
    return out;
  }

  /// Copies every tensor of `other` in; names must not collide.
  void merge(const ParamStore& other) {
    for (const auto& [name, value] : other) {
      if (contains(name)) throw Error("parameter '" + name + "' present in both stores");
      tensors_[name] = value;
    }
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

using Gradients = std::map<std::string, Tensor>;

struct BackwardResult {
  Gradients params;  ///< one entry per parameter in the bound store
  Gradients inputs;  ///< one entry per named input node
};

enum class Op {
  Input,
  Constant,
  Param,
  MatMul,
  BatchMatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Relu,
  Exp,
  Log,
  Sigmoid,
  LogSigmoid,
  Softmax,
  LogSoftmax,
  Sum,
  SumAll,
  Concat,
  SliceCols,
  GatherRows,
  SegmentSum,
  Reshape,
  Transpose,
  GaussianSample,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::BatchMatMul: return "batch_matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sigmoid: return "sigmoid";
    case Op::LogSigmoid: return "log_sigmoid";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Sum: return "sum";
    case Op::SumAll: return "sum_all";
    case Op::Concat: return "concat";
    case Op::SliceCols: return "slice_cols";
    case Op::GatherRows: return "gather_rows";
    case Op::SegmentSum: return "segment_sum";
    case Op::Reshape: return "reshape";
    case Op::Transpose: return "transpose";
    case Op::GaussianSample: return "gaussian_sample";
  }
  return "?";
}

using NodeId = std::size_t;

/// Recorded computation over dense tensors with reverse-mode gradients.
///
/// Nodes are evaluated as they are added. `forward` replays the recorded
/// nodes in insertion order, re-reading parameters from the bound store and
/// substituting any supplied inputs; noise attached to sampling nodes is
/// kept, so replays are bit-reproducible.
class Graph {
 public:
  explicit Graph(const ParamStore* params = nullptr) : params_(params) {}

  NodeId input(const std::string& name, Tensor value) {
    Node n{Op::Input};
    n.name = name;
    n.value = std::move(value);
    const NodeId id = push(std::move(n), false);
    input_ids_[name] = id;
    return id;
  }

  NodeId constant(Tensor value) {
    Node n{Op::Constant};
    n.value = std::move(value);
    return push(std::move(n), false);
  }

  /// Leaf reading `name` from the bound store; repeated calls share a node.
  NodeId param(const std::string& name) {
    if (!params_) throw Error("graph has no parameter store bound; cannot read '" + name + "'");
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return it->second;
    Node n{Op::Param};
    n.name = name;
    const NodeId id = push(std::move(n));
    param_ids_[name] = id;
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) { return unary_or_binary(Op::MatMul, {a, b}); }
  NodeId batch_matmul(NodeId a, NodeId b) { return unary_or_binary(Op::BatchMatMul, {a, b}); }

  /// Elementwise; `b` may also be a scalar, a [1,n] row or an [r,1] column.
  NodeId add(NodeId a, NodeId b) { return unary_or_binary(Op::Add, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return unary_or_binary(Op::Sub, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return unary_or_binary(Op::Mul, {a, b}); }

  NodeId scale(NodeId a, double factor) {
    Node n{Op::Scale, {a}};
    n.scalar = factor;
    return push(std::move(n));
  }
  NodeId add_scalar(NodeId a, double offset) {
    Node n{Op::AddScalar, {a}};
    n.scalar = offset;
    return push(std::move(n));
  }
  NodeId neg(NodeId a) { return scale(a, -1.0); }

  NodeId relu(NodeId a) { return unary_or_binary(Op::Relu, {a}); }
  NodeId exp(NodeId a) { return unary_or_binary(Op::Exp, {a}); }
  NodeId log(NodeId a) { return unary_or_binary(Op::Log, {a}); }
  NodeId sigmoid(NodeId a) { return unary_or_binary(Op::Sigmoid, {a}); }
  NodeId log_sigmoid(NodeId a) { return unary_or_binary(Op::LogSigmoid, {a}); }

  /// Softmax over the last axis.
  NodeId softmax(NodeId a) { return unary_or_binary(Op::Softmax, {a}); }
  NodeId log_softmax(NodeId a) { return unary_or_binary(Op::LogSoftmax, {a}); }

  /// Rank-2 reduction keeping the reduced axis with extent 1.
  NodeId sum(NodeId a, std::size_t axis) {
    Node n{Op::Sum, {a}};
    n.axis = axis;
    return push(std::move(n));
  }
  NodeId sum_all(NodeId a) { return unary_or_binary(Op::SumAll, {a}); }
  NodeId mean_all(NodeId a) {
    const NodeId s = sum_all(a);
    return scale(s, 1.0 / static_cast<double>(value(a).size()));
  }

  /// Column-wise concatenation of rank-2 nodes with equal row counts.
  NodeId concat(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw Error("concat needs at least one input");
    return unary_or_binary(Op::Concat, parts);
  }

  NodeId slice_cols(NodeId a, std::size_t begin, std::size_t end) {
    Node n{Op::SliceCols, {a}};
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
  }

  NodeId gather_rows(NodeId a, std::vector<std::size_t> rows) {
    Node n{Op::GatherRows, {a}};
    n.indices = std::move(rows);
    return push(std::move(n));
  }

  /// Row i of `a` is added into output row ids[i]. The per-element sum is
  /// independent of the order of the contributing rows.
  NodeId segment_sum(NodeId a, std::vector<std::size_t> ids, std::size_t segments) {
    Node n{Op::SegmentSum, {a}};
    n.indices = std::move(ids);
    n.count = segments;
    return push(std::move(n));
  }

  NodeId reshape(NodeId a, Shape shape) {
    Node n{Op::Reshape, {a}};
    n.target = std::move(shape);
    return push(std::move(n));
  }

  /// Swaps the last two axes of a rank-2 or rank-3 node.
  NodeId transpose(NodeId a) { return unary_or_binary(Op::Transpose, {a}); }

  /// mu + sigma * noise with the noise tensor stored on the node.
  NodeId gaussian_sample(NodeId mu, NodeId sigma, Tensor noise) {
    Node n{Op::GaussianSample, {mu, sigma}};
    n.noise = std::move(noise);
    return push(std::move(n));
  }

  /// Replays every node. Named inputs present in `inputs` replace the stored
  /// values and must keep their shapes.
  void forward(const std::map<std::string, Tensor>& inputs = {}) {
    for (const auto& [name, value] : inputs) {
      auto it = input_ids_.find(name);
      if (it == input_ids_.end()) throw Error("graph has no input named '" + name + "'");
      Node& n = nodes_[it->second];
      if (n.value.shape() != value.shape()) {
        throw Error("input '" + name + "' expects shape " + shape_str(n.value.shape()) +
                    ", got " + shape_str(value.shape()));
      }
      n.value = value;
    }
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].op != Op::Input && nodes_[id].op != Op::Constant) evaluate(id);
    }
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  Op op(NodeId id) const { return nodes_.at(id).op; }
  const Tensor& noise(NodeId id) const { return nodes_.at(id).noise; }
  std::size_t size() const noexcept { return nodes_.size(); }

  BackwardResult backward(NodeId output, std::optional<Tensor> seed = std::nullopt) const {
    if (output >= nodes_.size()) throw Error("backward: unknown output node");
    const Tensor& out = nodes_[output].value;
    Tensor start;
    if (seed) {
      if (seed->shape() != out.shape()) {
        throw Error("backward: seed shape " + shape_str(seed->shape()) +
                    " does not match output shape " + shape_str(out.shape()));
      }
      start = *seed;
    } else {
      if (out.size() != 1) {
        throw Error("backward: output node #" + std::to_string(output) + " (" +
                    op_name(nodes_[output].op) + ") is not scalar and no seed was given");
      }
      start = Tensor(out.shape(), 1.0);
    }

    std::vector<Tensor> grads(output + 1);
    grads[output] = std::move(start);
    for (NodeId id = output + 1; id-- > 0;) {
      if (grads[id].empty()) continue;
      propagate(id, grads);
    }

    BackwardResult result;
    if (params_) {
      for (const auto& [name, value] : *params_) result.params[name] = Tensor(value.shape(), 0.0);
    }
    for (const auto& [name, id] : param_ids_) {
      if (id <= output && !grads[id].empty()) result.params[name] = grads[id];
    }
    for (const auto& [name, id] : input_ids_) {
      if (id <= output && !grads[id].empty()) {
        result.inputs[name] = grads[id];
      } else {
        result.inputs[name] = Tensor(nodes_[id].value.shape(), 0.0);
      }
    }
    return result;
  }

 private:
  struct Node {
    Op op;
    std::vector<NodeId> inputs{};
    Tensor value{};
    std::string name{};
    double scalar = 0.0;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t count = 0;
    std::vector<std::size_t> indices{};
    Shape target{};
    Tensor noise{};
  };

  NodeId unary_or_binary(Op op, std::vector<NodeId> inputs) {
    Node n{op, std::move(inputs)};
    return push(std::move(n));
  }

  NodeId push(Node n, bool evaluate_now = true) {
    for (NodeId in : n.inputs) {
      if (in >= nodes_.size()) throw Error(std::string(op_name(n.op)) + ": input node does not exist");
    }
    nodes_.push_back(std::move(n));
    const NodeId id = nodes_.size() - 1;
    if (evaluate_now) {
      try {
        evaluate(id);
      } catch (...) {
        nodes_.pop_back();
        throw;
      }
    }
    return id;
  }

  [[noreturn]] void fail(NodeId id, const std::string& what) const {
    throw Error("node #" + std::to_string(id) + " (" + op_name(nodes_[id].op) + "): " + what);
  }

  // Index map used by broadcasting binary ops: element i of `a` pairs with
  // element bindex(i) of `b`.
  enum class Broadcast { Same, Scalar, Row, Column };

  Broadcast broadcast_kind(NodeId id, const Tensor& a, const Tensor& b) const {
    if (a.shape() == b.shape()) return Broadcast::Same;
    if (b.size() == 1) return Broadcast::Scalar;
    if (a.rank() == 2 && b.rank() == 2) {
      if (b.dim(0) == 1 && b.dim(1) == a.dim(1)) return Broadcast::Row;
      if (b.dim(1) == 1 && b.dim(0) == a.dim(0)) return Broadcast::Column;
    }
    fail(id, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }

  static std::size_t bindex(Broadcast kind, std::size_t i, std::size_t cols) {
    switch (kind) {
      case Broadcast::Same: return i;
      case Broadcast::Scalar: return 0;
      case Broadcast::Row: return i % cols;
      case Broadcast::Column: return i / cols;
    }
    return i;
  }

  void evaluate(NodeId id) {
    Node& n = nodes_[id];
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    switch (n.op) {
      case Op::Input:
      case Op::Constant:
        break;
      case Op::Param:
        n.value = params_->get(n.name);
        break;
      case Op::MatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
          fail(id, "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        }
        n.value = Tensor({a.dim(0), b.dim(1)});
        matmul_into(a.data().data(), b.data().data(), n.value.data().data(), a.dim(0), a.dim(1),
                    b.dim(1));
        break;
      }
      case Op::BatchMatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
          fail(id, "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        }
        const std::size_t batch = a.dim(0), r = a.dim(1), k = a.dim(2), c = b.dim(2);
        n.value = Tensor({batch, r, c});
        for (std::size_t i = 0; i < batch; ++i) {
          matmul_into(a.data().data() + i * r * k, b.data().data() + i * k * c,
                      n.value.data().data() + i * r * c, r, k, c);
        }
        break;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const Broadcast kind = broadcast_kind(id, a, b);
        const std::size_t cols = a.cols();
        n.value = Tensor(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double bv = b[bindex(kind, i, cols)];
          n.value[i] = n.op == Op::Add ? a[i] + bv : n.op == Op::Sub ? a[i] - bv : a[i] * bv;
        }
        break;
      }
      case Op::Scale:
        n.value = map(in(0), [s = n.scalar](double v) { return v * s; });
        break;
      case Op::AddScalar:
        n.value = map(in(0), [s = n.scalar](double v) { return v + s; });
        break;
      case Op::Relu:
        n.value = map(in(0), [](double v) { return v > 0.0 ? v : 0.0; });
        break;
      case Op::Exp:
        n.value = map(in(0), [](double v) { return std::exp(v); });
        break;
      case Op::Log:
        for (double v : in(0).data()) {
          if (!(v > 0.0)) fail(id, "log of non-positive value " + std::to_string(v));
        }
        n.value = map(in(0), [](double v) { return std::log(v); });
        break;
      case Op::Sigmoid:
        n.value = map(in(0), sigmoid_value);
        break;
      case Op::LogSigmoid:
        n.value = map(in(0), log_sigmoid_value);
        break;
      case Op::Softmax:
      case Op::LogSoftmax: {
        const Tensor& a = in(0);
        const std::size_t cols = a.cols();
        n.value = Tensor(a.shape());
        std::vector<double> terms(cols);
        for (std::size_t r = 0; r < a.size() / cols; ++r) {
          const double* x = a.data().data() + r * cols;
          double* y = n.value.data().data() + r * cols;
          const double mx = *std::max_element(x, x + cols);
          for (std::size_t c = 0; c < cols; ++c) terms[c] = std::exp(x[c] - mx);
          std::vector<double> sorted = terms;
          const double total = ordered_sum(sorted);
          if (n.op == Op::Softmax) {
            for (std::size_t c = 0; c < cols; ++c) y[c] = terms[c] / total;
          } else {
            const double lse = mx + std::log(total);
            for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
          }
        }
        break;
      }
      case Op::Sum: {
        const Tensor& a = in(0);
        if (a.rank() != 2 || n.axis > 1) fail(id, "sum expects a rank-2 input and axis 0 or 1");
        const std::size_t r = a.dim(0), c = a.dim(1);
        n.value = n.axis == 0 ? Tensor({1, c}) : Tensor({r, 1});
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) n.value[n.axis == 0 ? j : i] += a.at(i, j);
        }
        break;
      }
      case Op::SumAll: {
        double s = 0.0;
        for (double v : in(0).data()) s += v;
        n.value = Tensor::scalar(s);
        break;
      }
      case Op::Concat: {
        std::size_t rows = 0, cols = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& t = in(k);
          if (t.rank() != 2) fail(id, "concat expects rank-2 inputs, got " + shape_str(t.shape()));
          if (k == 0) rows = t.dim(0);
          if (t.dim(0) != rows) {
            fail(id, "row mismatch " + std::to_string(rows) + " vs " + std::to_string(t.dim(0)));
          }
          cols += t.dim(1);
        }
        n.value = Tensor({rows, cols});
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& t = in(k);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < t.dim(1); ++c) n.value.at(r, offset + c) = t.at(r, c);
          }
          offset += t.dim(1);
        }
        break;
      }
      case Op::SliceCols: {
        const Tensor& a = in(0);
        if (a.rank() != 2 || n.begin >= n.end || n.end > a.dim(1)) {
          fail(id, "invalid column range [" + std::to_string(n.begin) + "," +
                       std::to_string(n.end) + ") for " + shape_str(a.shape()));
        }
        n.value = Tensor({a.dim(0), n.end - n.begin});
        for (std::size_t r = 0; r < a.dim(0); ++r) {
          for (std::size_t c = n.begin; c < n.end; ++c) n.value.at(r, c - n.begin) = a.at(r, c);
        }
        break;
      }
      case Op::GatherRows: {
        const Tensor& a = in(0);
        if (a.rank() != 2 || n.indices.empty()) fail(id, "gather_rows expects rank-2 input and indices");
        const std::size_t c = a.dim(1);
        n.value = Tensor({n.indices.size(), c});
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          if (n.indices[r] >= a.dim(0)) {
            fail(id, "row index " + std::to_string(n.indices[r]) + " out of range for " +
                         shape_str(a.shape()));
          }
          std::copy_n(a.data().data() + n.indices[r] * c, c, n.value.data().data() + r * c);
        }
        break;
      }
      case Op::SegmentSum: {
        const Tensor& a = in(0);
        if (a.rank() != 2 || a.dim(0) != n.indices.size() || n.count == 0) {
          fail(id, "segment_sum expects one segment id per row of " + shape_str(a.shape()));
        }
        const std::size_t c = a.dim(1);
        std::vector<std::vector<std::size_t>> members(n.count);
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          if (n.indices[r] >= n.count) fail(id, "segment id out of range");
          members[n.indices[r]].push_back(r);
        }
        n.value = Tensor({n.count, c});
        std::vector<double> terms;
        for (std::size_t s = 0; s < n.count; ++s) {
          for (std::size_t j = 0; j < c; ++j) {
            terms.clear();
            for (std::size_t r : members[s]) terms.push_back(a.at(r, j));
            n.value.at(s, j) = ordered_sum(terms);
          }
        }
        break;
      }
      case Op::Reshape:
        if (numel(n.target) != in(0).size()) {
          fail(id, "cannot reshape " + shape_str(in(0).shape()) + " to " + shape_str(n.target));
        }
        n.value = in(0).reshaped(n.target);
        break;
      case Op::Transpose: {
        const Tensor& a = in(0);
        if (a.rank() == 2) {
          n.value = Tensor({a.dim(1), a.dim(0)});
          transpose_into(a.data().data(), n.value.data().data(), a.dim(0), a.dim(1));
        } else if (a.rank() == 3) {
          const std::size_t b = a.dim(0), r = a.dim(1), c = a.dim(2);
          n.value = Tensor({b, c, r});
          for (std::size_t i = 0; i < b; ++i) {
            transpose_into(a.data().data() + i * r * c, n.value.data().data() + i * r * c, r, c);
          }
        } else {
          fail(id, "transpose expects rank 2 or 3, got " + shape_str(a.shape()));
        }
        break;
      }
      case Op::GaussianSample: {
        const Tensor& mu = in(0);
        const Tensor& sigma = in(1);
        if (mu.shape() != sigma.shape() || mu.shape() != n.noise.shape()) {
          fail(id, "mean " + shape_str(mu.shape()) + ", scale " + shape_str(sigma.shape()) +
                       " and noise " + shape_str(n.noise.shape()) + " must agree");
        }
        n.value = Tensor(mu.shape());
        for (std::size_t i = 0; i < mu.size(); ++i) n.value[i] = mu[i] + sigma[i] * n.noise[i];
        break;
      }
    }
    if (!n.value.all_finite()) fail(id, "non-finite value produced");
  }

  void propagate(NodeId id, std::vector<Tensor>& grads) const {
    const Node& n = nodes_[id];
    const Tensor& g = grads[id];
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    auto acc = [&](std::size_t k) -> Tensor& {
      Tensor& t = grads[n.inputs[k]];
      if (t.empty()) t = Tensor(in(k).shape(), 0.0);
      return t;
    };
    switch (n.op) {
      case Op::Input:
      case Op::Constant:
      case Op::Param:
        break;
      case Op::MatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g[i * c + j];
            if (gv == 0.0) continue;
            for (std::size_t t = 0; t < k; ++t) ga[i * k + t] += gv * b[t * c + j];
          }
        }
        Tensor& gb = acc(1);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t t = 0; t < k; ++t) {
            const double av = a[i * k + t];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) gb[t * c + j] += av * g[i * c + j];
          }
        }
        break;
      }
      case Op::BatchMatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t batch = a.dim(0), r = a.dim(1), k = a.dim(2), c = b.dim(2);
        Tensor& ga = acc(0);
        Tensor& gb = acc(1);
        for (std::size_t s = 0; s < batch; ++s) {
          const double* av = a.data().data() + s * r * k;
          const double* bv = b.data().data() + s * k * c;
          const double* gv = g.data().data() + s * r * c;
          double* gav = ga.data().data() + s * r * k;
          double* gbv = gb.data().data() + s * k * c;
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              for (std::size_t t = 0; t < k; ++t) {
                gav[i * k + t] += gv[i * c + j] * bv[t * c + j];
                gbv[t * c + j] += av[i * k + t] * gv[i * c + j];
              }
            }
          }
        }
        break;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const Broadcast kind = a.shape() == b.shape() ? Broadcast::Same
                               : b.size() == 1        ? Broadcast::Scalar
                               : b.dim(0) == 1        ? Broadcast::Row
                                                      : Broadcast::Column;
        const std::size_t cols = a.cols();
        Tensor& ga = acc(0);
        Tensor& gb = acc(1);
        for (std::size_t i = 0; i < a.size(); ++i) {
          const std::size_t j = bindex(kind, i, cols);
          if (n.op == Op::Add) {
            ga[i] += g[i];
            gb[j] += g[i];
          } else if (n.op == Op::Sub) {
            ga[i] += g[i];
            gb[j] -= g[i];
          } else {
            ga[i] += g[i] * b[j];
            gb[j] += g[i] * a[i];
          }
        }
        break;
      }
      case Op::Scale: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.scalar;
        break;
      }
      case Op::AddScalar:
      case Op::Reshape: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        break;
      }
      case Op::Relu: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += in(0)[i] > 0.0 ? g[i] : 0.0;
        break;
      }
      case Op::Exp: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.value[i];
        break;
      }
      case Op::Log: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / in(0)[i];
        break;
      }
      case Op::Sigmoid: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
        }
        break;
      }
      case Op::LogSigmoid: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sigmoid_value(-in(0)[i]);
        break;
      }
      case Op::Softmax:
      case Op::LogSoftmax: {
        Tensor& ga = acc(0);
        const std::size_t cols = g.cols();
        for (std::size_t r = 0; r < g.size() / cols; ++r) {
          const std::size_t o = r * cols;
          if (n.op == Op::Softmax) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * n.value[o + c];
            for (std::size_t c = 0; c < cols; ++c) ga[o + c] += n.value[o + c] * (g[o + c] - dot);
          } else {
            double total = 0.0;
            for (std::size_t c = 0; c < cols; ++c) total += g[o + c];
            for (std::size_t c = 0; c < cols; ++c) {
              ga[o + c] += g[o + c] - std::exp(n.value[o + c]) * total;
            }
          }
        }
        break;
      }
      case Op::Sum: {
        Tensor& ga = acc(0);
        const std::size_t r = ga.dim(0), c = ga.dim(1);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += g[n.axis == 0 ? j : i];
        }
        break;
      }
      case Op::SumAll: {
        Tensor& ga = acc(0);
        for (double& v : ga.data()) v += g[0];
        break;
      }
      case Op::Concat: {
        std::size_t offset = 0;
        const std::size_t cols = n.value.dim(1);
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          Tensor& gk = acc(k);
          const std::size_t w = gk.dim(1);
          for (std::size_t r = 0; r < gk.dim(0); ++r) {
            for (std::size_t c = 0; c < w; ++c) gk.at(r, c) += g[r * cols + offset + c];
          }
          offset += w;
        }
        break;
      }
      case Op::SliceCols: {
        Tensor& ga = acc(0);
        for (std::size_t r = 0; r < ga.dim(0); ++r) {
          for (std::size_t c = n.begin; c < n.end; ++c) ga.at(r, c) += g.at(r, c - n.begin);
        }
        break;
      }
      case Op::GatherRows: {
        Tensor& ga = acc(0);
        const std::size_t c = ga.dim(1);
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          for (std::size_t j = 0; j < c; ++j) ga[n.indices[r] * c + j] += g[r * c + j];
        }
        break;
      }
      case Op::SegmentSum: {
        Tensor& ga = acc(0);
        const std::size_t c = ga.dim(1);
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[n.indices[r] * c + j];
        }
        break;
      }
      case Op::Transpose: {
        Tensor& ga = acc(0);
        const Tensor& a = in(0);
        if (a.rank() == 2) {
          for (std::size_t i = 0; i < a.dim(0); ++i) {
            for (std::size_t j = 0; j < a.dim(1); ++j) ga.at(i, j) += g.at(j, i);
          }
        } else {
          const std::size_t b = a.dim(0), r = a.dim(1), c = a.dim(2);
          for (std::size_t s = 0; s < b; ++s) {
            for (std::size_t i = 0; i < r; ++i) {
              for (std::size_t j = 0; j < c; ++j) {
                ga[s * r * c + i * c + j] += g[s * r * c + j * r + i];
              }
            }
          }
        }
        break;
      }
      case Op::GaussianSample: {
        Tensor& gmu = acc(0);
        Tensor& gsigma = acc(1);
        for (std::size_t i = 0; i < g.size(); ++i) {
          gmu[i] += g[i];
          gsigma[i] += g[i] * n.noise[i];
        }
        break;
      }
    }
  }

  template <typename F>
  static Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
  }

  static void matmul_into(const double* a, const double* b, double* out, std::size_t r,
                          std::size_t k, std::size_t c) {
    for (std::size_t i = 0; i < r; ++i) {
      double* row = out + i * c;
      for (std::size_t t = 0; t < k; ++t) {
        const double av = a[i * k + t];
        if (av == 0.0) continue;
        const double* brow = b + t * c;
        for (std::size_t j = 0; j < c; ++j) row[j] += av * brow[j];
      }
    }
  }

  static void transpose_into(const double* a, double* out, std::size_t r, std::size_t c) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    }
  }

 public:
  static double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double log_sigmoid_value(double x) {
    return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
  }

 private:
  const ParamStore* params_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> param_ids_;
  std::map<std::string, NodeId> input_ids_;
};

}  // namespace ussr
