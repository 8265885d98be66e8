#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ussr/features.hpp"
#include "ussr/graph.hpp"
#include "ussr/nn.hpp"
#include "ussr/rng.hpp"

namespace ussr {

/// Diagonal Gaussian given by its mean and (strictly positive) stddev.
struct GaussianParams {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// KL(post || prior) for diagonal Gaussians, summed over dimensions.
inline double kl_diag_gaussian(const GaussianParams& post, const GaussianParams& prior) {
  const std::size_t d = post.mean.size();
  if (post.stddev.size() != d || prior.mean.size() != d || prior.stddev.size() != d) {
    throw Error("kl_diag_gaussian: dimension mismatch");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double s1 = post.stddev[i];
    const double s2 = prior.stddev[i];
    if (!(s1 > 0.0) || !(s2 > 0.0)) throw Error("kl_diag_gaussian: stddev must be positive");
    const double diff = post.mean[i] - prior.mean[i];
    kl += std::log(s2 / s1) + (s1 * s1 + diff * diff) / (2.0 * s2 * s2) - 0.5;
  }
  return kl;
}

/// Source of reparameterization noise for a requested shape.
using NoiseFn = std::function<Tensor(const Shape&)>;

inline NoiseFn sampled_noise(Rng& rng) {
  return [&rng](const Shape& shape) { return rng.normal_tensor(shape); };
}

/// Zero noise: every sample equals its posterior mean.
inline NoiseFn mean_noise() {
  return [](const Shape& shape) { return Tensor(shape, 0.0); };
}

enum class EncoderKind { Concat, Attention };
enum class GateInput { Encoded, Raw };

struct UniversalConfig {
  std::size_t clusters = 3;
  std::size_t latent_dim = 8;
  std::size_t hidden = 32;
  double beta = 1.0;    ///< weight of the Gaussian KL term
  double beta_c = 1.0;  ///< weight of the categorical KL term
  std::size_t samples = 1;
  EncoderKind encoder = EncoderKind::Concat;
  GateInput gate_input = GateInput::Encoded;
  std::size_t attention_layers = 1;
  std::size_t attention_heads = 2;
  std::size_t attention_dim = 4;

  bool operator==(const UniversalConfig&) const = default;
};

/// Shape of the encoded input: dense count plus embedding table sizes.
struct FeatureLayout {
  std::size_t dense = 0;
  std::vector<std::size_t> vocab_rows;
  std::size_t embed_dim = 4;

  static FeatureLayout from(const FeatureStats& stats) {
    FeatureLayout l;
    l.dense = stats.dense_count();
    for (std::size_t f = 0; f < stats.sparse_count(); ++f) l.vocab_rows.push_back(stats.table_rows(f));
    l.embed_dim = stats.embed_dim;
    return l;
  }

  std::size_t fields() const { return dense + vocab_rows.size(); }
  std::size_t raw_width() const { return dense + vocab_rows.size() * embed_dim; }

  bool operator==(const FeatureLayout&) const = default;
};

/// Graph nodes of one evaluation of the bound.
struct ElboNodes {
  NodeId gate_logits{};
  NodeId gate_probs{};
  NodeId gate_log_probs{};
  std::vector<NodeId> mean;       ///< per cluster, [B, d_z]
  std::vector<NodeId> log_sigma;  ///< per cluster, [B, d_z]
  std::vector<NodeId> kl;         ///< per cluster, [B, 1]
  std::vector<NodeId> loglik;     ///< per cluster, [B, 1]
  NodeId categorical_kl{};        ///< [B, 1]
  NodeId per_example{};           ///< [B, 1] negated bound
  NodeId loss{};                  ///< mean of per_example
};

/// Mixture-of-Gaussians information-bottleneck model: a cluster gate, one
/// Gaussian posterior head and learnable prior per cluster, and a shared
/// decoder from latent code to label logit.
class UniversalModel {
 public:
  UniversalModel() = default;

  UniversalModel(UniversalConfig config, FeatureLayout layout, Rng& rng)
      : config_(config), layout_(std::move(layout)), clusters_(config.clusters) {
    if (clusters_ == 0) throw Error("cluster count must be at least 1");
    if (config_.latent_dim == 0 || config_.hidden == 0) throw Error("latent and hidden sizes must be positive");
    if (config_.samples == 0) throw Error("samples per cluster must be at least 1");
    if (layout_.fields() == 0) throw Error("feature layout has no fields");
    const std::size_t e = layout_.embed_dim;
    for (std::size_t f = 0; f < layout_.vocab_rows.size(); ++f) {
      params_.set(embedding_name(f), rng.normal_tensor({layout_.vocab_rows[f], e}, 0.1));
    }
    if (config_.encoder == EncoderKind::Attention) init_attention(rng);
    nn::init_linear(params_, "gate.hidden", gate_width(), config_.hidden, rng);
    for (std::size_t k = 0; k < clusters_; ++k) {
      init_gate_column(k, rng);
      nn::init_mlp(params_, head_name(k), {head_width(), config_.hidden, 2 * config_.latent_dim}, rng);
      params_.set(prior_mean_name(k), Tensor({1, config_.latent_dim}, 0.0));
      params_.set(prior_log_sigma_name(k), Tensor({1, config_.latent_dim}, 0.0));
    }
    nn::init_mlp(params_, "dec", {config_.latent_dim, config_.hidden, 1}, rng);
  }

  /// Reassembles a model from stored parameters.
  UniversalModel(UniversalConfig config, FeatureLayout layout, std::size_t clusters, ParamStore params)
      : config_(config), layout_(std::move(layout)), clusters_(clusters), params_(std::move(params)) {
    for (std::size_t k = 0; k < clusters_; ++k) {
      if (!params_.contains(prior_mean_name(k)) || !params_.contains(gate_weight_name(k))) {
        throw Error("stored universal parameters lack cluster " + std::to_string(k));
      }
    }
  }

  const UniversalConfig& config() const { return config_; }
  UniversalConfig& config() { return config_; }
  const FeatureLayout& layout() const { return layout_; }
  std::size_t clusters() const { return clusters_; }
  std::size_t latent_dim() const { return config_.latent_dim; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

  static std::string embedding_name(std::size_t f) { return "emb.f" + std::to_string(f); }
  static std::string head_name(std::size_t k) { return "head" + std::to_string(k); }
  static std::string prior_mean_name(std::size_t k) { return "prior" + std::to_string(k) + ".mu"; }
  static std::string prior_log_sigma_name(std::size_t k) { return "prior" + std::to_string(k) + ".logsig"; }
  static std::string gate_weight_name(std::size_t k) { return "gate.out" + std::to_string(k) + ".w"; }
  static std::string gate_bias_name(std::size_t k) { return "gate.out" + std::to_string(k) + ".b"; }

  /// Whether parameter `name` belongs exclusively to cluster k (its head,
  /// its prior or its gate column).
  static bool cluster_owns(const std::string& name, std::size_t k) {
    return nn::owned_by(name, head_name(k)) || nn::owned_by(name, "prior" + std::to_string(k)) ||
           nn::owned_by(name, "gate.out" + std::to_string(k));
  }

  // ---- graph construction -------------------------------------------------

  struct Inputs {
    NodeId gate;
    NodeId head;
  };

  /// Embedding concatenation (and optional interacting encoder) for a batch.
  Inputs build_inputs(Graph& g, const Batch& batch) const {
    std::vector<NodeId> parts;
    for (std::size_t f = 0; f < layout_.vocab_rows.size(); ++f) {
      parts.push_back(g.gather_rows(g.param(embedding_name(f)), batch.sparse.at(f)));
    }
    std::optional<NodeId> dense;
    if (layout_.dense) {
      if (!batch.has_dense() || batch.dense.dim(1) != layout_.dense) throw Error("batch dense width mismatch");
      dense = g.constant(batch.dense);
    }
    if (config_.encoder == EncoderKind::Concat) {
      if (dense) parts.push_back(*dense);
      const NodeId raw = parts.size() == 1 ? parts[0] : g.concat(parts);
      return {raw, raw};
    }
    std::vector<NodeId> fields = parts;
    for (std::size_t j = 0; j < layout_.dense; ++j) {
      fields.push_back(g.matmul(g.slice_cols(*dense, j, j + 1), g.param("enc.dense" + std::to_string(j))));
    }
    const std::size_t b = batch.size();
    const std::size_t f = layout_.fields();
    NodeId x = g.reshape(fields.size() == 1 ? fields[0] : g.concat(fields), {b * f, layout_.embed_dim});
    for (std::size_t l = 0; l < config_.attention_layers; ++l) x = attention_layer(g, x, b, f, l);
    const NodeId encoded = g.reshape(x, {b, f * attention_width()});
    if (config_.gate_input == GateInput::Encoded) return {encoded, encoded};
    if (dense) parts.push_back(*dense);
    const NodeId raw = parts.size() == 1 ? parts[0] : g.concat(parts);
    return {raw, encoded};
  }

  /// One multi-head self-attention layer over the fields of each example with
  /// a projected residual and relu. `x` is [batch*fields, width].
  NodeId attention_layer(Graph& g, NodeId x, std::size_t batch, std::size_t fields, std::size_t layer) const {
    const std::size_t d = config_.attention_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<NodeId> heads;
    for (std::size_t h = 0; h < config_.attention_heads; ++h) {
      const std::string p = "enc.l" + std::to_string(layer) + ".h" + std::to_string(h);
      auto project = [&](const char* which) {
        return g.reshape(g.matmul(x, g.param(p + which)), {batch, fields, d});
      };
      const NodeId q = project(".q");
      const NodeId k = project(".k");
      const NodeId v = project(".v");
      const NodeId weights = g.softmax(g.scale(g.batch_matmul(q, g.transpose(k)), scale));
      heads.push_back(g.reshape(g.batch_matmul(weights, v), {batch * fields, d}));
    }
    const NodeId merged = heads.size() == 1 ? heads[0] : g.concat(heads);
    const NodeId residual = g.matmul(x, g.param("enc.l" + std::to_string(layer) + ".res"));
    return g.relu(g.add(merged, residual));
  }

  NodeId build_gate_logits(Graph& g, NodeId gate_in) const {
    const NodeId hidden = g.relu(nn::linear(g, gate_in, "gate.hidden"));
    std::vector<NodeId> cols;
    for (std::size_t k = 0; k < clusters_; ++k) {
      cols.push_back(g.add(g.matmul(hidden, g.param(gate_weight_name(k))), g.param(gate_bias_name(k))));
    }
    return cols.size() == 1 ? cols[0] : g.concat(cols);
  }

  /// Posterior mean and log-stddev of cluster k.
  std::pair<NodeId, NodeId> build_head(Graph& g, NodeId head_in, std::size_t k) const {
    const NodeId out = nn::mlp(g, head_in, params_, head_name(k));
    const std::size_t dz = config_.latent_dim;
    return {g.slice_cols(out, 0, dz), g.slice_cols(out, dz, 2 * dz)};
  }

  /// Per-example KL(q(z|x,c=k) || p(z|c=k)), [B, 1].
  NodeId build_kl(Graph& g, NodeId mean, NodeId log_sigma, std::size_t k) const {
    const NodeId prior_mu = g.param(prior_mean_name(k));
    const NodeId prior_ls = g.param(prior_log_sigma_name(k));
    const NodeId log_ratio = g.sub(log_sigma, prior_ls);  // log(s1/s2)
    const NodeId diff = g.sub(mean, prior_mu);
    const NodeId var_post = g.exp(g.scale(log_sigma, 2.0));
    const NodeId inv_var_prior = g.exp(g.scale(prior_ls, -2.0));
    const NodeId quad = g.mul(g.add(var_post, g.mul(diff, diff)), inv_var_prior);
    const NodeId elem = g.add_scalar(g.sub(g.scale(quad, 0.5), log_ratio), -0.5);
    return g.sum(elem, 1);
  }

  NodeId build_decoder(Graph& g, NodeId z) const { return nn::mlp(g, z, params_, "dec"); }

  /// y log sigmoid(l) + (1-y) log sigmoid(-l), [B, 1].
  static NodeId bernoulli_loglik(Graph& g, NodeId logits, NodeId labels) {
    const NodeId one_minus = g.add_scalar(g.neg(labels), 1.0);
    return g.add(g.mul(labels, g.log_sigmoid(logits)), g.mul(one_minus, g.log_sigmoid(g.neg(logits))));
  }

  /// Negated evidence lower bound:
  ///   -sum_k q(k|x) [ log p(y|z_k) - beta KL_k ] + beta_c KL(q(c|x) || uniform).
  ElboNodes build_elbo(Graph& g, const Batch& batch, const NoiseFn& noise) const {
    check_labels(batch);
    const Inputs in = build_inputs(g, batch);
    const NodeId labels = g.constant(batch.labels);
    ElboNodes n;
    n.gate_logits = build_gate_logits(g, in.gate);
    n.gate_probs = g.softmax(n.gate_logits);
    n.gate_log_probs = g.log_softmax(n.gate_logits);
    const Shape latent{batch.size(), config_.latent_dim};
    std::vector<NodeId> weighted;
    for (std::size_t k = 0; k < clusters_; ++k) {
      auto [mean, log_sigma] = build_head(g, in.head, k);
      const NodeId sigma = g.exp(log_sigma);
      NodeId ll{};
      for (std::size_t s = 0; s < config_.samples; ++s) {
        const NodeId z = g.gaussian_sample(mean, sigma, noise(latent));
        const NodeId term = bernoulli_loglik(g, build_decoder(g, z), labels);
        ll = s == 0 ? term : g.add(ll, term);
      }
      if (config_.samples > 1) ll = g.scale(ll, 1.0 / static_cast<double>(config_.samples));
      const NodeId kl = build_kl(g, mean, log_sigma, k);
      n.mean.push_back(mean);
      n.log_sigma.push_back(log_sigma);
      n.loglik.push_back(ll);
      n.kl.push_back(kl);
      const NodeId bracket = g.sub(ll, g.scale(kl, config_.beta));
      weighted.push_back(g.mul(g.slice_cols(n.gate_probs, k, k + 1), bracket));
    }
    NodeId expected = weighted[0];
    for (std::size_t k = 1; k < weighted.size(); ++k) expected = g.add(expected, weighted[k]);
    // KL(q(c|x) || 1/K) = sum_k q_k (log q_k + log K)
    const double log_k = std::log(static_cast<double>(clusters_));
    n.categorical_kl = g.sum(g.mul(n.gate_probs, g.add_scalar(n.gate_log_probs, log_k)), 1);
    n.per_example = g.add(g.neg(expected), g.scale(n.categorical_kl, config_.beta_c));
    n.loss = g.mean_all(n.per_example);
    return n;
  }

  /// z_bar = sum_k q(k|x) mu_k(x) as graph nodes, [B, d_z].
  NodeId build_repr(Graph& g, const Batch& batch) const {
    const Inputs in = build_inputs(g, batch);
    const NodeId probs = g.softmax(build_gate_logits(g, in.gate));
    NodeId acc{};
    for (std::size_t k = 0; k < clusters_; ++k) {
      const NodeId term = g.mul(build_head(g, in.head, k).first, g.slice_cols(probs, k, k + 1));
      acc = k == 0 ? term : g.add(acc, term);
    }
    return acc;
  }

  // ---- evaluation ----------------------------------------------------------

  /// q(c|x) for each example, [B, K].
  Tensor gate_posterior(const Batch& batch) const {
    Graph g(&params_);
    return g.value(g.softmax(build_gate_logits(g, build_inputs(g, batch).gate)));
  }

  std::vector<double> gate_posterior(const EncodedExample& x) const {
    return gate_posterior(make_batch(x)).values();
  }

  /// Posterior q(z|x, c=k) of every example in the batch.
  std::vector<GaussianParams> posterior(const Batch& batch, std::size_t k) const {
    check_cluster(k);
    Graph g(&params_);
    auto [mean, log_sigma] = build_head(g, build_inputs(g, batch).head, k);
    std::vector<GaussianParams> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out[i].mean = g.value(mean).row_values(i);
      for (double v : g.value(log_sigma).row_values(i)) out[i].stddev.push_back(std::exp(v));
    }
    return out;
  }

  GaussianParams prior(std::size_t k) const {
    check_cluster(k);
    GaussianParams p;
    p.mean = params_.get(prior_mean_name(k)).values();
    for (double v : params_.get(prior_log_sigma_name(k)).data()) p.stddev.push_back(std::exp(v));
    return p;
  }

  /// Prior means stacked as the cluster bank, [K, d_z].
  Tensor cluster_bank() const {
    Tensor bank({clusters_, config_.latent_dim});
    for (std::size_t k = 0; k < clusters_; ++k) {
      const Tensor& mu = params_.get(prior_mean_name(k));
      for (std::size_t j = 0; j < config_.latent_dim; ++j) bank.at(k, j) = mu[j];
    }
    return bank;
  }

  double elbo_loss(const Batch& batch, const NoiseFn& noise) const {
    Graph g(&params_);
    return g.value(build_elbo(g, batch, noise).loss)[0];
  }

  std::vector<double> elbo_per_example(const Batch& batch, const NoiseFn& noise) const {
    Graph g(&params_);
    return g.value(build_elbo(g, batch, noise).per_example).values();
  }

  /// Deterministic mixture of posterior means, [B, d_z].
  Tensor universal_repr(const Batch& batch) const {
    Graph g(&params_);
    return g.value(build_repr(g, batch));
  }

  std::vector<double> universal_repr(const EncodedExample& x) const {
    return universal_repr(make_batch(x)).values();
  }

  std::vector<double> predict_universal(const Batch& batch) const {
    Graph g(&params_);
    return g.value(g.sigmoid(build_decoder(g, build_repr(g, batch)))).values();
  }

  double predict_universal(const EncodedExample& x) const { return predict_universal(make_batch(x))[0]; }

  // ---- growth --------------------------------------------------------------

  /// Appends cluster K as a copy of cluster `source` with its head and prior
  /// perturbed by N(0, perturb^2), and a zero gate column. Returns the new index.
  std::size_t add_cluster(std::size_t source, double perturb, Rng& rng) {
    check_cluster(source);
    const std::size_t k = clusters_;
    std::vector<std::pair<std::string, Tensor>> copies;
    const std::string src_head = head_name(source);
    for (const auto& [name, value] : params_) {
      if (nn::owned_by(name, src_head)) copies.emplace_back(head_name(k) + name.substr(src_head.size()), value);
    }
    copies.emplace_back(prior_mean_name(k), params_.get(prior_mean_name(source)));
    copies.emplace_back(prior_log_sigma_name(k), params_.get(prior_log_sigma_name(source)));
    for (auto& [name, value] : copies) {
      for (double& v : value.data()) v += perturb * rng.normal();
      params_.set(name, std::move(value));
    }
    params_.set(gate_weight_name(k), Tensor({config_.hidden, 1}, 0.0));
    params_.set(gate_bias_name(k), Tensor({1, 1}, 0.0));
    ++clusters_;
    return k;
  }

 private:
  std::size_t attention_width() const { return config_.attention_heads * config_.attention_dim; }

  std::size_t encoded_width() const {
    return config_.encoder == EncoderKind::Concat ? layout_.raw_width() : layout_.fields() * attention_width();
  }
  std::size_t head_width() const { return encoded_width(); }
  std::size_t gate_width() const {
    return config_.gate_input == GateInput::Raw ? layout_.raw_width() : encoded_width();
  }

  void init_attention(Rng& rng) {
    if (config_.attention_layers == 0 || config_.attention_heads == 0 || config_.attention_dim == 0) {
      throw Error("attention encoder needs positive layers, heads and head width");
    }
    const std::size_t e = layout_.embed_dim;
    for (std::size_t j = 0; j < layout_.dense; ++j) {
      params_.set("enc.dense" + std::to_string(j), rng.normal_tensor({1, e}, 0.1));
    }
    std::size_t width = e;
    for (std::size_t l = 0; l < config_.attention_layers; ++l) {
      const double s = std::sqrt(1.0 / static_cast<double>(width));
      for (std::size_t h = 0; h < config_.attention_heads; ++h) {
        const std::string p = "enc.l" + std::to_string(l) + ".h" + std::to_string(h);
        params_.set(p + ".q", rng.normal_tensor({width, config_.attention_dim}, s));
        params_.set(p + ".k", rng.normal_tensor({width, config_.attention_dim}, s));
        params_.set(p + ".v", rng.normal_tensor({width, config_.attention_dim}, s));
      }
      params_.set("enc.l" + std::to_string(l) + ".res", rng.normal_tensor({width, attention_width()}, s));
      width = attention_width();
    }
  }

  void init_gate_column(std::size_t k, Rng& rng) {
    const double s = std::sqrt(2.0 / static_cast<double>(config_.hidden + 1));
    params_.set(gate_weight_name(k), rng.normal_tensor({config_.hidden, 1}, s));
    params_.set(gate_bias_name(k), Tensor({1, 1}, 0.0));
  }

  void check_cluster(std::size_t k) const {
    if (k >= clusters_) throw Error("cluster " + std::to_string(k) + " out of range");
  }

  static void check_labels(const Batch& batch) {
    for (double y : batch.labels.data()) {
      if (y != 0.0 && y != 1.0) throw Error("labels must be 0 or 1");
    }
  }

  UniversalConfig config_{};
  FeatureLayout layout_{};
  std::size_t clusters_ = 0;
  ParamStore params_;
};

}  // namespace ussr
