#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ussr/features.hpp"
#include "ussr/graph.hpp"
#include "ussr/nn.hpp"
#include "ussr/rng.hpp"
#include "ussr/universal.hpp"

namespace ussr {

struct BipartiteConfig {
  std::size_t edge_dim = 8;      ///< d_h
  std::size_t hidden = 16;
  std::size_t segment_dim = 4;   ///< d_u for learnable segment features
  double temperature = 1.0;
  bool gumbel = false;           ///< sample edge weights during training

  bool operator==(const BipartiteConfig&) const = default;
};

struct SegmentDescriptor {
  std::size_t id = 0;
  std::vector<double> features;               ///< u_m, empty when learnable
  bool frozen = false;
  std::optional<std::vector<double>> repr;    ///< stored h_hat_m

  bool operator==(const SegmentDescriptor&) const = default;
};

/// Reads "seg,u_0,u_1,..." rows. Ids must cover 0..M-1 exactly once.
inline std::vector<std::vector<double>> read_segment_features(const CsvTable& table) {
  if (table.header.empty() || table.header[0] != "seg") throw Error("segment features must start with a 'seg' column");
  const std::size_t du = table.header.size() - 1;
  if (du == 0) throw Error("segment features need at least one u_ column");
  std::vector<std::optional<std::vector<double>>> rows(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::string where = "segment features line " + std::to_string(table.lines[r]);
    if (row.size() != table.header.size()) throw Error(where + ": wrong number of fields");
    std::size_t id = 0;
    try {
      std::size_t used = 0;
      id = std::stoul(row[0], &used);
      if (used != row[0].size()) throw Error("");
    } catch (...) {
      throw Error(where + ": bad segment id '" + row[0] + "'");
    }
    if (id >= rows.size() || rows[id]) throw Error(where + ": segment ids must be dense and unique");
    std::vector<double> u(du);
    for (std::size_t j = 0; j < du; ++j) {
      try {
        u[j] = std::stod(row[j + 1]);
      } catch (...) {
        throw Error(where + ": bad value '" + row[j + 1] + "'");
      }
    }
    rows[id] = std::move(u);
  }
  std::vector<std::vector<double>> out;
  for (auto& r : rows) out.push_back(std::move(*r));
  if (out.empty()) throw Error("segment features file has no rows");
  return out;
}

/// Node ids of one encode-aggregate-decode round. Edge rows are ordered
/// segment-major: row m*K + k holds the pair (k, m).
struct InteractionNodes {
  NodeId edge_input;   ///< [M*K, d_z + d_u]
  NodeId h1;           ///< [M*K, d_h]
  NodeId h2_cluster;   ///< [K, d_h]
  NodeId h2_segment;   ///< [M, d_h]
  NodeId logits;       ///< [M, K]
  NodeId weights;      ///< [M, K], rows sum to one
  NodeId decoded;      ///< f_hat_e per edge, [M*K, d_h]
  NodeId repr;         ///< [M, d_h]
};

struct SegmentLoss {
  NodeId loss;                                    ///< mean cross-entropy
  std::map<std::size_t, std::vector<std::size_t>> rows;  ///< batch rows per segment
  std::map<std::size_t, NodeId> logits;           ///< decoder logits per segment
};

class BipartiteModel {
 public:
  BipartiteModel() = default;

  /// Segment features from a table (`features` non-empty) or learnable
  /// embeddings for `segments` ids.
  BipartiteModel(BipartiteConfig config, Tensor cluster_bank, std::vector<std::vector<double>> features,
                 std::size_t segments, Rng& rng)
      : config_(config), bank_(std::move(cluster_bank)), learnable_(features.empty()) {
    if (bank_.rank() != 2) throw Error("cluster bank must be [K, d_z]");
    if (config_.temperature <= 0.0) throw Error("temperature must be positive");
    if (!learnable_) {
      segments = features.size();
      config_.segment_dim = features[0].size();
      for (const auto& u : features) {
        if (u.size() != config_.segment_dim) throw Error("segment feature rows differ in width");
      }
    }
    if (segments == 0) throw Error("need at least one segment");
    const std::size_t in = bank_.dim(1) + config_.segment_dim;
    const std::size_t dh = config_.edge_dim;
    nn::init_mlp(params_, "b.fe", {in, config_.hidden, dh}, rng);
    nn::init_mlp(params_, "b.fv", {dh, config_.hidden, dh}, rng);
    nn::init_mlp(params_, "b.fe2", {2 * dh, config_.hidden, 1}, rng);
    nn::init_mlp(params_, "b.fhat", {in, config_.hidden, dh}, rng);
    for (std::size_t m = 0; m < segments; ++m) {
      SegmentDescriptor d;
      d.id = m;
      if (!learnable_) d.features = features[m];
      else params_.set(feature_name(m), rng.normal_tensor({1, config_.segment_dim}, 0.5));
      segments_.push_back(std::move(d));
      init_decoder(m, rng);
    }
  }

  /// Restores a model from stored state.
  BipartiteModel(BipartiteConfig config, Tensor cluster_bank, bool learnable, std::vector<SegmentDescriptor> segments,
                 std::optional<Tensor> cluster_summary, ParamStore params)
      : config_(config),
        bank_(std::move(cluster_bank)),
        learnable_(learnable),
        segments_(std::move(segments)),
        summary_(std::move(cluster_summary)),
        params_(std::move(params)) {
    for (std::size_t m = 0; m < segments_.size(); ++m) {
      if (segments_[m].id != m) throw Error("segment ids must be dense");
    }
  }

  const BipartiteConfig& config() const { return config_; }
  BipartiteConfig& config() { return config_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }
  const std::vector<SegmentDescriptor>& segments() const { return segments_; }
  std::size_t segment_count() const { return segments_.size(); }
  std::size_t clusters() const { return bank_.dim(0); }
  const Tensor& cluster_bank() const { return bank_; }
  bool learnable_features() const { return learnable_; }
  const std::optional<Tensor>& cluster_summary() const { return summary_; }

  static std::string decoder_name(std::size_t m) { return "b.dec" + std::to_string(m); }
  static std::string feature_name(std::size_t m) { return "b.u" + std::to_string(m); }

  /// Replaces the cluster bank, e.g. after joint fine-tuning moved the priors.
  void set_cluster_bank(Tensor bank) {
    if (bank.rank() != 2 || bank.dim(1) != bank_.dim(1)) throw Error("cluster bank width mismatch");
    bank_ = std::move(bank);
  }

  std::vector<double> segment_features(std::size_t m) const {
    check_segment(m);
    return learnable_ ? params_.get(feature_name(m)).values() : segments_[m].features;
  }

  // ---- graph construction -------------------------------------------------

  /// Segment features stacked as [M, d_u]; parameters when learnable.
  NodeId build_features(Graph& g) const {
    if (!learnable_) {
      Tensor u({segments_.size(), config_.segment_dim});
      for (std::size_t m = 0; m < segments_.size(); ++m) {
        for (std::size_t j = 0; j < config_.segment_dim; ++j) u.at(m, j) = segments_[m].features[j];
      }
      return g.constant(std::move(u));
    }
    std::vector<NodeId> cols;
    for (std::size_t m = 0; m < segments_.size(); ++m) cols.push_back(g.transpose(g.param(feature_name(m))));
    return g.transpose(cols.size() == 1 ? cols[0] : g.concat(cols));
  }

  /// Prior means of `universal` as [K, d_z] graph nodes; the graph's store
  /// must hold the universal parameters.
  static NodeId build_bank(Graph& g, const UniversalModel& universal) {
    std::vector<NodeId> cols;
    for (std::size_t k = 0; k < universal.clusters(); ++k) {
      cols.push_back(g.transpose(g.param(UniversalModel::prior_mean_name(k))));
    }
    return g.transpose(cols.size() == 1 ? cols[0] : g.concat(cols));
  }

  /// One interaction round between bank rows `z` [K, d_z] and segments `u`
  /// [M, d_u]. `gumbel` (optional, [M, K]) is added to the logits.
  InteractionNodes build_interaction(Graph& g, NodeId z, NodeId u, const std::optional<Tensor>& gumbel = {}) const {
    const std::size_t k_count = g.value(z).dim(0);
    const std::size_t m_count = g.value(u).dim(0);
    if (g.value(z).dim(1) + g.value(u).dim(1) != params_.get("b.fe.l0.w").dim(0)) {
      throw Error("edge input width " + std::to_string(g.value(z).dim(1) + g.value(u).dim(1)) +
                  " does not match the edge encoder");
    }
    std::vector<std::size_t> kidx(m_count * k_count), midx(m_count * k_count);
    for (std::size_t r = 0; r < kidx.size(); ++r) {
      kidx[r] = r % k_count;
      midx[r] = r / k_count;
    }
    InteractionNodes n;
    n.edge_input = g.concat({g.gather_rows(z, kidx), g.gather_rows(u, midx)});
    n.h1 = nn::mlp(g, n.edge_input, params_, "b.fe");
    n.h2_cluster = nn::mlp(g, g.segment_sum(n.h1, kidx, k_count), params_, "b.fv", nn::Output::Relu);
    n.h2_segment = nn::mlp(g, g.segment_sum(n.h1, midx, m_count), params_, "b.fv", nn::Output::Relu);
    n.logits = edge_logits(g, n.h2_cluster, n.h2_segment, kidx, midx, m_count, k_count);
    NodeId scaled = n.logits;
    if (gumbel) scaled = g.add(scaled, g.constant(*gumbel));
    n.weights = g.softmax(g.scale(scaled, 1.0 / config_.temperature));
    n.decoded = nn::mlp(g, n.edge_input, params_, "b.fhat");
    n.repr = g.segment_sum(g.mul(n.decoded, g.reshape(n.weights, {m_count * k_count, 1})), midx, m_count);
    return n;
  }

  /// Cross-entropy of the segment decoders over `batch`, where `zbar` is
  /// [B, d_z] and `repr` is [M, d_h]. Segments with a stored representation
  /// read it instead of `repr`.
  SegmentLoss build_loss(Graph& g, const Batch& batch, NodeId zbar, std::optional<NodeId> repr) const {
    SegmentLoss out;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      check_segment(batch.segments[i]);
      out.rows[batch.segments[i]].push_back(i);
    }
    const NodeId labels = g.constant(batch.labels);
    NodeId total{};
    bool first = true;
    for (const auto& [m, rows] : out.rows) {
      const NodeId logits = build_decoder(g, m, rows, zbar, repr);
      out.logits[m] = logits;
      const NodeId ll = g.sum_all(UniversalModel::bernoulli_loglik(g, logits, g.gather_rows(labels, rows)));
      total = first ? ll : g.add(total, ll);
      first = false;
    }
    out.loss = g.scale(total, -1.0 / static_cast<double>(batch.size()));
    return out;
  }

  /// Decoder logits of segment m for the given batch rows.
  NodeId build_decoder(Graph& g, std::size_t m, const std::vector<std::size_t>& rows, NodeId zbar,
                       std::optional<NodeId> repr) const {
    check_segment(m);
    if (!params_.contains(decoder_name(m) + ".l0.w")) throw Error("unknown segment " + std::to_string(m));
    NodeId h;
    if (segments_[m].repr) {
      h = g.constant(Tensor({rows.size(), config_.edge_dim}, tile(*segments_[m].repr, rows.size())));
    } else {
      if (!repr) throw Error("segment " + std::to_string(m) + " has no representation yet");
      h = g.gather_rows(*repr, std::vector<std::size_t>(rows.size(), m));
    }
    return nn::mlp(g, g.concat({h, g.gather_rows(zbar, rows)}), params_, decoder_name(m));
  }

  // ---- evaluation ----------------------------------------------------------

  struct Interaction {
    Tensor h1, h2_cluster, h2_segment, logits, weights, decoded, repr;
  };

  /// Deterministic interaction over the current bank and all segments.
  Interaction interact() const {
    Graph g(&params_);
    const auto n = build_interaction(g, g.constant(bank_), build_features(g));
    return {g.value(n.h1),     g.value(n.h2_cluster), g.value(n.h2_segment), g.value(n.logits),
            g.value(n.weights), g.value(n.decoded),   g.value(n.repr)};
  }

  std::vector<double> edge_weights(std::size_t m) const {
    check_segment(m);
    return interact().weights.row_values(m);
  }

  /// h_hat_m: the stored value once frozen, otherwise computed.
  std::vector<double> segment_repr(std::size_t m) const {
    check_segment(m);
    if (segments_[m].repr) return *segments_[m].repr;
    return interact().repr.row_values(m);
  }

  std::vector<double> predict_segment(const UniversalModel& universal, const Batch& batch) const {
    for (std::uint32_t m : batch.segments) check_segment(m);
    Graph g(&params_);
    const NodeId zbar = g.constant(universal.universal_repr(batch));
    std::optional<NodeId> repr;
    if (std::any_of(batch.segments.begin(), batch.segments.end(), [&](auto m) { return !segments_[m].repr; })) {
      repr = build_interaction(g, g.constant(bank_), build_features(g)).repr;
    }
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < batch.size(); ++i) groups[batch.segments[i]].push_back(i);
    std::vector<double> out(batch.size());
    for (const auto& [m, rows] : groups) {
      const Tensor& logits = g.value(build_decoder(g, m, rows, zbar, repr));
      for (std::size_t j = 0; j < rows.size(); ++j) out[rows[j]] = Graph::sigmoid_value(logits[j]);
    }
    return out;
  }

  double predict_segment(const UniversalModel& universal, const EncodedExample& x) const {
    return predict_segment(universal, make_batch(x))[0];
  }

  // ---- lifecycle -----------------------------------------------------------

  /// Stores h_hat for every segment and the cluster summaries, and marks all
  /// segments frozen.
  void freeze() {
    const Interaction it = interact();
    for (std::size_t m = 0; m < segments_.size(); ++m) {
      if (!segments_[m].repr) segments_[m].repr = it.repr.row_values(m);
      segments_[m].frozen = true;
    }
    if (!summary_) summary_ = it.h2_cluster;
  }

  bool all_frozen() const {
    return std::all_of(segments_.begin(), segments_.end(), [](const auto& s) { return s.frozen; });
  }

  /// Appends a segment whose representation comes from the frozen encoders
  /// against the stored cluster summaries. A learnable model without explicit
  /// features starts from the mean of the existing segment features.
  std::size_t add_segment(std::optional<std::vector<double>> features, Rng& rng) {
    if (!summary_) throw Error("segments must be frozen before adding a new one");
    const std::size_t m = segments_.size();
    std::vector<double> u;
    if (features) {
      u = std::move(*features);
    } else {
      if (!learnable_) throw Error("new segment needs a feature vector");
      u.assign(config_.segment_dim, 0.0);
      for (std::size_t s = 0; s < m; ++s) {
        const auto v = segment_features(s);
        for (std::size_t j = 0; j < u.size(); ++j) u[j] += v[j] / static_cast<double>(m);
      }
    }
    if (u.size() != config_.segment_dim) {
      throw Error("segment feature width " + std::to_string(u.size()) + " != " + std::to_string(config_.segment_dim));
    }

    Graph g(&params_);
    const std::size_t k_count = bank_.dim(0);
    const NodeId z = g.constant(bank_);
    const NodeId un = g.constant(Tensor({1, u.size()}, u));
    std::vector<std::size_t> kidx(k_count), midx(k_count, 0);
    for (std::size_t k = 0; k < k_count; ++k) kidx[k] = k;
    const NodeId edge_input = g.concat({z, g.gather_rows(un, midx)});
    const NodeId h1 = nn::mlp(g, edge_input, params_, "b.fe");
    const NodeId h2m = nn::mlp(g, g.segment_sum(h1, midx, 1), params_, "b.fv", nn::Output::Relu);
    const NodeId logits = edge_logits(g, g.constant(*summary_), h2m, kidx, midx, 1, k_count);
    const NodeId weights = g.softmax(g.scale(logits, 1.0 / config_.temperature));
    const NodeId decoded = nn::mlp(g, edge_input, params_, "b.fhat");
    const NodeId repr = g.segment_sum(g.mul(decoded, g.reshape(weights, {k_count, 1})), midx, 1);

    SegmentDescriptor d;
    d.id = m;
    d.repr = g.value(repr).values();
    if (learnable_) params_.set(feature_name(m), Tensor({1, u.size()}, u));
    else d.features = u;
    segments_.push_back(std::move(d));
    init_decoder(m, rng);
    return m;
  }

  void mark_frozen(std::size_t m) {
    check_segment(m);
    if (!segments_[m].repr) throw Error("segment " + std::to_string(m) + " has no stored representation");
    segments_[m].frozen = true;
  }

  void check_segment(std::size_t m) const {
    if (m >= segments_.size()) throw Error("unknown segment " + std::to_string(m));
  }

 private:
  NodeId edge_logits(Graph& g, NodeId h2k, NodeId h2m, const std::vector<std::size_t>& kidx,
                     const std::vector<std::size_t>& midx, std::size_t m_count, std::size_t k_count) const {
    const NodeId pair = g.concat({g.gather_rows(h2k, kidx), g.gather_rows(h2m, midx)});
    return g.reshape(nn::mlp(g, pair, params_, "b.fe2"), {m_count, k_count});
  }

  void init_decoder(std::size_t m, Rng& rng) {
    nn::init_mlp(params_, decoder_name(m), {config_.edge_dim + bank_.dim(1), config_.hidden, 1}, rng);
  }

  static std::vector<double> tile(const std::vector<double>& row, std::size_t times) {
    std::vector<double> out;
    out.reserve(row.size() * times);
    for (std::size_t i = 0; i < times; ++i) out.insert(out.end(), row.begin(), row.end());
    return out;
  }

  BipartiteConfig config_{};
  Tensor bank_;
  bool learnable_ = true;
  std::vector<SegmentDescriptor> segments_;
  std::optional<Tensor> summary_;  ///< h2 per cluster, stored at freeze time
  ParamStore params_;
};

}  // namespace ussr
