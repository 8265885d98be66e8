#pragma once

#include <chrono>
#include <ctime>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ussr/bipartite.hpp"
#include "ussr/features.hpp"
#include "ussr/optim.hpp"
#include "ussr/universal.hpp"

namespace ussr {

struct ExpansionConfig {
  double t_logit = std::numeric_limits<double>::infinity();
  std::size_t t_num = 100;
  std::size_t epochs = 50;
  double perturb = 1e-3;
  double learning_rate = 0.05;
  double clip_norm = 5.0;
  std::size_t batch_size = 64;

  bool operator==(const ExpansionConfig&) const = default;
};

/// Plain-text record of expansion events, one line each.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(std::string path) : path_(std::move(path)) {}

  void record(const std::string& operation, std::size_t before, std::size_t after, std::size_t buffer) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    std::string line = std::string(stamp) + " " + operation + " " + std::to_string(before) + " -> " +
                       std::to_string(after) + " buffer=" + std::to_string(buffer);
    lines_.push_back(line);
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      if (!out) throw Error("cannot append to audit log " + path_);
      out << line << '\n';
    }
  }

  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::string path_;
  std::vector<std::string> lines_;
};

/// Examples whose per-example negated bound exceeded t_logit.
class ExpansionBuffer {
 public:
  explicit ExpansionBuffer(double t_logit = std::numeric_limits<double>::infinity(), std::size_t t_num = 100)
      : t_logit_(t_logit), t_num_(t_num) {
    if (t_num_ == 0) throw Error("t_num must be positive");
  }

  double t_logit() const { return t_logit_; }
  std::size_t t_num() const { return t_num_; }
  const std::vector<EncodedExample>& examples() const { return examples_; }
  const std::vector<double>& scores() const { return scores_; }
  std::size_t size() const { return examples_.size(); }
  bool ready() const { return examples_.size() > t_num_; }
  void clear() {
    examples_.clear();
    scores_.clear();
  }

  /// Buffers `x` when `score` > t_logit; returns whether it was buffered.
  bool offer(const EncodedExample& x, double score) {
    if (!(score > t_logit_)) return false;
    examples_.push_back(x);
    scores_.push_back(score);
    return true;
  }

 private:
  double t_logit_;
  std::size_t t_num_;
  std::vector<EncodedExample> examples_;
  std::vector<double> scores_;
};

/// Scores with the posterior means (no sampling noise) so the decision is a
/// pure function of the model and the example.
inline bool score_and_buffer(const UniversalModel& model, ExpansionBuffer& buffer, const EncodedExample& x) {
  return buffer.offer(x, model.elbo_per_example(make_batch(x), mean_noise())[0]);
}

/// Batched form; returns how many examples were buffered.
inline std::size_t score_and_buffer(const UniversalModel& model, ExpansionBuffer& buffer,
                                    std::span<const EncodedExample> data, std::size_t batch_size = 512) {
  std::size_t added = 0;
  for (const auto& rows : batch_indices(data.size(), batch_size, std::nullopt)) {
    const auto scores = model.elbo_per_example(make_batch(data, rows), mean_noise());
    for (std::size_t i = 0; i < rows.size(); ++i) added += buffer.offer(data[rows[i]], scores[i]);
  }
  return added;
}

/// argmax_l of the column sums of `q` [N, K]; ties go to the smaller index.
inline std::size_t argmax_summed(const Tensor& q) {
  if (q.rank() != 2) throw Error("posteriors must be [N, K]");
  std::size_t best = 0;
  double best_sum = -1.0;
  for (std::size_t k = 0; k < q.dim(1); ++k) {
    std::vector<double> col(q.dim(0));
    for (std::size_t i = 0; i < col.size(); ++i) col[i] = q.at(i, k);
    const double s = ordered_sum(col);  // independent of row order
    if (s > best_sum) {
      best = k;
      best_sum = s;
    }
  }
  return best;
}

inline std::size_t select_init_cluster(const UniversalModel& model, std::span<const EncodedExample> buffered) {
  if (buffered.empty()) throw Error("cannot select an initial cluster from an empty buffer");
  return argmax_summed(model.gate_posterior(make_batch(buffered)));
}

/// Mean over the batch of -[log q(c=k|x) + log p(y|z_k) - beta KL_k], with the
/// same beta as the training bound.
inline NodeId build_expansion_loss(Graph& g, const UniversalModel& model, const Batch& batch, std::size_t k,
                                   const NoiseFn& noise) {
  const auto in = model.build_inputs(g, batch);
  const NodeId log_q = g.slice_cols(g.log_softmax(model.build_gate_logits(g, in.gate)), k, k + 1);
  auto [mean, log_sigma] = model.build_head(g, in.head, k);
  const NodeId z = g.gaussian_sample(mean, g.exp(log_sigma), noise({batch.size(), model.latent_dim()}));
  const NodeId ll = UniversalModel::bernoulli_loglik(g, model.build_decoder(g, z), g.constant(batch.labels));
  const NodeId kl = model.build_kl(g, mean, log_sigma, k);
  return g.neg(g.mean_all(g.sub(g.add(log_q, ll), g.scale(kl, model.config().beta))));
}

/// Adds cluster K initialised from the best-matching existing cluster and
/// trains only its head, prior and gate column on the buffer. Returns K+1.
inline std::size_t expand_cluster(UniversalModel& model, ExpansionBuffer& buffer, const ExpansionConfig& cfg,
                                  Rng& rng, AuditLog* audit = nullptr) {
  if (!buffer.ready()) {
    throw Error("buffer below t_num: " + std::to_string(buffer.size()) + " examples, need more than " +
                std::to_string(buffer.t_num()));
  }
  const std::size_t before = model.clusters();
  const std::size_t source = select_init_cluster(model, buffer.examples());
  const std::size_t k = model.add_cluster(source, cfg.perturb, rng);
  const SgdOptions sgd{cfg.learning_rate, cfg.clip_norm};
  const auto& data = buffer.examples();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& rows : batch_indices(data.size(), cfg.batch_size, rng.next())) {
      Graph g(&model.params());
      const NodeId loss = build_expansion_loss(g, model, make_batch(data, rows), k, sampled_noise(rng));
      const auto grads = select(g.backward(loss).params,
                                [&](const std::string& name) { return UniversalModel::cluster_owns(name, k); });
      sgd_step(model.params(), grads, sgd);
    }
  }
  const std::size_t buffered = buffer.size();
  buffer.clear();
  if (audit) audit->record("expand_cluster", before, model.clusters(), buffered);
  return model.clusters();
}

/// Registers segment `id` (must equal the current count) with features `u`
/// and trains its decoder on `data`; earlier segments stay bit-frozen.
inline std::size_t expand_segment(BipartiteModel& bipartite, const UniversalModel& universal, std::size_t id,
                                  std::optional<std::vector<double>> u, std::span<const EncodedExample> data,
                                  const ExpansionConfig& cfg, Rng& rng, AuditLog* audit = nullptr) {
  const std::size_t before = bipartite.segment_count();
  if (id < before) throw Error("duplicate segment id " + std::to_string(id));
  if (id > before) throw Error("segment ids must be dense; next id is " + std::to_string(before));
  if (!bipartite.all_frozen()) throw Error("existing segments must be frozen before expansion");
  if (data.empty()) throw Error("new segment needs training data");
  for (const auto& ex : data) {
    if (ex.segment != id) throw Error("training data for segment " + std::to_string(id) + " contains segment " +
                                      std::to_string(ex.segment));
  }
  const std::size_t m = bipartite.add_segment(std::move(u), rng);
  const std::string dec = BipartiteModel::decoder_name(m);
  const SgdOptions sgd{cfg.learning_rate, cfg.clip_norm};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& rows : batch_indices(data.size(), cfg.batch_size, rng.next())) {
      const Batch batch = make_batch(data, rows);
      Graph g(&bipartite.params());
      const auto loss = bipartite.build_loss(g, batch, g.constant(universal.universal_repr(batch)), std::nullopt);
      const auto grads =
          select(g.backward(loss.loss).params, [&](const std::string& name) { return nn::owned_by(name, dec); });
      sgd_step(bipartite.params(), grads, sgd);
    }
  }
  bipartite.mark_frozen(m);
  if (audit) audit->record("expand_segment", before, bipartite.segment_count(), data.size());
  return bipartite.segment_count();
}

}  // namespace ussr
