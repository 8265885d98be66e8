#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ussr/bipartite.hpp"
#include "ussr/features.hpp"
#include "ussr/metrics.hpp"
#include "ussr/optim.hpp"
#include "ussr/universal.hpp"

namespace ussr {

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 256;
  double learning_rate = 0.05;
  double clip_norm = 5.0;
  std::size_t patience = 5;
  bool joint = false;  ///< phase 2 also updates the universal parameters
  std::size_t eval_batch = 2048;

  bool operator==(const TrainOptions&) const = default;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string phase;
  double loss = 0.0;
  double val_auc = 0.0;
  double wall_seconds = 0.0;
};

/// Writes the metrics CSV. Wall-clock time can be suppressed (written as 0)
/// when byte-identical files are needed across runs.
class MetricsWriter {
 public:
  MetricsWriter(std::ostream& out, bool wall_clock = true) : out_(&out), wall_clock_(wall_clock) {
    *out_ << "epoch,phase,loss,val_auc,wall_seconds\n";
  }

  void operator()(const EpochMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.3f\n", m.epoch, m.phase.c_str(), m.loss, m.val_auc,
                  wall_clock_ ? m.wall_seconds : 0.0);
    *out_ << buf;
    out_->flush();
  }

 private:
  std::ostream* out_;
  bool wall_clock_;
};

using MetricsSink = std::function<void(const EpochMetrics&)>;

struct TrainReport {
  double initial_loss = 0.0;  ///< deterministic training loss before any update
  double final_loss = 0.0;    ///< same measure for the returned parameters
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;  ///< 0 when no epoch improved on the start
  double best_val_auc = 0.0;
};

inline std::vector<int> labels_of(std::span<const EncodedExample> data) {
  std::vector<int> y;
  y.reserve(data.size());
  for (const auto& ex : data) y.push_back(ex.label);
  return y;
}

// ---- phase 1 ---------------------------------------------------------------

inline std::vector<double> predict_universal(const UniversalModel& model, std::span<const EncodedExample> data,
                                             std::size_t chunk = 2048) {
  std::vector<double> out;
  out.reserve(data.size());
  for (const auto& rows : batch_indices(data.size(), chunk, std::nullopt)) {
    const auto p = model.predict_universal(make_batch(data, rows));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// Mean negated bound with posterior-mean latents.
inline double universal_loss(const UniversalModel& model, std::span<const EncodedExample> data,
                             std::size_t chunk = 2048) {
  double total = 0.0;
  for (const auto& rows : batch_indices(data.size(), chunk, std::nullopt)) {
    total += model.elbo_loss(make_batch(data, rows), mean_noise()) * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(data.size());
}

/// One pass of minibatch updates; returns the size-weighted mean loss.
inline double universal_epoch(UniversalModel& model, std::span<const EncodedExample> data, const TrainOptions& opts,
                              Rng& rng) {
  const SgdOptions sgd{opts.learning_rate, opts.clip_norm};
  double total = 0.0;
  for (const auto& rows : batch_indices(data.size(), opts.batch_size, rng.next())) {
    Graph g(&model.params());
    const auto nodes = model.build_elbo(g, make_batch(data, rows), sampled_noise(rng));
    total += g.value(nodes.loss)[0] * static_cast<double>(rows.size());
    sgd_step(model.params(), g.backward(nodes.loss).params, sgd);
  }
  return total / static_cast<double>(data.size());
}

// ---- phase 2 ---------------------------------------------------------------

inline std::vector<double> predict_segments(const BipartiteModel& bipartite, const UniversalModel& universal,
                                            std::span<const EncodedExample> data, std::size_t chunk = 2048) {
  std::vector<double> out;
  out.reserve(data.size());
  for (const auto& rows : batch_indices(data.size(), chunk, std::nullopt)) {
    const auto p = bipartite.predict_segment(universal, make_batch(data, rows));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline double segment_loss(const BipartiteModel& bipartite, const UniversalModel& universal,
                           std::span<const EncodedExample> data, std::size_t chunk = 2048) {
  double total = 0.0;
  for (const auto& rows : batch_indices(data.size(), chunk, std::nullopt)) {
    const Batch batch = make_batch(data, rows);
    Graph g(&bipartite.params());
    std::optional<NodeId> repr;
    if (!bipartite.all_frozen()) {
      repr = bipartite.build_interaction(g, g.constant(bipartite.cluster_bank()), bipartite.build_features(g)).repr;
    }
    const auto loss = bipartite.build_loss(g, batch, g.constant(universal.universal_repr(batch)), repr);
    total += g.value(loss.loss)[0] * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(data.size());
}

inline double segment_epoch(BipartiteModel& bipartite, UniversalModel& universal, std::span<const EncodedExample> data,
                            const TrainOptions& opts, Rng& rng) {
  const SgdOptions sgd{opts.learning_rate, opts.clip_norm};
  double total = 0.0;
  for (const auto& rows : batch_indices(data.size(), opts.batch_size, rng.next())) {
    const Batch batch = make_batch(data, rows);
    std::optional<Tensor> gumbel;
    if (bipartite.config().gumbel) {
      gumbel = Tensor({bipartite.segment_count(), bipartite.clusters()});
      for (double& v : gumbel->data()) v = rng.gumbel();
    }
    if (!opts.joint) {
      Graph g(&bipartite.params());
      const auto inter =
          bipartite.build_interaction(g, g.constant(bipartite.cluster_bank()), bipartite.build_features(g), gumbel);
      const auto loss = bipartite.build_loss(g, batch, g.constant(universal.universal_repr(batch)), inter.repr);
      total += g.value(loss.loss)[0] * static_cast<double>(rows.size());
      sgd_step(bipartite.params(), g.backward(loss.loss).params, sgd);
      continue;
    }
    ParamStore merged = universal.params();
    merged.merge(bipartite.params());
    Graph g(&merged);
    const auto inter =
        bipartite.build_interaction(g, BipartiteModel::build_bank(g, universal), bipartite.build_features(g), gumbel);
    const auto loss = bipartite.build_loss(g, batch, universal.build_repr(g, batch), inter.repr);
    total += g.value(loss.loss)[0] * static_cast<double>(rows.size());
    sgd_step(merged, g.backward(loss.loss).params, sgd);
    for (auto& [name, value] : merged) {
      (universal.params().contains(name) ? universal.params() : bipartite.params()).get(name) = value;
    }
    bipartite.set_cluster_bank(universal.cluster_bank());
  }
  return total / static_cast<double>(data.size());
}

// ---- loops with early stopping ---------------------------------------------

namespace detail {

template <class Snapshot, class Restore, class Epoch, class Score>
TrainReport early_stopping(const TrainOptions& opts, const std::string& phase, const MetricsSink& sink,
                           Snapshot snapshot, Restore restore, Epoch run_epoch, Score val_auc) {
  TrainReport report;
  auto best = snapshot();
  double best_auc = -1.0;
  std::size_t since_best = 0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    const double loss = run_epoch();
    const double auc = val_auc();
    report.epochs_run = epoch;
    if (sink) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      sink({epoch, phase, loss, auc, wall});
    }
    if (auc > best_auc) {
      best_auc = auc;
      best = snapshot();
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      break;
    }
  }
  if (report.epochs_run > 0) restore(best);
  report.best_val_auc = best_auc < 0.0 ? 0.0 : best_auc;
  return report;
}

}  // namespace detail

/// Phase 1: minimizes the negated bound, keeping the parameters with the best
/// validation AUC of the universal predictor.
inline TrainReport train_universal(UniversalModel& model, std::span<const EncodedExample> train,
                                   std::span<const EncodedExample> val, const TrainOptions& opts, Rng& rng,
                                   const MetricsSink& sink = {}) {
  if (train.empty() || val.empty()) throw Error("training and validation data must be non-empty");
  const auto val_labels = labels_of(val);
  const double initial = universal_loss(model, train, opts.eval_batch);
  auto report = detail::early_stopping(
      opts, "universal", sink, [&] { return model.params(); },
      [&](const ParamStore& p) { model.params() = p; }, [&] { return universal_epoch(model, train, opts, rng); },
      [&] { return evaluate_auc(predict_universal(model, val, opts.eval_batch), val_labels); });
  report.initial_loss = initial;
  report.final_loss = report.epochs_run ? universal_loss(model, train, opts.eval_batch) : initial;
  return report;
}

/// Phase 2: segment-path cross-entropy; stores the segment representations
/// and freezes every segment at the end.
inline TrainReport train_segments(BipartiteModel& bipartite, UniversalModel& universal,
                                  std::span<const EncodedExample> train, std::span<const EncodedExample> val,
                                  const TrainOptions& opts, Rng& rng, const MetricsSink& sink = {}) {
  if (train.empty() || val.empty()) throw Error("training and validation data must be non-empty");
  if (bipartite.all_frozen()) throw Error("segments are already frozen");
  if (bipartite.clusters() != universal.clusters()) {
    throw Error("cluster bank has " + std::to_string(bipartite.clusters()) + " rows but the universal model has " +
                std::to_string(universal.clusters()) + " clusters");
  }
  const auto val_labels = labels_of(val);
  const double initial = segment_loss(bipartite, universal, train, opts.eval_batch);
  struct State {
    ParamStore b, u;
    Tensor bank;
  };
  auto report = detail::early_stopping(
      opts, "segments", sink,
      [&] { return State{bipartite.params(), opts.joint ? universal.params() : ParamStore{}, bipartite.cluster_bank()}; },
      [&](const State& s) {
        bipartite.params() = s.b;
        if (opts.joint) universal.params() = s.u;
        bipartite.set_cluster_bank(s.bank);
      },
      [&] { return segment_epoch(bipartite, universal, train, opts, rng); },
      [&] { return evaluate_auc(predict_segments(bipartite, universal, val, opts.eval_batch), val_labels); });
  report.initial_loss = initial;
  report.final_loss = report.epochs_run ? segment_loss(bipartite, universal, train, opts.eval_batch) : initial;
  bipartite.freeze();
  return report;
}

}  // namespace ussr
