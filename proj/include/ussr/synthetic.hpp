#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ussr/features.hpp"
#include "ussr/rng.hpp"

namespace ussr {

/// Generator settings for multi-modal, long-tailed data with segment-specific
/// label rules. Modes are 1-based in `phase1_modes` / `phase2_modes`.
struct SyntheticSpec {
  std::size_t modes = 3;
  std::size_t dense = 4;
  std::size_t sparse = 3;
  std::size_t vocab = 12;             ///< categories per sparse field
  double mode_separation = 2.0;       ///< stddev of the mode centres
  double mode_label_scale = 1.5;      ///< stddev of the per-mode label weights
  std::size_t segments = 6;
  double tail_exponent = 1.5;         ///< segment m has weight (m+1)^-exponent
  double segment_label_scale = 1.5;   ///< stddev of the per-segment label weights
  double segment_reveal = 0.3;        ///< chance the last sparse field names the segment
  double feature_noise = 0.1;         ///< noise on the published segment features
  std::size_t train_rows = 50000;
  std::size_t val_rows = 10000;
  std::size_t test_rows = 10000;
  std::size_t phase2_rows = 5000;
  std::size_t phase2_test_rows = 2000;
  std::size_t new_segment_rows = 4000;  ///< split 3:1 into train and test
  std::vector<std::size_t> phase1_modes{1, 2, 3};
  std::vector<std::size_t> phase2_modes{3};

  void validate() const {
    auto fail = [](const std::string& why) { throw Error("invalid synthetic spec: " + why); };
    if (modes == 0) fail("modes must be positive");
    if (dense == 0) fail("need at least one dense field");
    if (sparse == 0 || vocab == 0) fail("need at least one sparse field with a non-empty vocabulary");
    if (segments == 0) fail("segments must be positive");
    if (!(tail_exponent >= 0.0)) fail("tail exponent must be non-negative");
    if (!(segment_reveal >= 0.0 && segment_reveal <= 1.0)) fail("segment_reveal must lie in [0, 1]");
    if (train_rows == 0 || val_rows == 0 || test_rows == 0) fail("train, val and test rows must be positive");
    if (new_segment_rows < 4) fail("new segment needs at least 4 rows");
    for (const auto* list : {&phase1_modes, &phase2_modes}) {
      if (list->empty()) fail("phase mode lists must be non-empty");
      for (std::size_t m : *list) {
        if (m == 0 || m > modes) fail("phase mode " + std::to_string(m) + " outside 1.." + std::to_string(modes));
      }
    }
  }
};

struct SyntheticDataset {
  CsvTable train, val, test;
  CsvTable phase2, phase2_test;      ///< rows from the phase-2 modes
  CsvTable new_train, new_test;      ///< rows of the extra segment (id = segments)
  CsvTable segment_features;         ///< "seg,u_0,..." for the base segments
  std::vector<double> new_segment_features;
  // 1-based mode of every row, parallel to each table's rows
  std::vector<std::size_t> train_modes, val_modes, test_modes, phase2_modes, phase2_test_modes;
};

namespace detail {

struct SyntheticWorld {
  std::vector<std::vector<double>> centre, mode_weight;            // [mode][dense]
  std::vector<std::vector<std::vector<double>>> cat_prob, cat_effect;  // [mode][field][cat]
  std::vector<std::vector<double>> seg_weight;                     // [segment][dense], includes the extra one
  std::vector<double> seg_bias;
  std::vector<double> seg_share;                                   // base segments only
};

inline std::size_t draw_index(Rng& rng, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

inline std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline SyntheticWorld make_world(const SyntheticSpec& s, Rng& rng) {
  SyntheticWorld w;
  for (std::size_t m = 0; m < s.modes; ++m) {
    std::vector<double> c(s.dense), a(s.dense);
    for (double& v : c) v = s.mode_separation * rng.normal();
    for (double& v : a) v = s.mode_label_scale * rng.normal();
    w.centre.push_back(c);
    w.mode_weight.push_back(a);
    std::vector<std::vector<double>> probs, effects;
    for (std::size_t f = 0; f < s.sparse; ++f) {
      // Zipf-like preference over a mode-specific ordering of the vocabulary
      std::vector<std::size_t> order(s.vocab);
      for (std::size_t i = 0; i < s.vocab; ++i) order[i] = i;
      rng.shuffle(order);
      std::vector<double> p(s.vocab), e(s.vocab);
      for (std::size_t r = 0; r < s.vocab; ++r) p[order[r]] = 1.0 / static_cast<double>(r + 1);
      for (double& v : e) v = 0.5 * rng.normal();
      probs.push_back(p);
      effects.push_back(e);
    }
    w.cat_prob.push_back(probs);
    w.cat_effect.push_back(effects);
  }
  for (std::size_t g = 0; g <= s.segments; ++g) {
    std::vector<double> v(s.dense);
    for (double& x : v) x = s.segment_label_scale * rng.normal();
    w.seg_weight.push_back(v);
    w.seg_bias.push_back(0.5 * rng.normal());
  }
  for (std::size_t g = 0; g < s.segments; ++g) {
    w.seg_share.push_back(std::pow(static_cast<double>(g + 1), -s.tail_exponent));
  }
  return w;
}

inline CsvTable empty_table(const SyntheticSpec& s) {
  CsvTable t;
  for (std::size_t j = 0; j < s.dense; ++j) t.header.push_back("I" + std::to_string(j + 1));
  for (std::size_t f = 0; f < s.sparse; ++f) t.header.push_back("C" + std::to_string(f + 1));
  t.header.push_back("label");
  t.header.push_back("seg");
  return t;
}

/// Appends `n` rows; `segment` < 0 draws from the long-tailed base segments.
inline void emit_rows(const SyntheticSpec& s, const SyntheticWorld& w, const std::vector<std::size_t>& modes,
                      long segment, std::size_t n, Rng& rng, CsvTable& out, std::vector<std::size_t>* mode_log) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t mode = modes[rng.below(modes.size())] - 1;
    const std::size_t seg = segment >= 0 ? static_cast<std::size_t>(segment) : draw_index(rng, w.seg_share);
    std::vector<std::string> row;
    double logit = w.seg_bias[seg];
    for (std::size_t j = 0; j < s.dense; ++j) {
      const double dev = rng.normal();
      row.push_back(fixed(w.centre[mode][j] + dev));
      logit += (w.mode_weight[mode][j] + w.seg_weight[seg][j]) * dev;
    }
    for (std::size_t f = 0; f < s.sparse; ++f) {
      const bool reveal = f + 1 == s.sparse && rng.bernoulli(s.segment_reveal);
      if (reveal) {
        row.push_back("s" + std::to_string(seg));
        continue;
      }
      const std::size_t c = draw_index(rng, w.cat_prob[mode][f]);
      logit += w.cat_effect[mode][f][c];
      row.push_back("v" + std::to_string(c));
    }
    const double p = 1.0 / (1.0 + std::exp(-logit));
    row.push_back(rng.bernoulli(p) ? "1" : "0");
    row.push_back(std::to_string(seg));
    out.rows.push_back(std::move(row));
    out.lines.push_back(out.rows.size() + 1);
    if (mode_log) mode_log->push_back(mode + 1);
  }
}

/// Published features of segment g: its label weights and bias, slightly noised.
inline std::vector<double> segment_vector(const SyntheticSpec& s, const SyntheticWorld& w, std::size_t g, Rng& rng) {
  std::vector<double> u;
  for (double v : w.seg_weight[g]) u.push_back(v / s.segment_label_scale + s.feature_noise * rng.normal());
  u.push_back(w.seg_bias[g] + s.feature_noise * rng.normal());
  return u;
}

}  // namespace detail

inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const auto world = detail::make_world(spec, rng);
  SyntheticDataset d;
  for (CsvTable* t : {&d.train, &d.val, &d.test, &d.phase2, &d.phase2_test, &d.new_train, &d.new_test}) {
    *t = detail::empty_table(spec);
  }
  detail::emit_rows(spec, world, spec.phase1_modes, -1, spec.train_rows, rng, d.train, &d.train_modes);
  detail::emit_rows(spec, world, spec.phase1_modes, -1, spec.val_rows, rng, d.val, &d.val_modes);
  detail::emit_rows(spec, world, spec.phase1_modes, -1, spec.test_rows, rng, d.test, &d.test_modes);
  detail::emit_rows(spec, world, spec.phase2_modes, -1, spec.phase2_rows, rng, d.phase2, &d.phase2_modes);
  detail::emit_rows(spec, world, spec.phase2_modes, -1, spec.phase2_test_rows, rng, d.phase2_test,
                    &d.phase2_test_modes);
  const auto extra = static_cast<long>(spec.segments);
  const std::size_t new_train_rows = spec.new_segment_rows * 3 / 4;
  detail::emit_rows(spec, world, spec.phase1_modes, extra, new_train_rows, rng, d.new_train, nullptr);
  detail::emit_rows(spec, world, spec.phase1_modes, extra, spec.new_segment_rows - new_train_rows, rng, d.new_test,
                    nullptr);

  d.segment_features.header.push_back("seg");
  for (std::size_t j = 0; j <= spec.dense; ++j) d.segment_features.header.push_back("u_" + std::to_string(j));
  for (std::size_t g = 0; g < spec.segments; ++g) {
    std::vector<std::string> row{std::to_string(g)};
    for (double v : detail::segment_vector(spec, world, g, rng)) row.push_back(detail::fixed(v));
    d.segment_features.rows.push_back(std::move(row));
    d.segment_features.lines.push_back(g + 2);
  }
  for (double v : detail::segment_vector(spec, world, spec.segments, rng)) {
    d.new_segment_features.push_back(std::stod(detail::fixed(v)));  // same value a reader of the file sees
  }
  return d;
}

/// Writes every table of `d` into `dir` (created if missing).
inline void write_synthetic(const SyntheticDataset& d, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path p(dir);
  write_csv((p / "train.csv").string(), d.train);
  write_csv((p / "val.csv").string(), d.val);
  write_csv((p / "test.csv").string(), d.test);
  write_csv((p / "phase2.csv").string(), d.phase2);
  write_csv((p / "phase2_test.csv").string(), d.phase2_test);
  write_csv((p / "new_segment_train.csv").string(), d.new_train);
  write_csv((p / "new_segment_test.csv").string(), d.new_test);
  write_csv((p / "segments.csv").string(), d.segment_features);
  CsvTable extra;
  extra.header = d.segment_features.header;
  std::vector<std::string> row{std::to_string(d.segment_features.rows.size())};
  for (double v : d.new_segment_features) row.push_back(detail::fixed(v));
  extra.rows.push_back(std::move(row));
  write_csv((p / "new_segment.csv").string(), extra);
}

}  // namespace ussr
