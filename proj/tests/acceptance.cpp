// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes. Tolerances and experiment settings are fixed here.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fd_oracle.hpp"
#include "small_data.hpp"
#include "toy_elbo.hpp"
#include "ussr/ussr.hpp"

using namespace ussr;
using namespace ussr::testing;

namespace {

// ---- pinned tolerances and settings ------------------------------------------

constexpr double kGradientTolerance = 1e-4;  // relative error, central differences at step 1e-5
constexpr double kGradientSeconds = 60.0;
constexpr std::size_t kKlInstances = 20;
constexpr std::size_t kKlSamples = 1'000'000;
constexpr double kKlStandardErrors = 3.0;
constexpr double kElboTolerance = 1e-10;
constexpr std::size_t kAucInstances = 100;
constexpr std::size_t kAucMaxExamples = 10'000;
constexpr double kSegmentationSeconds = 15.0 * 60.0;
// Mean test-AUC margin of the full model over universal-only, measured by the
// baseline run of this binary (seeds 1-3, settings below) and floored to 1e-3.
constexpr double kBaselineMargin = 0.030;
constexpr std::size_t kProbeRows = 1000;
constexpr double kLogUlps = 4.0 * std::numeric_limits<double>::epsilon();

constexpr std::uint64_t kSeeds[] = {1, 2, 3};
constexpr std::size_t kUniversalEpochs = 30;
constexpr std::size_t kSegmentEpochs = 20;

UniversalConfig experiment_universal() {
  UniversalConfig c;
  c.clusters = 3;
  c.latent_dim = 8;
  c.hidden = 32;
  c.beta = 0.001;  // full-weight KL collapses the posterior on Bernoulli labels
  return c;
}

TrainOptions experiment_training(std::size_t epochs) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = 256;
  o.learning_rate = 0.5;
  o.clip_norm = 5.0;
  o.patience = 5;
  return o;
}

ExpansionConfig experiment_expansion() {
  ExpansionConfig e;
  e.t_num = 100;
  e.epochs = 20;
  e.learning_rate = 0.5;
  e.batch_size = 256;
  return e;
}

// ---- reporting ---------------------------------------------------------------

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

int failures = 0;

void run(int id, const char* name, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!o.pass) ++failures;
  std::printf("criterion %d %-34s %s  %s [%.1fs]\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string param_bytes(const ParamStore& store, const std::function<bool(const std::string&)>& keep) {
  ByteWriter w;
  for (const auto& [name, value] : store) {
    if (!keep(name)) continue;
    w.str(name);
    w.tensor(value);
  }
  return w.take();
}

// ---- 1: gradient fidelity --------------------------------------------------------

Outcome gradient_fidelity() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0, groups = 0;
  auto absorb = [&](const FdReport& r, const std::string& label) {
    ++groups;
    checked += r.checked;
    if (r.checked == 0) {
      worst = std::numeric_limits<double>::infinity();
      where = label + " had no parameters";
    }
    if (r.max_error > worst) {
      worst = r.max_error;
      where = label + " " + r.worst;
    }
  };
  auto prefix = [](const std::string& p) { return [p](const std::string& n) { return n.rfind(p, 0) == 0; }; };

  for (auto encoder : {EncoderKind::Concat, EncoderKind::Attention}) {
    Rng rng(101);
    UniversalConfig cfg;
    cfg.clusters = 3;
    cfg.latent_dim = 4;
    cfg.hidden = 8;
    cfg.beta = 0.7;
    cfg.beta_c = 1.3;
    cfg.encoder = encoder;
    UniversalModel m(cfg, small_layout(), rng);
    for (std::size_t k = 0; k < 3; ++k) {
      for (double& v : m.params().get(UniversalModel::prior_mean_name(k)).data()) v = 0.5 * rng.normal();
      for (double& v : m.params().get(UniversalModel::prior_log_sigma_name(k)).data()) v = 0.2 * rng.normal();
    }
    const Batch batch = make_batch(small_dataset(10, 102));
    Rng noise(103);
    Graph g(&m.params());
    const auto nodes = m.build_elbo(g, batch, sampled_noise(noise));
    const auto grads = g.backward(nodes.loss);
    for (const char* group : {"emb", "enc", "gate", "head", "prior", "dec"}) {
      if (encoder == EncoderKind::Concat && std::string(group) == "enc") continue;
      absorb(check_param_gradients(g, nodes.loss, m.params(), grads.params, prefix(group)),
             std::string(encoder == EncoderKind::Concat ? "concat " : "attention ") + group);
    }
  }

  for (bool learnable : {false, true}) {
    Rng rng(104);
    UniversalConfig ucfg;
    ucfg.clusters = 3;
    ucfg.latent_dim = 3;
    ucfg.hidden = 5;
    UniversalModel u(ucfg, small_layout(), rng);
    for (std::size_t k = 0; k < 3; ++k) u.params().set(UniversalModel::prior_mean_name(k), rng.normal_tensor({1, 3}));
    BipartiteConfig bcfg;
    bcfg.edge_dim = 3;
    bcfg.hidden = 5;
    bcfg.segment_dim = 2;
    std::vector<std::vector<double>> feats;
    if (!learnable) feats = {{0.3, -1.2}, {1.1, 0.4}, {-0.6, 0.9}};
    BipartiteModel b(bcfg, u.cluster_bank(), feats, 3, rng);
    const Batch batch = make_batch(small_dataset(10, 105, -1, 3));

    Graph g(&b.params());
    const auto inter = b.build_interaction(g, g.constant(b.cluster_bank()), b.build_features(g));
    const auto loss = b.build_loss(g, batch, g.constant(u.universal_repr(batch)), inter.repr);
    const auto grads = g.backward(loss.loss);
    std::vector<std::string> bgroups{"b.fe.", "b.fv.", "b.fe2.", "b.fhat.", "b.dec"};
    if (learnable) bgroups.push_back("b.u");
    for (const auto& group : bgroups) {
      absorb(check_param_gradients(g, loss.loss, b.params(), grads.params, prefix(group)),
             std::string(learnable ? "learnable-u " : "csv-u ") + group);
    }

    // joint path: the same loss differentiated into the universal parameters
    ParamStore merged = u.params();
    merged.merge(b.params());
    Graph j(&merged);
    const auto jinter = b.build_interaction(j, BipartiteModel::build_bank(j, u), b.build_features(j));
    const auto jloss = b.build_loss(j, batch, u.build_repr(j, batch), jinter.repr);
    const auto jgrads = j.backward(jloss.loss);
    for (const char* group : {"emb", "gate", "head", "prior"}) {
      absorb(check_param_gradients(j, jloss.loss, merged, jgrads.params, prefix(group)),
             std::string("joint ") + group);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst <= kGradientTolerance && secs < kGradientSeconds,
          fmt("max rel err %.2e over %zu elements in %zu groups (tol %.0e)%s", worst, checked, groups,
              kGradientTolerance, worst > kGradientTolerance ? (" worst: " + where).c_str() : "")};
}

// ---- 2: KL oracle ------------------------------------------------------------------

Outcome kl_oracle() {
  Rng rng(201);
  double worst_z = 0.0;
  bool self_zero = true;
  for (std::size_t t = 0; t < kKlInstances; ++t) {
    const std::size_t d = 1 + rng.below(6);
    GaussianParams q, p;
    for (std::size_t i = 0; i < d; ++i) {
      q.mean.push_back(rng.normal());
      q.stddev.push_back(0.4 + 1.2 * rng.uniform());
      p.mean.push_back(rng.normal());
      p.stddev.push_back(0.4 + 1.2 * rng.uniform());
    }
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t s = 0; s < kKlSamples; ++s) {
      double log_ratio = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double z = q.mean[i] + q.stddev[i] * rng.normal();
        const double a = (z - q.mean[i]) / q.stddev[i];
        const double b = (z - p.mean[i]) / p.stddev[i];
        log_ratio += std::log(p.stddev[i] / q.stddev[i]) - 0.5 * a * a + 0.5 * b * b;
      }
      sum += log_ratio;
      sum_sq += log_ratio * log_ratio;
    }
    const double n = static_cast<double>(kKlSamples);
    const double mc = sum / n;
    const double se = std::sqrt((sum_sq / n - mc * mc) / n);
    worst_z = std::max(worst_z, std::abs(kl_diag_gaussian(q, p) - mc) / se);
    if (kl_diag_gaussian(q, q) != 0.0) self_zero = false;
  }
  return {worst_z <= kKlStandardErrors && self_zero,
          fmt("worst |closed-MC| = %.2f SE over %zu instances (limit %.0f); KL(p||p)=0 exactly: %s", worst_z,
              kKlInstances, kKlStandardErrors, self_zero ? "yes" : "no")};
}

// ---- 3: bound oracle -----------------------------------------------------------------

Outcome elbo_oracle() {
  auto toy = make_toy_elbo(1.0, 1.0);
  const double expected = toy_elbo_oracle(toy);
  const double actual = toy.model.elbo_loss(make_batch(toy.example), toy_noise(toy));
  const double err = std::abs(actual - expected);
  return {err <= kElboTolerance, fmt("loss %.15f vs scalar %.15f, |diff| %.2e (tol %.0e)", actual, expected, err,
                                     kElboTolerance)};
}

// ---- 4: AUC oracle -----------------------------------------------------------------------

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  std::uint64_t twice = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      twice += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pairs));
}

Outcome auc_oracle() {
  Rng rng(401);
  std::size_t mismatches = 0, largest = 0, tied = 0;
  for (std::size_t t = 0; t < kAucInstances; ++t) {
    // log-uniform sizes, with every tenth instance at the maximum
    std::size_t n = t % 10 == 9 ? kAucMaxExamples
                                : static_cast<std::size_t>(std::pow(10.0, 4.0 * rng.uniform()));
    n = std::clamp<std::size_t>(n, 2, kAucMaxExamples);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const bool ties = t % 2 == 0;
    const std::size_t levels = 1 + rng.below(50);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? static_cast<double>(rng.below(levels)) / 7.0 : rng.normal();
      y[i] = rng.bernoulli(0.3) ? 1 : 0;
    }
    y[0] = 0;
    y[1] = 1;
    tied += ties;
    largest = std::max(largest, n);
    if (evaluate_auc(s, y) != pairwise_auc(s, y)) ++mismatches;
  }
  return {mismatches == 0, fmt("%zu/%zu exact matches (%zu with heavy ties, largest n=%zu)", kAucInstances - mismatches,
                               kAucInstances, tied, largest)};
}

// ---- 5, 7, 8: segmentation runs ------------------------------------------------------------

struct SegmentationRun {
  std::uint64_t seed = 0;
  double universal_auc = 0.0;
  double ussr_auc = 0.0;
  SyntheticDataset data;
  FeatureStats stats;
  UniversalModel universal;
  std::optional<BipartiteModel> bipartite;
  std::string rng_state;
};

std::vector<SegmentationRun> runs;

SegmentationRun segmentation_run(std::uint64_t seed) {
  SegmentationRun r;
  r.seed = seed;
  r.data = generate_synthetic(SyntheticSpec{}, seed);
  r.stats = fit_stats(r.data.train, 1000, 4);
  const auto train = encode(r.data.train, r.stats);
  const auto val = encode(r.data.val, r.stats);
  const auto test = encode(r.data.test, r.stats);
  const auto labels = labels_of(test);

  Rng rng(seed);
  UniversalModel u(experiment_universal(), FeatureLayout::from(r.stats), rng);
  UniversalModel baseline = u;
  Rng baseline_rng = rng;

  train_universal(u, train, val, experiment_training(kUniversalEpochs), rng);
  BipartiteConfig bc;
  BipartiteModel b(bc, u.cluster_bank(), read_segment_features(r.data.segment_features), 0, rng);
  train_segments(b, u, train, val, experiment_training(kSegmentEpochs), rng);
  r.ussr_auc = evaluate_auc(predict_segments(b, u, test), labels);

  // same initialization, same stream, same total epoch budget
  train_universal(baseline, train, val, experiment_training(kUniversalEpochs + kSegmentEpochs), baseline_rng);
  r.universal_auc = evaluate_auc(predict_universal(baseline, test), labels);

  r.universal = std::move(u);
  r.bipartite = std::move(b);
  r.rng_state = rng.state();
  return r;
}

Outcome segmentation_benefit() {
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t seed : kSeeds) runs.push_back(segmentation_run(seed));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  double margin = 0.0;
  bool every_seed = true;
  std::string per_seed;
  for (const auto& r : runs) {
    margin += (r.ussr_auc - r.universal_auc) / static_cast<double>(runs.size());
    every_seed = every_seed && r.ussr_auc > r.universal_auc;
    per_seed += fmt(" seed%llu %.4f/%.4f", static_cast<unsigned long long>(r.seed), r.ussr_auc, r.universal_auc);
  }
  return {every_seed && margin >= kBaselineMargin && secs < kSegmentationSeconds,
          fmt("mean margin %.4f (baseline %.3f); full/universal-only:%s", margin, kBaselineMargin, per_seed.c_str())};
}

Outcome segment_freeze() {
  if (runs.empty()) return {false, "no trained model (criterion 5 did not run)"};
  SegmentationRun& r = runs.front();
  BipartiteModel bip = *r.bipartite;
  const UniversalModel& u = r.universal;
  const auto test = encode(r.data.test, r.stats);
  const std::vector<EncodedExample> probe(test.begin(), test.begin() + kProbeRows);
  const auto before = predict_segments(bip, u, probe);
  const std::string old_params =
      param_bytes(bip.params(), [&](const std::string& n) { return !nn::owned_by(n, BipartiteModel::decoder_name(6)); });

  Rng rng(701);
  const auto new_train = encode(r.data.new_train, r.stats);
  const auto new_test = encode(r.data.new_test, r.stats);
  expand_segment(bip, u, bip.segment_count(), r.data.new_segment_features, new_train, experiment_expansion(), rng);
  const auto after = predict_segments(bip, u, probe);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < probe.size(); ++i) differing += std::memcmp(&before[i], &after[i], sizeof(double)) != 0;
  const bool params_same =
      param_bytes(bip.params(), [&](const std::string& n) { return !nn::owned_by(n, BipartiteModel::decoder_name(6)); }) ==
      old_params;
  const double auc = evaluate_auc(predict_segments(bip, u, new_test), labels_of(new_test));
  return {differing == 0 && params_same && auc > 0.5,
          fmt("%zu/%zu probe predictions changed; old parameters identical: %s; new segment AUC %.4f", differing,
              probe.size(), params_same ? "yes" : "no", auc)};
}

// ---- 6: cluster expansion ------------------------------------------------------------------

Outcome cluster_expansion() {
  SyntheticSpec spec;
  spec.phase1_modes = {1, 2};
  spec.phase2_modes = {3};
  const auto d = generate_synthetic(spec, 1);
  const FeatureStats stats = fit_stats(d.train, 1000, 4);
  const auto train = encode(d.train, stats);
  const auto val = encode(d.val, stats);
  const auto phase2 = encode(d.phase2, stats);
  const auto held_out = encode(d.phase2_test, stats);

  Rng rng(1);
  UniversalModel u(experiment_universal(), FeatureLayout::from(stats), rng);
  train_universal(u, train, val, experiment_training(20), rng);
  const std::size_t K = u.clusters();

  // Lowest training score: any higher cut keeps only the rows the old model
  // mislabels, which biases the labels the new cluster learns from.
  const auto scores = u.elbo_per_example(make_batch(train), mean_noise());
  ExpansionConfig cfg = experiment_expansion();
  cfg.t_logit = *std::min_element(scores.begin(), scores.end());
  ExpansionBuffer buffer(cfg.t_logit, cfg.t_num);
  score_and_buffer(u, buffer, phase2);
  const std::size_t buffered = buffer.size();

  const double before = universal_loss(u, held_out);
  auto old = [&](const std::string& n) { return !UniversalModel::cluster_owns(n, K); };
  const std::string frozen = param_bytes(u.params(), old);
  expand_cluster(u, buffer, cfg, rng);
  const double after = universal_loss(u, held_out);
  const bool same = param_bytes(u.params(), old) == frozen;
  return {after < before && same && u.clusters() == K + 1,
          fmt("held-out mode-3 loss %.4f -> %.4f (buffered %zu/%zu); clusters %zu -> %zu; old parameters identical: %s",
              before, after, buffered, phase2.size(), K, u.clusters(), same ? "yes" : "no")};
}

// ---- 8: determinism and persistence --------------------------------------------------------

std::string metrics_of_run(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.train_rows = 3000;
  spec.val_rows = 1000;
  const auto d = generate_synthetic(spec, seed);
  const FeatureStats stats = fit_stats(d.train, 1000, 4);
  const auto train = encode(d.train, stats);
  const auto val = encode(d.val, stats);
  Rng rng(seed);
  UniversalModel u(experiment_universal(), FeatureLayout::from(stats), rng);
  std::ostringstream csv;
  MetricsWriter writer(csv, false);
  train_universal(u, train, val, experiment_training(3), rng, writer);
  BipartiteConfig bc;
  bc.gumbel = true;
  BipartiteModel b(bc, u.cluster_bank(), read_segment_features(d.segment_features), 0, rng);
  train_segments(b, u, train, val, experiment_training(3), rng, writer);
  return csv.str();
}

Outcome determinism() {
  const std::string a = metrics_of_run(801), b = metrics_of_run(801);
  const bool same_metrics = a == b && !a.empty();

  if (runs.empty()) return {false, "no trained model (criterion 5 did not run)"};
  const SegmentationRun& r = runs.front();
  const Checkpoint ckpt{r.stats, r.universal, r.bipartite, r.rng_state};
  const auto path = (std::filesystem::temp_directory_path() / "ussr_acceptance.ckpt").string();
  save_checkpoint(path, ckpt);
  const Checkpoint loaded = load_checkpoint(path);
  const bool resave_same = encode_checkpoint(loaded) == read_file(path);
  std::filesystem::remove(path);

  const auto test = encode(r.data.test, r.stats);
  const auto u0 = predict_universal(r.universal, test), u1 = predict_universal(loaded.universal, test);
  const auto s0 = predict_segments(*r.bipartite, r.universal, test);
  const auto s1 = predict_segments(*loaded.bipartite, loaded.universal, test);
  const bool same_pred = std::memcmp(u0.data(), u1.data(), u0.size() * sizeof(double)) == 0 &&
                         std::memcmp(s0.data(), s1.data(), s0.size() * sizeof(double)) == 0;
  return {same_metrics && resave_same && same_pred,
          fmt("metrics CSV identical across runs: %s (%zu bytes); save-load-save identical: %s; "
              "%zu predictions bit-identical after load: %s",
              same_metrics ? "yes" : "no", a.size(), resave_same ? "yes" : "no", test.size() * 2,
              same_pred ? "yes" : "no")};
}

// ---- 9: preprocessing conformance -------------------------------------------------------

Outcome preprocessing() {
  const CsvTable table = read_csv(std::string(USSR_TEST_DATA) + "/fixture20.csv");
  std::vector<std::string> failed;
  auto check = [&](bool ok, const char* what) {
    if (!ok) failed.push_back(what);
  };
  check(table.rows.size() == 20, "20 rows");
  const FeatureStats wide = fit_stats(table, 10, 4);
  check(wide.vocab[0] == std::map<std::string, std::uint32_t>{{"A", 1}, {"B", 2}, {"C", 3}, {"D", 4}}, "C1 ranks");
  check(wide.vocab[1] == std::map<std::string, std::uint32_t>{{"x", 1}, {"y", 2}, {"z", 3}}, "C2 ranks");
  const FeatureStats capped = fit_stats(table, 2, 4);
  check(capped.index_of(0, "A") == 1 && capped.index_of(0, "B") == 2, "cap keeps top 2");
  check(capped.index_of(0, "C") == 0 && capped.index_of(0, "D") == 0 && capped.index_of(1, "z") == 0,
        "cap sends the rest to 0");
  const auto data = encode(table, wide);
  check(data[0].dense[0] == 0.0, "log(1+0)");
  check(data[1].dense[0] == std::log1p(1.718281828459045), "log(1+(e-1))");
  // log1p and log may round differently in the last place
  auto close = [](double a, double b) { return std::abs(a - b) <= kLogUlps * std::abs(b); };
  check(close(data[2].dense[0], std::log(4.0)), "log(1+3)");
  check(close(data[3].dense[0], -std::log(3.0)), "signed log of -2");
  check(data[5].dense[0] == 0.0, "empty cell");
  check(data[3].sparse == std::vector<std::uint32_t>{3, 1}, "row 4 indices");
  check(data[7].segment == 3u, "segment id");
  std::string detail = fmt("%zu hand-computed checks", std::size_t{11});
  for (const auto& f : failed) detail += "; failed: " + f;
  return {failed.empty(), detail};
}

}  // namespace

int main() {
  run(1, "gradient fidelity", gradient_fidelity);
  run(2, "KL oracle", kl_oracle);
  run(3, "bound scalar oracle", elbo_oracle);
  run(4, "AUC oracle equivalence", auc_oracle);
  run(5, "segmentation benefit (3 seeds)", segmentation_benefit);
  run(6, "cluster expansion efficacy", cluster_expansion);
  run(7, "segment expansion freeze", segment_freeze);
  run(8, "determinism and persistence", determinism);
  run(9, "preprocessing conformance", preprocessing);
  std::printf("acceptance: %d/9 criteria passed\n", 9 - failures);
  return failures == 0 ? 0 : 1;
}
