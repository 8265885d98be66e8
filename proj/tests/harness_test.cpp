#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "small_data.hpp"
#include "ussr/ussr.hpp"

using namespace ussr;
using namespace ussr::testing;

namespace {

// Pairwise count over every (positive, negative) pair; ties score one half.
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

std::string params_bytes(const ParamStore& store) {
  ByteWriter w;
  for (const auto& [name, value] : store) {
    w.str(name);
    w.tensor(value);
  }
  return w.take();
}

SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.train_rows = 600;
  s.val_rows = 200;
  s.test_rows = 200;
  s.phase2_rows = 100;
  s.phase2_test_rows = 50;
  s.new_segment_rows = 40;
  return s;
}

struct Fitted {
  FeatureStats stats;
  std::vector<EncodedExample> train, val;
};

Fitted fitted_tiny(std::uint64_t seed) {
  const auto d = generate_synthetic(tiny_spec(), seed);
  Fitted f;
  f.stats = fit_stats(d.train, 100, 3);
  f.train = encode(d.train, f.stats);
  f.val = encode(d.val, f.stats);
  return f;
}

UniversalConfig tiny_universal() {
  UniversalConfig c;
  c.clusters = 2;
  c.latent_dim = 3;
  c.hidden = 8;
  c.beta = 0.001;
  return c;
}

}  // namespace

// ---- config -----------------------------------------------------------------

TEST(Config, ParsesCommentsAndTypedValues) {
  const Config c = Config::parse(
      "# comment line\n"
      "clusters = 5   # trailing comment\n"
      "beta=0.25\n"
      "encoder = attention\n"
      "gumbel = true\n"
      "t_logit = inf\n"
      "synth_phase1_modes = 1, 2\n"
      "\n"
      "train = data/train.csv\n");
  EXPECT_EQ(c.universal.clusters, 5u);
  EXPECT_EQ(c.universal.beta, 0.25);
  EXPECT_EQ(c.universal.encoder, EncoderKind::Attention);
  EXPECT_TRUE(c.bipartite.gumbel);
  EXPECT_EQ(c.expansion.t_logit, std::numeric_limits<double>::infinity());
  EXPECT_EQ(c.synthetic.phase1_modes, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(c.train_path, "data/train.csv");
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  auto message = [](const std::string& text) {
    try {
      Config::parse(text);
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("clusterz = 3\n").find("unknown config key 'clusterz'"), std::string::npos);
  EXPECT_NE(message("seed = 1\nclusters = three\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("clusters = -1\n").find("non-negative integer"), std::string::npos);
  EXPECT_NE(message("beta = 0.1x\n").find("expected a number"), std::string::npos);
  EXPECT_NE(message("gumbel = yes\n").find("true or false"), std::string::npos);
  EXPECT_NE(message("just text\n").find("key = value"), std::string::npos);
}

TEST(Config, ResolvedDumpRoundTrips) {
  Config c;
  c.seed = 42;
  c.universal.beta = 0.1;  // not exactly representable; %.17g must carry it
  c.expansion.t_logit = 1.0 / 3.0;
  c.synthetic.phase2_modes = {2, 3};
  const std::string dump = c.resolved();
  EXPECT_EQ(Config::parse(dump).resolved(), dump);
  EXPECT_EQ(Config::parse(dump).universal.beta, 0.1);
  EXPECT_NE(dump.find("seed = 42\n"), std::string::npos);
}

// ---- synthetic data -----------------------------------------------------------

TEST(Synthetic, SameSeedGivesIdenticalFiles) {
  const auto a = generate_synthetic(tiny_spec(), 5);
  const auto b = generate_synthetic(tiny_spec(), 5);
  const auto c = generate_synthetic(tiny_spec(), 6);
  EXPECT_EQ(format_csv(a.train), format_csv(b.train));
  EXPECT_EQ(format_csv(a.phase2), format_csv(b.phase2));
  EXPECT_EQ(format_csv(a.segment_features), format_csv(b.segment_features));
  EXPECT_NE(format_csv(a.train), format_csv(c.train));

  const auto dir = std::filesystem::temp_directory_path() / "ussr_synth_test";
  std::filesystem::remove_all(dir);
  write_synthetic(a, (dir / "a").string());
  write_synthetic(b, (dir / "b").string());
  for (const char* f : {"train.csv", "val.csv", "phase2.csv", "segments.csv", "new_segment.csv"}) {
    EXPECT_EQ(read_file((dir / "a" / f).string()), read_file((dir / "b" / f).string())) << f;
  }
  std::filesystem::remove_all(dir);
}

TEST(Synthetic, ZeroExponentGivesNearEqualSegments) {
  SyntheticSpec s = tiny_spec();
  s.tail_exponent = 0.0;
  s.train_rows = 12000;
  const auto d = generate_synthetic(s, 9);
  std::vector<double> counts(s.segments);
  const std::size_t seg_col = d.train.header.size() - 1;
  for (const auto& row : d.train.rows) counts[std::stoul(row[seg_col])] += 1.0;
  const double n = static_cast<double>(s.train_rows);
  const double p = 1.0 / static_cast<double>(s.segments);
  const double sd = std::sqrt(n * p * (1.0 - p));
  for (double c : counts) EXPECT_LT(std::abs(c - n * p), 4.0 * sd);
}

TEST(Synthetic, SegmentSizesFollowThePowerLaw) {
  SyntheticSpec s = tiny_spec();
  s.train_rows = 20000;
  const auto d = generate_synthetic(s, 10);
  std::vector<double> counts(s.segments);
  const std::size_t seg_col = d.train.header.size() - 1;
  for (const auto& row : d.train.rows) counts[std::stoul(row[seg_col])] += 1.0;
  double z = 0.0;
  for (std::size_t g = 0; g < s.segments; ++g) z += std::pow(g + 1.0, -s.tail_exponent);
  const double n = static_cast<double>(s.train_rows);
  for (std::size_t g = 0; g < s.segments; ++g) {
    const double p = std::pow(g + 1.0, -s.tail_exponent) / z;
    EXPECT_LT(std::abs(counts[g] - n * p), 4.0 * std::sqrt(n * p * (1.0 - p))) << "segment " << g;
  }
}

TEST(Synthetic, PhaseSplitHoldsOutAMode) {
  SyntheticSpec s = tiny_spec();
  s.phase1_modes = {1, 2};
  s.phase2_modes = {3};
  const auto d = generate_synthetic(s, 11);
  for (std::size_t m : d.train_modes) EXPECT_TRUE(m == 1 || m == 2);
  for (std::size_t m : d.test_modes) EXPECT_TRUE(m == 1 || m == 2);
  for (std::size_t m : d.phase2_modes) EXPECT_EQ(m, 3u);
  EXPECT_EQ(d.train_modes.size(), d.train.rows.size());
  for (const auto& row : d.train.rows) {
    const std::string& y = row[row.size() - 2];
    EXPECT_TRUE(y == "0" || y == "1");
  }
}

TEST(Synthetic, InvalidSpecFails) {
  SyntheticSpec s = tiny_spec();
  s.phase1_modes = {4};
  EXPECT_THROW(generate_synthetic(s, 1), Error);
  s = tiny_spec();
  s.segments = 0;
  EXPECT_THROW(generate_synthetic(s, 1), Error);
  s = tiny_spec();
  s.tail_exponent = -1.0;
  EXPECT_THROW(generate_synthetic(s, 1), Error);
  s = tiny_spec();
  s.segment_reveal = 1.5;
  try {
    generate_synthetic(s, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("invalid synthetic spec"), std::string::npos);
  }
}

// ---- AUC ----------------------------------------------------------------------

TEST(EvaluateAuc, Examples) {
  EXPECT_EQ(evaluate_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(evaluate_auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{0, 1, 0, 1}), 0.5);
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_EQ(pairwise_auc(s, y), 0.75);
  EXPECT_EQ(evaluate_auc(s, y), 0.75);
}

TEST(EvaluateAuc, MatchesPairwiseCountWithTies) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(400);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const std::size_t levels = 1 + rng.below(20);  // few levels force ties
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? static_cast<double>(rng.below(levels)) : rng.normal();
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_EQ(evaluate_auc(s, y), pairwise_auc(s, y)) << "trial " << trial;
  }
}

TEST(EvaluateAuc, RejectsSingleClassAndNaN) {
  try {
    evaluate_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("undefined AUC"), std::string::npos);
  }
  EXPECT_THROW(evaluate_auc(std::vector<double>{}, std::vector<int>{}), Error);
  EXPECT_THROW(evaluate_auc(std::vector<double>{0.1, std::nan("")}, std::vector<int>{0, 1}), Error);
  EXPECT_THROW(evaluate_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 2}), Error);
  EXPECT_THROW(evaluate_auc(std::vector<double>{0.1}, std::vector<int>{0, 1}), Error);
}

// ---- checkpoint -----------------------------------------------------------------

namespace {

Checkpoint trained_checkpoint() {
  Fitted f = fitted_tiny(12);
  Rng rng(13);
  UniversalModel u(tiny_universal(), FeatureLayout::from(f.stats), rng);
  TrainOptions opts;
  opts.epochs = 2;
  opts.batch_size = 64;
  opts.learning_rate = 0.5;
  train_universal(u, f.train, f.val, opts, rng);
  const auto d = generate_synthetic(tiny_spec(), 12);
  BipartiteConfig bc;
  bc.edge_dim = 4;
  bc.hidden = 6;
  BipartiteModel b(bc, u.cluster_bank(), read_segment_features(d.segment_features), 0, rng);
  train_segments(b, u, f.train, f.val, opts, rng);
  return Checkpoint{f.stats, u, b, rng.state()};
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const Checkpoint ckpt = trained_checkpoint();
  const std::string bytes = encode_checkpoint(ckpt);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(params_bytes(back.universal.params()), params_bytes(ckpt.universal.params()));
  ASSERT_TRUE(back.bipartite);
  EXPECT_EQ(params_bytes(back.bipartite->params()), params_bytes(ckpt.bipartite->params()));
  EXPECT_EQ(back.bipartite->segments(), ckpt.bipartite->segments());
  EXPECT_TRUE(bit_equal(back.bipartite->cluster_bank(), ckpt.bipartite->cluster_bank()));
  EXPECT_EQ(back.universal.config(), ckpt.universal.config());
  EXPECT_EQ(back.stats.vocab, ckpt.stats.vocab);
  EXPECT_EQ(back.rng_state, ckpt.rng_state);

  // through a file as well, and without a segment model
  const auto path = (std::filesystem::temp_directory_path() / "ussr_ckpt_test.bin").string();
  Checkpoint universal_only{ckpt.stats, ckpt.universal, std::nullopt, ckpt.rng_state};
  save_checkpoint(path, universal_only);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), read_file(path));
  EXPECT_FALSE(load_checkpoint(path).bipartite);
  std::filesystem::remove(path);
}

TEST(Checkpoint, LoadedModelPredictsBitIdentically) {
  const Checkpoint ckpt = trained_checkpoint();
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ckpt));
  const auto probe = encode(generate_synthetic(tiny_spec(), 14).test, ckpt.stats);
  EXPECT_EQ(predict_universal(back.universal, probe), predict_universal(ckpt.universal, probe));
  EXPECT_EQ(predict_segments(*back.bipartite, back.universal, probe),
            predict_segments(*ckpt.bipartite, ckpt.universal, probe));
  Rng a(0), b(0);
  a.set_state(ckpt.rng_state);
  b.set_state(back.rng_state);
  EXPECT_EQ(a.next(), b.next());
}

TEST(Checkpoint, TruncatedFilesFailCleanly) {
  const std::string bytes = encode_checkpoint(trained_checkpoint());
  for (std::size_t len = 0; len < bytes.size(); len += 1 + len / 7) {
    EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, len)), Error) << "length " << len;
  }
  EXPECT_THROW(decode_checkpoint(bytes + "x"), Error);
}

TEST(Checkpoint, MagicAndVersionErrorsNameExpectedAndFound) {
  std::string bytes = encode_checkpoint(trained_checkpoint());
  std::string bad_version = bytes;
  bad_version[8] = 7;
  try {
    decode_checkpoint(bad_version);
    FAIL();
  } catch (const Error& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("version 7"), std::string::npos) << what;
    EXPECT_NE(what.find("expected 1"), std::string::npos) << what;
  }
  std::string bad_magic = bytes;
  bad_magic.replace(0, 8, "NOTACKPT");
  try {
    decode_checkpoint(bad_magic);
    FAIL();
  } catch (const Error& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("expected 'USSRCKPT'"), std::string::npos) << what;
    EXPECT_NE(what.find("found 'NOTACKPT'"), std::string::npos) << what;
  }
}

TEST(Checkpoint, StatsFileRoundTrips) {
  const Fitted f = fitted_tiny(15);
  const std::string bytes = encode_stats(f.stats);
  const FeatureStats back = decode_stats(bytes);
  EXPECT_EQ(encode_stats(back), bytes);
  EXPECT_THROW(decode_stats(bytes.substr(0, bytes.size() - 1)), Error);
}

// ---- training -------------------------------------------------------------------

TEST(Train, ZeroEpochsKeepsInitialization) {
  const Fitted f = fitted_tiny(16);
  Rng init(17);
  UniversalModel fresh(tiny_universal(), FeatureLayout::from(f.stats), init);
  UniversalModel model = fresh;
  TrainOptions opts;
  opts.epochs = 0;
  Rng rng(18);
  const auto report = train_universal(model, f.train, f.val, opts, rng);
  EXPECT_EQ(report.epochs_run, 0u);
  EXPECT_EQ(report.final_loss, report.initial_loss);
  EXPECT_EQ(params_bytes(model.params()), params_bytes(fresh.params()));

  const auto d = generate_synthetic(tiny_spec(), 16);
  BipartiteModel bip(BipartiteConfig{}, model.cluster_bank(), read_segment_features(d.segment_features), 0, rng);
  const std::string before = params_bytes(bip.params());
  train_segments(bip, model, f.train, f.val, opts, rng);
  EXPECT_EQ(params_bytes(bip.params()), before);
}

TEST(Train, SameSeedGivesIdenticalMetrics) {
  auto run = [](std::uint64_t seed) {
    const Fitted f = fitted_tiny(19);
    Rng rng(seed);
    UniversalModel u(tiny_universal(), FeatureLayout::from(f.stats), rng);
    TrainOptions opts;
    opts.epochs = 3;
    opts.batch_size = 64;
    std::ostringstream csv;
    MetricsWriter writer(csv, false);
    train_universal(u, f.train, f.val, opts, rng, writer);
    const auto d = generate_synthetic(tiny_spec(), 19);
    BipartiteConfig bc;
    bc.gumbel = true;
    BipartiteModel b(bc, u.cluster_bank(), read_segment_features(d.segment_features), 0, rng);
    train_segments(b, u, f.train, f.val, opts, rng, writer);
    return csv.str();
  };
  const std::string a = run(20);
  EXPECT_EQ(a, run(20));
  EXPECT_NE(a, run(21));
  EXPECT_EQ(a.substr(0, a.find('\n')), "epoch,phase,loss,val_auc,wall_seconds");
  EXPECT_NE(a.find("\n1,segments,"), std::string::npos);
}

TEST(Train, EarlyStoppingRestoresTheBestEpoch) {
  const Fitted f = fitted_tiny(22);
  Rng rng(23);
  UniversalModel u(tiny_universal(), FeatureLayout::from(f.stats), rng);
  TrainOptions opts;
  opts.epochs = 12;
  opts.patience = 2;
  opts.batch_size = 64;
  opts.learning_rate = 0.5;
  std::vector<EpochMetrics> seen;
  const auto report = train_universal(u, f.train, f.val, opts, rng, [&](const EpochMetrics& m) { seen.push_back(m); });
  ASSERT_EQ(seen.size(), report.epochs_run);
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (const auto& m : seen) {
    if (m.val_auc > best) {
      best = m.val_auc;
      best_epoch = m.epoch;
    }
  }
  EXPECT_EQ(report.best_epoch, best_epoch);
  EXPECT_EQ(report.best_val_auc, best);
  EXPECT_EQ(evaluate_auc(predict_universal(u, f.val), labels_of(f.val)), best);
}

TEST(Train, DefaultSyntheticLossDecreases) {
  const auto d = generate_synthetic(SyntheticSpec{}, 24);
  const FeatureStats stats = fit_stats(d.train, 10000, 4);
  const auto train = encode(d.train, stats);
  const auto val = encode(d.val, stats);
  UniversalConfig c;
  c.beta = 0.001;
  Rng rng(25);
  UniversalModel u(c, FeatureLayout::from(stats), rng);
  TrainOptions opts;
  opts.epochs = 2;
  opts.learning_rate = 0.5;
  const auto report = train_universal(u, train, val, opts, rng);
  EXPECT_LT(report.final_loss, report.initial_loss);
}

TEST(Train, RejectsMismatchedData) {
  const Fitted f = fitted_tiny(26);
  Rng rng(27);
  UniversalModel u(tiny_universal(), FeatureLayout::from(f.stats), rng);
  TrainOptions opts;
  EXPECT_THROW(train_universal(u, std::vector<EncodedExample>{}, f.val, opts, rng), Error);
  UniversalModel other(tiny_universal(), small_layout(), rng);
  EXPECT_THROW(train_universal(other, f.train, f.val, opts, rng), Error);
}
