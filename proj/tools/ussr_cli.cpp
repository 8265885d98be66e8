#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ussr/ussr.hpp"

namespace fs = std::filesystem;
using namespace ussr;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value configuration file");
  cmd->add_option("--seed", c.seed, "overrides the configured seed");
  cmd->add_option("--set", c.overrides, "extra key=value settings, applied after the file");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
}

/// Resolves the configuration and records it in the output directory.
Config resolve(const Common& c, const std::string& command) {
  Config cfg = c.config_path.empty() ? Config{} : Config::load(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  fs::create_directories(c.out);
  std::ofstream log(fs::path(c.out) / (command + ".config"));
  log << "# resolved configuration for " << command << "\n" << cfg.resolved();
  return cfg;
}

std::string need(const std::string& value, const std::string& what) {
  if (value.empty()) throw Error("no " + what + " given");
  return value;
}

std::string out_file(const Common& c, const std::string& name) { return (fs::path(c.out) / name).string(); }

/// Random stream for a command that continues from a checkpoint: an explicit
/// --seed restarts it, otherwise the stored state carries on.
Rng resume_rng(const Checkpoint& ckpt, const Common& c) {
  Rng rng(c.seed.value_or(0));
  if (!c.seed) rng.set_state(ckpt.rng_state);
  return rng;
}

std::vector<EncodedExample> load_examples(const std::string& path, const FeatureStats& stats) {
  return encode(read_csv(path), stats);
}

/// Rows of "seg,u_0,...": segment id and its feature vector, in file order.
std::vector<std::pair<std::size_t, std::vector<double>>> read_segment_rows(const std::string& path) {
  const CsvTable t = read_csv(path);
  if (t.header.empty() || t.header[0] != "seg") throw Error(path + ": first column must be 'seg'");
  std::vector<std::pair<std::size_t, std::vector<double>>> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    if (row.size() != t.header.size()) throw Error(path + ": malformed row at line " + std::to_string(t.lines[r]));
    std::vector<double> u;
    for (std::size_t j = 1; j < row.size(); ++j) u.push_back(std::stod(row[j]));
    out.emplace_back(std::stoul(row[0]), std::move(u));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal and segment representation learning"};
  app.require_subcommand(1);

  Common common;
  std::string data_dir, model_path, train_path, val_path, test_path, data_path, segments_path, features_path;
  std::string calibrate_path;
  double quantile = 0.2;
  std::size_t segment_id = 0;

  auto* gen = app.add_subcommand("gen-synth", "write a synthetic dataset");
  add_common(gen, common);

  auto* prep = app.add_subcommand("prepare-data", "fit feature statistics and encode CSV files");
  add_common(prep, common);
  prep->add_option("--train", train_path, "training CSV (statistics are fitted here)");
  prep->add_option("--val", val_path, "validation CSV");
  prep->add_option("--test", test_path, "test CSV");

  auto* tu = app.add_subcommand("train-universal", "phase 1: train the universal representation");
  add_common(tu, common);
  tu->add_option("--data", data_dir, "directory written by prepare-data")->required();

  auto* ts = app.add_subcommand("train-segments", "phase 2: train the segment representations");
  add_common(ts, common);
  ts->add_option("--model", model_path, "checkpoint from train-universal")->required();
  ts->add_option("--train", train_path, "training CSV");
  ts->add_option("--val", val_path, "validation CSV");
  ts->add_option("--segments", segments_path, "segment features CSV (seg,u_0,...)");

  auto* ec = app.add_subcommand("expand-clusters", "buffer poorly explained data and add a cluster");
  add_common(ec, common);
  ec->add_option("--model", model_path, "checkpoint")->required();
  ec->add_option("--data", data_path, "new data CSV")->required();
  ec->add_option("--calibrate", calibrate_path, "CSV whose score quantile sets t_logit");
  ec->add_option("--quantile", quantile, "quantile used with --calibrate")->capture_default_str();

  auto* es = app.add_subcommand("expand-segment", "register and train a new segment");
  add_common(es, common);
  es->add_option("--model", model_path, "checkpoint with frozen segments")->required();
  es->add_option("--id", segment_id, "new segment id (must equal the current count)")->required();
  es->add_option("--data", data_path, "CSV rows of the new segment")->required();
  es->add_option("--features", features_path, "CSV holding the new segment's feature row");

  auto* pr = app.add_subcommand("predict", "score a CSV file");
  add_common(pr, common);
  pr->add_option("--model", model_path, "checkpoint")->required();
  pr->add_option("--data", data_path, "CSV to score")->required();

  auto* ev = app.add_subcommand("evaluate", "AUC of a checkpoint on a labelled CSV");
  add_common(ev, common);
  ev->add_option("--model", model_path, "checkpoint")->required();
  ev->add_option("--data", data_path, "labelled CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const Config cfg = resolve(common, "gen-synth");
      const auto d = generate_synthetic(cfg.synthetic, cfg.seed);
      write_synthetic(d, common.out);
      std::cout << "wrote synthetic dataset to " << common.out << "\n";
    } else if (prep->parsed()) {
      const Config cfg = resolve(common, "prepare-data");
      const CsvTable train = read_csv(need(train_path.empty() ? cfg.train_path : train_path, "training CSV"));
      const FeatureStats stats = fit_stats(train, cfg.cap, cfg.embed_dim);
      write_file(out_file(common, "stats.bin"), encode_stats(stats));
      write_cache(out_file(common, "train.enc"), encode(train, stats));
      for (const auto& [flag, fallback, name] : {std::tuple{val_path, cfg.val_path, "val.enc"},
                                                 std::tuple{test_path, cfg.test_path, "test.enc"}}) {
        const std::string path = flag.empty() ? fallback : flag;
        if (!path.empty()) write_cache(out_file(common, name), load_examples(path, stats));
      }
      std::cout << "prepared " << train.rows.size() << " training rows into " << common.out << "\n";
    } else if (tu->parsed()) {
      const Config cfg = resolve(common, "train-universal");
      const fs::path dir(data_dir);
      const FeatureStats stats = decode_stats(read_file((dir / "stats.bin").string()));
      const auto train = read_cache((dir / "train.enc").string());
      const auto val = read_cache((dir / "val.enc").string());
      Rng rng(cfg.seed);
      UniversalModel model(cfg.universal, FeatureLayout::from(stats), rng);
      std::ofstream metrics(out_file(common, "metrics.csv"));
      MetricsWriter writer(metrics, cfg.metrics_wall_clock);
      const auto report = train_universal(model, train, val, cfg.universal_options(), rng, writer);
      save_checkpoint(out_file(common, "model.ckpt"), Checkpoint{stats, model, std::nullopt, rng.state()});
      std::printf("epochs %zu, best epoch %zu, val AUC %.6f, loss %.6f -> %.6f\n", report.epochs_run,
                  report.best_epoch, report.best_val_auc, report.initial_loss, report.final_loss);
    } else if (ts->parsed()) {
      const Config cfg = resolve(common, "train-segments");
      Checkpoint ckpt = load_checkpoint(model_path);
      if (ckpt.bipartite) throw Error(model_path + " already holds a segment model");
      Rng rng = resume_rng(ckpt, common);
      const auto train = load_examples(need(train_path.empty() ? cfg.train_path : train_path, "training CSV"), ckpt.stats);
      const auto val = load_examples(need(val_path.empty() ? cfg.val_path : val_path, "validation CSV"), ckpt.stats);
      const std::string seg_file = segments_path.empty() ? cfg.segments_path : segments_path;
      std::vector<std::vector<double>> features;
      std::size_t count = cfg.learnable_segments;
      if (!seg_file.empty()) features = read_segment_features(read_csv(seg_file));
      if (features.empty() && count == 0) throw Error("give a segments file or set learnable_segments");
      BipartiteModel bip(cfg.bipartite, ckpt.universal.cluster_bank(), features, count, rng);
      std::ofstream metrics(out_file(common, "metrics.csv"));
      MetricsWriter writer(metrics, cfg.metrics_wall_clock);
      const auto report = train_segments(bip, ckpt.universal, train, val, cfg.segment_options(), rng, writer);
      ckpt.bipartite = std::move(bip);
      ckpt.rng_state = rng.state();
      save_checkpoint(out_file(common, "model.ckpt"), ckpt);
      std::printf("epochs %zu, best epoch %zu, val AUC %.6f, loss %.6f -> %.6f\n", report.epochs_run,
                  report.best_epoch, report.best_val_auc, report.initial_loss, report.final_loss);
    } else if (ec->parsed()) {
      Config cfg = resolve(common, "expand-clusters");
      Checkpoint ckpt = load_checkpoint(model_path);
      Rng rng = resume_rng(ckpt, common);
      if (!calibrate_path.empty()) {
        if (!(quantile >= 0.0 && quantile <= 1.0)) throw Error("--quantile must lie in [0, 1]");
        auto scores = ckpt.universal.elbo_per_example(make_batch(load_examples(calibrate_path, ckpt.stats)),
                                                      mean_noise());
        std::sort(scores.begin(), scores.end());
        cfg.expansion.t_logit = scores[static_cast<std::size_t>(quantile * static_cast<double>(scores.size() - 1))];
      }
      const auto data = load_examples(data_path, ckpt.stats);
      ExpansionBuffer buffer(cfg.expansion.t_logit, cfg.expansion.t_num);
      score_and_buffer(ckpt.universal, buffer, data);
      std::printf("t_logit %.17g: buffered %zu of %zu\n", cfg.expansion.t_logit, buffer.size(), data.size());
      AuditLog audit(out_file(common, "audit.log"));
      const std::size_t k = expand_cluster(ckpt.universal, buffer, cfg.expansion, rng, &audit);
      if (ckpt.bipartite) {
        std::cout << "note: segment model keeps its stored cluster bank; retrain segments to use cluster " << k
                  << "\n";
      }
      ckpt.rng_state = rng.state();
      save_checkpoint(out_file(common, "model.ckpt"), ckpt);
      std::cout << "clusters: " << k << "\n";
    } else if (es->parsed()) {
      const Config cfg = resolve(common, "expand-segment");
      Checkpoint ckpt = load_checkpoint(model_path);
      if (!ckpt.bipartite) throw Error(model_path + " has no segment model; run train-segments first");
      Rng rng = resume_rng(ckpt, common);
      std::optional<std::vector<double>> u;
      if (!features_path.empty()) {
        for (auto& [id, row] : read_segment_rows(features_path)) {
          if (id == segment_id) u = std::move(row);
        }
        if (!u) throw Error(features_path + " has no row for segment " + std::to_string(segment_id));
      }
      const auto data = load_examples(data_path, ckpt.stats);
      AuditLog audit(out_file(common, "audit.log"));
      const std::size_t m =
          expand_segment(*ckpt.bipartite, ckpt.universal, segment_id, u, data, cfg.expansion, rng, &audit);
      ckpt.rng_state = rng.state();
      save_checkpoint(out_file(common, "model.ckpt"), ckpt);
      std::cout << "segments: " << m << "\n";
    } else if (pr->parsed()) {
      resolve(common, "predict");
      const Checkpoint ckpt = load_checkpoint(model_path);
      const auto data = load_examples(data_path, ckpt.stats);
      const auto universal = predict_universal(ckpt.universal, data);
      std::vector<double> segment;
      if (ckpt.bipartite) segment = predict_segments(*ckpt.bipartite, ckpt.universal, data);
      std::ofstream out(out_file(common, "predictions.csv"));
      out << (segment.empty() ? "row,universal\n" : "row,universal,segment\n");
      char buf[96];
      for (std::size_t i = 0; i < data.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g", i, universal[i]);
        out << buf;
        if (!segment.empty()) {
          std::snprintf(buf, sizeof buf, ",%.17g", segment[i]);
          out << buf;
        }
        out << "\n";
      }
      std::cout << "wrote " << data.size() << " predictions to " << out_file(common, "predictions.csv") << "\n";
    } else if (ev->parsed()) {
      resolve(common, "evaluate");
      const Checkpoint ckpt = load_checkpoint(model_path);
      const auto data = load_examples(data_path, ckpt.stats);
      const auto labels = labels_of(data);
      std::ofstream out(out_file(common, "evaluation.csv"));
      out << "model,auc\n";
      char buf[96];
      std::snprintf(buf, sizeof buf, "universal,%.17g\n", evaluate_auc(predict_universal(ckpt.universal, data), labels));
      out << buf;
      std::cout << buf;
      if (ckpt.bipartite) {
        std::snprintf(buf, sizeof buf, "segment,%.17g\n",
                      evaluate_auc(predict_segments(*ckpt.bipartite, ckpt.universal, data), labels));
        out << buf;
        std::cout << buf;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
