#pragma once

#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ussr/bipartite.hpp"
#include "ussr/expansion.hpp"
#include "ussr/serialize.hpp"
#include "ussr/synthetic.hpp"
#include "ussr/training.hpp"
#include "ussr/universal.hpp"

namespace ussr {

/// Every run-time setting. Files are flat `key = value` lines; `#` starts a
/// comment. Unknown keys are rejected.
struct Config {
  std::uint64_t seed = 1;

  // data
  std::string train_path, val_path, test_path, segments_path;
  std::uint32_t cap = 10000;
  std::size_t embed_dim = 4;

  UniversalConfig universal;
  BipartiteConfig bipartite;
  TrainOptions train;
  std::size_t universal_epochs = 20;
  std::size_t segment_epochs = 10;
  std::size_t learnable_segments = 0;  ///< segment count when no features file is given
  ExpansionConfig expansion;
  SyntheticSpec synthetic;
  bool metrics_wall_clock = true;

  TrainOptions universal_options() const {
    TrainOptions o = train;
    o.epochs = universal_epochs;
    return o;
  }
  TrainOptions segment_options() const {
    TrainOptions o = train;
    o.epochs = segment_epochs;
    return o;
  }

  void set(const std::string& key, const std::string& value) {
    auto& fields = registry();
    auto it = fields.find(key);
    if (it == fields.end()) throw Error("unknown config key '" + key + "'");
    try {
      it->second.set(*this, value);
    } catch (const Error& e) {
      throw Error("config key '" + key + "': " + e.what());
    }
  }

  /// Fully resolved settings, one `key = value` line each, sorted by key.
  std::string resolved() const {
    std::string out;
    for (const auto& [key, field] : registry()) out += key + " = " + field.get(*this) + "\n";
    return out;
  }

  static Config parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw Error("config line " + std::to_string(number) + ": expected key = value");
      try {
        c.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
      } catch (const Error& e) {
        throw Error("config line " + std::to_string(number) + ": " + e.what());
      }
    }
    return c;
  }

  static Config load(const std::string& path) { return parse(read_file(path)); }

 private:
  struct Field {
    std::function<void(Config&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
  };

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::uint64_t to_unsigned(const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
      if (!v.empty() && v[0] == '-') throw Error("");
      x = std::stoull(v, &used);
    } catch (...) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw Error("expected a non-negative integer, got '" + v + "'");
    return x;
  }

  static double to_double(const std::string& v) {
    if (v == "inf") return std::numeric_limits<double>::infinity();
    if (v == "-inf") return -std::numeric_limits<double>::infinity();
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &used);
    } catch (...) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw Error("expected a number, got '" + v + "'");
    return x;
  }

  static bool to_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw Error("expected true or false, got '" + v + "'");
  }

  static std::string show(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

  // Accessors take a mutable Config; getters only read through them.
  template <class Member>
  static auto& read(Member member, const Config& c) {
    return std::invoke(member, const_cast<Config&>(c));
  }

  template <class T, class Member>
  static Field number(Member member) {
    return {[member](Config& c, const std::string& v) {
              if constexpr (std::is_floating_point_v<T>) {
                std::invoke(member, c) = to_double(v);
              } else {
                std::invoke(member, c) = static_cast<T>(to_unsigned(v));
              }
            },
            [member](const Config& c) {
              if constexpr (std::is_floating_point_v<T>) return show(read(member, c));
              else return std::to_string(read(member, c));
            }};
  }

  template <class Member>
  static Field flag(Member member) {
    return {[member](Config& c, const std::string& v) { std::invoke(member, c) = to_bool(v); },
            [member](const Config& c) { return std::string(read(member, c) ? "true" : "false"); }};
  }

  template <class Member>
  static Field text(Member member) {
    return {[member](Config& c, const std::string& v) { std::invoke(member, c) = v; },
            [member](const Config& c) { return std::string(read(member, c)); }};
  }

  template <class Member>
  static Field mode_list(Member member) {
    return {[member](Config& c, const std::string& v) {
              std::vector<std::size_t> out;
              std::istringstream in(v);
              std::string item;
              while (std::getline(in, item, ',')) out.push_back(to_unsigned(trim(item)));
              if (out.empty()) throw Error("expected a comma-separated list");
              std::invoke(member, c) = out;
            },
            [member](const Config& c) {
              std::string s;
              for (std::size_t m : read(member, c)) s += (s.empty() ? "" : ",") + std::to_string(m);
              return s;
            }};
  }

  static const std::map<std::string, Field>& registry() {
    using C = Config;
    static const std::map<std::string, Field> fields = {
        {"seed", number<std::uint64_t>([](C& c) -> auto& { return c.seed; })},
        {"train", text([](C& c) -> auto& { return c.train_path; })},
        {"val", text([](C& c) -> auto& { return c.val_path; })},
        {"test", text([](C& c) -> auto& { return c.test_path; })},
        {"segments", text([](C& c) -> auto& { return c.segments_path; })},
        {"cap", number<std::uint32_t>([](C& c) -> auto& { return c.cap; })},
        {"embed_dim", number<std::size_t>([](C& c) -> auto& { return c.embed_dim; })},
        {"clusters", number<std::size_t>([](C& c) -> auto& { return c.universal.clusters; })},
        {"latent_dim", number<std::size_t>([](C& c) -> auto& { return c.universal.latent_dim; })},
        {"hidden", number<std::size_t>([](C& c) -> auto& { return c.universal.hidden; })},
        {"beta", number<double>([](C& c) -> auto& { return c.universal.beta; })},
        {"beta_c", number<double>([](C& c) -> auto& { return c.universal.beta_c; })},
        {"samples", number<std::size_t>([](C& c) -> auto& { return c.universal.samples; })},
        {"encoder",
         {[](C& c, const std::string& v) {
            if (v == "concat") c.universal.encoder = EncoderKind::Concat;
            else if (v == "attention") c.universal.encoder = EncoderKind::Attention;
            else throw Error("expected concat or attention, got '" + v + "'");
          },
          [](const C& c) {
            return std::string(c.universal.encoder == EncoderKind::Concat ? "concat" : "attention");
          }}},
        {"gate_input",
         {[](C& c, const std::string& v) {
            if (v == "encoded") c.universal.gate_input = GateInput::Encoded;
            else if (v == "raw") c.universal.gate_input = GateInput::Raw;
            else throw Error("expected encoded or raw, got '" + v + "'");
          },
          [](const C& c) { return std::string(c.universal.gate_input == GateInput::Encoded ? "encoded" : "raw"); }}},
        {"attention_layers", number<std::size_t>([](C& c) -> auto& { return c.universal.attention_layers; })},
        {"attention_heads", number<std::size_t>([](C& c) -> auto& { return c.universal.attention_heads; })},
        {"attention_dim", number<std::size_t>([](C& c) -> auto& { return c.universal.attention_dim; })},
        {"edge_dim", number<std::size_t>([](C& c) -> auto& { return c.bipartite.edge_dim; })},
        {"segment_hidden", number<std::size_t>([](C& c) -> auto& { return c.bipartite.hidden; })},
        {"segment_dim", number<std::size_t>([](C& c) -> auto& { return c.bipartite.segment_dim; })},
        {"temperature", number<double>([](C& c) -> auto& { return c.bipartite.temperature; })},
        {"gumbel", flag([](C& c) -> auto& { return c.bipartite.gumbel; })},
        {"learnable_segments", number<std::size_t>([](C& c) -> auto& { return c.learnable_segments; })},
        {"learning_rate", number<double>([](C& c) -> auto& { return c.train.learning_rate; })},
        {"clip_norm", number<double>([](C& c) -> auto& { return c.train.clip_norm; })},
        {"batch_size", number<std::size_t>([](C& c) -> auto& { return c.train.batch_size; })},
        {"eval_batch", number<std::size_t>([](C& c) -> auto& { return c.train.eval_batch; })},
        {"patience", number<std::size_t>([](C& c) -> auto& { return c.train.patience; })},
        {"joint", flag([](C& c) -> auto& { return c.train.joint; })},
        {"universal_epochs", number<std::size_t>([](C& c) -> auto& { return c.universal_epochs; })},
        {"segment_epochs", number<std::size_t>([](C& c) -> auto& { return c.segment_epochs; })},
        {"t_logit", number<double>([](C& c) -> auto& { return c.expansion.t_logit; })},
        {"t_num", number<std::size_t>([](C& c) -> auto& { return c.expansion.t_num; })},
        {"expansion_epochs", number<std::size_t>([](C& c) -> auto& { return c.expansion.epochs; })},
        {"expansion_learning_rate", number<double>([](C& c) -> auto& { return c.expansion.learning_rate; })},
        {"expansion_batch_size", number<std::size_t>([](C& c) -> auto& { return c.expansion.batch_size; })},
        {"perturb", number<double>([](C& c) -> auto& { return c.expansion.perturb; })},
        {"metrics_wall_clock", flag([](C& c) -> auto& { return c.metrics_wall_clock; })},
        {"synth_modes", number<std::size_t>([](C& c) -> auto& { return c.synthetic.modes; })},
        {"synth_dense", number<std::size_t>([](C& c) -> auto& { return c.synthetic.dense; })},
        {"synth_sparse", number<std::size_t>([](C& c) -> auto& { return c.synthetic.sparse; })},
        {"synth_vocab", number<std::size_t>([](C& c) -> auto& { return c.synthetic.vocab; })},
        {"synth_segments", number<std::size_t>([](C& c) -> auto& { return c.synthetic.segments; })},
        {"synth_tail_exponent", number<double>([](C& c) -> auto& { return c.synthetic.tail_exponent; })},
        {"synth_mode_separation", number<double>([](C& c) -> auto& { return c.synthetic.mode_separation; })},
        {"synth_segment_reveal", number<double>([](C& c) -> auto& { return c.synthetic.segment_reveal; })},
        {"synth_train_rows", number<std::size_t>([](C& c) -> auto& { return c.synthetic.train_rows; })},
        {"synth_val_rows", number<std::size_t>([](C& c) -> auto& { return c.synthetic.val_rows; })},
        {"synth_test_rows", number<std::size_t>([](C& c) -> auto& { return c.synthetic.test_rows; })},
        {"synth_phase2_rows", number<std::size_t>([](C& c) -> auto& { return c.synthetic.phase2_rows; })},
        {"synth_phase2_test_rows", number<std::size_t>([](C& c) -> auto& { return c.synthetic.phase2_test_rows; })},
        {"synth_new_segment_rows", number<std::size_t>([](C& c) -> auto& { return c.synthetic.new_segment_rows; })},
        {"synth_phase1_modes", mode_list([](C& c) -> auto& { return c.synthetic.phase1_modes; })},
        {"synth_phase2_modes", mode_list([](C& c) -> auto& { return c.synthetic.phase2_modes; })},
    };
    return fields;
  }
};

}  // namespace ussr
