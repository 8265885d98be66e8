#pragma once

#include <optional>
#include <string>

#include "ussr/bipartite.hpp"
#include "ussr/features.hpp"
#include "ussr/serialize.hpp"
#include "ussr/universal.hpp"

namespace ussr {

/// Everything needed to resume or serve a model: feature statistics, the
/// universal model, the segment model once phase 2 has run, and the
/// random-number-generator state.
struct Checkpoint {
  FeatureStats stats;
  UniversalModel universal;
  std::optional<BipartiteModel> bipartite;
  std::string rng_state;
};

// Layout: "USSRCKPT", u32 version, then the sections below in order.
// Little-endian; parameters are written in name order.
inline constexpr char kCheckpointMagic[8] = {'U', 'S', 'S', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_params(ByteWriter& w, const ParamStore& params) {
  w.u64(params.size());
  for (const auto& [name, value] : params) {
    w.str(name);
    w.tensor(value);
  }
}

inline ParamStore read_params(ByteReader& r) {
  ParamStore params;
  const std::uint64_t n = r.u64();
  if (n > r.remaining()) throw Error("checkpoint: corrupt parameter count");
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    params.set(name, r.tensor());
  }
  return params;
}

inline void write_doubles(ByteWriter& w, const std::vector<double>& v) {
  w.u64(v.size());
  for (double x : v) w.f64(x);
}

inline std::vector<double> read_doubles(ByteReader& r) {
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / 8) throw Error("checkpoint: truncated vector");
  std::vector<double> v(n);
  for (double& x : v) x = r.f64();
  return v;
}

inline void write_sizes(ByteWriter& w, const std::vector<std::size_t>& v) {
  w.u64(v.size());
  for (std::size_t x : v) w.u64(x);
}

inline std::vector<std::size_t> read_sizes(ByteReader& r) {
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / 8) throw Error("checkpoint: truncated vector");
  std::vector<std::size_t> v(n);
  for (std::size_t& x : v) x = r.u64();
  return v;
}

inline void write_stats(ByteWriter& w, const FeatureStats& s) {
  w.u64(s.dense_names.size());
  for (const auto& n : s.dense_names) w.str(n);
  w.u64(s.sparse_names.size());
  for (const auto& n : s.sparse_names) w.str(n);
  w.u64(s.vocab.size());
  for (const auto& field : s.vocab) {
    w.u64(field.size());
    for (const auto& [category, index] : field) {
      w.str(category);
      w.u32(index);
    }
  }
  w.u32(s.cap);
  w.u64(s.embed_dim);
}

inline std::vector<std::string> read_names(ByteReader& r) {
  const std::uint64_t n = r.u64();
  if (n > r.remaining()) throw Error("checkpoint: corrupt name count");
  std::vector<std::string> out;
  for (std::uint64_t i = 0; i < n; ++i) out.push_back(r.str());
  return out;
}

inline FeatureStats read_stats(ByteReader& r) {
  FeatureStats s;
  s.dense_names = read_names(r);
  s.sparse_names = read_names(r);
  const std::uint64_t fields = r.u64();
  if (fields > r.remaining()) throw Error("checkpoint: corrupt vocabulary count");
  s.vocab.resize(fields);
  for (auto& field : s.vocab) {
    const std::uint64_t n = r.u64();
    if (n > r.remaining()) throw Error("checkpoint: corrupt vocabulary size");
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string category = r.str();
      field[category] = r.u32();
    }
  }
  s.cap = r.u32();
  s.embed_dim = r.u64();
  return s;
}

inline void write_universal(ByteWriter& w, const UniversalModel& m) {
  const UniversalConfig& c = m.config();
  w.u64(c.clusters);
  w.u64(c.latent_dim);
  w.u64(c.hidden);
  w.f64(c.beta);
  w.f64(c.beta_c);
  w.u64(c.samples);
  w.u8(c.encoder == EncoderKind::Attention ? 1 : 0);
  w.u8(c.gate_input == GateInput::Raw ? 1 : 0);
  w.u64(c.attention_layers);
  w.u64(c.attention_heads);
  w.u64(c.attention_dim);
  w.u64(m.layout().dense);
  write_sizes(w, m.layout().vocab_rows);
  w.u64(m.layout().embed_dim);
  w.u64(m.clusters());
  write_params(w, m.params());
}

inline UniversalModel read_universal(ByteReader& r) {
  UniversalConfig c;
  c.clusters = r.u64();
  c.latent_dim = r.u64();
  c.hidden = r.u64();
  c.beta = r.f64();
  c.beta_c = r.f64();
  c.samples = r.u64();
  c.encoder = r.u8() ? EncoderKind::Attention : EncoderKind::Concat;
  c.gate_input = r.u8() ? GateInput::Raw : GateInput::Encoded;
  c.attention_layers = r.u64();
  c.attention_heads = r.u64();
  c.attention_dim = r.u64();
  FeatureLayout layout;
  layout.dense = r.u64();
  layout.vocab_rows = read_sizes(r);
  layout.embed_dim = r.u64();
  const std::size_t clusters = r.u64();
  return UniversalModel(c, std::move(layout), clusters, read_params(r));
}

inline void write_bipartite(ByteWriter& w, const BipartiteModel& b) {
  const BipartiteConfig& c = b.config();
  w.u64(c.edge_dim);
  w.u64(c.hidden);
  w.u64(c.segment_dim);
  w.f64(c.temperature);
  w.u8(c.gumbel ? 1 : 0);
  w.tensor(b.cluster_bank());
  w.u8(b.learnable_features() ? 1 : 0);
  w.u64(b.segment_count());
  for (const auto& s : b.segments()) {
    w.u64(s.id);
    write_doubles(w, s.features);
    w.u8(s.frozen ? 1 : 0);
    w.u8(s.repr ? 1 : 0);
    if (s.repr) write_doubles(w, *s.repr);
  }
  w.u8(b.cluster_summary() ? 1 : 0);
  if (b.cluster_summary()) w.tensor(*b.cluster_summary());
  write_params(w, b.params());
}

inline BipartiteModel read_bipartite(ByteReader& r) {
  BipartiteConfig c;
  c.edge_dim = r.u64();
  c.hidden = r.u64();
  c.segment_dim = r.u64();
  c.temperature = r.f64();
  c.gumbel = r.u8() != 0;
  Tensor bank = r.tensor();
  const bool learnable = r.u8() != 0;
  const std::uint64_t n = r.u64();
  if (n > r.remaining()) throw Error("checkpoint: corrupt segment count");
  std::vector<SegmentDescriptor> segments(n);
  for (auto& s : segments) {
    s.id = r.u64();
    s.features = read_doubles(r);
    s.frozen = r.u8() != 0;
    if (r.u8()) s.repr = read_doubles(r);
  }
  std::optional<Tensor> summary;
  if (r.u8()) summary = r.tensor();
  return BipartiteModel(c, std::move(bank), learnable, std::move(segments), std::move(summary), read_params(r));
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.raw(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  detail::write_stats(w, ckpt.stats);
  detail::write_universal(w, ckpt.universal);
  w.u8(ckpt.bipartite ? 1 : 0);
  if (ckpt.bipartite) detail::write_bipartite(w, *ckpt.bipartite);
  w.str(ckpt.rng_state);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes, "checkpoint");
  r.expect_magic(kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error("checkpoint: unsupported version " + std::to_string(version) + ", expected " +
                std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  ckpt.stats = detail::read_stats(r);
  ckpt.universal = detail::read_universal(r);
  if (r.u8()) ckpt.bipartite = detail::read_bipartite(r);
  ckpt.rng_state = r.str();
  r.expect_end();
  return ckpt;
}

// Feature statistics alone, as written by data preparation.
inline constexpr char kStatsMagic[8] = {'U', 'S', 'S', 'R', 'S', 'T', 'A', 'T'};

inline std::string encode_stats(const FeatureStats& stats) {
  ByteWriter w;
  w.raw(kStatsMagic, 8);
  w.u32(kCheckpointVersion);
  detail::write_stats(w, stats);
  return w.take();
}

inline FeatureStats decode_stats(std::string_view bytes) {
  ByteReader r(bytes, "feature stats");
  r.expect_magic(kStatsMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error("feature stats: unsupported version " + std::to_string(version) + ", expected " +
                std::to_string(kCheckpointVersion));
  }
  FeatureStats stats = detail::read_stats(r);
  r.expect_end();
  return stats;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace ussr
