#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ussr/graph.hpp"
#include "ussr/rng.hpp"
#include "ussr/serialize.hpp"

namespace ussr {

// ---------------------------------------------------------------------------
// CSV input
// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  ///< 1-based source line of each row
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline CsvTable parse_csv(std::istream& in) {
  CsvTable table;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (table.header.empty()) {
      table.header = split_csv_line(line);
      continue;
    }
    table.rows.push_back(split_csv_line(line));
    table.lines.push_back(number);
  }
  if (table.header.empty()) throw Error("csv input has no header line");
  return table;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  return parse_csv(in);
}

inline std::string format_csv(const CsvTable& table) {
  std::string out;
  auto put = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += row[i];
    }
    out += '\n';
  };
  put(table.header);
  for (const auto& row : table.rows) put(row);
  return out;
}

inline void write_csv(const std::string& path, const CsvTable& table) { write_file(path, format_csv(table)); }

// ---------------------------------------------------------------------------
// Schema and fitted statistics
// ---------------------------------------------------------------------------

/// Column positions of a header: dense "I*", sparse "C*", "label", optional "seg".
struct Schema {
  std::vector<std::string> dense_names;
  std::vector<std::string> sparse_names;
  std::vector<std::size_t> dense_cols;
  std::vector<std::size_t> sparse_cols;
  std::size_t label_col = 0;
  std::optional<std::size_t> segment_col;
  std::size_t width = 0;

  static Schema from_header(const std::vector<std::string>& header) {
    Schema s;
    s.width = header.size();
    bool has_label = false;
    for (std::size_t i = 0; i < header.size(); ++i) {
      const std::string& h = header[i];
      if (h == "label") {
        s.label_col = i;
        has_label = true;
      } else if (h == "seg") {
        s.segment_col = i;
      } else if (!h.empty() && h[0] == 'I') {
        s.dense_names.push_back(h);
        s.dense_cols.push_back(i);
      } else if (!h.empty() && h[0] == 'C') {
        s.sparse_names.push_back(h);
        s.sparse_cols.push_back(i);
      } else {
        throw Error("unrecognized column '" + h + "' (expected I*, C*, label or seg)");
      }
    }
    if (!has_label) throw Error("csv header has no 'label' column");
    return s;
  }
};

/// Frequency-ranked vocabularies for sparse fields plus the dense field list.
/// Index 0 is shared by unseen and over-cap categories.
struct FeatureStats {
  std::vector<std::string> dense_names;
  std::vector<std::string> sparse_names;
  std::vector<std::map<std::string, std::uint32_t>> vocab;
  std::uint32_t cap = 0;
  std::size_t embed_dim = 0;

  std::uint32_t index_of(std::size_t field, const std::string& category) const {
    const auto& v = vocab.at(field);
    auto it = v.find(category);
    return it == v.end() ? 0u : it->second;
  }

  /// Rows of the embedding table for `field` (largest index + 1).
  std::size_t table_rows(std::size_t field) const { return vocab.at(field).size() + 1; }

  std::size_t dense_count() const { return dense_names.size(); }
  std::size_t sparse_count() const { return sparse_names.size(); }

  bool operator==(const FeatureStats&) const = default;
};

/// Counts categories over every row of `tables` (all sharing one header) and
/// ranks them by descending frequency, ties by category string.
inline FeatureStats fit_stats(std::span<const CsvTable* const> tables, std::uint32_t cap,
                              std::size_t embed_dim) {
  if (tables.empty()) throw Error("fit_stats: no training rows");
  std::size_t total_rows = 0;
  for (const CsvTable* t : tables) total_rows += t->rows.size();
  if (total_rows == 0) throw Error("fit_stats: no training rows");
  if (cap == 0) throw Error("fit_stats: cap must be at least 1");

  const Schema schema = Schema::from_header(tables.front()->header);
  FeatureStats stats;
  stats.dense_names = schema.dense_names;
  stats.sparse_names = schema.sparse_names;
  stats.cap = cap;
  stats.embed_dim = embed_dim;
  stats.vocab.resize(schema.sparse_cols.size());

  for (std::size_t f = 0; f < schema.sparse_cols.size(); ++f) {
    std::unordered_map<std::string, std::size_t> counts;
    for (const CsvTable* t : tables) {
      if (t->header != tables.front()->header) throw Error("fit_stats: tables disagree on header");
      for (std::size_t r = 0; r < t->rows.size(); ++r) {
        const auto& row = t->rows[r];
        if (row.size() != schema.width) {
          throw Error("malformed row at line " + std::to_string(t->lines[r]) + ": expected " +
                      std::to_string(schema.width) + " fields, got " + std::to_string(row.size()));
        }
        ++counts[row[schema.sparse_cols[f]]];
      }
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    const std::size_t kept = std::min<std::size_t>(ranked.size(), cap);
    for (std::size_t i = 0; i < kept; ++i) {
      stats.vocab[f].emplace(ranked[i].first, static_cast<std::uint32_t>(i + 1));
    }
  }
  return stats;
}

inline FeatureStats fit_stats(const CsvTable& table, std::uint32_t cap, std::size_t embed_dim) {
  const CsvTable* one[] = {&table};
  return fit_stats(std::span<const CsvTable* const>(one), cap, embed_dim);
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct EncodedExample {
  std::vector<double> dense;
  std::vector<std::uint32_t> sparse;
  int label = 0;
  std::uint32_t segment = 0;

  bool operator==(const EncodedExample&) const = default;
};

/// log(1+v) for v >= 0, -log(1-v) otherwise.
inline double signed_log(double v) { return v >= 0.0 ? std::log1p(v) : -std::log1p(-v); }

namespace detail {

inline double parse_double(const std::string& text, std::size_t line, const std::string& column) {
  if (text.empty()) return 0.0;
  double v = 0.0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw Error("malformed row at line " + std::to_string(line) + ": column '" + column +
                "' value '" + text + "' is not a finite number");
  }
  return v;
}

inline std::uint32_t parse_index(const std::string& text, std::size_t line, const std::string& column) {
  std::uint32_t v = 0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw Error("malformed row at line " + std::to_string(line) + ": column '" + column +
                "' value '" + text + "' is not a non-negative integer");
  }
  return v;
}

}  // namespace detail

/// Binds a header to fitted statistics; the header must carry every fitted field.
class Encoder {
 public:
  Encoder(const std::vector<std::string>& header, const FeatureStats& stats)
      : schema_(Schema::from_header(header)), stats_(&stats) {
    if (schema_.dense_names != stats.dense_names || schema_.sparse_names != stats.sparse_names) {
      throw Error("csv columns do not match the fitted feature schema");
    }
  }

  const Schema& schema() const { return schema_; }

  /// Pure: identical rows give identical examples. Empty dense cells read as 0.
  EncodedExample transform(const std::vector<std::string>& row, std::size_t line) const {
    if (row.size() != schema_.width) {
      throw Error("malformed row at line " + std::to_string(line) + ": expected " +
                  std::to_string(schema_.width) + " fields, got " + std::to_string(row.size()));
    }
    EncodedExample ex;
    ex.dense.reserve(schema_.dense_cols.size());
    for (std::size_t i = 0; i < schema_.dense_cols.size(); ++i) {
      ex.dense.push_back(
          signed_log(detail::parse_double(row[schema_.dense_cols[i]], line, schema_.dense_names[i])));
    }
    ex.sparse.reserve(schema_.sparse_cols.size());
    for (std::size_t f = 0; f < schema_.sparse_cols.size(); ++f) {
      ex.sparse.push_back(stats_->index_of(f, row[schema_.sparse_cols[f]]));
    }
    const std::string& label = row[schema_.label_col];
    if (label != "0" && label != "1") {
      throw Error("malformed row at line " + std::to_string(line) + ": label '" + label +
                  "' is not 0 or 1");
    }
    ex.label = label == "1" ? 1 : 0;
    if (schema_.segment_col) ex.segment = detail::parse_index(row[*schema_.segment_col], line, "seg");
    return ex;
  }

  /// Encodes every row of `table`; its header may order columns differently.
  std::vector<EncodedExample> encode(const CsvTable& table) const {
    const Encoder bound(table.header, *stats_);
    std::vector<EncodedExample> out;
    out.reserve(table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      out.push_back(bound.transform(table.rows[r], table.lines[r]));
    }
    return out;
  }

 private:
  Schema schema_;
  const FeatureStats* stats_;
};

inline EncodedExample transform_row(const std::vector<std::string>& header,
                                const std::vector<std::string>& row, std::size_t line,
                                const FeatureStats& stats) {
  return Encoder(header, stats).transform(row, line);
}

inline std::vector<EncodedExample> encode(const CsvTable& table, const FeatureStats& stats) {
  return Encoder(table.header, stats).encode(table);
}

// ---------------------------------------------------------------------------
// Binary cache: "USSRENC1", u64 count, u32 dense, u32 sparse, then per record
// dense f64s, sparse u32s, u8 label, u32 segment. Little-endian throughout.
// ---------------------------------------------------------------------------

inline constexpr char kEncodedMagic[8] = {'U', 'S', 'S', 'R', 'E', 'N', 'C', '1'};

inline std::string encode_cache(std::span<const EncodedExample> data) {
  ByteWriter w;
  w.raw(kEncodedMagic, 8);
  const std::uint32_t nd = data.empty() ? 0 : static_cast<std::uint32_t>(data[0].dense.size());
  const std::uint32_t ns = data.empty() ? 0 : static_cast<std::uint32_t>(data[0].sparse.size());
  w.u64(data.size());
  w.u32(nd);
  w.u32(ns);
  for (const auto& ex : data) {
    if (ex.dense.size() != nd || ex.sparse.size() != ns) throw Error("encoded records disagree on layout");
    for (double v : ex.dense) w.f64(v);
    for (std::uint32_t v : ex.sparse) w.u32(v);
    w.u8(static_cast<std::uint8_t>(ex.label));
    w.u32(ex.segment);
  }
  return w.take();
}

inline std::vector<EncodedExample> decode_cache(std::string_view bytes) {
  ByteReader r(bytes, "encoded cache");
  r.expect_magic(kEncodedMagic);
  const std::uint64_t n = r.u64();
  const std::uint32_t nd = r.u32();
  const std::uint32_t ns = r.u32();
  const std::size_t record = nd * 8u + ns * 4u + 1u + 4u;
  if (record == 0 || n > r.remaining() / record) throw Error("encoded cache: truncated records");
  std::vector<EncodedExample> out(n);
  for (auto& ex : out) {
    ex.dense.resize(nd);
    ex.sparse.resize(ns);
    for (double& v : ex.dense) v = r.f64();
    for (std::uint32_t& v : ex.sparse) v = r.u32();
    ex.label = r.u8();
    ex.segment = r.u32();
  }
  r.expect_end();
  return out;
}

inline void write_cache(const std::string& path, std::span<const EncodedExample> data) {
  write_file(path, encode_cache(data));
}

inline std::vector<EncodedExample> read_cache(const std::string& path) {
  return decode_cache(read_file(path));
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Index batches over `count` examples; shuffled by `shuffle_seed` when given,
/// final partial batch kept.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                           std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw Error("batch size must be at least 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(order);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t stop = std::min(count, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

/// Column-major view of a set of examples ready for graph construction.
struct Batch {
  Tensor dense;                                  ///< [B, dense] (absent when no dense fields)
  std::vector<std::vector<std::size_t>> sparse;  ///< per field, B indices
  Tensor labels;                                 ///< [B, 1]
  std::vector<std::uint32_t> segments;

  std::size_t size() const { return segments.size(); }
  bool has_dense() const { return !dense.empty(); }
};

inline Batch make_batch(std::span<const EncodedExample> data, std::span<const std::size_t> rows) {
  if (rows.empty()) throw Error("cannot build an empty batch");
  Batch b;
  const std::size_t nd = data[rows[0]].dense.size();
  const std::size_t ns = data[rows[0]].sparse.size();
  if (nd) b.dense = Tensor({rows.size(), nd});
  b.sparse.assign(ns, std::vector<std::size_t>(rows.size()));
  b.labels = Tensor({rows.size(), 1});
  b.segments.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const EncodedExample& ex = data[rows[i]];
    if (ex.dense.size() != nd || ex.sparse.size() != ns) throw Error("examples disagree on layout");
    for (std::size_t j = 0; j < nd; ++j) b.dense.at(i, j) = ex.dense[j];
    for (std::size_t f = 0; f < ns; ++f) b.sparse[f][i] = ex.sparse[f];
    if (ex.label != 0 && ex.label != 1) throw Error("label must be 0 or 1");
    b.labels[i] = ex.label;
    b.segments[i] = ex.segment;
  }
  return b;
}

inline Batch make_batch(std::span<const EncodedExample> data) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(data, all);
}

inline Batch make_batch(const EncodedExample& ex) { return make_batch(std::span(&ex, 1)); }

}  // namespace ussr
