#pragma once

// Aggregate cross-attention analysis. Rows of S are decoding steps, columns
// are source positions; entries are already summed over heads and layers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "entropy.hpp"
#include "error.hpp"
#include "stats.hpp"
#include "trace.hpp"

namespace uncertainty {

inline constexpr double kDefaultBlockFraction = 0.05;
inline constexpr double kDefaultBucketWidth = 0.25;
inline constexpr double kMinRemainingMass = 1e-9;

class AggregateAttention {
 public:
  AggregateAttention() = default;
  AggregateAttention(std::size_t rows, std::size_t cols, std::vector<double> data,
                     bool normalized = false)
      : rows_(rows), cols_(cols), data_(std::move(data)), normalized_(normalized) {
    if (data_.size() != rows_ * cols_)
      throw Error(ErrorCode::SchemaViolation, "attention matrix data does not match T x L");
  }

  static AggregateAttention from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t cols = rows.empty() ? 0 : rows.front().size();
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
      if (r.size() != cols) throw Error(ErrorCode::SchemaViolation, "ragged attention rows");
      data.insert(data.end(), r.begin(), r.end());
    }
    return AggregateAttention(rows.size(), cols, std::move(data));
  }

  static AggregateAttention from_document(const TraceDocument& doc) {
    std::vector<double> data;
    data.reserve(doc.steps.size() * doc.source_length());
    for (const auto& s : doc.steps) {
      if (s.attention_row.size() != doc.source_length())
        throw Error(ErrorCode::SchemaViolation, "attention row length differs from L",
                    s.step_index);
      data.insert(data.end(), s.attention_row.begin(), s.attention_row.end());
    }
    return AggregateAttention(doc.steps.size(), doc.source_length(), std::move(data));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool normalized() const noexcept { return normalized_; }

  std::span<const double> row(std::size_t t) const {
    return {data_.data() + t * cols_, cols_};
  }
  double at(std::size_t t, std::size_t l) const { return data_[t * cols_ + l]; }

  friend bool operator==(const AggregateAttention&, const AggregateAttention&) = default;

 private:
  friend AggregateAttention normalize_rows(const AggregateAttention& s);
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
  bool normalized_ = false;
};

// Divides every row by its sum. Idempotent on already-normalized input.
inline AggregateAttention normalize_rows(const AggregateAttention& s) {
  if (s.normalized_) return s;
  AggregateAttention out = s;
  for (std::size_t t = 0; t < s.rows_; ++t) {
    double total = 0.0;
    for (std::size_t l = 0; l < s.cols_; ++l) {
      const double v = s.at(t, l);
      if (!(v >= 0.0)) throw Error(ErrorCode::SchemaViolation, "negative attention entry", t);
      total += v;
    }
    if (!(total > 0.0))
      throw Error(ErrorCode::ZeroRow, "attention row " + std::to_string(t) + " sums to zero", t);
    for (std::size_t l = 0; l < s.cols_; ++l) out.data_[t * s.cols_ + l] /= total;
  }
  out.normalized_ = true;
  return out;
}

struct BlockSet {
  std::vector<std::size_t> blocked;    // ascending positions
  std::vector<std::size_t> frequency;  // f_l: steps with s_tl >= q
  std::vector<double> column_mass;
  std::vector<bool> mask;              // mask[l] == true when l is blocked
  double q = 0.0;
  double fraction = 0.0;

  bool is_blocked(std::size_t l) const { return l < mask.size() && mask[l]; }
  std::size_t unblocked_count() const noexcept { return mask.size() - blocked.size(); }

  friend bool operator==(const BlockSet&, const BlockSet&) = default;
};

inline double default_threshold(std::size_t source_length) {
  return source_length == 0 ? 1.0 : 10.0 / static_cast<double>(source_length);
}

// ceil(fraction * L), with slack against products like 0.05 * 60 landing a
// hair above an integer.
inline std::size_t block_count(double fraction, std::size_t source_length) {
  const double raw = fraction * static_cast<double>(source_length);
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(k, source_length);
}

// Blocks the ceil(fraction * L) columns attended above q on the most steps.
// Ties: higher total column mass first, then lower position.
inline BlockSet compute_block_set(const AggregateAttention& s, double q,
                                  double fraction = kDefaultBlockFraction) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw Error(ErrorCode::InvalidConfig, "block fraction must lie in (0, 1)");
  if (!(q > 0.0)) throw Error(ErrorCode::InvalidConfig, "threshold q must be positive");

  const std::size_t cols = s.cols();
  BlockSet out;
  out.q = q;
  out.fraction = fraction;
  out.frequency.assign(cols, 0);
  out.column_mass.assign(cols, 0.0);
  for (std::size_t t = 0; t < s.rows(); ++t) {
    const auto r = s.row(t);
    for (std::size_t l = 0; l < cols; ++l) {
      if (r[l] >= q) ++out.frequency[l];
      out.column_mass[l] += r[l];
    }
  }

  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (out.frequency[a] != out.frequency[b]) return out.frequency[a] > out.frequency[b];
    if (out.column_mass[a] != out.column_mass[b]) return out.column_mass[a] > out.column_mass[b];
    return a < b;
  });
  const std::size_t k = block_count(fraction, cols);
  out.blocked.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.blocked.begin(), out.blocked.end());
  out.mask.assign(cols, false);
  for (auto l : out.blocked) out.mask[l] = true;
  return out;
}

// Row with blocked columns zeroed and the remainder renormalized to 1.
inline std::vector<double> blocked_distribution(std::span<const double> row,
                                                const BlockSet& blocks) {
  std::vector<double> out(row.begin(), row.end());
  double remaining = 0.0;
  for (std::size_t l = 0; l < out.size(); ++l) {
    if (blocks.is_blocked(l))
      out[l] = 0.0;
    else
      remaining += out[l];
  }
  if (remaining < kMinRemainingMass)
    throw Error(ErrorCode::AllBlockedMass,
                "unblocked attention mass " + format_double(remaining) + " below 1e-9");
  for (auto& v : out) v /= remaining;
  return out;
}

inline double attention_entropy(std::span<const double> row, const BlockSet& blocks) {
  return entropy(blocked_distribution(row, blocks));
}

// Entropy of the row with no columns discarded.
inline double raw_attention_entropy(std::span<const double> row) {
  const BlockSet none;
  return entropy(blocked_distribution(row, none));
}

// Attention placed on every unblocked occurrence of `target` in the source.
inline double vocabulary_projection(std::span<const double> row,
                                    std::span<const TokenId> source_ids, const BlockSet& blocks,
                                    TokenId target) {
  const auto dist = blocked_distribution(row, blocks);
  double total = 0.0;
  for (std::size_t l = 0; l < dist.size(); ++l)
    if (source_ids[l] == target) total += dist[l];
  return total;
}

// ---------------------------------------------------------------------------
// Bucketed aggregation keyed by prediction entropy

struct BucketMean {
  std::int64_t index = 0;
  double lo = 0.0;
  double hi = 0.0;
  double mean = 0.0;
  std::size_t count = 0;
};

class BucketAccumulator {
 public:
  explicit BucketAccumulator(double width = kDefaultBucketWidth) : width_(width) {}

  void add(double key, double value) { values_[bucket_index(key)].push_back(value); }
  void add_to_bucket(std::int64_t index, double value) { values_[index].push_back(value); }

  void merge(const BucketAccumulator& other) {
    for (const auto& [k, v] : other.values_) {
      auto& dst = values_[k];
      dst.insert(dst.end(), v.begin(), v.end());
    }
  }

  std::int64_t bucket_index(double key) const {
    return static_cast<std::int64_t>(std::floor(key / width_));
  }
  double width() const noexcept { return width_; }
  const std::map<std::int64_t, std::vector<double>>& values() const noexcept { return values_; }

  // Occupied buckets only, ascending.
  std::vector<BucketMean> finalize() const {
    std::vector<BucketMean> out;
    for (const auto& [k, v] : values_) {
      if (v.empty()) continue;
      out.push_back({k, static_cast<double>(k) * width_, static_cast<double>(k + 1) * width_,
                     *stats::mean(v), v.size()});
    }
    return out;
  }

 private:
  double width_;
  std::map<std::int64_t, std::vector<double>> values_;
};

inline constexpr std::array<int, 4> kProjectionOffsets = {-2, -1, 0, 1};

struct AttentionOptions {
  double nucleus_p = kDefaultNucleusP;
  std::optional<double> q;  // default 10 / L per document
  double block_fraction = kDefaultBlockFraction;
  double bucket_width = kDefaultBucketWidth;
  bool raw_attention_entropy = false;
};

struct ProjectionCurve {
  int offset = 0;
  std::vector<BucketMean> buckets;
};

// Per-document attention statistics, mergeable across documents.
class AttentionAccumulator {
 public:
  explicit AttentionAccumulator(double bucket_width = kDefaultBucketWidth)
      : entropy_(bucket_width),
        projection_{BucketAccumulator(bucket_width), BucketAccumulator(bucket_width),
                    BucketAccumulator(bucket_width), BucketAccumulator(bucket_width)} {}

  // Adds one document. Steps whose unblocked mass vanishes are skipped and
  // counted; a zero attention row propagates ZeroRow.
  void add(const TraceDocument& doc, std::span<const double> prediction_entropy,
           const AttentionOptions& options) {
    if (doc.steps.empty() || doc.source_length() == 0) return;
    const auto s = normalize_rows(AggregateAttention::from_document(doc));
    const double q = options.q.value_or(default_threshold(doc.source_length()));
    const auto blocks = compute_block_set(s, q, options.block_fraction);
    std::vector<TokenId> ids;
    ids.reserve(doc.source_length());
    for (const auto& tok : doc.source_tokens) ids.push_back(tok.token_id);

    const BlockSet none;
    for (std::size_t t = 0; t < s.rows(); ++t) {
      std::vector<double> dist;
      try {
        dist = blocked_distribution(s.row(t), blocks);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::AllBlockedMass) throw;
        ++skipped_steps_;
        continue;
      }
      const double h_attn = options.raw_attention_entropy ? raw_attention_entropy(s.row(t))
                                                          : entropy(dist);
      entropy_.add(prediction_entropy[t], h_attn);
      for (std::size_t o = 0; o < kProjectionOffsets.size(); ++o) {
        const auto target = static_cast<std::ptrdiff_t>(t) + kProjectionOffsets[o];
        if (target < 0 || target >= static_cast<std::ptrdiff_t>(doc.steps.size())) continue;
        const TokenId id = doc.steps[static_cast<std::size_t>(target)].output_token_id;
        double total = 0.0;
        for (std::size_t l = 0; l < dist.size(); ++l)
          if (ids[l] == id) total += dist[l];
        projection_[o].add(prediction_entropy[t], total);
      }
    }
  }

  void merge(const AttentionAccumulator& other) {
    entropy_.merge(other.entropy_);
    for (std::size_t o = 0; o < projection_.size(); ++o) projection_[o].merge(other.projection_[o]);
    skipped_steps_ += other.skipped_steps_;
  }

  BucketAccumulator& entropy_buckets() noexcept { return entropy_; }
  const BucketAccumulator& entropy_buckets() const noexcept { return entropy_; }
  BucketAccumulator& projection_buckets(std::size_t offset_index) {
    return projection_.at(offset_index);
  }
  const BucketAccumulator& projection_buckets(std::size_t offset_index) const {
    return projection_.at(offset_index);
  }
  std::size_t skipped_steps() const noexcept { return skipped_steps_; }
  void add_skipped_steps(std::size_t n) noexcept { skipped_steps_ += n; }

  std::vector<BucketMean> attention_entropy_curve() const { return entropy_.finalize(); }

  std::vector<ProjectionCurve> projection_curves() const {
    std::vector<ProjectionCurve> out;
    for (std::size_t o = 0; o < projection_.size(); ++o)
      out.push_back({kProjectionOffsets[o], projection_[o].finalize()});
    return out;
  }

 private:
  BucketAccumulator entropy_;
  std::array<BucketAccumulator, 4> projection_;
  std::size_t skipped_steps_ = 0;
};

// Mean attention entropy per prediction-entropy bucket over a set of documents.
inline std::vector<BucketMean> attention_vs_prediction(std::span<const TraceDocument> docs,
                                                       const AttentionOptions& options = {}) {
  AttentionAccumulator acc(options.bucket_width);
  for (const auto& doc : docs) acc.add(doc, prediction_entropies(doc, options.nucleus_p), options);
  return acc.attention_entropy_curve();
}

inline std::vector<ProjectionCurve> vocabulary_projection_curves(
    std::span<const TraceDocument> docs, const AttentionOptions& options = {}) {
  AttentionAccumulator acc(options.bucket_width);
  for (const auto& doc : docs) acc.add(doc, prediction_entropies(doc, options.nucleus_p), options);
  return acc.projection_curves();
}

}  // namespace uncertainty
