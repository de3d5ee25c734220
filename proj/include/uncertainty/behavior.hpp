#pragma once

// Copy-vs-generate behavior: existing/novel bigram labels against the source
// document, entropy histograms per label, and entropy by relative position
// inside a sentence.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "stats.hpp"
#include "trace.hpp"

namespace uncertainty {

enum class BigramClass { Existing, Novel, Undefined };

inline std::string_view to_string(BigramClass c) {
  switch (c) {
    case BigramClass::Existing: return "existing";
    case BigramClass::Novel: return "novel";
    case BigramClass::Undefined: return "undefined";
  }
  return "undefined";
}

struct BigramLabel {
  std::size_t word_index = 0;
  BigramClass label = BigramClass::Undefined;
  double entropy = 0.0;  // entropy of the step emitting the word's first piece
};

namespace detail {

inline std::string fold_case(std::string_view s, bool fold) {
  std::string out(s);
  if (fold)
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Length-prefixed so no pair of words can collide with another pair.
inline std::string bigram_key(std::string_view a, std::string_view b) {
  std::string key = std::to_string(a.size());
  key += ':';
  key += a;
  key += b;
  return key;
}

}  // namespace detail

// Word i is EXISTING iff (word[i-1], word[i]) occurs as consecutive words in
// the source. The first summary word has no predecessor and is UNDEFINED.
// When step_entropies is given, each label carries the entropy of its word's
// first generation step.
inline std::vector<BigramLabel> classify_bigrams(const WordSequence& words,
                                                 std::span<const std::string> source,
                                                 bool case_fold = false,
                                                 std::span<const double> step_entropies = {}) {
  std::unordered_set<std::string> source_bigrams;
  for (std::size_t j = 1; j < source.size(); ++j)
    source_bigrams.insert(detail::bigram_key(detail::fold_case(source[j - 1], case_fold),
                                             detail::fold_case(source[j], case_fold)));

  std::vector<BigramLabel> labels;
  labels.reserve(words.words.size());
  std::string previous;
  for (std::size_t i = 0; i < words.words.size(); ++i) {
    const auto& w = words.words[i];
    std::string current = detail::fold_case(w.text, case_fold);
    BigramLabel label;
    label.word_index = i;
    if (i > 0)
      label.label = source_bigrams.contains(detail::bigram_key(previous, current))
                        ? BigramClass::Existing
                        : BigramClass::Novel;
    if (!step_entropies.empty()) label.entropy = step_entropies[w.first_step];
    labels.push_back(label);
    previous = std::move(current);
  }
  return labels;
}

inline constexpr double kDefaultBinWidth = 0.25;
inline constexpr double kDefaultTruncateAt = 5.0;

struct EntropyHistogram {
  double bin_width = kDefaultBinWidth;
  double truncate_at = kDefaultTruncateAt;
  std::vector<std::size_t> existing_counts;
  std::vector<std::size_t> novel_counts;
  std::optional<double> existing_median;
  std::optional<double> novel_median;

  std::size_t bin_count() const noexcept { return existing_counts.size(); }
  double bin_lo(std::size_t k) const { return static_cast<double>(k) * bin_width; }
  double bin_hi(std::size_t k) const {
    return k + 1 == bin_count() ? truncate_at : static_cast<double>(k + 1) * bin_width;
  }
};

inline std::size_t histogram_bin_count(double bin_width, double truncate_at) {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(truncate_at / bin_width - 1e-9)));
}

// Values at or above truncate_at fall into the final bin.
inline std::size_t histogram_bin(double value, double bin_width, std::size_t bins) {
  if (!(value > 0.0)) return 0;
  const auto k = static_cast<std::size_t>(std::floor(value / bin_width));
  return std::min(k, bins - 1);
}

// Medians are exact and use the untruncated values.
inline EntropyHistogram histogram_from_values(std::span<const double> existing,
                                              std::span<const double> novel, double bin_width,
                                              double truncate_at) {
  EntropyHistogram h;
  h.bin_width = bin_width;
  h.truncate_at = truncate_at;
  const std::size_t bins = histogram_bin_count(bin_width, truncate_at);
  h.existing_counts.assign(bins, 0);
  h.novel_counts.assign(bins, 0);
  for (double v : existing) ++h.existing_counts[histogram_bin(v, bin_width, bins)];
  for (double v : novel) ++h.novel_counts[histogram_bin(v, bin_width, bins)];
  h.existing_median = stats::median(existing);
  h.novel_median = stats::median(novel);
  return h;
}

inline EntropyHistogram copy_entropy_histogram(std::span<const BigramLabel> labels,
                                               double bin_width = kDefaultBinWidth,
                                               double truncate_at = kDefaultTruncateAt) {
  std::vector<double> existing, novel;
  for (const auto& l : labels) {
    if (l.label == BigramClass::Existing) existing.push_back(l.entropy);
    if (l.label == BigramClass::Novel) novel.push_back(l.entropy);
  }
  return histogram_from_values(existing, novel, bin_width, truncate_at);
}

// Decile index 0..9 of each word within its sentence: floor(10 i / n).
inline std::vector<int> relative_positions(const WordSequence& words) {
  std::vector<int> buckets(words.words.size(), 0);
  for (const auto& s : words.sentence_spans) {
    const std::size_t n = s.size();
    for (std::size_t i = 0; i < n; ++i)
      buckets[s.begin + i] = static_cast<int>((10 * i) / n);
  }
  return buckets;
}

inline std::string decile_label(int bucket) {
  return "0." + std::to_string(bucket);
}

struct PositionBucket {
  std::size_t count = 0;
  std::optional<double> mean;  // nullopt marks an empty bucket
  std::optional<double> median;
};

struct PositionProfile {
  std::array<PositionBucket, 10> buckets;
};

inline PositionProfile profile_from_values(const std::array<std::vector<double>, 10>& values) {
  PositionProfile profile;
  for (std::size_t b = 0; b < 10; ++b) {
    profile.buckets[b].count = values[b].size();
    profile.buckets[b].mean = stats::mean(values[b]);
    profile.buckets[b].median = stats::median(values[b]);
  }
  return profile;
}

inline PositionProfile position_entropy_profile(std::span<const int> buckets,
                                                std::span<const double> entropies) {
  std::array<std::vector<double>, 10> values;
  for (std::size_t i = 0; i < buckets.size() && i < entropies.size(); ++i)
    values[static_cast<std::size_t>(buckets[i])].push_back(entropies[i]);
  return profile_from_values(values);
}

// Entropy of every word's first generation step.
inline std::vector<double> word_entropies(const WordSequence& words,
                                          std::span<const double> step_entropies) {
  std::vector<double> out;
  out.reserve(words.words.size());
  for (const auto& w : words.words) out.push_back(step_entropies[w.first_step]);
  return out;
}

}  // namespace uncertainty
