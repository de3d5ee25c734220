#pragma once

// Nucleus (top-p) truncation with renormalization, and natural-log entropy
// over the renormalized distribution.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "trace.hpp"

namespace uncertainty {

inline constexpr double kDefaultNucleusP = 0.95;

// Slack on the cumulative-mass comparison so that, e.g., 9,500 entries of
// 1e-4 count as reaching p = 0.95 despite rounding in the running sum.
inline constexpr double kNucleusSlack = 1e-12;

struct NucleusDistribution {
  std::vector<TopEntry> entries;  // renormalized, non-increasing
  double nucleus_mass = 0.0;      // p', the kept mass before renormalization

  std::size_t nucleus_size() const noexcept { return entries.size(); }
};

// Orders by probability descending, ties by ascending token id.
inline void sort_distribution(std::vector<TopEntry>& dist) {
  std::stable_sort(dist.begin(), dist.end(), [](const TopEntry& a, const TopEntry& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    return a.token_id < b.token_id;
  });
}

inline NucleusDistribution nucleus_truncate(std::span<const TopEntry> dist, double p) {
  if (!(p > 0.0 && p <= 1.0))
    throw Error(ErrorCode::InvalidConfig, "nucleus p must lie in (0, 1], got " + format_double(p));
  std::vector<TopEntry> sorted(dist.begin(), dist.end());
  double stored = 0.0;
  for (const auto& e : sorted) {
    if (!(e.probability > 0.0))
      throw Error(ErrorCode::NotNormalized, "probabilities must be strictly positive");
    stored += e.probability;
  }
  if (stored > 1.0 + kMassTolerance)
    throw Error(ErrorCode::NotNormalized, "stored mass " + format_double(stored) + " exceeds 1");
  sort_distribution(sorted);

  NucleusDistribution out;
  double cumulative = 0.0;
  std::size_t keep = 0;
  while (keep < sorted.size()) {
    cumulative += sorted[keep].probability;
    ++keep;
    if (cumulative + kNucleusSlack >= p) break;
  }
  if (cumulative + kNucleusSlack < p)
    throw Error(ErrorCode::InsufficientMass,
                "stored mass " + format_double(stored) + " below nucleus p " + format_double(p));

  sorted.resize(keep);
  for (auto& e : sorted) e.probability /= cumulative;
  out.entries = std::move(sorted);
  out.nucleus_mass = cumulative;
  return out;
}

// H = -sum P ln P, in nats. Zero entries contribute nothing.
inline double entropy(std::span<const double> probabilities) {
  double total = 0.0;
  for (double q : probabilities) {
    if (!(q >= 0.0)) throw Error(ErrorCode::NotNormalized, "negative probability");
    total += q;
  }
  if (std::abs(total - 1.0) > kMassTolerance)
    throw Error(ErrorCode::NotNormalized, "distribution sums to " + format_double(total));
  double h = 0.0;
  for (double q : probabilities)
    if (q > 0.0) h -= q * std::log(q);
  return std::max(h, 0.0);
}

inline double entropy(const NucleusDistribution& dist) {
  std::vector<double> probs;
  probs.reserve(dist.entries.size());
  for (const auto& e : dist.entries) probs.push_back(e.probability);
  return entropy(probs);
}

// Nucleus entropy of every step; InsufficientMass carries the step index.
inline std::vector<double> prediction_entropies(const TraceDocument& doc,
                                                double p = kDefaultNucleusP) {
  std::vector<double> out;
  out.reserve(doc.steps.size());
  for (std::size_t t = 0; t < doc.steps.size(); ++t) {
    try {
      out.push_back(entropy(nucleus_truncate(doc.steps[t].topk, p)));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InsufficientMass) throw;
      throw Error(ErrorCode::InsufficientMass,
                  doc.doc_id + " step " + std::to_string(t) + ": " + e.what(), t);
    }
  }
  return out;
}

}  // namespace uncertainty
