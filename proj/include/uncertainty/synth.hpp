#pragma once

// Deterministic synthetic traces with planted copy/generate behavior, used
// as a desk-scale corpus for tests and demos.
//
// Copy words continue a source bigram and are emitted with near-one-hot
// predictions and attention peaked on the copied source token. Novel words
// jump to a source word that does not continue the previous one and are
// emitted with flat predictions and diffuse attention. Every step spends a
// fixed share of attention on "sink" tokens at the end of the source, which
// the blocking step is expected to discard.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "attention.hpp"
#include "error.hpp"
#include "trace.hpp"

namespace uncertainty {

struct SynthConfig {
  std::size_t source_length = 96;  // L, sink tokens included
  std::size_t target_steps = 100;  // the summary ends at the first word boundary >= this
  double copy_fraction = 0.5;
  double copy_entropy = 0.05;       // planted entropy of copy and continuation steps
  double novel_entropy = 2.5;       // planted first-piece entropy of novel words
  double position_tilt = 0.0;       // copy probability rises by this across a sentence
  double novel_position_slope = 0.0;  // novel entropy falls by this across a sentence
  double multi_piece_rate = 0.3;
  double sink_fraction = kDefaultBlockFraction;
  std::size_t min_sentence_words = 8;
  std::size_t max_sentence_words = 20;
  std::int64_t vocab_size = 50000;
  bool with_parses = true;
};

// Settings for the bundled 100-document corpus.
inline SynthConfig bundled_corpus_config() {
  SynthConfig c;
  c.position_tilt = 0.8;
  c.novel_position_slope = 1.0;
  return c;
}

inline constexpr std::uint64_t kBundledCorpusSeed = 20201116;
inline constexpr std::size_t kBundledCorpusDocs = 100;

namespace detail {

// Portable draws on top of mt19937_64; the standard distributions are not
// specified bit-for-bit across library implementations.
class SynthRng {
 public:
  explicit SynthRng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  std::size_t between(std::size_t lo, std::size_t hi) { return lo + index(hi - lo + 1); }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline constexpr std::size_t kPlantedSupport = 64;
inline constexpr double kAttentionScale = 192.0;  // heads x layers of summed rows

// Entropy of a geometric distribution over `support` outcomes with ratio r.
inline double geometric_entropy(double r, std::size_t support) {
  double z = 0.0;
  std::vector<double> w(support);
  double v = 1.0;
  for (std::size_t i = 0; i < support; ++i, v *= r) z += (w[i] = v);
  double h = 0.0;
  for (double x : w) {
    const double q = x / z;
    if (q > 0.0) h -= q * std::log(q);
  }
  return h;
}

// Geometric ratio whose distribution has the requested entropy.
inline double solve_ratio(double target, std::size_t support) {
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (geometric_entropy(mid, support) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

class DocumentBuilder {
 public:
  DocumentBuilder(const SynthConfig& config, std::uint64_t seed)
      : config_(config), rng_(seed) {}

  TraceDocument build(std::string doc_id) {
    doc_.doc_id = std::move(doc_id);
    build_source();
    build_summary();
    return std::move(doc_);
  }

 private:
  struct PlantedWord {
    std::string text;
    bool copy = false;
  };

  struct SourceWord {
    std::string text;
    std::vector<std::string> pieces;
    std::size_t first_token = 0;
  };

  static constexpr const char* kSyllables[] = {
      "ka", "lo", "mi", "ser", "tan", "vu", "re", "do", "pi", "zel", "nor", "ba",
      "qui", "fa", "gem", "hu", "jo", "lix", "mar", "ne", "ost", "pra", "ru", "sil",
      "tor", "ul", "ven", "wi", "yan", "zo"};

  std::string syllables(std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += kSyllables[rng_.index(std::size(kSyllables))];
    return s;
  }

  TokenId piece_id(const std::string& piece) {
    auto [it, inserted] = piece_ids_.try_emplace(piece, 0);
    if (inserted) it->second = 1000 + static_cast<TokenId>(piece_ids_.size());
    return it->second;
  }

  SourceWord fresh_word(std::size_t piece_count) {
    for (;;) {
      SourceWord w;
      for (std::size_t p = 0; p < piece_count; ++p) w.pieces.push_back(syllables(rng_.between(1, 2)));
      for (const auto& p : w.pieces) w.text += p;
      if (used_words_.insert(w.text).second) return w;
    }
  }

  void push_source_token(const std::string& piece, bool begins) {
    const std::string stored = begins ? " " + piece : piece;
    doc_.source_tokens.push_back(
        {doc_.source_tokens.size(), piece_id(stored), stored, begins});
  }

  void build_source() {
    const std::size_t length = config_.source_length;
    sinks_ = block_count(config_.sink_fraction, length);
    const std::size_t content = length - sinks_;

    // Distinct words, closed by a repeat of the first word so that every
    // content word has a successor to copy.
    words_.push_back(fresh_word(1));
    std::size_t used = 1;
    while (used + 1 < content) {
      const std::size_t left = content - 1 - used;
      const std::size_t pieces = (left >= 2 && rng_.bernoulli(config_.multi_piece_rate)) ? 2 : 1;
      words_.push_back(fresh_word(pieces));
      used += pieces;
    }
    words_.push_back(words_.front());
    for (auto& w : words_) {
      w.first_token = doc_.source_tokens.size();
      for (std::size_t p = 0; p < w.pieces.size(); ++p) push_source_token(w.pieces[p], p == 0);
    }
    for (std::size_t s = 0; s < sinks_; ++s) push_source_token(s + 1 == sinks_ ? "</s>" : ".", true);

    std::vector<std::string> texts;
    for (const auto& t : source_words(doc_)) texts.push_back(t);
    for (std::size_t j = 1; j < texts.size(); ++j) source_bigrams_.insert(texts[j - 1] + ' ' + texts[j]);
  }

  std::vector<TopEntry> planted_topk(double target_entropy, TokenId emitted) {
    const double max_h = std::log(static_cast<double>(kPlantedSupport)) - 0.05;
    const double target = std::clamp(target_entropy, 1e-4, max_h);
    const double ratio = solve_ratio(target, kPlantedSupport);
    const double stored = rng_.uniform(0.992, 0.999);
    std::vector<double> w;
    double z = 0.0;
    for (std::size_t i = 0; i < kPlantedSupport; ++i) {
      const double v = std::pow(ratio, static_cast<double>(i));
      if (v < 1e-9) break;
      w.push_back(v);
      z += v;
    }
    std::vector<TopEntry> topk;
    std::set<TokenId> ids{emitted};
    for (std::size_t i = 0; i < w.size(); ++i) {
      TokenId id = emitted;
      if (i > 0) {
        do {
          id = static_cast<TokenId>(rng_.index(static_cast<std::size_t>(config_.vocab_size)));
        } while (!ids.insert(id).second);
      }
      topk.push_back({id, stored * w[i] / z});
    }
    return topk;
  }

  std::vector<double> attention_row(std::optional<std::size_t> peak) {
    const std::size_t length = doc_.source_length();
    const std::size_t content = length - sinks_;
    std::vector<double> row(length, 0.0);
    double sink_each = 1.2 * default_threshold(length);
    if (sink_each * static_cast<double>(sinks_) > 0.8) sink_each = 0.8 / static_cast<double>(sinks_);
    for (std::size_t l = content; l < length; ++l) row[l] = sink_each;
    const double content_mass = 1.0 - sink_each * static_cast<double>(sinks_);

    std::vector<double> spread(content);
    double z = 0.0;
    for (std::size_t l = 0; l < content; ++l) {
      if (peak && l == *peak) continue;
      spread[l] = peak ? rng_.uniform() : rng_.uniform(0.2, 1.0);
      z += spread[l];
    }
    const double diffuse = peak ? 0.003 * content_mass : content_mass;
    for (std::size_t l = 0; l < content; ++l) row[l] = z > 0.0 ? diffuse * spread[l] / z : 0.0;
    if (peak) row[*peak] = content_mass - (z > 0.0 ? diffuse : 0.0);
    for (auto& v : row) v *= kAttentionScale;
    return row;
  }

  void emit_word(std::size_t word, bool copy_like_first, double first_entropy) {
    const auto& w = words_[word];
    for (std::size_t p = 0; p < w.pieces.size(); ++p) {
      const std::size_t token = w.first_token + p;
      const auto& src = doc_.source_tokens[token];
      StepRecord step;
      step.step_index = doc_.steps.size();
      step.output_token_id = src.token_id;
      step.output_piece = src.piece;
      step.begins_word = p == 0;
      const bool peaked = p > 0 || copy_like_first;
      const double h = p == 0 ? first_entropy
                              : config_.copy_entropy * rng_.uniform(0.5, 1.5);
      step.topk = planted_topk(h, src.token_id);
      step.tail_mass = 1.0 - step.stored_mass();
      step.attention_row = attention_row(peaked ? std::optional<std::size_t>(token) : std::nullopt);
      doc_.steps.push_back(std::move(step));
    }
  }

  std::size_t novel_successor(const std::string& previous) {
    // words_.back() repeats words_.front(); choose among distinct words only.
    const std::size_t candidates = words_.size() - 1;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const std::size_t k = rng_.index(candidates);
      if (previous.empty() || !source_bigrams_.contains(previous + ' ' + words_[k].text)) return k;
    }
    throw Error(ErrorCode::InvalidConfig, "source too small to plant a novel bigram");
  }

  void build_summary() {
    std::vector<Span> spans;
    std::vector<std::vector<PlantedWord>> sentences;
    std::size_t sentence_start = 0;
    std::size_t pointer = 0;
    std::string previous;
    bool first = true;

    while (doc_.steps.size() < config_.target_steps) {
      const std::size_t n = rng_.between(config_.min_sentence_words, config_.max_sentence_words);
      sentences.emplace_back();
      for (std::size_t i = 0; i < n && doc_.steps.size() < config_.target_steps; ++i) {
        const double r = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        const double p_copy =
            std::clamp(config_.copy_fraction + config_.position_tilt * (r - 0.5), 0.0, 1.0);
        const bool copy = !first && rng_.bernoulli(p_copy);
        double h;
        if (copy) {
          if (pointer + 1 >= words_.size()) pointer = 0;
          ++pointer;
          h = config_.copy_entropy * rng_.uniform(0.5, 1.5);
        } else {
          pointer = novel_successor(previous);
          h = config_.novel_entropy + config_.novel_position_slope * (0.5 - r) +
              rng_.uniform(-0.25, 0.25);
        }
        emit_word(pointer, copy, h);
        previous = words_[pointer].text;
        sentences.back().push_back({previous, copy});
        first = false;
      }
      spans.push_back({sentence_start, doc_.steps.size()});
      sentence_start = doc_.steps.size();
    }
    doc_.sentence_spans = std::move(spans);
    if (config_.with_parses) {
      std::vector<std::string> parses;
      for (const auto& s : sentences) parses.push_back(random_tree(s));
      doc_.parses = std::move(parses);
    }
  }

  // Copy runs form flat constituents, so word boundaries inside a run sit
  // at syntactic distance 0 and novel words open new constituents.
  std::string chunk_phrase(const std::vector<PlantedWord>& words, Span chunk) {
    static constexpr const char* kTags[] = {"NN", "NNS", "NNP", "VBD", "DT", "JJ", "IN", "CD"};
    static constexpr const char* kChunks[] = {"NP", "VP", "ADJP", "QP"};
    auto preterminal = [&](std::size_t i) {
      return "(" + std::string(kTags[rng_.index(std::size(kTags))]) + " " + words[i].text + ")";
    };
    if (chunk.size() == 1) return preterminal(chunk.begin);
    std::string out = "(" + std::string(kChunks[rng_.index(std::size(kChunks))]);
    for (std::size_t i = chunk.begin; i < chunk.end; ++i) out += " " + preterminal(i);
    return out + ")";
  }

  std::string random_constituent(const std::vector<PlantedWord>& words,
                                 const std::vector<Span>& chunks, std::size_t begin,
                                 std::size_t end, std::size_t depth) {
    static constexpr const char* kPhrases[] = {"NP", "VP", "PP", "SBAR", "S"};
    if (end - begin == 1 && depth > 0) return chunk_phrase(words, chunks[begin]);
    std::string out = "(" + std::string(depth == 0 ? "S" : kPhrases[rng_.index(std::size(kPhrases))]);
    if (end - begin == 1 || depth >= 5) {
      for (std::size_t i = begin; i < end; ++i) out += " " + chunk_phrase(words, chunks[i]);
      return out + ")";
    }
    const std::size_t parts = std::min<std::size_t>(end - begin, rng_.between(2, 3));
    std::vector<std::size_t> cuts{begin};
    std::set<std::size_t> inner;
    while (inner.size() + 1 < parts) inner.insert(begin + 1 + rng_.index(end - begin - 1));
    cuts.insert(cuts.end(), inner.begin(), inner.end());
    cuts.push_back(end);
    for (std::size_t c = 0; c + 1 < cuts.size(); ++c)
      out += " " + random_constituent(words, chunks, cuts[c], cuts[c + 1], depth + 1);
    return out + ")";
  }

  std::string random_tree(const std::vector<PlantedWord>& words) {
    std::vector<Span> chunks;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (chunks.empty() || !words[i].copy) chunks.push_back({i, i});
      chunks.back().end = i + 1;
    }
    return random_constituent(words, chunks, 0, chunks.size(), 0);
  }

  SynthConfig config_;
  SynthRng rng_;
  TraceDocument doc_;
  std::vector<SourceWord> words_;
  std::size_t sinks_ = 0;
  std::map<std::string, TokenId> piece_ids_;
  std::unordered_set<std::string> used_words_;
  std::unordered_set<std::string> source_bigrams_;
};

}  // namespace detail

inline void check_synth_config(const SynthConfig& c) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(c.copy_fraction) || !in_unit(c.multi_piece_rate) || !in_unit(c.position_tilt))
    throw Error(ErrorCode::InvalidConfig, "fractions must lie in [0, 1]");
  if (!(c.sink_fraction > 0.0 && c.sink_fraction < 0.5))
    throw Error(ErrorCode::InvalidConfig, "sink fraction must lie in (0, 0.5)");
  if (c.source_length < 20) throw Error(ErrorCode::InvalidConfig, "source_length must be >= 20");
  if (c.target_steps == 0) throw Error(ErrorCode::InvalidConfig, "target_steps must be >= 1");
  if (c.min_sentence_words == 0 || c.max_sentence_words < c.min_sentence_words)
    throw Error(ErrorCode::InvalidConfig, "invalid sentence length range");
  if (!(c.copy_entropy >= 0.0) || !(c.novel_entropy >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "planted entropies must be non-negative");
  if (c.vocab_size < 2 * static_cast<std::int64_t>(detail::kPlantedSupport))
    throw Error(ErrorCode::InvalidConfig, "vocab_size too small");
}

inline TraceDocument generate_synthetic(const SynthConfig& config, std::uint64_t seed,
                                        std::string doc_id = {}) {
  check_synth_config(config);
  if (doc_id.empty()) doc_id = "synth-" + std::to_string(seed);
  return detail::DocumentBuilder(config, seed).build(std::move(doc_id));
}

// Document i of the corpus is generated from an independent seed stream.
inline std::vector<TraceDocument> synthetic_corpus(const SynthConfig& config, std::size_t docs,
                                                   std::uint64_t seed) {
  std::vector<TraceDocument> out;
  out.reserve(docs);
  for (std::size_t i = 0; i < docs; ++i)
    out.push_back(generate_synthetic(config, detail::mix_seed(seed, i),
                                     "synth-" + std::to_string(seed) + "-" + std::to_string(i)));
  return out;
}

}  // namespace uncertainty
