#pragma once

// Trace data model: one source document plus the full record of how a
// seq2seq decoder generated its summary.

#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "stats.hpp"

namespace uncertainty {

inline constexpr int kTraceFormatVersion = 1;
inline constexpr double kMassTolerance = 1e-6;
inline constexpr double kMinStoredMass = 0.99;

using TokenId = std::int64_t;

struct SourceToken {
  std::size_t position = 0;
  TokenId token_id = 0;
  std::string piece;
  bool begins_word = true;
  friend bool operator==(const SourceToken&, const SourceToken&) = default;
};

struct TopEntry {
  TokenId token_id = 0;
  double probability = 0.0;
  friend bool operator==(const TopEntry&, const TopEntry&) = default;
};

struct StepRecord {
  std::size_t step_index = 0;
  TokenId output_token_id = 0;
  std::string output_piece;
  bool begins_word = true;
  std::vector<TopEntry> topk;  // descending probability
  double tail_mass = 0.0;
  std::vector<double> attention_row;  // summed over heads and layers, length L

  double stored_mass() const {
    double total = 0.0;
    for (const auto& e : topk) total += e.probability;
    return total;
  }
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct TraceDocument {
  std::string doc_id;
  std::vector<SourceToken> source_tokens;
  std::vector<StepRecord> steps;
  std::optional<std::vector<Span>> sentence_spans;  // over step indices
  std::optional<std::vector<std::string>> parses;   // one bracketed tree per sentence

  std::size_t source_length() const noexcept { return source_tokens.size(); }
  friend bool operator==(const TraceDocument&, const TraceDocument&) = default;
};

struct Violation {
  std::string locator;
  std::string rule;
  std::string message;
};

struct ValidationReport {
  bool ok = true;
  std::vector<Violation> violations;

  bool has_rule(std::string_view rule) const {
    for (const auto& v : violations)
      if (v.rule == rule) return true;
    return false;
  }
};

struct Word {
  std::string text;
  std::size_t first_step = 0;
  Span step_span;
  friend bool operator==(const Word&, const Word&) = default;
};

struct WordSequence {
  std::vector<Word> words;
  std::vector<Span> sentence_spans;  // over word indices
};

// ---------------------------------------------------------------------------
// Validation

namespace detail {

// Rules a record must satisfy to be representable at all; parse_trace_line
// rejects these with SchemaViolation. The remaining rules are data checks.
inline bool is_structural_rule(std::string_view rule) {
  return rule == "attention_arity" || rule == "topk_order" || rule == "topk_range" ||
         rule == "topk_distinct" || rule == "positions" || rule == "step_index" ||
         rule == "tail_range";
}

inline std::string step_locator(const TraceDocument& doc, std::size_t t) {
  return doc.doc_id + "/steps[" + std::to_string(t) + "]";
}

}  // namespace detail

inline ValidationReport validate_document(const TraceDocument& doc) {
  ValidationReport report;
  auto add = [&report](std::string locator, std::string rule, std::string message) {
    report.violations.push_back({std::move(locator), std::move(rule), std::move(message)});
  };

  for (std::size_t i = 0; i < doc.source_tokens.size(); ++i) {
    if (doc.source_tokens[i].position != i)
      add(doc.doc_id + "/source_tokens[" + std::to_string(i) + "]", "positions",
          "position " + std::to_string(doc.source_tokens[i].position) + " expected " +
              std::to_string(i));
  }

  const std::size_t source_len = doc.source_length();
  for (std::size_t t = 0; t < doc.steps.size(); ++t) {
    const auto& step = doc.steps[t];
    const auto where = detail::step_locator(doc, t);
    if (step.step_index != t)
      add(where, "step_index", "step_index " + std::to_string(step.step_index));
    if (step.attention_row.size() != source_len)
      add(where, "attention_arity",
          "attention_row has " + std::to_string(step.attention_row.size()) + " entries, L=" +
              std::to_string(source_len));
    for (double a : step.attention_row) {
      if (!(a >= 0.0) || !std::isfinite(a)) {
        add(where, "attention_range", "attention entries must be finite and non-negative");
        break;
      }
    }
    std::set<TokenId> seen;
    for (std::size_t k = 0; k < step.topk.size(); ++k) {
      const auto& e = step.topk[k];
      if (!(e.probability > 0.0 && e.probability <= 1.0))
        add(where, "topk_range", "probability outside (0,1] at rank " + std::to_string(k));
      if (k > 0 && e.probability > step.topk[k - 1].probability)
        add(where, "topk_order", "probabilities increase at rank " + std::to_string(k));
      if (!seen.insert(e.token_id).second)
        add(where, "topk_distinct", "token " + std::to_string(e.token_id) + " repeated");
    }
    if (!(step.tail_mass >= 0.0 && step.tail_mass < 1.0))
      add(where, "tail_range", "tail_mass outside [0,1)");
    const double stored = step.stored_mass();
    const double total = stored + step.tail_mass;
    if (std::abs(total - 1.0) > kMassTolerance)
      add(where, "mass", "topk + tail_mass = " + format_double(total) + ", expected 1");
    if (stored < kMinStoredMass)
      add(where, "stored_mass", "stored topk mass " + format_double(stored) + " < 0.99");
  }

  std::size_t sentence_count = 0;
  if (doc.sentence_spans) {
    const auto& spans = *doc.sentence_spans;
    sentence_count = spans.size();
    std::size_t cursor = 0;
    bool partition = true;
    for (const auto& s : spans) {
      if (s.begin != cursor || s.end < s.begin) partition = false;
      cursor = s.end;
    }
    if (cursor != doc.steps.size()) partition = false;
    if (!partition)
      add(doc.doc_id + "/sentence_spans", "spans",
          "sentence spans must partition [0, " + std::to_string(doc.steps.size()) +
              ") in order");
  }
  if (doc.parses) {
    if (!doc.sentence_spans) {
      // Without producer spans the sentence count depends on segmentation,
      // which is checked when the parses are consumed.
    } else if (doc.parses->size() != sentence_count) {
      add(doc.doc_id + "/parses", "parses",
          std::to_string(doc.parses->size()) + " parses for " + std::to_string(sentence_count) +
              " sentences");
    }
  }

  report.ok = report.violations.empty();
  return report;
}

// ---------------------------------------------------------------------------
// Serialization (one JSON object per line)

inline std::string trace_header_line() {
  nlohmann::json header = {{"trace_format_version", kTraceFormatVersion}};
  return header.dump();
}

inline void check_header_line(std::string_view line) {
  auto header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object() || !header.contains("trace_format_version"))
    throw Error(ErrorCode::FormatVersionMismatch, "missing trace_format_version header");
  const auto& v = header["trace_format_version"];
  if (!v.is_number_integer() || v.get<int>() != kTraceFormatVersion)
    throw Error(ErrorCode::FormatVersionMismatch,
                "unsupported trace_format_version " + v.dump());
}

inline nlohmann::json to_json(const TraceDocument& doc) {
  using nlohmann::json;
  json source = json::array();
  for (const auto& tok : doc.source_tokens) {
    source.push_back({{"position", tok.position},
                      {"token_id", tok.token_id},
                      {"piece", tok.piece},
                      {"begins_word", tok.begins_word}});
  }
  json steps = json::array();
  for (const auto& step : doc.steps) {
    json topk = json::array();
    for (const auto& e : step.topk) topk.push_back(json::array({e.token_id, e.probability}));
    steps.push_back({{"step_index", step.step_index},
                     {"output_token_id", step.output_token_id},
                     {"output_piece", step.output_piece},
                     {"begins_word", step.begins_word},
                     {"topk", std::move(topk)},
                     {"tail_mass", step.tail_mass},
                     {"attention_row", step.attention_row}});
  }
  json out = {{"doc_id", doc.doc_id}, {"source_tokens", std::move(source)},
              {"steps", std::move(steps)}};
  if (doc.sentence_spans) {
    json spans = json::array();
    for (const auto& s : *doc.sentence_spans) spans.push_back(json::array({s.begin, s.end}));
    out["sentence_spans"] = std::move(spans);
  }
  if (doc.parses) out["parses"] = *doc.parses;
  return out;
}

inline std::string serialize_trace_line(const TraceDocument& doc) { return to_json(doc).dump(); }

namespace detail {

[[noreturn]] inline void schema(const std::string& message) {
  throw Error(ErrorCode::SchemaViolation, message);
}

inline const nlohmann::json& field(const nlohmann::json& obj, const char* name,
                                   const std::string& where) {
  auto it = obj.find(name);
  if (it == obj.end()) schema(where + ": missing field '" + name + "'");
  return *it;
}

inline std::string get_string(const nlohmann::json& obj, const char* name,
                              const std::string& where) {
  const auto& v = field(obj, name, where);
  if (!v.is_string()) schema(where + ": '" + name + "' must be a string");
  return v.get<std::string>();
}

inline bool get_bool(const nlohmann::json& obj, const char* name, const std::string& where) {
  const auto& v = field(obj, name, where);
  if (!v.is_boolean()) schema(where + ": '" + name + "' must be a boolean");
  return v.get<bool>();
}

inline std::int64_t as_integer(const nlohmann::json& v, const std::string& what) {
  if (!v.is_number_integer()) schema(what + " must be an integer");
  return v.get<std::int64_t>();
}

inline std::size_t as_index(const nlohmann::json& v, const std::string& what) {
  const auto i = as_integer(v, what);
  if (i < 0) schema(what + " must be non-negative");
  return static_cast<std::size_t>(i);
}

inline double as_number(const nlohmann::json& v, const std::string& what) {
  if (!v.is_number()) schema(what + " must be a number");
  return v.get<double>();
}

inline const nlohmann::json& as_array(const nlohmann::json& v, const std::string& what) {
  if (!v.is_array()) schema(what + " must be an array");
  return v;
}

}  // namespace detail

inline TraceDocument parse_trace_line(std::string_view line) {
  using detail::as_array;
  auto obj = nlohmann::json::parse(line, nullptr, false);
  if (obj.is_discarded()) throw Error(ErrorCode::MalformedRecord, "invalid JSON record");
  if (!obj.is_object()) throw Error(ErrorCode::MalformedRecord, "record is not a JSON object");

  TraceDocument doc;
  doc.doc_id = detail::get_string(obj, "doc_id", "record");
  const std::string where = "doc " + doc.doc_id;

  for (const auto& tok : as_array(detail::field(obj, "source_tokens", where), "source_tokens")) {
    if (!tok.is_object()) detail::schema(where + ": source token must be an object");
    SourceToken st;
    st.position = detail::as_index(detail::field(tok, "position", where), "position");
    const auto id = detail::as_integer(detail::field(tok, "token_id", where), "token_id");
    if (id < 0) detail::schema(where + ": token_id must be non-negative");
    st.token_id = id;
    st.piece = detail::get_string(tok, "piece", where);
    st.begins_word = detail::get_bool(tok, "begins_word", where);
    doc.source_tokens.push_back(std::move(st));
  }

  for (const auto& s : as_array(detail::field(obj, "steps", where), "steps")) {
    if (!s.is_object()) detail::schema(where + ": step must be an object");
    StepRecord step;
    step.step_index = detail::as_index(detail::field(s, "step_index", where), "step_index");
    step.output_token_id =
        detail::as_integer(detail::field(s, "output_token_id", where), "output_token_id");
    step.output_piece = detail::get_string(s, "output_piece", where);
    step.begins_word = detail::get_bool(s, "begins_word", where);
    for (const auto& pair : as_array(detail::field(s, "topk", where), "topk")) {
      if (!pair.is_array() || pair.size() != 2)
        detail::schema(where + ": topk entries must be [token_id, probability] pairs");
      step.topk.push_back({detail::as_integer(pair[0], "topk token_id"),
                           detail::as_number(pair[1], "topk probability")});
    }
    step.tail_mass = detail::as_number(detail::field(s, "tail_mass", where), "tail_mass");
    const auto& row = as_array(detail::field(s, "attention_row", where), "attention_row");
    step.attention_row.reserve(row.size());
    for (const auto& a : row) step.attention_row.push_back(detail::as_number(a, "attention"));
    doc.steps.push_back(std::move(step));
  }

  if (auto it = obj.find("sentence_spans"); it != obj.end() && !it->is_null()) {
    std::vector<Span> spans;
    for (const auto& pair : as_array(*it, "sentence_spans")) {
      if (!pair.is_array() || pair.size() != 2)
        detail::schema(where + ": sentence span must be a [begin, end] pair");
      spans.push_back({detail::as_index(pair[0], "span begin"),
                       detail::as_index(pair[1], "span end")});
    }
    doc.sentence_spans = std::move(spans);
  }
  if (auto it = obj.find("parses"); it != obj.end() && !it->is_null()) {
    std::vector<std::string> parses;
    for (const auto& p : as_array(*it, "parses")) {
      if (!p.is_string()) detail::schema(where + ": parses must be strings");
      parses.push_back(p.get<std::string>());
    }
    doc.parses = std::move(parses);
  }

  const auto report = validate_document(doc);
  for (const auto& v : report.violations) {
    if (detail::is_structural_rule(v.rule))
      detail::schema(v.locator + ": " + v.rule + ": " + v.message);
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Word grouping

namespace detail {

inline std::string strip_whitespace(std::string_view piece) {
  std::string out;
  out.reserve(piece.size());
  for (char c : piece)
    if (!std::isspace(static_cast<unsigned char>(c))) out += c;
  return out;
}

struct Piece {
  std::string_view text;
  bool begins_word;
};

// A word closes only once it has visible text, so whitespace-only pieces fold
// into the word that follows them (or the last word, at the end).
inline std::vector<Word> group_pieces(const std::vector<Piece>& pieces) {
  std::vector<Word> words;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    const bool starts = words.empty() || (pieces[i].begins_word && !words.back().text.empty());
    if (starts) words.push_back({std::string(), i, {i, i}});
    auto& w = words.back();
    w.text += strip_whitespace(pieces[i].text);
    w.step_span.end = i + 1;
  }
  if (words.size() > 1 && words.back().text.empty()) {
    words[words.size() - 2].step_span.end = words.back().step_span.end;
    words.pop_back();
  }
  return words;
}

}  // namespace detail

// Groups generation steps into words. A leading continuation piece is treated
// as beginning a word.
inline WordSequence detokenize(const TraceDocument& doc) {
  if (doc.steps.empty()) throw Error(ErrorCode::EmptyTrace, "document " + doc.doc_id + " has no steps");
  std::vector<detail::Piece> pieces;
  pieces.reserve(doc.steps.size());
  for (const auto& s : doc.steps) pieces.push_back({s.output_piece, s.begins_word});
  WordSequence seq;
  seq.words = detail::group_pieces(pieces);
  seq.sentence_spans = {{0, seq.words.size()}};
  return seq;
}

// Source document words, using the same begins_word grouping as the summary.
inline std::vector<std::string> source_words(const TraceDocument& doc) {
  std::vector<detail::Piece> pieces;
  pieces.reserve(doc.source_tokens.size());
  for (const auto& t : doc.source_tokens) pieces.push_back({t.piece, t.begins_word});
  std::vector<std::string> out;
  for (auto& w : detail::group_pieces(pieces)) out.push_back(std::move(w.text));
  return out;
}

inline bool ends_sentence(std::string_view word) {
  if (word.empty()) return false;
  const char last = word.back();
  return last == '.' || last == '!' || last == '?';
}

// Producer-supplied step spans win; otherwise split after terminal punctuation.
// Spans always partition the word range; a producer span containing no word
// start yields an empty sentence so parse indices stay aligned.
inline WordSequence segment_sentences(WordSequence seq, const TraceDocument& doc) {
  seq.sentence_spans.clear();
  const std::size_t n = seq.words.size();
  if (doc.sentence_spans && !doc.sentence_spans->empty()) {
    std::size_t w = 0;
    const auto& spans = *doc.sentence_spans;
    for (std::size_t s = 0; s < spans.size(); ++s) {
      const std::size_t begin = w;
      const bool last = s + 1 == spans.size();
      while (w < n && (last || seq.words[w].first_step < spans[s].end)) ++w;
      seq.sentence_spans.push_back({begin, w});
    }
    return seq;
  }
  std::size_t begin = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ends_sentence(seq.words[i].text)) {
      seq.sentence_spans.push_back({begin, i + 1});
      begin = i + 1;
    }
  }
  if (begin < n) seq.sentence_spans.push_back({begin, n});
  return seq;
}

}  // namespace uncertainty
