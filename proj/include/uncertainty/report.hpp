#pragma once

// Corpus pipeline: streams trace files one document at a time, accumulates
// raw per-analysis observations, and renders report bundles. Bundles keep the
// raw observations (raw.json) so that sharded runs merge exactly.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attention.hpp"
#include "behavior.hpp"
#include "entropy.hpp"
#include "error.hpp"
#include "stats.hpp"
#include "syntax.hpp"
#include "trace.hpp"

namespace uncertainty {

struct AnalysisSet {
  bool copy = false;
  bool position = false;
  bool syntax = false;
  bool attention = false;

  static AnalysisSet all() { return {true, true, true, true}; }
  bool any() const noexcept { return copy || position || syntax || attention; }
  friend bool operator==(const AnalysisSet&, const AnalysisSet&) = default;
};

struct RunConfig {
  double nucleus_p = kDefaultNucleusP;
  double bin_width = kDefaultBinWidth;
  double truncate_at = kDefaultTruncateAt;
  std::optional<double> q;  // attention threshold; default 10 / L per document
  double block_fraction = kDefaultBlockFraction;
  double bucket_width = kDefaultBucketWidth;
  bool case_fold = false;
  bool strip_preterminals = kStripPreterminals;
  bool raw_attention_entropy = false;
  std::size_t min_rule_count = kDefaultMinRuleCount;
  AnalysisSet analyses = AnalysisSet::all();

  std::vector<std::filesystem::path> inputs;
  std::optional<std::filesystem::path> parse_sidecar;
  std::optional<std::filesystem::path> output_dir;

  void validate() const {
    auto open_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!open_unit(nucleus_p)) throw Error(ErrorCode::InvalidConfig, "nucleus_p must lie in (0,1)");
    if (!open_unit(block_fraction))
      throw Error(ErrorCode::InvalidConfig, "block fraction must lie in (0,1)");
    if (q && !open_unit(*q)) throw Error(ErrorCode::InvalidConfig, "q must lie in (0,1)");
    if (!(bin_width > 0.0) || !(bucket_width > 0.0))
      throw Error(ErrorCode::InvalidConfig, "widths must be positive");
    if (!(truncate_at > 0.0)) throw Error(ErrorCode::InvalidConfig, "truncate_at must be positive");
  }

  AttentionOptions attention_options() const {
    return {nucleus_p, q, block_fraction, bucket_width, raw_attention_entropy};
  }

  // Everything that affects results; paths are deliberately excluded so that
  // shards of one corpus produce identical echoes.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["nucleus_p"] = nucleus_p;
    j["bin_width"] = bin_width;
    j["truncate_at"] = truncate_at;
    j["q"] = q ? nlohmann::json(*q) : nlohmann::json(nullptr);
    j["block_fraction"] = block_fraction;
    j["bucket_width"] = bucket_width;
    j["case_fold"] = case_fold;
    j["strip_preterminals"] = strip_preterminals;
    j["raw_attention_entropy"] = raw_attention_entropy;
    j["min_rule_count"] = min_rule_count;
    j["analyses"] = {{"copy", analyses.copy},
                     {"position", analyses.position},
                     {"syntax", analyses.syntax},
                     {"attention", analyses.attention}};
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.nucleus_p = j.at("nucleus_p").get<double>();
    c.bin_width = j.at("bin_width").get<double>();
    c.truncate_at = j.at("truncate_at").get<double>();
    if (!j.at("q").is_null()) c.q = j.at("q").get<double>();
    c.block_fraction = j.at("block_fraction").get<double>();
    c.bucket_width = j.at("bucket_width").get<double>();
    c.case_fold = j.at("case_fold").get<bool>();
    c.strip_preterminals = j.at("strip_preterminals").get<bool>();
    c.raw_attention_entropy = j.at("raw_attention_entropy").get<bool>();
    c.min_rule_count = j.at("min_rule_count").get<std::size_t>();
    const auto& a = j.at("analyses");
    c.analyses = {a.at("copy").get<bool>(), a.at("position").get<bool>(),
                  a.at("syntax").get<bool>(), a.at("attention").get<bool>()};
    return c;
  }
};

// Sidecar parses: "doc_id<TAB>sentence_index<TAB>(bracketed tree)" per line.
class ParseSidecar {
 public:
  static ParseSidecar load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingInput, "cannot open parse sidecar " + path.string());
    ParseSidecar out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
      if (t2 == std::string::npos)
        throw Error(ErrorCode::MalformedRecord,
                    path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
      std::size_t index = 0;
      try {
        index = static_cast<std::size_t>(std::stoul(line.substr(t1 + 1, t2 - t1 - 1)));
      } catch (const std::exception&) {
        throw Error(ErrorCode::MalformedRecord,
                    path.string() + ":" + std::to_string(lineno) + ": bad sentence index");
      }
      out.add(line.substr(0, t1), index, line.substr(t2 + 1));
    }
    return out;
  }

  void add(std::string doc_id, std::size_t sentence, std::string tree) {
    trees_[{std::move(doc_id), sentence}] = std::move(tree);
  }

  // All parses for the document's sentences, or nullopt if any is missing.
  std::optional<std::vector<std::string>> lookup(const std::string& doc_id,
                                                 std::size_t sentences) const {
    std::vector<std::string> out;
    for (std::size_t s = 0; s < sentences; ++s) {
      auto it = trees_.find({doc_id, s});
      if (it == trees_.end()) return std::nullopt;
      out.push_back(it->second);
    }
    return out;
  }

  bool empty() const noexcept { return trees_.empty(); }

 private:
  std::map<std::pair<std::string, std::size_t>, std::string> trees_;
};

struct CorpusCounts {
  std::size_t documents = 0;
  std::size_t steps = 0;
  std::size_t words = 0;
  std::size_t sentences = 0;
  std::map<std::string, std::size_t> skipped;  // reason -> documents
  std::size_t syntax_documents_without_parses = 0;
  std::size_t syntax_parse_count_mismatches = 0;
  std::size_t syntax_parse_errors = 0;
  std::size_t attention_skipped_documents = 0;

  std::size_t skipped_total() const {
    std::size_t n = 0;
    for (const auto& [reason, count] : skipped) n += count;
    return n;
  }

  void merge(const CorpusCounts& o) {
    documents += o.documents;
    steps += o.steps;
    words += o.words;
    sentences += o.sentences;
    for (const auto& [reason, count] : o.skipped) skipped[reason] += count;
    syntax_documents_without_parses += o.syntax_documents_without_parses;
    syntax_parse_count_mismatches += o.syntax_parse_count_mismatches;
    syntax_parse_errors += o.syntax_parse_errors;
    attention_skipped_documents += o.attention_skipped_documents;
  }
};

// Raw observations for every analysis; merge is concatenation.
class ReportState {
 public:
  explicit ReportState(const RunConfig& config)
      : config_(config),
        distances_(config.strip_preterminals),
        attention_(config.bucket_width) {}

  const RunConfig& config() const noexcept { return config_; }
  const CorpusCounts& counts() const noexcept { return counts_; }
  CorpusCounts& counts() noexcept { return counts_; }

  void skip(const std::string& reason) { ++counts_.skipped[reason]; }

  // Analyzes one validated document. Failures that invalidate the whole
  // document are thrown before any state is touched.
  void add_document(const TraceDocument& doc, const ParseSidecar* sidecar = nullptr) {
    const auto step_entropy = prediction_entropies(doc, config_.nucleus_p);
    auto words = segment_sentences(detokenize(doc), doc);
    const auto word_h = word_entropies(words, step_entropy);

    ReportState local(config_);
    local.counts_.documents = 1;
    local.counts_.steps = doc.steps.size();
    local.counts_.words = words.words.size();
    local.counts_.sentences = words.sentence_spans.size();

    if (config_.analyses.copy) {
      const auto src = source_words(doc);
      for (const auto& l : classify_bigrams(words, src, config_.case_fold, step_entropy)) {
        if (l.label == BigramClass::Existing) local.existing_.push_back(l.entropy);
        if (l.label == BigramClass::Novel) local.novel_.push_back(l.entropy);
      }
    }
    if (config_.analyses.position) {
      const auto buckets = relative_positions(words);
      for (std::size_t i = 0; i < buckets.size(); ++i)
        local.position_[static_cast<std::size_t>(buckets[i])].push_back(word_h[i]);
    }
    if (config_.analyses.syntax) local.add_syntax(doc, words, word_h, sidecar);
    if (config_.analyses.attention) {
      try {
        AttentionAccumulator acc(config_.bucket_width);
        acc.add(doc, step_entropy, config_.attention_options());
        local.attention_.merge(acc);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ZeroRow) throw;
        ++local.counts_.attention_skipped_documents;
      }
    }
    merge(local);
  }

  void merge(const ReportState& o) {
    counts_.merge(o.counts_);
    existing_.insert(existing_.end(), o.existing_.begin(), o.existing_.end());
    novel_.insert(novel_.end(), o.novel_.begin(), o.novel_.end());
    for (std::size_t b = 0; b < position_.size(); ++b)
      position_[b].insert(position_[b].end(), o.position_[b].begin(), o.position_[b].end());
    distances_.merge(o.distances_);
    productions_.merge(o.productions_);
    attention_.merge(o.attention_);
  }

  EntropyHistogram copy_histogram() const {
    return histogram_from_values(existing_, novel_, config_.bin_width, config_.truncate_at);
  }
  PositionProfile position_profile() const { return profile_from_values(position_); }
  DistanceStats distance_stats() const { return distances_.finalize(); }
  std::vector<ProductionStat> production_table() const {
    return productions_.finalize(config_.min_rule_count);
  }
  const AttentionAccumulator& attention() const noexcept { return attention_; }

  const std::vector<double>& existing_entropies() const noexcept { return existing_; }
  const std::vector<double>& novel_entropies() const noexcept { return novel_; }

  // Canonical (sorted) serialization of every raw observation.
  nlohmann::json raw_json() const {
    using nlohmann::json;
    auto sorted = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return json(v);
    };
    auto buckets = [&](const BucketAccumulator& acc) {
      json out = json::object();
      for (const auto& [k, v] : acc.values()) out[std::to_string(k)] = sorted(v);
      return out;
    };
    json raw;
    json counts;
    counts["documents"] = counts_.documents;
    counts["steps"] = counts_.steps;
    counts["words"] = counts_.words;
    counts["sentences"] = counts_.sentences;
    counts["skipped"] = counts_.skipped;
    counts["syntax_documents_without_parses"] = counts_.syntax_documents_without_parses;
    counts["syntax_parse_count_mismatches"] = counts_.syntax_parse_count_mismatches;
    counts["syntax_parse_errors"] = counts_.syntax_parse_errors;
    counts["attention_skipped_documents"] = counts_.attention_skipped_documents;
    raw["counts"] = counts;
    raw["copy"] = {{"existing", sorted(existing_)}, {"novel", sorted(novel_)}};
    json pos = json::array();
    for (const auto& b : position_) pos.push_back(sorted(b));
    raw["position"] = pos;

    json points = json::array();
    for (const auto& [d, pct] : distances_.points()) points.push_back(json::array({d, pct}));
    json rules = json::object();
    for (const auto& [name, rv] : productions_.rules()) {
      json child_values = json::array();
      for (const auto& v : rv.child_values) child_values.push_back(sorted(v));
      rules[name] = {{"parent", rv.parent},
                     {"children", rv.children},
                     {"child_values", child_values},
                     {"occurrence_means", sorted(rv.occurrence_means)}};
    }
    raw["syntax"] = {{"points", points},
                     {"sentences", distances_.sentences()},
                     {"alignment_failures", distances_.alignment_failures()},
                     {"rules", rules}};
    json projection = json::array();
    for (std::size_t o = 0; o < kProjectionOffsets.size(); ++o)
      projection.push_back(buckets(attention_.projection_buckets(o)));
    raw["attention"] = {{"entropy", buckets(attention_.entropy_buckets())},
                        {"projection", projection},
                        {"skipped_steps", attention_.skipped_steps()}};
    return raw;
  }

  static ReportState from_raw_json(const RunConfig& config, const nlohmann::json& raw) {
    ReportState s(config);
    const auto& c = raw.at("counts");
    s.counts_.documents = c.at("documents").get<std::size_t>();
    s.counts_.steps = c.at("steps").get<std::size_t>();
    s.counts_.words = c.at("words").get<std::size_t>();
    s.counts_.sentences = c.at("sentences").get<std::size_t>();
    s.counts_.skipped = c.at("skipped").get<std::map<std::string, std::size_t>>();
    s.counts_.syntax_documents_without_parses =
        c.at("syntax_documents_without_parses").get<std::size_t>();
    s.counts_.syntax_parse_count_mismatches =
        c.at("syntax_parse_count_mismatches").get<std::size_t>();
    s.counts_.syntax_parse_errors = c.at("syntax_parse_errors").get<std::size_t>();
    s.counts_.attention_skipped_documents = c.at("attention_skipped_documents").get<std::size_t>();

    s.existing_ = raw.at("copy").at("existing").get<std::vector<double>>();
    s.novel_ = raw.at("copy").at("novel").get<std::vector<double>>();
    const auto& pos = raw.at("position");
    for (std::size_t b = 0; b < s.position_.size() && b < pos.size(); ++b)
      s.position_[b] = pos[b].get<std::vector<double>>();

    const auto& syn = raw.at("syntax");
    for (const auto& p : syn.at("points")) s.distances_.add_point(p[0].get<int>(), p[1].get<double>());
    s.distances_.add_counts(syn.at("sentences").get<std::size_t>(),
                            syn.at("alignment_failures").get<std::size_t>());
    for (const auto& [name, rv] : syn.at("rules").items()) {
      const auto parent = rv.at("parent").get<std::string>();
      const auto children = rv.at("children").get<std::vector<std::string>>();
      const auto child_values = rv.at("child_values").get<std::vector<std::vector<double>>>();
      const auto means = rv.at("occurrence_means").get<std::vector<double>>();
      s.productions_.add_raw(parent, children, child_values, means);
    }

    auto load_buckets = [](BucketAccumulator& acc, const nlohmann::json& j) {
      for (const auto& [k, v] : j.items())
        for (double x : v.get<std::vector<double>>()) acc.add_to_bucket(std::stoll(k), x);
    };
    const auto& att = raw.at("attention");
    load_buckets(s.attention_.entropy_buckets(), att.at("entropy"));
    const auto& proj = att.at("projection");
    for (std::size_t o = 0; o < kProjectionOffsets.size() && o < proj.size(); ++o)
      load_buckets(s.attention_.projection_buckets(o), proj[o]);
    s.attention_.add_skipped_steps(att.at("skipped_steps").get<std::size_t>());
    return s;
  }

 private:
  void add_syntax(const TraceDocument& doc, const WordSequence& words,
                  const std::vector<double>& word_h, const ParseSidecar* sidecar) {
    std::optional<std::vector<std::string>> parses = doc.parses;
    const std::size_t sentences = words.sentence_spans.size();
    if (!parses && sidecar) parses = sidecar->lookup(doc.doc_id, sentences);
    if (!parses) {
      ++counts_.syntax_documents_without_parses;
      return;
    }
    if (parses->size() != sentences) {
      ++counts_.syntax_parse_count_mismatches;
      return;
    }
    for (std::size_t s = 0; s < sentences; ++s) {
      const auto& span = words.sentence_spans[s];
      if (span.empty()) continue;
      SentenceSyntax sentence;
      try {
        sentence.tree = parse_bracketed_tree((*parses)[s]);
      } catch (const Error&) {
        ++counts_.syntax_parse_errors;
        continue;
      }
      for (std::size_t w = span.begin; w < span.end; ++w) {
        sentence.words.push_back(words.words[w].text);
        sentence.entropies.push_back(word_h[w]);
      }
      if (distances_.add(sentence)) productions_.add(sentence);
    }
  }

  RunConfig config_;
  CorpusCounts counts_;
  std::vector<double> existing_;
  std::vector<double> novel_;
  std::array<std::vector<double>, 10> position_;
  DistanceAccumulator distances_;
  ProductionAccumulator productions_;
  AttentionAccumulator attention_;
};

// ---------------------------------------------------------------------------
// Bundles

inline constexpr const char* kCopyTable = "copy_histogram.csv";
inline constexpr const char* kPositionTable = "position_profile.csv";
inline constexpr const char* kDistanceTable = "syntax_distance.csv";
inline constexpr const char* kProductionTable = "production_rules.csv";
inline constexpr const char* kAttentionTable = "attention_entropy.csv";
inline constexpr const char* kProjectionTable = "vocab_projection.csv";

struct ReportBundle {
  nlohmann::json manifest;
  nlohmann::json summary;
  nlohmann::json raw;
  std::map<std::string, CsvTable> tables;

  // Exact file contents, keyed by file name.
  std::map<std::string, std::string> files() const {
    std::map<std::string, std::string> out;
    out["manifest.json"] = manifest.dump(2) + "\n";
    out["summary.json"] = summary.dump(2) + "\n";
    out["raw.json"] = raw.dump() + "\n";
    for (const auto& [name, table] : tables) out[name] = table.to_string();
    return out;
  }
};

namespace detail {

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::string offset_label(int offset) {
  return offset > 0 ? "+" + std::to_string(offset) : std::to_string(offset);
}

inline nlohmann::json rule_json(const ProductionStat& r) {
  return {{"rule", r.rule},
          {"mean_entropy", r.mean_entropy},
          {"child_mean_entropies", r.child_mean_entropies},
          {"count", r.count}};
}

inline nlohmann::json bucket_json(const std::vector<BucketMean>& buckets) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& b : buckets)
    out.push_back({{"bucket_lo", b.lo}, {"bucket_hi", b.hi}, {"mean", b.mean}, {"count", b.count}});
  return out;
}

}  // namespace detail

inline constexpr std::size_t kSummaryRuleCount = 5;

inline ReportBundle build_bundle(const ReportState& state) {
  using nlohmann::json;
  const auto& config = state.config();
  const auto& counts = state.counts();
  ReportBundle bundle;
  json summary = json::object();
  std::vector<std::string> table_names;

  if (config.analyses.copy) {
    const auto h = state.copy_histogram();
    CsvTable t{{"class", "bin_lo", "bin_hi", "count"}, {}};
    auto rows = [&](const char* cls, const std::vector<std::size_t>& counts_per_bin) {
      for (std::size_t k = 0; k < h.bin_count(); ++k)
        t.rows.push_back({cls, format_double(h.bin_lo(k)), format_double(h.bin_hi(k)),
                          std::to_string(counts_per_bin[k])});
    };
    rows("existing", h.existing_counts);
    rows("novel", h.novel_counts);
    bundle.tables[kCopyTable] = std::move(t);
    summary["copy"] = {{"existing_median", detail::optional_json(h.existing_median)},
                       {"novel_median", detail::optional_json(h.novel_median)},
                       {"existing_count", state.existing_entropies().size()},
                       {"novel_count", state.novel_entropies().size()}};
  }

  if (config.analyses.position) {
    const auto p = state.position_profile();
    CsvTable t{{"bucket", "mean", "median", "count"}, {}};
    json profile = json::array();
    for (std::size_t b = 0; b < p.buckets.size(); ++b) {
      const auto& pb = p.buckets[b];
      t.rows.push_back({decile_label(static_cast<int>(b)), format_optional(pb.mean),
                        format_optional(pb.median), std::to_string(pb.count)});
      profile.push_back({{"bucket", decile_label(static_cast<int>(b))},
                         {"mean", detail::optional_json(pb.mean)},
                         {"median", detail::optional_json(pb.median)},
                         {"count", pb.count}});
    }
    bundle.tables[kPositionTable] = std::move(t);
    summary["position"] = profile;
  }

  if (config.analyses.syntax) {
    const auto d = state.distance_stats();
    CsvTable t{{"distance", "median_pct_change", "mean_pct_change", "count"}, {}};
    json groups = json::array();
    for (const auto& g : d.groups) {
      t.rows.push_back({std::to_string(g.distance), format_optional(g.median_pct_change),
                        format_optional(g.mean_pct_change), std::to_string(g.count)});
      groups.push_back({{"distance", g.distance},
                        {"median_pct_change", detail::optional_json(g.median_pct_change)},
                        {"mean_pct_change", detail::optional_json(g.mean_pct_change)},
                        {"count", g.count}});
    }
    bundle.tables[kDistanceTable] = std::move(t);

    const auto rules = state.production_table();
    CsvTable r{{"rule", "mean_entropy", "count"}, {}};
    for (const auto& rule : rules)
      r.rows.push_back({rule.rule, format_double(rule.mean_entropy), std::to_string(rule.count)});
    bundle.tables[kProductionTable] = std::move(r);

    json top = json::array(), bottom = json::array();
    for (std::size_t i = 0; i < rules.size() && i < kSummaryRuleCount; ++i)
      top.push_back(detail::rule_json(rules[i]));
    for (std::size_t i = 0; i < rules.size() && i < kSummaryRuleCount; ++i)
      bottom.push_back(detail::rule_json(rules[rules.size() - 1 - i]));
    summary["syntax"] = {{"rank_correlation", detail::optional_json(d.rank_correlation)},
                         {"distance_groups", groups},
                         {"sentences", d.sentences},
                         {"alignment_failures", d.alignment_failures},
                         {"highest_entropy_rules", top},
                         {"lowest_entropy_rules", bottom}};
  }

  if (config.analyses.attention) {
    const auto curve = state.attention().attention_entropy_curve();
    CsvTable t{{"bucket_lo", "bucket_hi", "mean_attention_entropy", "count"}, {}};
    for (const auto& b : curve)
      t.rows.push_back({format_double(b.lo), format_double(b.hi), format_double(b.mean),
                        std::to_string(b.count)});
    bundle.tables[kAttentionTable] = std::move(t);

    CsvTable p{{"offset", "bucket_lo", "bucket_hi", "mean_projection", "count"}, {}};
    json projection = json::object();
    for (const auto& c : state.attention().projection_curves()) {
      for (const auto& b : c.buckets)
        p.rows.push_back({detail::offset_label(c.offset), format_double(b.lo), format_double(b.hi),
                          format_double(b.mean), std::to_string(b.count)});
      projection[detail::offset_label(c.offset)] = detail::bucket_json(c.buckets);
    }
    bundle.tables[kProjectionTable] = std::move(p);
    summary["attention"] = {{"attention_entropy", detail::bucket_json(curve)},
                            {"projection", projection},
                            {"skipped_steps", state.attention().skipped_steps()}};
  }

  for (const auto& [name, table] : bundle.tables) table_names.push_back(name);
  json manifest;
  manifest["trace_format_version"] = kTraceFormatVersion;
  manifest["config"] = config.to_json();
  manifest["doc_count"] = counts.documents;
  manifest["skipped"] = counts.skipped_total();
  manifest["skip_reasons"] = counts.skipped;
  manifest["step_count"] = counts.steps;
  manifest["word_count"] = counts.words;
  manifest["sentence_count"] = counts.sentences;
  manifest["syntax"] = {{"documents_without_parses", counts.syntax_documents_without_parses},
                        {"parse_count_mismatches", counts.syntax_parse_count_mismatches},
                        {"parse_errors", counts.syntax_parse_errors}};
  manifest["attention"] = {{"skipped_documents", counts.attention_skipped_documents}};
  manifest["tables"] = table_names;

  bundle.manifest = std::move(manifest);
  bundle.summary = std::move(summary);
  bundle.raw = state.raw_json();
  return bundle;
}

inline void write_bundle(const ReportBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, contents] : bundle.files()) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error(ErrorCode::MissingInput, "cannot write " + (dir / name).string());
    out << contents;
  }
}

inline ReportBundle read_bundle(const std::filesystem::path& dir) {
  auto load = [&dir](const char* name) {
    std::ifstream in(dir / name, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingInput, "bundle file missing: " + (dir / name).string());
    std::stringstream buf;
    buf << in.rdbuf();
    auto j = nlohmann::json::parse(buf.str(), nullptr, false);
    if (j.is_discarded())
      throw Error(ErrorCode::MalformedRecord, "invalid JSON in " + (dir / name).string());
    return j;
  };
  ReportBundle bundle;
  bundle.manifest = load("manifest.json");
  bundle.summary = load("summary.json");
  bundle.raw = load("raw.json");
  return bundle;
}

// Combines bundles produced with identical settings. Every table is
// recomputed from the merged raw observations.
inline ReportBundle merge_reports(const std::vector<ReportBundle>& bundles) {
  if (bundles.empty()) throw Error(ErrorCode::MissingInput, "no bundles to merge");
  const auto& reference = bundles.front().manifest.at("config");
  for (const auto& b : bundles)
    if (b.manifest.at("config") != reference)
      throw Error(ErrorCode::ConfigMismatch, "bundles were produced with different settings");
  const auto config = RunConfig::from_json(reference);
  ReportState merged(config);
  for (const auto& b : bundles) merged.merge(ReportState::from_raw_json(config, b.raw));
  return build_bundle(merged);
}

// ---------------------------------------------------------------------------
// Pipeline

struct FileError {
  std::string path;
  ErrorCode code;
  std::string message;
};

struct PipelineResult {
  ReportBundle bundle;
  std::vector<FileError> file_errors;

  int exit_code() const noexcept { return file_errors.empty() ? 0 : 1; }
};

// Streams one trace file into `state`. The header line is checked first;
// record-level failures are counted as skips, never thrown.
inline void analyze_stream(std::istream& in, ReportState& state,
                           const ParseSidecar* sidecar = nullptr, std::ostream* log = nullptr) {
  std::string line;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (!header) {
      check_header_line(line);
      header = true;
      continue;
    }
    auto note = [&](const std::string& reason, const std::string& what) {
      state.skip(reason);
      if (log) *log << "line " << lineno << ": skipped (" << reason << "): " << what << "\n";
    };
    TraceDocument doc;
    try {
      doc = parse_trace_line(line);
    } catch (const Error& e) {
      note(e.code() == ErrorCode::MalformedRecord ? "malformed" : "schema", e.what());
      continue;
    }
    const auto report = validate_document(doc);
    if (!report.ok) {
      note("invalid", report.violations.front().locator + ": " + report.violations.front().message);
      continue;
    }
    try {
      state.add_document(doc, sidecar);
    } catch (const Error& e) {
      switch (e.code()) {
        case ErrorCode::InsufficientMass: note("insufficient_mass", e.what()); break;
        case ErrorCode::EmptyTrace: note("empty", e.what()); break;
        default: note("analysis_error", e.what()); break;
      }
    }
  }
  if (!header) throw Error(ErrorCode::FormatVersionMismatch, "missing trace_format_version header");
}

inline PipelineResult run_pipeline(const RunConfig& config, std::ostream* log = nullptr) {
  config.validate();
  PipelineResult result;
  std::optional<ParseSidecar> sidecar;
  if (config.parse_sidecar) sidecar = ParseSidecar::load(*config.parse_sidecar);

  ReportState state(config);
  for (const auto& path : config.inputs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      result.file_errors.push_back({path.string(), ErrorCode::MissingInput, "cannot open input"});
      continue;
    }
    // A file-level failure discards that file's partial contributions.
    ReportState file_state(config);
    try {
      analyze_stream(in, file_state, sidecar ? &*sidecar : nullptr, log);
    } catch (const Error& e) {
      result.file_errors.push_back({path.string(), e.code(), e.what()});
      continue;
    }
    state.merge(file_state);
  }
  result.bundle = build_bundle(state);
  if (config.output_dir) write_bundle(result.bundle, *config.output_dir);
  return result;
}

}  // namespace uncertainty
