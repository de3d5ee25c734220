// Command-line front end: validate, synth, analyze, merge, report.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <uncertainty/uncertainty.hpp>

namespace fs = std::filesystem;
using namespace uncertainty;

namespace {

int run_validate(const std::vector<std::string>& files) {
  bool failed = false;
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      std::cerr << path << ": MissingInput: cannot open\n";
      failed = true;
      continue;
    }
    std::string line;
    std::size_t lineno = 0, docs = 0, invalid = 0;
    bool header = false;
    try {
      while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        if (!header) {
          check_header_line(line);
          header = true;
          continue;
        }
        ++docs;
        try {
          const auto report = validate_document(parse_trace_line(line));
          if (!report.ok) {
            ++invalid;
            for (const auto& v : report.violations)
              std::cout << path << ":" << lineno << ": " << v.locator << ": " << v.rule << ": "
                        << v.message << "\n";
          }
        } catch (const Error& e) {
          ++invalid;
          std::cout << path << ":" << lineno << ": " << e.what() << "\n";
        }
      }
      if (!header) throw Error(ErrorCode::FormatVersionMismatch, "missing header line");
    } catch (const Error& e) {
      std::cerr << path << ": " << e.what() << "\n";
      failed = true;
      continue;
    }
    std::cout << path << ": " << docs << " documents, " << invalid << " invalid\n";
    if (invalid) failed = true;
  }
  return failed ? 1 : 0;
}

void print_report(const ReportBundle& bundle) {
  const auto& m = bundle.manifest;
  const auto& s = bundle.summary;
  auto num = [](const nlohmann::json& j) {
    return j.is_null() ? std::string("NA") : format_double(j.get<double>());
  };
  std::cout << "documents: " << m.at("doc_count") << "  skipped: " << m.at("skipped")
            << "  steps: " << m.at("step_count") << "  words: " << m.at("word_count") << "\n";
  if (s.contains("copy")) {
    const auto& c = s["copy"];
    std::cout << "\n[copy] median entropy  existing: " << num(c["existing_median"]) << " (n="
              << c["existing_count"] << ")  novel: " << num(c["novel_median"]) << " (n="
              << c["novel_count"] << ")\n";
  }
  if (s.contains("position")) {
    std::cout << "\n[position] bucket  mean  median  count\n";
    for (const auto& b : s["position"])
      std::cout << "  " << b["bucket"].get<std::string>() << "  " << num(b["mean"]) << "  "
                << num(b["median"]) << "  " << b["count"] << "\n";
  }
  if (s.contains("syntax")) {
    const auto& x = s["syntax"];
    std::cout << "\n[syntax] rank correlation: " << num(x["rank_correlation"])
              << "  sentences: " << x["sentences"] << "  alignment failures: "
              << x["alignment_failures"] << "\n  distance  median%  mean%  count\n";
    for (const auto& g : x["distance_groups"])
      std::cout << "  " << g["distance"] << "  " << num(g["median_pct_change"]) << "  "
                << num(g["mean_pct_change"]) << "  " << g["count"] << "\n";
    for (const char* key : {"highest_entropy_rules", "lowest_entropy_rules"}) {
      std::cout << "  " << key << ":\n";
      for (const auto& r : x[key])
        std::cout << "    " << r["rule"].get<std::string>() << "  " << num(r["mean_entropy"])
                  << "  (n=" << r["count"] << ")\n";
    }
  }
  if (s.contains("attention")) {
    const auto& a = s["attention"];
    std::cout << "\n[attention] prediction-entropy bucket -> mean attention entropy\n";
    for (const auto& b : a["attention_entropy"])
      std::cout << "  [" << num(b["bucket_lo"]) << ", " << num(b["bucket_hi"]) << ")  "
                << num(b["mean"]) << "  (n=" << b["count"] << ")\n";
    std::cout << "[projection] offset: bucket -> mean projected attention\n";
    for (const auto& [offset, buckets] : a["projection"].items()) {
      std::cout << "  " << offset << ":";
      for (const auto& b : buckets) std::cout << "  " << num(b["bucket_lo"]) << "=" << num(b["mean"]);
      std::cout << "\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoder uncertainty analysis over generation traces"};
  app.require_subcommand(1);

  // validate
  std::vector<std::string> validate_files;
  auto* validate = app.add_subcommand("validate", "Check trace files against the format rules");
  validate->add_option("files", validate_files, "Trace files")->required()->check(CLI::ExistingFile);

  // synth
  SynthConfig synth = bundled_corpus_config();
  std::size_t synth_docs = kBundledCorpusDocs;
  std::uint64_t synth_seed = kBundledCorpusSeed;
  std::string synth_out;
  bool no_parses = false;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic trace corpus");
  synth_cmd->add_option("--out", synth_out, "Output trace file")->required();
  synth_cmd->add_option("--docs", synth_docs, "Number of documents")->capture_default_str();
  synth_cmd->add_option("--seed", synth_seed, "Corpus seed")->capture_default_str();
  synth_cmd->add_option("--source-length", synth.source_length, "Source tokens per document")
      ->capture_default_str();
  synth_cmd->add_option("--steps", synth.target_steps, "Target decoding steps per document")
      ->capture_default_str();
  synth_cmd->add_option("--copy-fraction", synth.copy_fraction, "Share of copy words")
      ->capture_default_str();
  synth_cmd->add_option("--copy-entropy", synth.copy_entropy, "Planted copy-step entropy")
      ->capture_default_str();
  synth_cmd->add_option("--novel-entropy", synth.novel_entropy, "Planted novel-word entropy")
      ->capture_default_str();
  synth_cmd->add_option("--position-tilt", synth.position_tilt,
                        "Rise in copy probability across a sentence")
      ->capture_default_str();
  synth_cmd->add_option("--novel-slope", synth.novel_position_slope,
                        "Fall in novel entropy across a sentence")
      ->capture_default_str();
  synth_cmd->add_flag("--no-parses", no_parses, "Omit inline parses");

  // analyze
  RunConfig run;
  std::vector<std::string> analyze_files;
  std::string analyze_out;
  std::string parses_path;
  bool want_copy = false, want_position = false, want_syntax = false, want_attention = false,
       want_all = false, raw_brackets = false, verbose = false;
  double q = 0.0;
  auto* analyze = app.add_subcommand("analyze", "Run analyses and write a report bundle");
  analyze->add_option("files", analyze_files, "Trace files")->required();
  analyze->add_option("--out", analyze_out, "Bundle directory")->required();
  analyze->add_flag("--copy", want_copy, "Existing/novel bigram entropy histogram");
  analyze->add_flag("--position", want_position, "Entropy by relative sentence position");
  analyze->add_flag("--syntax", want_syntax, "Syntactic distance and production rules");
  analyze->add_flag("--attention", want_attention, "Attention entropy and vocabulary projection");
  analyze->add_flag("--all", want_all, "All analyses (default when none is selected)");
  analyze->add_option("--nucleus-p", run.nucleus_p, "Nucleus mass p")->capture_default_str();
  analyze->add_option("--bin-width", run.bin_width, "Histogram bin width")->capture_default_str();
  analyze->add_option("--truncate-at", run.truncate_at, "Histogram truncation")->capture_default_str();
  analyze->add_option("--q", q, "Attention threshold (default 10/L per document)");
  analyze->add_option("--block-fraction", run.block_fraction, "Fraction of source tokens blocked")
      ->capture_default_str();
  analyze->add_option("--bucket-width", run.bucket_width, "Prediction-entropy bucket width")
      ->capture_default_str();
  analyze->add_option("--min-rule-count", run.min_rule_count, "Minimum production occurrences")
      ->capture_default_str();
  analyze->add_flag("--case-fold", run.case_fold, "Case-insensitive bigram matching");
  analyze->add_flag("--raw-brackets", raw_brackets, "Count brackets without stripping POS tags");
  analyze->add_flag("--raw-attention", run.raw_attention_entropy,
                    "Attention entropy over unblocked rows");
  analyze->add_option("--parses", parses_path, "Sidecar parse file (doc_id, index, tree)");
  analyze->add_flag("-v,--verbose", verbose, "Log skipped records to stderr");

  // merge
  std::vector<std::string> merge_dirs;
  std::string merge_out;
  auto* merge = app.add_subcommand("merge", "Merge bundles from sharded runs");
  merge->add_option("bundles", merge_dirs, "Bundle directories")->required();
  merge->add_option("--out", merge_out, "Merged bundle directory")->required();

  // report
  std::string report_dir;
  auto* report = app.add_subcommand("report", "Print a bundle summary");
  report->add_option("bundle", report_dir, "Bundle directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) return run_validate(validate_files);

    if (*synth_cmd) {
      synth.with_parses = !no_parses;
      std::ofstream out(synth_out, std::ios::binary);
      if (!out) throw Error(ErrorCode::MissingInput, "cannot write " + synth_out);
      out << trace_header_line() << "\n";
      for (const auto& doc : synthetic_corpus(synth, synth_docs, synth_seed))
        out << serialize_trace_line(doc) << "\n";
      return 0;
    }

    if (*analyze) {
      if (analyze->count("--q")) run.q = q;
      run.strip_preterminals = !raw_brackets;
      run.analyses = {want_copy, want_position, want_syntax, want_attention};
      if (want_all || !run.analyses.any()) run.analyses = AnalysisSet::all();
      for (const auto& f : analyze_files) run.inputs.emplace_back(f);
      if (!parses_path.empty()) run.parse_sidecar = parses_path;
      run.output_dir = analyze_out;
      const auto result = run_pipeline(run, verbose ? &std::cerr : nullptr);
      for (const auto& e : result.file_errors) std::cerr << e.path << ": " << e.message << "\n";
      std::cout << "wrote " << analyze_out << ": " << result.bundle.manifest["doc_count"]
                << " documents, " << result.bundle.manifest["skipped"] << " skipped\n";
      return result.exit_code();
    }

    if (*merge) {
      std::vector<ReportBundle> bundles;
      for (const auto& d : merge_dirs) bundles.push_back(read_bundle(d));
      const auto merged = merge_reports(bundles);
      write_bundle(merged, merge_out);
      std::cout << "wrote " << merge_out << ": " << merged.manifest["doc_count"] << " documents\n";
      return 0;
    }

    if (*report) {
      print_report(read_bundle(report_dir));
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
