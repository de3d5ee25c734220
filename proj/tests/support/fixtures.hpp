#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <uncertainty/uncertainty.hpp>

namespace fixtures {

using namespace uncertainty;

// One-hot step on `id` with uniform attention over L source tokens.
inline StepRecord one_hot_step(std::size_t index, std::size_t L, std::string piece = " w",
                               bool begins = true, TokenId id = 1) {
  StepRecord s;
  s.step_index = index;
  s.output_token_id = id;
  s.output_piece = std::move(piece);
  s.begins_word = begins;
  s.topk = {{id, 1.0}};
  s.tail_mass = 0.0;
  s.attention_row.assign(L, 1.0);
  return s;
}

inline std::vector<SourceToken> source_from_words(const std::vector<std::string>& words) {
  std::vector<SourceToken> out;
  for (std::size_t i = 0; i < words.size(); ++i)
    out.push_back({i, static_cast<TokenId>(100 + i), " " + words[i], true});
  return out;
}

// Document whose summary is `words`, one piece per word, all one-hot.
inline TraceDocument doc_from_words(const std::vector<std::string>& source,
                                    const std::vector<std::string>& summary,
                                    std::string doc_id = "d") {
  TraceDocument doc;
  doc.doc_id = std::move(doc_id);
  doc.source_tokens = source_from_words(source);
  for (std::size_t t = 0; t < summary.size(); ++t)
    doc.steps.push_back(one_hot_step(t, source.size(), " " + summary[t]));
  return doc;
}

// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("uncertainty-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_trace(const std::filesystem::path& path, const std::vector<TraceDocument>& docs,
                        const std::vector<std::string>& extra_lines = {}) {
  std::ofstream out(path, std::ios::binary);
  out << trace_header_line() << "\n";
  for (const auto& d : docs) out << serialize_trace_line(d) << "\n";
  for (const auto& l : extra_lines) out << l << "\n";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace fixtures
