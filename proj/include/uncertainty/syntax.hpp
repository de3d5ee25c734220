#pragma once

// Penn-style bracketed constituency trees, syntactic distance between
// adjacent words, and entropy statistics over constituents.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "error.hpp"
#include "stats.hpp"

namespace uncertainty {

// A leaf carries word text in `label` and has no children.
struct TreeNode {
  std::string label;
  std::vector<TreeNode> children;

  bool is_leaf() const noexcept { return children.empty(); }
  bool is_preterminal() const noexcept { return children.size() == 1 && children[0].is_leaf(); }
};

struct ParseTree {
  TreeNode root;

  std::vector<std::string> leaves() const {
    std::vector<std::string> out;
    collect_leaves(root, out);
    return out;
  }

 private:
  static void collect_leaves(const TreeNode& node, std::vector<std::string>& out) {
    if (node.is_leaf()) {
      out.push_back(node.label);
      return;
    }
    for (const auto& c : node.children) collect_leaves(c, out);
  }
};

inline std::string unescape_leaf(std::string_view token) {
  if (token == "-LRB-") return "(";
  if (token == "-RRB-") return ")";
  if (token == "-LSB-") return "[";
  if (token == "-RSB-") return "]";
  if (token == "-LCB-") return "{";
  if (token == "-RCB-") return "}";
  return std::string(token);
}

inline std::string escape_leaf(std::string_view word) {
  if (word == "(") return "-LRB-";
  if (word == ")") return "-RRB-";
  return std::string(word);
}

namespace detail {

class BracketReader {
 public:
  explicit BracketReader(std::string_view text) : text_(text) {}

  ParseTree read() {
    skip_space();
    if (pos_ >= text_.size()) throw Error(ErrorCode::EmptyTree, "empty tree text");
    if (text_[pos_] != '(')
      throw Error(ErrorCode::UnbalancedBrackets, "tree must start with '('");
    TreeNode root = read_node(0);
    skip_space();
    if (pos_ < text_.size())
      throw Error(ErrorCode::UnbalancedBrackets, "trailing text after the tree");
    // "( (S ...) )" style wrappers carry no label.
    while (root.label.empty() && root.children.size() == 1 && !root.children[0].is_leaf())
      root = std::move(root.children[0]);
    return ParseTree{std::move(root)};
  }

 private:
  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  std::string_view read_atom() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])) &&
           text_[pos_] != '(' && text_[pos_] != ')')
      ++pos_;
    return text_.substr(start, pos_ - start);
  }

  TreeNode read_node(std::size_t depth) {
    ++pos_;  // '('
    TreeNode node;
    skip_space();
    if (pos_ < text_.size() && text_[pos_] != '(' && text_[pos_] != ')')
      node.label = std::string(read_atom());
    for (;;) {
      skip_space();
      if (pos_ >= text_.size())
        throw Error(ErrorCode::UnbalancedBrackets, "missing ')' at end of input");
      const char c = text_[pos_];
      if (c == ')') {
        ++pos_;
        break;
      }
      if (c == '(') {
        node.children.push_back(read_node(depth + 1));
      } else {
        node.children.push_back(TreeNode{unescape_leaf(read_atom()), {}});
      }
    }
    if (node.children.empty()) {
      if (node.label.empty() && depth == 0) throw Error(ErrorCode::EmptyTree, "empty tree '()'");
      throw Error(ErrorCode::EmptyTree, "constituent '" + node.label + "' has no children");
    }
    return node;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline ParseTree parse_bracketed_tree(std::string_view text) {
  return detail::BracketReader(text).read();
}

inline constexpr bool kStripPreterminals = true;

namespace detail {

// True when every leaf hangs from a single-child node, i.e. the tree carries
// a POS layer. Partially tagged trees have no layer to strip.
inline bool has_preterminal_layer(const TreeNode& node) {
  if (node.is_leaf()) return false;
  if (node.is_preterminal()) return true;
  for (const auto& c : node.children)
    if (!has_preterminal_layer(c)) return false;
  return true;
}

inline void linearize_into(const TreeNode& node, bool strip, std::string& out) {
  if (node.is_leaf()) {
    out += escape_leaf(node.label);
    return;
  }
  if (strip && node.is_preterminal()) {
    out += escape_leaf(node.children[0].label);
    return;
  }
  out += '(';
  out += node.label;
  for (const auto& c : node.children) {
    out += ' ';
    linearize_into(c, strip, out);
  }
  out += ')';
}

// Counts brackets since the previous leaf; each leaf flushes the count.
inline void count_brackets(const TreeNode& node, bool strip, std::size_t& pending,
                           bool& seen_leaf, std::vector<int>& out) {
  auto leaf = [&] {
    if (seen_leaf) out.push_back(static_cast<int>(pending));
    seen_leaf = true;
    pending = 0;
  };
  if (node.is_leaf() || (strip && node.is_preterminal())) {
    leaf();
    return;
  }
  ++pending;
  for (const auto& c : node.children) count_brackets(c, strip, pending, seen_leaf, out);
  ++pending;
}

}  // namespace detail

// Bracketed form of the tree; with strip, every POS-over-word node of a
// tagged tree is replaced by its word: (S (NP (DT The) (NN dog))) -> (S (NP The dog)).
inline std::string linearize(const ParseTree& tree, bool strip_preterminals = kStripPreterminals) {
  std::string out;
  detail::linearize_into(tree.root, strip_preterminals && detail::has_preterminal_layer(tree.root),
                         out);
  return out;
}

// Number of '(' and ')' strictly between consecutive leaves of the
// linearization. One value per adjacent leaf pair.
inline std::vector<int> syntactic_distances(const ParseTree& tree,
                                            bool strip_preterminals = kStripPreterminals) {
  std::vector<int> out;
  std::size_t pending = 0;
  bool seen_leaf = false;
  const bool strip = strip_preterminals && detail::has_preterminal_layer(tree.root);
  detail::count_brackets(tree.root, strip, pending, seen_leaf, out);
  return out;
}

// ---------------------------------------------------------------------------
// Leaf-to-word alignment

// For each word, the contiguous range of leaves overlapping it (inclusive).
struct LeafAlignment {
  std::vector<std::pair<std::size_t, std::size_t>> word_leaves;
  std::vector<std::pair<std::size_t, std::size_t>> leaf_words;
};

namespace detail {

inline std::string normalize_token(std::string_view s) {
  std::string out;
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) out += c;
  return out;
}

}  // namespace detail

// Exact match first; otherwise the parser's retokenization is reconciled by
// character offsets when both sides spell the same text.
inline std::optional<LeafAlignment> align_leaves(std::span<const std::string> leaves,
                                                 std::span<const std::string> words) {
  std::vector<std::string> ls, ws;
  for (const auto& l : leaves) ls.push_back(detail::normalize_token(l));
  for (const auto& w : words) ws.push_back(detail::normalize_token(w));
  if (ls.empty() || ws.empty()) return std::nullopt;

  LeafAlignment a;
  if (ls == ws) {
    for (std::size_t i = 0; i < ls.size(); ++i) {
      a.word_leaves.emplace_back(i, i);
      a.leaf_words.emplace_back(i, i);
    }
    return a;
  }

  std::string leaf_text, word_text;
  std::vector<std::pair<std::size_t, std::size_t>> leaf_chars, word_chars;
  for (const auto& l : ls) {
    if (l.empty()) return std::nullopt;
    leaf_chars.emplace_back(leaf_text.size(), leaf_text.size() + l.size());
    leaf_text += l;
  }
  for (const auto& w : ws) {
    if (w.empty()) return std::nullopt;
    word_chars.emplace_back(word_text.size(), word_text.size() + w.size());
    word_text += w;
  }
  if (leaf_text != word_text) return std::nullopt;

  // Both sides are ordered partitions of the same character range, so the
  // overlap relation is monotone and a two-pointer sweep finds it.
  a.word_leaves.assign(ws.size(), {0, 0});
  a.leaf_words.assign(ls.size(), {0, 0});
  std::vector<bool> word_seen(ws.size(), false);
  std::size_t w = 0;
  for (std::size_t l = 0; l < ls.size(); ++l) {
    while (word_chars[w].second <= leaf_chars[l].first) ++w;
    std::size_t last = w;
    while (last + 1 < ws.size() && word_chars[last + 1].first < leaf_chars[l].second) ++last;
    a.leaf_words[l] = {w, last};
    for (std::size_t k = w; k <= last; ++k) {
      if (!word_seen[k]) a.word_leaves[k].first = l;
      word_seen[k] = true;
      a.word_leaves[k].second = l;
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Entropy change by syntactic distance

inline constexpr double kPctChangeEpsilon = 1e-6;
inline constexpr double kPctChangeCap = 1e4;

// 100 (next - prev) / max(prev, eps), capped at +/-1e4.
inline double percent_entropy_change(double prev, double next) {
  const double pct = 100.0 * (next - prev) / std::max(prev, kPctChangeEpsilon);
  return std::clamp(pct, -kPctChangeCap, kPctChangeCap);
}

// One summary sentence ready for syntactic analysis: its parse, its words,
// and the first-piece entropy of every word.
struct SentenceSyntax {
  ParseTree tree;
  std::vector<std::string> words;
  std::vector<double> entropies;
};

// Distances between consecutive words. Words sharing a leaf are at distance 0.
inline std::vector<int> word_distances(const ParseTree& tree, const LeafAlignment& alignment,
                                       bool strip_preterminals = kStripPreterminals) {
  const auto leaf_distances = syntactic_distances(tree, strip_preterminals);
  std::vector<int> out;
  for (std::size_t j = 0; j + 1 < alignment.word_leaves.size(); ++j) {
    const std::size_t last = alignment.word_leaves[j].second;
    const std::size_t next_first = alignment.word_leaves[j + 1].first;
    out.push_back(last >= next_first ? 0 : leaf_distances[last]);
  }
  return out;
}

struct DistanceGroup {
  int distance = 0;
  std::size_t count = 0;
  std::optional<double> median_pct_change;
  std::optional<double> mean_pct_change;
};

struct DistanceStats {
  std::vector<DistanceGroup> groups;  // ascending distance
  std::optional<double> rank_correlation;
  std::size_t sentences = 0;
  std::size_t alignment_failures = 0;
};

inline DistanceStats group_by_distance(std::span<const int> distances,
                                       std::span<const double> pct_changes) {
  std::map<int, std::vector<double>> groups;
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < distances.size() && i < pct_changes.size(); ++i) {
    groups[distances[i]].push_back(pct_changes[i]);
    xs.push_back(static_cast<double>(distances[i]));
    ys.push_back(pct_changes[i]);
  }
  DistanceStats out;
  for (const auto& [d, values] : groups)
    out.groups.push_back({d, values.size(), stats::median(values), stats::mean(values)});
  out.rank_correlation = stats::spearman(xs, ys);
  return out;
}

// Mergeable raw (distance, percent change) observations.
class DistanceAccumulator {
 public:
  explicit DistanceAccumulator(bool strip_preterminals = kStripPreterminals)
      : strip_(strip_preterminals) {}

  // Returns false (and counts the failure) when the tree cannot be aligned.
  bool add(const SentenceSyntax& sentence) {
    ++sentences_;
    auto alignment = align_leaves(sentence.tree.leaves(), sentence.words);
    if (!alignment) {
      ++alignment_failures_;
      return false;
    }
    const auto d = word_distances(sentence.tree, *alignment, strip_);
    for (std::size_t j = 0; j < d.size(); ++j)
      points_.emplace_back(d[j],
                           percent_entropy_change(sentence.entropies[j], sentence.entropies[j + 1]));
    return true;
  }

  void add_point(int distance, double pct_change) { points_.emplace_back(distance, pct_change); }
  void add_counts(std::size_t sentences, std::size_t failures) {
    sentences_ += sentences;
    alignment_failures_ += failures;
  }

  void merge(const DistanceAccumulator& other) {
    points_.insert(points_.end(), other.points_.begin(), other.points_.end());
    sentences_ += other.sentences_;
    alignment_failures_ += other.alignment_failures_;
  }

  // Observations in canonical order.
  std::vector<std::pair<int, double>> points() const {
    auto p = points_;
    std::sort(p.begin(), p.end());
    return p;
  }
  std::size_t sentences() const noexcept { return sentences_; }
  std::size_t alignment_failures() const noexcept { return alignment_failures_; }

  DistanceStats finalize() const {
    std::vector<int> ds;
    std::vector<double> pcts;
    for (const auto& [d, pct] : points()) {
      ds.push_back(d);
      pcts.push_back(pct);
    }
    auto out = group_by_distance(ds, pcts);
    out.sentences = sentences_;
    out.alignment_failures = alignment_failures_;
    return out;
  }

 private:
  bool strip_;
  std::vector<std::pair<int, double>> points_;
  std::size_t sentences_ = 0;
  std::size_t alignment_failures_ = 0;
};

inline DistanceStats entropy_change_by_distance(std::span<const SentenceSyntax> sentences,
                                                bool strip_preterminals = kStripPreterminals) {
  DistanceAccumulator acc(strip_preterminals);
  for (const auto& s : sentences) acc.add(s);
  return acc.finalize();
}

// ---------------------------------------------------------------------------
// Production-rule entropies

inline constexpr std::size_t kDefaultMinRuleCount = 5;

struct ProductionStat {
  std::string rule;  // "NP -> CD NN NNS"
  std::string parent;
  std::vector<std::string> children;
  std::vector<double> child_mean_entropies;
  double mean_entropy = 0.0;
  std::size_t count = 0;
};

class ProductionAccumulator {
 public:
  struct RuleValues {
    std::string parent;
    std::vector<std::string> children;
    std::vector<std::vector<double>> child_values;  // per child position
    std::vector<double> occurrence_means;
  };

  // Visits every internal, non-preterminal node of the unstripped tree.
  // A constituent's entropy is the mean entropy of the words it spans.
  bool add(const SentenceSyntax& sentence) {
    const auto leaves = sentence.tree.leaves();
    auto alignment = align_leaves(leaves, sentence.words);
    if (!alignment) return false;
    std::size_t next_leaf = 0;
    visit(sentence.tree.root, *alignment, sentence.entropies, next_leaf);
    return true;
  }

  void add_occurrence(const std::string& parent, const std::vector<std::string>& children,
                      const std::vector<double>& child_entropies) {
    auto& rv = rules_[rule_name(parent, children)];
    if (rv.child_values.empty()) {
      rv.parent = parent;
      rv.children = children;
      rv.child_values.resize(children.size());
    }
    double total = 0.0;
    for (std::size_t i = 0; i < child_entropies.size(); ++i) {
      rv.child_values[i].push_back(child_entropies[i]);
      total += child_entropies[i];
    }
    rv.occurrence_means.push_back(total / static_cast<double>(child_entropies.size()));
  }

  // Restores serialized observations for one rule.
  void add_raw(const std::string& parent, const std::vector<std::string>& children,
               const std::vector<std::vector<double>>& child_values,
               const std::vector<double>& occurrence_means) {
    ProductionAccumulator one;
    auto& rv = one.rules_[rule_name(parent, children)];
    rv.parent = parent;
    rv.children = children;
    rv.child_values = child_values;
    rv.child_values.resize(children.size());
    rv.occurrence_means = occurrence_means;
    merge(one);
  }

  void merge(const ProductionAccumulator& other) {
    for (const auto& [name, src] : other.rules_) {
      auto& dst = rules_[name];
      if (dst.child_values.empty()) {
        dst.parent = src.parent;
        dst.children = src.children;
        dst.child_values.resize(src.children.size());
      }
      for (std::size_t i = 0; i < src.child_values.size(); ++i)
        dst.child_values[i].insert(dst.child_values[i].end(), src.child_values[i].begin(),
                                   src.child_values[i].end());
      dst.occurrence_means.insert(dst.occurrence_means.end(), src.occurrence_means.begin(),
                                  src.occurrence_means.end());
    }
  }

  const std::map<std::string, RuleValues>& rules() const noexcept { return rules_; }

  // Rules seen at least min_count times, highest mean entropy first.
  std::vector<ProductionStat> finalize(std::size_t min_count = kDefaultMinRuleCount) const {
    std::vector<ProductionStat> out;
    for (const auto& [name, rv] : rules_) {
      if (rv.occurrence_means.size() < min_count) continue;
      ProductionStat stat;
      stat.rule = name;
      stat.parent = rv.parent;
      stat.children = rv.children;
      for (const auto& values : rv.child_values)
        stat.child_mean_entropies.push_back(stats::mean(values).value_or(0.0));
      stat.mean_entropy = stats::mean(rv.occurrence_means).value_or(0.0);
      stat.count = rv.occurrence_means.size();
      out.push_back(std::move(stat));
    }
    std::sort(out.begin(), out.end(), [](const ProductionStat& a, const ProductionStat& b) {
      if (a.mean_entropy != b.mean_entropy) return a.mean_entropy > b.mean_entropy;
      return a.rule < b.rule;
    });
    return out;
  }

  static std::string rule_name(const std::string& parent,
                               const std::vector<std::string>& children) {
    std::string name = parent + " ->";
    for (const auto& c : children) name += " " + c;
    return name;
  }

 private:
  // Returns the inclusive leaf range covered by `node`.
  std::pair<std::size_t, std::size_t> visit(const TreeNode& node, const LeafAlignment& a,
                                            const std::vector<double>& entropies,
                                            std::size_t& next_leaf) {
    if (node.is_leaf()) {
      const std::size_t l = next_leaf++;
      return {l, l};
    }
    std::vector<std::pair<std::size_t, std::size_t>> child_ranges;
    for (const auto& c : node.children) child_ranges.push_back(visit(c, a, entropies, next_leaf));
    const std::pair<std::size_t, std::size_t> range{child_ranges.front().first,
                                                    child_ranges.back().second};
    if (node.is_preterminal()) return range;

    std::vector<std::string> labels;
    std::vector<double> child_entropies;
    for (std::size_t i = 0; i < node.children.size(); ++i) {
      labels.push_back(node.children[i].label);
      const std::size_t w0 = a.leaf_words[child_ranges[i].first].first;
      const std::size_t w1 = a.leaf_words[child_ranges[i].second].second;
      double total = 0.0;
      for (std::size_t w = w0; w <= w1; ++w) total += entropies[w];
      child_entropies.push_back(total / static_cast<double>(w1 - w0 + 1));
    }
    add_occurrence(node.label, labels, child_entropies);
    return range;
  }

  std::map<std::string, RuleValues> rules_;
};

inline std::vector<ProductionStat> production_entropy_table(
    std::span<const SentenceSyntax> sentences, std::size_t min_count = kDefaultMinRuleCount) {
  ProductionAccumulator acc;
  for (const auto& s : sentences) acc.add(s);
  return acc.finalize(min_count);
}

}  // namespace uncertainty
