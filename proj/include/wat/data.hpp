#pragma once

// Character corpus, LM window splits and the bracket-balance task.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "wat/errors.hpp"
#include "wat/ops.hpp"
#include "wat/rng.hpp"

namespace wat {

/// Bijective token <-> id map with dense ids.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens, std::optional<TokenId> pad = std::nullopt)
      : tokens_(std::move(tokens)), pad_(pad) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw InputError("duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }

  std::size_t size() const { return tokens_.size(); }
  std::optional<TokenId> pad_id() const { return pad_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) throw InputError("token '" + token + "' is not in the vocabulary");
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// One token per character.
  std::vector<TokenId> encode(const std::string& text) const {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(id(std::string(1, c)));
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId i : ids) out += token(i);
    return out;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_ && pad_ == o.pad_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> ids_;
  std::optional<TokenId> pad_;
};

/// Sorted unique characters of `text`.
inline Vocab build_char_vocab(const std::string& text) {
  if (text.empty()) throw InputError("cannot build a vocabulary from empty text");
  std::set<unsigned char> chars(text.begin(), text.end());
  std::vector<std::string> tokens;
  for (unsigned char c : chars) tokens.emplace_back(1, static_cast<char>(c));
  return Vocab(std::move(tokens));
}

struct CharCorpus {
  std::string text;
  Vocab vocab;
  std::vector<TokenId> ids;
};

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline CharCorpus load_corpus(const std::filesystem::path& path) {
  CharCorpus c;
  c.text = read_text_file(path);
  c.vocab = build_char_vocab(c.text);
  c.ids = c.vocab.encode(c.text);
  return c;
}

/// Corpus location: explicit path, then $WAT_CORPUS, then
/// data/tinyshakespeare.txt under the working directory.
inline std::filesystem::path resolve_corpus_path(const std::string& explicit_path) {
  namespace fs = std::filesystem;
  std::vector<fs::path> candidates;
  if (!explicit_path.empty()) {
    if (!fs::exists(explicit_path)) throw FileError("corpus file not found: " + explicit_path);
    return explicit_path;
  }
  if (const char* env = std::getenv("WAT_CORPUS"); env && *env) candidates.emplace_back(env);
  candidates.emplace_back("data/tinyshakespeare.txt");
  for (const auto& p : candidates)
    if (fs::exists(p)) return p;
  throw FileError(
      "corpus not found; pass --corpus PATH, set WAT_CORPUS, or place the text at "
      "data/tinyshakespeare.txt (tools/fetch_corpus.sh downloads it)");
}

/// Window start offsets for training and testing. Windows overlap with
/// stride 1.
struct LmSplit {
  std::size_t train_start = 0;
  std::size_t train_count = 50000;
  std::size_t test_start = 50512;
  std::size_t test_count = 5000;
};

inline LmSplit lm_splits(std::size_t corpus_len, std::size_t window, LmSplit split = {}) {
  const std::size_t needed = split.test_start + split.test_count - 1 + window;
  if (corpus_len < needed) {
    throw InputError("corpus has " + std::to_string(corpus_len) + " characters, the split needs " +
                     std::to_string(needed));
  }
  if (split.train_start + split.train_count - 1 + window > split.test_start) {
    throw InputError("train windows overlap the test range");
  }
  return split;
}

// ---------------------------------------------------------------------------
// Bracket balance
// ---------------------------------------------------------------------------

inline Vocab bracket_vocab() { return Vocab({"(", ")", "[", "]", "{", "}", "<PAD>"}, TokenId{6}); }

namespace detail {

inline int bracket_kind(char c) {
  switch (c) {
    case '(': case ')': return 0;
    case '[': case ']': return 1;
    case '{': case '}': return 2;
    default: return -1;
  }
}

inline bool is_open(char c) { return c == '(' || c == '[' || c == '{'; }

constexpr char kOpen[3] = {'(', '[', '{'};
constexpr char kClose[3] = {')', ']', '}'};

}  // namespace detail

/// Stack machine: push on open, pop-and-match on close.
inline bool is_balanced(const std::string& s) {
  std::vector<char> stack;
  for (char c : s) {
    const int kind = detail::bracket_kind(c);
    if (kind < 0) throw InputError(std::string("not a bracket token: '") + c + "'");
    if (detail::is_open(c)) {
      stack.push_back(c);
    } else {
      if (stack.empty() || detail::bracket_kind(stack.back()) != kind) return false;
      stack.pop_back();
    }
  }
  return stack.empty();
}

inline std::size_t max_depth(const std::string& s) {
  std::size_t depth = 0, best = 0;
  for (char c : s) {
    if (detail::is_open(c)) best = std::max(best, ++depth);
    else if (depth > 0) --depth;
  }
  return best;
}

struct BracketExample {
  std::string text;
  int label = 0;              // 1 balanced, 0 unbalanced
  int corruption_distance = 0;  // positions changed from the source string
};

/// Random balanced string of exactly `length` tokens.
inline BracketExample gen_balanced(Rng& rng, std::size_t length) {
  if (length < 2 || length % 2 != 0) {
    throw InputError("balanced length must be even and >= 2, got " + std::to_string(length));
  }
  std::string s;
  s.reserve(length);
  std::vector<int> stack;
  while (s.size() < length) {
    const std::size_t remaining = length - s.size();
    const bool can_open = stack.size() + 2 <= remaining;
    const bool can_close = !stack.empty();
    if (can_open && (!can_close || rng.below(2) == 0)) {
      const int kind = static_cast<int>(rng.below(3));
      stack.push_back(kind);
      s += detail::kOpen[kind];
    } else {
      s += detail::kClose[stack.back()];
      stack.pop_back();
    }
  }
  if (!is_balanced(s)) throw NumericError("balanced generator produced an unbalanced string");
  return {std::move(s), 1, 0};
}

/// A balanced string with one small corruption: replace a token, swap two
/// positions, or flip one bracket's direction. Resampled until unbalanced.
inline BracketExample gen_unbalanced(Rng& rng, std::size_t length) {
  static const std::string kAll = "()[]{}";
  for (;;) {
    const std::string src = gen_balanced(rng, length).text;
    std::string s = src;
    switch (rng.below(3)) {
      case 0: {
        const std::size_t i = rng.below(length);
        char c;
        do c = kAll[rng.below(6)];
        while (c == s[i]);
        s[i] = c;
        break;
      }
      case 1: {
        const std::size_t i = rng.below(length);
        std::size_t j;
        do j = rng.below(length);
        while (j == i || s[j] == s[i]);
        std::swap(s[i], s[j]);
        break;
      }
      default: {
        const std::size_t i = rng.below(length);
        const int kind = detail::bracket_kind(s[i]);
        s[i] = detail::is_open(s[i]) ? detail::kClose[kind] : detail::kOpen[kind];
        break;
      }
    }
    if (is_balanced(s)) continue;
    int dist = 0;
    for (std::size_t i = 0; i < length; ++i) dist += s[i] != src[i];
    return {std::move(s), 0, dist};
  }
}

struct BracketDataset {
  std::vector<BracketExample> train;
  std::vector<BracketExample> val;
};

/// Class-balanced train/val splits; lengths uniform over even values in
/// [l_min, l_max].
inline BracketDataset make_bracket_dataset(Rng& rng, std::size_t n = 2000, std::size_t l_min = 512,
                                           std::size_t l_max = 1024, double train_fraction = 0.8) {
  if (l_min < 2 || l_min % 2 || l_max % 2 || l_max < l_min) {
    throw InputError("bracket lengths must be even with 2 <= l_min <= l_max");
  }
  const std::size_t n_train = static_cast<std::size_t>(static_cast<double>(n) * train_fraction + 0.5);
  if (n_train % 2 || (n - n_train) % 2) throw InputError("split sizes must be even for class balance");
  const std::size_t choices = (l_max - l_min) / 2 + 1;
  auto make_split = [&](std::size_t count) {
    std::vector<BracketExample> out;
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t len = l_min + 2 * rng.below(choices);
      out.push_back(i < count / 2 ? gen_balanced(rng, len) : gen_unbalanced(rng, len));
    }
    rng.shuffle(out);
    return out;
  };
  BracketDataset ds;
  ds.train = make_split(n_train);
  ds.val = make_split(n - n_train);
  return ds;
}

/// Cache format: one `label<TAB>string` record per line.
inline void write_bracket_tsv(const std::filesystem::path& path, const std::vector<BracketExample>& xs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write " + path.string());
  for (const auto& x : xs) out << x.label << '\t' << x.text << '\n';
}

inline std::vector<BracketExample> read_bracket_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open " + path.string());
  std::vector<BracketExample> xs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected label<TAB>brackets");
    }
    BracketExample x;
    x.label = std::stoi(line.substr(0, tab));
    x.text = line.substr(tab + 1);
    if (x.label != static_cast<int>(is_balanced(x.text))) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": label disagrees with the oracle");
    }
    xs.push_back(std::move(x));
  }
  return xs;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// Row-major token matrix [rows, cols] with optional per-row labels and pad
/// mask.
struct Batch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> tokens;
  std::vector<TokenId> labels;
  std::vector<std::uint8_t> mask;
};

/// Windows ids[o, o + window) for each start offset.
inline Batch lm_batch(std::span<const TokenId> ids, std::span<const std::size_t> offsets, std::size_t window) {
  Batch b;
  b.rows = offsets.size();
  b.cols = window;
  b.tokens.reserve(b.rows * window);
  for (std::size_t o : offsets) {
    if (o + window > ids.size()) throw IndexError("window at offset " + std::to_string(o) + " runs past the corpus");
    b.tokens.insert(b.tokens.end(), ids.begin() + static_cast<std::ptrdiff_t>(o),
                    ids.begin() + static_cast<std::ptrdiff_t>(o + window));
  }
  return b;
}

/// Examples right-padded to the longest one with the vocabulary's pad id.
inline Batch bracket_batch(std::span<const BracketExample* const> xs, const Vocab& vocab) {
  Batch b;
  b.rows = xs.size();
  for (const auto* x : xs) b.cols = std::max(b.cols, x->text.size());
  const TokenId pad = vocab.pad_id().value_or(0);
  b.tokens.assign(b.rows * b.cols, pad);
  b.mask.assign(b.rows * b.cols, 0);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto ids = vocab.encode(xs[r]->text);
    std::copy(ids.begin(), ids.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(r * b.cols));
    std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(r * b.cols), ids.size(), 1);
    b.labels.push_back(xs[r]->label);
  }
  return b;
}

}  // namespace wat
