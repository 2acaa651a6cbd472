#pragma once

// WAT V1/V2/V3, the Transformer baseline and the two classifier heads.

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wat/nn.hpp"
#include "wat/tree.hpp"

namespace wat {

enum class Variant { wat_v1, wat_v2, wat_v3, transformer };
enum class Task { lm_one_to_one, lm_seq2seq, classify };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::wat_v1: return "wat_v1";
    case Variant::wat_v2: return "wat_v2";
    case Variant::wat_v3: return "wat_v3";
    case Variant::transformer: return "transformer";
  }
  return "?";
}

inline const char* to_string(Task t) {
  switch (t) {
    case Task::lm_one_to_one: return "lm_one_to_one";
    case Task::lm_seq2seq: return "lm_seq2seq";
    case Task::classify: return "classify";
  }
  return "?";
}

inline const char* to_string(PositionMode p) {
  switch (p) {
    case PositionMode::learned: return "learned";
    case PositionMode::sinusoidal: return "sinusoidal";
    case PositionMode::none: return "none";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::wat_v1, Variant::wat_v2, Variant::wat_v3, Variant::transformer})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown model variant '" + s + "'");
}

inline Task parse_task(const std::string& s) {
  for (Task t : {Task::lm_one_to_one, Task::lm_seq2seq, Task::classify})
    if (s == to_string(t)) return t;
  throw ConfigError("unknown task '" + s + "'");
}

inline PositionMode parse_position_mode(const std::string& s) {
  for (PositionMode p : {PositionMode::learned, PositionMode::sinusoidal, PositionMode::none})
    if (s == to_string(p)) return p;
  throw ConfigError("unknown position mode '" + s + "'");
}

struct ModelConfig {
  Variant variant = Variant::wat_v3;
  Task task = Task::lm_seq2seq;
  std::size_t embed_dim = 40;
  std::size_t vocab_size = 65;
  std::size_t seq_len = 128;
  std::size_t chunk_size = 32;
  std::size_t n_max = 2048;
  PositionMode positions = PositionMode::learned;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ff_mult = 4;
  std::size_t num_classes = 2;
  bool v1_symmetric_conv = false;
  bool input_gate_bias = true;
  bool merge_bias = true;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (embed_dim == 0 || vocab_size == 0) fail("embed_dim and vocab_size must be positive");
    if (task != Task::classify && seq_len < 2) fail("seq_len must be at least 2");
    if (positions != PositionMode::none && task != Task::classify && seq_len > n_max)
      fail("seq_len " + std::to_string(seq_len) + " exceeds n_max " + std::to_string(n_max));
    switch (variant) {
      case Variant::wat_v1:
        if (task == Task::lm_seq2seq) fail("wat_v1 supports lm_one_to_one and classify only");
        break;
      case Variant::wat_v2:
        if (task != Task::lm_seq2seq) fail("wat_v2 supports lm_seq2seq only");
        break;
      case Variant::wat_v3:
        if (task == Task::lm_one_to_one) fail("wat_v3 supports lm_seq2seq and classify only");
        if (chunk_size == 0) fail("chunk_size must be positive");
        if (task == Task::lm_seq2seq && seq_len % chunk_size != 0)
          fail("seq_len " + std::to_string(seq_len) + " is not a multiple of chunk_size " +
               std::to_string(chunk_size));
        break;
      case Variant::transformer:
        if (heads == 0 || embed_dim % heads != 0)
          fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
               std::to_string(heads));
        if (layers == 0) fail("transformer needs at least one layer");
        break;
    }
  }

  bool is_wat() const { return variant != Variant::transformer; }
};

/// Operation counters of the most recent forward pass.
struct ModelStats {
  MergeStats merges;
  AttentionStats attention;
};

template <class T>
class Model {
 public:
  using Named = std::pair<std::string, BasicTensor<T>>;

  Model(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.embed_dim;
    const std::size_t n_pos = cfg_.positions == PositionMode::none ? 0 : cfg_.n_max;
    if (cfg_.is_wat()) {
      enc_ = Encoder<T>(cfg_.vocab_size, d, cfg_.positions, n_pos, cfg_.v1_symmetric_conv,
                        cfg_.input_gate_bias, rng);
      cell_ = MergeCell<T>(d, cfg_.merge_bias, rng);
      if (cfg_.variant == Variant::wat_v3) global_ = Linear<T>(d, d, true, rng);
    } else {
      tok_ = EmbeddingTable<T>(cfg_.vocab_size, d, rng);
      pos_ = PositionalTable<T>(cfg_.positions, n_pos, d, rng);
      for (std::size_t i = 0; i < cfg_.layers; ++i) blocks_.emplace_back(d, cfg_.heads, cfg_.ff_mult, rng);
    }
    const std::size_t out = cfg_.task == Task::classify ? cfg_.num_classes : cfg_.vocab_size;
    head_ = Linear<T>(head_input_dim(), out, true, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const ModelStats& stats() const { return stats_; }
  MergeCell<T>& cell() { return cell_; }
  const Encoder<T>& encoder() const { return enc_; }

  /// Trainable parameters in a fixed order; the tensors share storage with
  /// the model.
  std::vector<Named> parameters() const {
    std::vector<Named> out;
    const_cast<Model*>(this)->visit([&](const std::string& n, BasicTensor<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (const auto& [n, t] : parameters()) total += t.numel();
    return total;
  }

  /// Replaces every parameter handle, in parameters() order.
  void assign(const std::vector<BasicTensor<T>>& values) {
    std::size_t i = 0;
    visit([&](const std::string& n, BasicTensor<T>& t) {
      if (i >= values.size() || values[i].shape() != t.shape()) {
        throw DimensionError("parameter " + n + " does not match the supplied tensor list");
      }
      t = values[i++];
    });
    if (i != values.size()) throw DimensionError("too many tensors supplied to Model::assign");
  }

  /// Copy in another scalar type.
  template <class U>
  Model<U> cast() const {
    Rng scratch(0);
    Model<U> m(cfg_, scratch);
    std::vector<BasicTensor<U>> values;
    for (const auto& [n, t] : parameters()) values.push_back(t.template cast<U>());
    m.assign(values);
    return m;
  }

  /// One prediction per row from tokens [B, n]: logits [B, |V|].
  BasicTensor<T> forward_one(std::span<const TokenId> tokens, std::size_t B, std::size_t n) const {
    stats_ = {};
    if (cfg_.task != Task::lm_one_to_one) throw ConfigError("model is not configured for lm_one_to_one");
    if (n < 2) throw ConfigError("one-to-one prediction needs at least 2 input tokens");
    if (cfg_.variant == Variant::wat_v1) {
      const BasicTensor<T> nodes = encode(tokens, B, n, enc_);
      const BasicTensor<T> root = tree_reduce(narrow(nodes, 1, 0, n - 1), cell_, &stats_.merges);
      const BasicTensor<T> context =
          concat_last(reshape(root, {B, cfg_.embed_dim}), select_time(nodes, n - 1));
      return head_(context);
    }
    const BasicTensor<T> h = transformer_trunk(tokens, B, n, true, {});
    return head_(select_time(h, n - 1));
  }

  /// Next-token logits at every position of tokens [B, n]: [B, n, |V|].
  /// Position t only sees tokens 0..t.
  BasicTensor<T> forward_seq(std::span<const TokenId> tokens, std::size_t B, std::size_t n) const {
    stats_ = {};
    if (cfg_.task != Task::lm_seq2seq) throw ConfigError("model is not configured for lm_seq2seq");
    switch (cfg_.variant) {
      case Variant::wat_v2:
        return head_(causal_scan(encode(tokens, B, n, enc_), cell_, &stats_.merges));
      case Variant::wat_v3:
        return head_(v3_nodes(encode(tokens, B, n, enc_)));
      case Variant::transformer:
        return head_(transformer_trunk(tokens, B, n, true, {}));
      default:
        throw ConfigError("variant has no seq2seq head");
    }
  }

  /// Class logits [B, classes] for right-padded tokens [B, L]; mask[b, t] is
  /// 1 on real tokens, which must form a prefix of every row.
  BasicTensor<T> forward_classify(std::span<const TokenId> tokens, std::span<const std::uint8_t> mask,
                                  std::size_t B, std::size_t L) const {
    stats_ = {};
    if (cfg_.task != Task::classify) throw ConfigError("model is not configured for classify");
    if (tokens.size() != B * L || mask.size() != B * L) {
      throw DimensionError("classify: tokens/mask do not match [" + std::to_string(B) + ", " +
                           std::to_string(L) + "]");
    }
    const std::vector<std::size_t> lengths = prefix_lengths(mask, B, L);
    switch (cfg_.variant) {
      case Variant::wat_v1: {
        const BasicTensor<T> nodes = encode(tokens, B, L, enc_);
        const BasicTensor<T> pooled = masked_mean_time(nodes, mask);
        return head_(concat_last(pooled, prefix_roots(nodes, lengths)));
      }
      case Variant::wat_v3: {
        const std::size_t K = cfg_.chunk_size;
        const std::size_t Lp = (L + K - 1) / K * K;
        std::vector<TokenId> tk(B * Lp, 0);
        std::vector<std::uint8_t> mk(B * Lp, 0);
        for (std::size_t b = 0; b < B; ++b) {
          std::copy_n(tokens.begin() + b * L, L, tk.begin() + b * Lp);
          std::copy_n(mask.begin() + b * L, L, mk.begin() + b * Lp);
        }
        return head_(masked_mean_time(v3_nodes(encode<T>(tk, B, Lp, enc_)), std::span<const std::uint8_t>(mk)));
      }
      case Variant::transformer:
        return head_(masked_mean_time(transformer_trunk(tokens, B, L, false, mask), mask));
      default:
        throw ConfigError("variant has no classification head");
    }
  }

  template <class F>
  void visit(F&& f) {
    if (cfg_.is_wat()) {
      enc_.visit("encoder", f);
      cell_.visit("merge", f);
      if (cfg_.variant == Variant::wat_v3) global_.visit("global", f);
    } else {
      tok_.visit("embed", f);
      pos_.visit("pos", f);
      for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit("layer" + std::to_string(i), f);
    }
    head_.visit("head", f);
  }

 private:
  std::size_t head_input_dim() const {
    const std::size_t d = cfg_.embed_dim;
    if (cfg_.variant == Variant::wat_v1) return 2 * d;
    return d;
  }

  BasicTensor<T> v3_nodes(const BasicTensor<T>& nodes) const {
    const std::size_t K = cfg_.chunk_size;
    const BasicTensor<T> summaries = chunk_summaries(chunk_partition(nodes, K), cell_, &stats_.merges);
    return inject_global_context(nodes, summaries, global_, K);
  }

  BasicTensor<T> transformer_trunk(std::span<const TokenId> tokens, std::size_t B, std::size_t n,
                                   bool causal, std::span<const std::uint8_t> key_mask) const {
    BasicTensor<T> h = embed_positions(tokens, B, n, tok_, pos_);
    for (const auto& blk : blocks_) h = causal_self_attention(h, blk, causal, key_mask, &stats_.attention);
    return h;
  }

  static std::vector<std::size_t> prefix_lengths(std::span<const std::uint8_t> mask, std::size_t B,
                                                 std::size_t L) {
    std::vector<std::size_t> lengths(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t len = 0;
      while (len < L && mask[b * L + len]) ++len;
      for (std::size_t t = len; t < L; ++t)
        if (mask[b * L + t]) throw PreconditionError("pad mask of row " + std::to_string(b) + " is not a prefix");
      if (len == 0) throw PreconditionError("row " + std::to_string(b) + " has no real tokens");
      lengths[b] = len;
    }
    return lengths;
  }

  /// Tree root over the real prefix of every row, [B, d]. Rows of equal
  /// length are reduced together.
  BasicTensor<T> prefix_roots(const BasicTensor<T>& nodes, const std::vector<std::size_t>& lengths) const {
    const std::size_t B = nodes.dim(0), d = nodes.dim(2);
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t b = 0; b < B; ++b) groups[lengths[b]].push_back(b);
    std::vector<BasicTensor<T>> per_row(B);
    for (const auto& [len, rows] : groups) {
      std::vector<BasicTensor<T>> parts;
      for (std::size_t b : rows) parts.push_back(narrow(narrow(nodes, 0, b, 1), 1, 0, len));
      const BasicTensor<T> roots =
          tree_reduce(parts.size() == 1 ? parts[0] : concat(parts, 0), cell_, &stats_.merges);
      for (std::size_t i = 0; i < rows.size(); ++i) per_row[rows[i]] = narrow(roots, 0, i, 1);
    }
    return reshape(concat(per_row, 0), {B, d});
  }

  ModelConfig cfg_;
  Encoder<T> enc_;
  MergeCell<T> cell_;
  Linear<T> global_;
  EmbeddingTable<T> tok_;
  PositionalTable<T> pos_;
  std::vector<AttentionBlock<T>> blocks_;
  Linear<T> head_;
  mutable ModelStats stats_;
};

}  // namespace wat
