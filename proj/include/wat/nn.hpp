#pragma once

// Learned layers shared by the WAT models and the Transformer baseline.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "wat/ops.hpp"
#include "wat/rng.hpp"

namespace wat {

namespace init {

template <class T>
BasicTensor<T> uniform(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(numel_of(shape));
  for (T& x : v) x = static_cast<T>(rng.uniform(static_cast<float>(-bound), static_cast<float>(bound)));
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
BasicTensor<T> normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(numel_of(shape));
  for (T& x : v) x = static_cast<T>(rng.normal(0.0f, static_cast<float>(stddev)));
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
BasicTensor<T> constant(Shape shape, double value) {
  return BasicTensor<T>(std::move(shape), static_cast<T>(value), true);
}

}  // namespace init

/// y = x W + b with W stored [d_in, d_out].
template <class T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;  // undefined when the layer has no bias

  Linear() = default;
  Linear(std::size_t d_in, std::size_t d_out, bool with_bias, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    weight = init::uniform<T>({d_in, d_out}, bound, rng);
    if (with_bias) bias = init::uniform<T>({d_out}, bound, rng);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return linear(x, weight, bias.defined() ? &bias : nullptr);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (bias.defined()) f(prefix + ".bias", bias);
  }
};

template <class T>
struct EmbeddingTable {
  BasicTensor<T> weight;  // [|V|, d]

  EmbeddingTable() = default;
  EmbeddingTable(std::size_t vocab, std::size_t d, Rng& rng)
      : weight(init::normal<T>({vocab, d}, 1.0, rng)) {}

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
  }
};

enum class PositionMode { learned, sinusoidal, none };

/// Additive position rows. Learned tables are parameters; sinusoidal tables
/// are fixed and excluded from the parameter list.
template <class T>
struct PositionalTable {
  PositionMode mode = PositionMode::none;
  BasicTensor<T> weight;  // [n_max, d], undefined for none

  PositionalTable() = default;
  PositionalTable(PositionMode m, std::size_t n_max, std::size_t d, Rng& rng) : mode(m) {
    if (mode == PositionMode::learned) {
      weight = init::normal<T>({n_max, d}, 0.02, rng);
    } else if (mode == PositionMode::sinusoidal) {
      std::vector<T> v(n_max * d);
      for (std::size_t p = 0; p < n_max; ++p)
        for (std::size_t i = 0; i < d; ++i) {
          const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
          const double a = static_cast<double>(p) * freq;
          v[p * d + i] = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
        }
      weight = BasicTensor<T>({n_max, d}, std::move(v), false);
    }
  }

  bool trainable() const { return mode == PositionMode::learned; }
  std::size_t n_max() const { return weight.defined() ? weight.dim(0) : SIZE_MAX; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    if (trainable()) f(prefix + ".weight", weight);
  }
};

/// Kernel-3 convolution over time. Causal mode pads k-1 zeros on the left
/// only; symmetric mode pads one on each side.
template <class T>
struct CausalConv {
  static constexpr std::size_t kKernel = 3;
  BasicTensor<T> kernel;  // [d, d, k]
  BasicTensor<T> bias;    // [d]
  bool symmetric = false;

  CausalConv() = default;
  CausalConv(std::size_t d, bool symmetric_padding, Rng& rng) : symmetric(symmetric_padding) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d * kKernel));
    kernel = init::uniform<T>({d, d, kKernel}, bound, rng);
    bias = init::uniform<T>({d}, bound, rng);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".kernel", kernel);
    f(prefix + ".bias", bias);
  }
};

/// Post-norm Transformer encoder layer: attention then ReLU feed-forward,
/// each followed by residual add and layer norm.
template <class T>
struct AttentionBlock {
  std::size_t heads = 1;
  Linear<T> q, k, v, out, ff1, ff2;
  BasicTensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  AttentionBlock() = default;
  AttentionBlock(std::size_t d, std::size_t n_heads, std::size_t ff_mult, Rng& rng) : heads(n_heads) {
    if (n_heads == 0 || d % n_heads != 0) {
      throw ConfigError("embed dim " + std::to_string(d) + " is not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    // in-projection: xavier-uniform over the stacked [3d, d] matrix, zero bias
    const double in_bound = std::sqrt(6.0 / static_cast<double>(d + 3 * d));
    for (Linear<T>* p : {&q, &k, &v}) {
      p->weight = init::uniform<T>({d, d}, in_bound, rng);
      p->bias = init::constant<T>({d}, 0.0);
    }
    out = Linear<T>(d, d, true, rng);
    out.bias = init::constant<T>({d}, 0.0);
    ff1 = Linear<T>(d, ff_mult * d, true, rng);
    ff2 = Linear<T>(ff_mult * d, d, true, rng);
    ln1_gain = init::constant<T>({d}, 1.0);
    ln1_bias = init::constant<T>({d}, 0.0);
    ln2_gain = init::constant<T>({d}, 1.0);
    ln2_bias = init::constant<T>({d}, 0.0);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    q.visit(prefix + ".q", f);
    k.visit(prefix + ".k", f);
    v.visit(prefix + ".v", f);
    out.visit(prefix + ".out", f);
    f(prefix + ".ln1.gain", ln1_gain);
    f(prefix + ".ln1.bias", ln1_bias);
    ff1.visit(prefix + ".ff1", f);
    ff2.visit(prefix + ".ff2", f);
    f(prefix + ".ln2.gain", ln2_gain);
    f(prefix + ".ln2.bias", ln2_bias);
  }
};

/// e_t = E[x_t] + P[t] for tokens [B, n] (row-major).
template <class T>
BasicTensor<T> embed_positions(std::span<const TokenId> tokens, std::size_t B, std::size_t n,
                               const EmbeddingTable<T>& E, const PositionalTable<T>& P) {
  BasicTensor<T> e = embedding(tokens, B, n, E.weight);
  if (P.mode == PositionMode::none) return e;
  if (n > P.n_max()) {
    throw ConfigError("sequence length " + std::to_string(n) + " exceeds positional table size " +
                      std::to_string(P.n_max()));
  }
  return add(e, narrow(P.weight, 0, 0, n));
}

template <class T>
BasicTensor<T> causal_conv(const BasicTensor<T>& e, const CausalConv<T>& layer) {
  const std::size_t k = CausalConv<T>::kKernel;
  return layer.symmetric ? conv1d_time(e, layer.kernel, layer.bias, k / 2, k / 2)
                         : conv1d_time(e, layer.kernel, layer.bias, k - 1, 0);
}

/// n_t = c_t * sigmoid(W c_t).
template <class T>
BasicTensor<T> input_gate(const BasicTensor<T>& c, const Linear<T>& w) {
  return mul(c, sigmoid(w(c)));
}

/// Embedding, positions, convolution and input gate of the WAT models.
template <class T>
struct Encoder {
  EmbeddingTable<T> embed;
  PositionalTable<T> pos;
  CausalConv<T> conv;
  Linear<T> gate;

  Encoder() = default;
  Encoder(std::size_t vocab, std::size_t d, PositionMode pos_mode, std::size_t n_max,
          bool symmetric_conv, bool gate_bias, Rng& rng)
      : embed(vocab, d, rng),
        pos(pos_mode, n_max, d, rng),
        conv(d, symmetric_conv, rng),
        gate(d, d, gate_bias, rng) {}

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    embed.visit(prefix + ".embed", f);
    pos.visit(prefix + ".pos", f);
    conv.visit(prefix + ".conv", f);
    gate.visit(prefix + ".gate", f);
  }
};

/// Gated node sequence [B, n, d] for tokens [B, n].
template <class T>
BasicTensor<T> encode(std::span<const TokenId> tokens, std::size_t B, std::size_t n,
                      const Encoder<T>& enc) {
  return input_gate(causal_conv(embed_positions(tokens, B, n, enc.embed, enc.pos), enc.conv), enc.gate);
}

/// Attention counters (B * H * n * n score entries per layer call).
struct AttentionStats {
  std::uint64_t scores = 0;
};

/// One encoder layer over x [B, n, d]. `causal` hides keys after each
/// query; a non-empty key mask [B, n] hides padded keys. When `weights` is
/// given it receives the attention matrix [B, H, n, n].
template <class T>
BasicTensor<T> causal_self_attention(const BasicTensor<T>& x, const AttentionBlock<T>& blk,
                                     bool causal = true, std::span<const std::uint8_t> key_mask = {},
                                     AttentionStats* stats = nullptr,
                                     BasicTensor<T>* weights = nullptr) {
  if (x.rank() != 3) throw DimensionError("attention input must be [B, n, d], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), n = x.dim(1), d = x.dim(2), H = blk.heads;
  if (d % H != 0) {
    throw ConfigError("embed dim " + std::to_string(d) + " is not divisible by " +
                      std::to_string(H) + " heads");
  }
  const std::size_t hd = d / H;
  auto heads_first = [&](const BasicTensor<T>& t) { return swap_axes_12(reshape(t, {B, n, H, hd})); };
  const BasicTensor<T> q = heads_first(blk.q(x));
  const BasicTensor<T> k = heads_first(blk.k(x));
  const BasicTensor<T> v = heads_first(blk.v(x));
  const BasicTensor<T> scores = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(hd)));
  const BasicTensor<T> p = masked_softmax(scores, causal, key_mask);
  if (stats) stats->scores += B * H * n * n;
  if (weights) *weights = p;
  const BasicTensor<T> ctx = reshape(swap_axes_12(bmm(p, v)), {B, n, d});
  const BasicTensor<T> h1 = layer_norm(add(x, blk.out(ctx)), blk.ln1_gain, blk.ln1_bias);
  const BasicTensor<T> ff = blk.ff2(relu(blk.ff1(h1)));
  return layer_norm(add(h1, ff), blk.ln2_gain, blk.ln2_bias);
}

}  // namespace wat
