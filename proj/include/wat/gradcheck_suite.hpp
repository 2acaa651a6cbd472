#pragma once

// Finite-difference checks for every differentiable primitive and every full
// model at tiny shapes, plus a corrupted-rule fixture that the harness must
// flag.

#include <functional>
#include <string>
#include <vector>

#include "wat/gradcheck.hpp"
#include "wat/models.hpp"
#include "wat/train.hpp"

namespace wat {

struct SuiteEntry {
  std::string group;  // "primitive" or "model"
  GradcheckResult result;
  double tolerance = 0.0;
  bool passed() const { return result.max_rel_error < tolerance; }
};

struct SuiteReport {
  std::vector<SuiteEntry> entries;
  bool corrupted_rule_detected = false;
  double seconds = 0.0;

  bool all_passed() const {
    if (!corrupted_rule_detected) return false;
    for (const auto& e : entries)
      if (!e.passed()) return false;
    return true;
  }
  double worst(const std::string& group) const {
    double w = 0.0;
    for (const auto& e : entries)
      if (e.group == group) w = std::max(w, e.result.max_rel_error);
    return w;
  }
};

struct SuiteOptions {
  GradcheckOptions check;
  double primitive_tolerance = 1e-3;
  double model_tolerance = 1e-2;
  bool include_models = true;
};

namespace detail {

inline Tensor suite_tensor(Shape shape, Rng& rng) {
  std::vector<float> v(numel_of(shape));
  for (float& x : v) x = rng.uniform(-1.0f, 1.0f);
  return Tensor(std::move(shape), std::move(v), true);
}

template <class TT>
using Vec = std::vector<BasicTensor<TT>>;

/// Copies v[first..] into the module's parameters in visit order.
template <class Module, class TT>
void load_module(Module& m, Vec<TT>& v, std::size_t first) {
  m.visit("", [&](const std::string&, BasicTensor<TT>& t) { t = v[first++]; });
}

template <class Module>
void append_params(Module& m, const std::string& prefix, std::vector<NamedTensor>& out) {
  m.visit(prefix, [&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
}

/// y = 3x whose backward reports 2 on the FP32 tape only.
inline Tensor corrupted_triple(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 3.0f * x[i];
  auto xn = x.node();
  return make_result<float>("corrupted_triple", x.shape(), std::move(out), {&x},
                            [=](const NodePtr<float>&) {
                              return [=](const std::vector<float>& g) {
                                float* dx = grad_sink(xn);
                                if (!dx) return;
                                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += 2.0f * g[i];
                              };
                            });
}

inline ModelConfig suite_model(Variant v, Task t) {
  ModelConfig c;
  c.variant = v;
  c.task = t;
  c.embed_dim = 8;
  c.vocab_size = 11;
  c.seq_len = 16;
  c.chunk_size = 4;
  c.n_max = 32;
  c.heads = 2;
  c.num_classes = 2;
  if (t == Task::classify) c.positions = v == Variant::transformer ? PositionMode::sinusoidal : PositionMode::none;
  return c;
}

}  // namespace detail

inline SuiteReport run_gradcheck_suite(const SuiteOptions& so = {}) {
  using detail::Vec;
  SuiteReport rep;
  Stopwatch watch;
  Rng rng(2024);
  auto T = [&](Shape s) { return detail::suite_tensor(std::move(s), rng); };
  auto prim = [&](const std::string& name, auto build, std::vector<NamedTensor> in) {
    rep.entries.push_back({"primitive", gradcheck(name, build, std::move(in), so.check), so.primitive_tolerance});
  };

  // dense algebra
  prim("matmul", [](auto& v) { return matmul(v[0], v[1]); }, {{"a", T({3, 4})}, {"b", T({4, 2})}});
  prim("linear", [](auto& v) { return linear(v[0], v[1], &v[2]); },
       {{"x", T({2, 3, 4})}, {"w", T({4, 2})}, {"b", T({2})}});
  prim("bmm", [](auto& v) { return bmm(v[0], v[1]); }, {{"a", T({2, 2, 3, 4})}, {"b", T({2, 2, 4, 2})}});
  prim("bmm_transposed", [](auto& v) { return bmm(v[0], v[1], true); },
       {{"a", T({2, 2, 3, 4})}, {"b", T({2, 2, 5, 4})}});
  // elementwise
  prim("add_broadcast", [](auto& v) { return add(v[0], v[1]); }, {{"a", T({3, 4})}, {"b", T({4})}});
  prim("sub", [](auto& v) { return sub(v[0], v[1]); }, {{"a", T({3, 4})}, {"b", T({3, 4})}});
  prim("mul_broadcast", [](auto& v) { return mul(v[0], v[1]); }, {{"a", T({2, 3, 4})}, {"b", T({4})}});
  prim("sigmoid", [](auto& v) { return sigmoid(v[0]); }, {{"x", T({3, 5})}});
  {
    // keep inputs away from the kink so the central difference is smooth
    Tensor x = T({3, 5});
    for (float& e : x.data()) e = e < 0 ? e - 0.05f : e + 0.05f;
    prim("relu", [](auto& v) { return relu(v[0]); }, {{"x", x}});
  }
  prim("affine", [](auto& v) { return affine(v[0], -1.5, 0.25); }, {{"x", T({4})}});
  prim("scale", [](auto& v) { return scale(v[0], 0.3); }, {{"x", T({4})}});
  prim("gated_blend", [](auto& v) { return gated_blend(sigmoid(v[0]), v[1], v[2]); },
       {{"g", T({2, 3})}, {"a", T({2, 3})}, {"b", T({2, 3})}});
  // reductions
  prim("sum", [](auto& v) { return sum(v[0]); }, {{"x", T({3, 4})}});
  prim("mean", [](auto& v) { return mean(v[0]); }, {{"x", T({3, 4})}});
  {
    const std::vector<double> w{0.5, -1.0, 2.0, 0.25, 1.5, -0.75};
    prim("weighted_sum", [w](auto& v) { return weighted_sum(v[0], std::span<const double>(w)); }, {{"x", T({2, 3})}});
  }
  // shape
  prim("reshape", [](auto& v) { return reshape(v[0], {4, 3}); }, {{"x", T({2, 6})}});
  prim("narrow", [](auto& v) { return narrow(v[0], 1, 1, 3); }, {{"x", T({2, 5, 3})}});
  prim("strided_slice", [](auto& v) { return strided_slice(v[0], 1, 1, 2, 2); }, {{"x", T({2, 5, 3})}});
  prim("concat_time", [](auto& v) { return concat(v[0], v[1], 1); }, {{"x", T({2, 5, 3})}, {"y", T({2, 2, 3})}});
  prim("concat_last", [](auto& v) { return concat_last(v[0], v[1]); }, {{"x", T({2, 3})}, {"y", T({2, 4})}});
  prim("repeat_interleave", [](auto& v) { return repeat_interleave(v[0], 1, 3); }, {{"x", T({2, 2, 3})}});
  prim("swap_axes_12", [](auto& v) { return swap_axes_12(v[0]); }, {{"x", T({2, 3, 4, 2})}});
  prim("stride_split", [](auto& v) {
    auto s = stride_split(v[0]);
    return concat(s.left, s.right, 2);
  }, {{"x", T({2, 7, 3})}});
  prim("select_time", [](auto& v) { return select_time(v[0], 2); }, {{"x", T({2, 5, 3})}});
  prim("cumulative_mean_shifted", [](auto& v) { return cumulative_mean_shifted(v[0]); }, {{"s", T({2, 5, 3})}});
  {
    const std::vector<std::uint8_t> mask{1, 1, 0, 0, 0, 1, 1, 1, 1, 0};
    prim("masked_mean_time", [mask](auto& v) { return masked_mean_time(v[0], mask); }, {{"x", T({2, 5, 3})}});
  }
  // normalization and attention pieces
  prim("rmsnorm", [](auto& v) { return rmsnorm(v[0], v[1], 1e-6); }, {{"x", T({2, 8})}, {"gain", T({8})}});
  prim("layer_norm", [](auto& v) { return layer_norm(v[0], v[1], v[2]); },
       {{"x", T({3, 6})}, {"gain", T({6})}, {"bias", T({6})}});
  prim("masked_softmax_causal", [](auto& v) { return masked_softmax(v[0], true); }, {{"s", T({2, 2, 4, 4})}});
  {
    const std::vector<std::uint8_t> keys{1, 1, 1, 0, 1, 1, 1, 1};
    prim("masked_softmax_keys", [keys](auto& v) { return masked_softmax(v[0], false, keys); },
         {{"s", T({2, 2, 4, 4})}});
  }
  {
    const std::vector<TokenId> ids{0, 5, 5, 2, 1, 0};
    prim("embedding", [ids](auto& v) { return embedding(ids, 2, 3, v[0]); }, {{"table", T({6, 3})}});
  }
  prim("conv_causal", [](auto& v) { return conv1d_time(v[0], v[1], v[2], 2, 0); },
       {{"x", T({2, 5, 3})}, {"kernel", T({4, 3, 3})}, {"bias", T({4})}});
  prim("conv_symmetric", [](auto& v) { return conv1d_time(v[0], v[1], v[2], 1, 1); },
       {{"x", T({2, 5, 3})}, {"kernel", T({4, 3, 3})}, {"bias", T({4})}});
  {
    const std::vector<TokenId> t{4, 0, 2};
    prim("softmax_cross_entropy", [t](auto& v) { return softmax_cross_entropy(v[0], t); }, {{"logits", T({3, 5})}});
  }
  // layers
  prim("input_gate", [](auto& v) {
    using TT = typename std::decay_t<decltype(v[0])>::value_type;
    Linear<TT> lin;
    lin.weight = v[1];
    lin.bias = v[2];
    return input_gate(v[0], lin);
  }, {{"c", T({1, 3, 4})}, {"w", T({4, 4})}, {"b", T({4})}});
  {
    Rng init(3);
    MergeCell<float> cell(4, true, init);
    std::vector<NamedTensor> in{{"left", T({3, 4})}, {"right", T({3, 4})}};
    detail::append_params(cell, "cell", in);
    prim("glu_merge", [](auto& v) {
      using TT = typename std::decay_t<decltype(v[0])>::value_type;
      Rng r(0);
      MergeCell<TT> c(4, true, r);
      detail::load_module(c, v, 2);
      return glu_merge(v[0], v[1], c);
    }, in);
  }
  {
    Rng init(4);
    MergeCell<float> cell(3, true, init);
    std::vector<NamedTensor> in{{"h", T({2, 7, 3})}};
    detail::append_params(cell, "cell", in);
    prim("tree_reduce", [](auto& v) {
      using TT = typename std::decay_t<decltype(v[0])>::value_type;
      Rng r(0);
      MergeCell<TT> c(3, true, r);
      detail::load_module(c, v, 1);
      return tree_reduce(v[0], c);
    }, in);
    std::vector<NamedTensor> in2{{"x", T({2, 6, 3})}};
    detail::append_params(cell, "cell", in2);
    prim("causal_scan", [](auto& v) {
      using TT = typename std::decay_t<decltype(v[0])>::value_type;
      Rng r(0);
      MergeCell<TT> c(3, true, r);
      detail::load_module(c, v, 1);
      return causal_scan(v[0], c);
    }, in2);
    std::vector<NamedTensor> in3{{"nodes", T({2, 8, 3})}};
    detail::append_params(cell, "cell", in3);
    prim("chunk_summaries", [](auto& v) {
      using TT = typename std::decay_t<decltype(v[0])>::value_type;
      Rng r(0);
      MergeCell<TT> c(3, true, r);
      detail::load_module(c, v, 1);
      return chunk_summaries(chunk_partition(v[0], 4), c);
    }, in3);
  }
  prim("inject_global_context", [](auto& v) {
    using TT = typename std::decay_t<decltype(v[0])>::value_type;
    Linear<TT> lin;
    lin.weight = v[2];
    lin.bias = v[3];
    return inject_global_context(v[0], v[1], lin, 2);
  }, {{"nodes", T({2, 6, 2})}, {"s", T({2, 3, 2})}, {"w", T({2, 2})}, {"b", T({2})}});
  {
    Rng init(5);
    AttentionBlock<float> blk(4, 2, 4, init);
    for (bool causal : {true, false}) {
      std::vector<NamedTensor> in{{"x", T({2, 3, 4})}};
      detail::append_params(blk, "block", in);
      prim(causal ? "attention_causal" : "attention_bidirectional", [causal](auto& v) {
        using TT = typename std::decay_t<decltype(v[0])>::value_type;
        Rng r(0);
        AttentionBlock<TT> b(4, 2, 4, r);
        detail::load_module(b, v, 1);
        return causal_self_attention(v[0], b, causal);
      }, in);
    }
  }

  {
    Tensor x = T({4});
    auto build = [](auto& v) {
      if constexpr (std::is_same_v<std::decay_t<decltype(v[0])>, Tensor>) {
        return detail::corrupted_triple(v[0]);
      } else {
        return scale(v[0], 3.0);
      }
    };
    rep.corrupted_rule_detected = !gradcheck("corrupted_rule", build, {{"x", x}}, so.check).passed;
  }

  if (so.include_models) {
    const std::size_t B = 2, n = 16;
    Rng data(7);
    std::vector<TokenId> ids(B * (n + 1));
    for (auto& t : ids) t = static_cast<TokenId>(data.below(11));
    std::vector<TokenId> cls(B * n);
    for (auto& t : cls) t = static_cast<TokenId>(data.below(6));
    std::vector<std::uint8_t> mask(B * n, 1);
    for (std::size_t t = 11; t < n; ++t) mask[t] = 0;

    auto model_check = [&](const std::string& name, const ModelConfig& cfg, auto loss) {
      Rng init(11);
      Model<float> m(cfg, init);
      auto build = [&](auto& xs) {
        using TT = typename std::decay_t<decltype(xs[0])>::value_type;
        Rng r(0);
        Model<TT> mm(cfg, r);
        mm.assign(xs);
        return loss(mm);
      };
      rep.entries.push_back({"model", gradcheck(name, build, m.parameters(), so.check), so.model_tolerance});
    };
    auto seq_loss = [&](auto& m) {
      const auto logits = m.forward_seq(std::span<const TokenId>(ids).first(B * n), B, n);
      return softmax_cross_entropy(reshape(logits, {B * n, 11}), std::span<const TokenId>(ids).subspan(B, B * n));
    };
    auto one_loss = [&](auto& m) {
      const std::vector<TokenId> targets{ids[B * n], ids[B * n + 1]};
      return softmax_cross_entropy(m.forward_one(std::span<const TokenId>(ids).first(B * n), B, n), targets);
    };
    auto cls_loss = [&](auto& m) {
      const std::vector<TokenId> labels{0, 1};
      return softmax_cross_entropy(m.forward_classify(cls, mask, B, n), labels);
    };
    using detail::suite_model;
    model_check("wat_v1", suite_model(Variant::wat_v1, Task::lm_one_to_one), one_loss);
    model_check("wat_v2", suite_model(Variant::wat_v2, Task::lm_seq2seq), seq_loss);
    model_check("wat_v3", suite_model(Variant::wat_v3, Task::lm_seq2seq), seq_loss);
    model_check("transformer_seq2seq", suite_model(Variant::transformer, Task::lm_seq2seq), seq_loss);
    model_check("transformer_one_to_one", suite_model(Variant::transformer, Task::lm_one_to_one), one_loss);
    model_check("wat_classifier", suite_model(Variant::wat_v1, Task::classify), cls_loss);
    model_check("wat_chunk_classifier", suite_model(Variant::wat_v3, Task::classify), cls_loss);
    model_check("transformer_classifier", suite_model(Variant::transformer, Task::classify), cls_loss);
  }
  rep.seconds = watch.seconds();
  return rep;
}

}  // namespace wat
