#pragma once

// GLU pairwise merge, binary tree reduction, causal doubling scan and the
// chunk-parallel pipeline.

#include <cstdint>
#include <optional>
#include <string>

#include "wat/nn.hpp"

namespace wat {

/// One merge cell, shared by every tree level and scan step.
template <class T>
struct MergeCell {
  Linear<T> val, gate, res;  // each [2d, d]
  BasicTensor<T> gain;       // RMSNorm gain [d]
  double norm_eps = 1e-6;
  /// When set, the residual gate is replaced by this constant.
  std::optional<double> force_res_gate;

  MergeCell() = default;
  MergeCell(std::size_t d, bool with_bias, Rng& rng)
      : val(2 * d, d, with_bias, rng),
        gate(2 * d, d, with_bias, rng),
        res(2 * d, d, with_bias, rng),
        gain(init::constant<T>({d}, 1.0)) {}

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    val.visit(prefix + ".val", f);
    gate.visit(prefix + ".gate", f);
    res.visit(prefix + ".res", f);
    f(prefix + ".gain", gain);
  }
};

struct MergeStats {
  std::uint64_t merges_performed = 0;
  std::uint64_t levels = 0;

  void reset() { *this = {}; }
};

/// Merges left[..., d] with right[..., d]. Each leading row counts as one
/// merge in `stats`.
template <class T>
BasicTensor<T> glu_merge(const BasicTensor<T>& left, const BasicTensor<T>& right,
                         const MergeCell<T>& cell, MergeStats* stats = nullptr) {
  if (left.shape() != right.shape()) {
    throw DimensionError("glu_merge operands differ: " + shape_str(left.shape()) + " vs " +
                         shape_str(right.shape()));
  }
  const BasicTensor<T> combined = concat_last(left, right);
  const BasicTensor<T> merged =
      rmsnorm(mul(cell.val(combined), sigmoid(cell.gate(combined))), cell.gain, cell.norm_eps);
  const BasicTensor<T> res_gate = cell.force_res_gate
                                      ? BasicTensor<T>(left.shape(), static_cast<T>(*cell.force_res_gate))
                                      : sigmoid(cell.res(combined));
  const BasicTensor<T> residual = scale(add(left, right), 0.5);
  if (stats) stats->merges_performed += left.numel() / left.dim(-1);
  return gated_blend(res_gate, merged, residual);
}

/// Reduces h [B, n, d] level by level to its root [B, 1, d]. An unpaired
/// last node on an odd level is carried up unchanged.
template <class T>
BasicTensor<T> tree_reduce(const BasicTensor<T>& h, const MergeCell<T>& cell, MergeStats* stats = nullptr) {
  if (h.rank() != 3 || h.dim(1) < 1) {
    throw DimensionError("tree_reduce needs [B, n>=1, d], got " + shape_str(h.shape()));
  }
  BasicTensor<T> cur = h;
  while (cur.dim(1) > 1) {
    StrideSplit<T> s = stride_split(cur);
    BasicTensor<T> merged = glu_merge(s.left, s.right, cell, stats);
    cur = s.carry ? concat(merged, *s.carry, 1) : merged;
    if (stats) ++stats->levels;
  }
  return cur;
}

/// Doubling-step prefix scan over nodes [B, n, d]. Every step reads only the
/// previous state; position 0 is never rewritten.
template <class T>
BasicTensor<T> causal_scan(const BasicTensor<T>& nodes, const MergeCell<T>& cell,
                           MergeStats* stats = nullptr) {
  if (nodes.rank() != 3 || nodes.dim(1) < 1) {
    throw DimensionError("causal_scan needs [B, n>=1, d], got " + shape_str(nodes.shape()));
  }
  const std::size_t n = nodes.dim(1);
  BasicTensor<T> cur = nodes;
  for (std::size_t step = 1; step < n; step *= 2) {
    const BasicTensor<T> merged =
        glu_merge(narrow(cur, 1, 0, n - step), narrow(cur, 1, step, n - step), cell, stats);
    cur = concat(narrow(cur, 1, 0, step), merged, 1);
    if (stats) ++stats->levels;
  }
  return cur;
}

/// Scan schedule for length n: 1, 2, 4, ... while step < n.
inline std::vector<std::size_t> scan_schedule(std::size_t n) {
  std::vector<std::size_t> steps;
  for (std::size_t step = 1; step < n; step *= 2) steps.push_back(step);
  return steps;
}

/// nodes [B, n, d] -> [B, C, K, d] with C = n / K.
template <class T>
BasicTensor<T> chunk_partition(const BasicTensor<T>& nodes, std::size_t K) {
  if (nodes.rank() != 3) throw DimensionError("chunk_partition needs [B, n, d]");
  const std::size_t n = nodes.dim(1);
  if (K == 0 || n % K != 0) {
    throw ConfigError("sequence length " + std::to_string(n) + " is not a multiple of chunk size " +
                      std::to_string(K) + "; pad or truncate the input");
  }
  return reshape(nodes, {nodes.dim(0), n / K, K, nodes.dim(2)});
}

/// Root of every chunk [B, C, K, d] -> [B, C, d], all chunks in one batched
/// reduction.
template <class T>
BasicTensor<T> chunk_summaries(const BasicTensor<T>& chunks, const MergeCell<T>& cell,
                               MergeStats* stats = nullptr) {
  if (chunks.rank() != 4) throw DimensionError("chunk_summaries needs [B, C, K, d]");
  const std::size_t B = chunks.dim(0), C = chunks.dim(1), K = chunks.dim(2), d = chunks.dim(3);
  const BasicTensor<T> roots = tree_reduce(reshape(chunks, {B * C, K, d}), cell, stats);
  return reshape(roots, {B, C, d});
}

/// nodes[t] + W_global g[t / K] with g the exclusive running mean of the
/// chunk summaries.
template <class T>
BasicTensor<T> inject_global_context(const BasicTensor<T>& nodes, const BasicTensor<T>& summaries,
                                     const Linear<T>& w_global, std::size_t K) {
  if (summaries.rank() != 3 || nodes.rank() != 3 || summaries.dim(1) * K != nodes.dim(1)) {
    throw DimensionError("global context: " + shape_str(summaries.shape()) + " summaries with K = " +
                         std::to_string(K) + " do not cover " + shape_str(nodes.shape()));
  }
  const BasicTensor<T> ctx = w_global(cumulative_mean_shifted(summaries));
  return add(nodes, repeat_interleave(ctx, 1, K));
}

}  // namespace wat
