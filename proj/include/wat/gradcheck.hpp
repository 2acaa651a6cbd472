#pragma once

// Central finite-difference verification of analytic gradients.
//
// The analytic gradient comes from the FP32 tape. The numeric reference is
// computed on an FP64 copy of the same inputs, so FP32 round-off in the
// forward pass does not swamp small gradients.

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "wat/ops.hpp"
#include "wat/rng.hpp"

namespace wat {

using NamedTensor = std::pair<std::string, Tensor>;

struct GradcheckOptions {
  /// Central-difference step. 1e-6 suits the FP64 reference; use 1e-3 with
  /// an FP32 reference.
  double step = 1e-6;
  double tolerance = 1e-3;
  /// Lower bound of the per-element relative-error denominator.
  double floor = 1e-4;
  std::uint64_t seed = 7;
  /// Evaluate the numeric side in FP64 (otherwise in FP32).
  bool fp64_reference = true;
  /// Take the analytic side from the FP64 tape too (diagnostic).
  bool fp64_analytic = false;
};

struct GradcheckResult {
  std::string name;
  std::size_t elements_checked = 0;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

namespace detail {

template <class T, class Build>
double projected_value(Build& build, std::vector<BasicTensor<T>>& xs,
                       const std::vector<double>& direction) {
  const BasicTensor<T> out = build(xs);
  if (out.numel() == 1) return static_cast<double>(out.item());
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += direction[i] * static_cast<double>(out.data()[i]);
  return s;
}

template <class T, class Build>
std::vector<double> numeric_gradient(Build& build, std::vector<BasicTensor<T>>& xs, std::size_t which,
                                     const std::vector<double>& direction, double step) {
  auto values = xs[which].data();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T orig = values[i];
    const T up = static_cast<T>(static_cast<double>(orig) + step);
    const T down = static_cast<T>(static_cast<double>(orig) - step);
    values[i] = up;
    const double f_up = projected_value(build, xs, direction);
    values[i] = down;
    const double f_down = projected_value(build, xs, direction);
    values[i] = orig;
    out[i] = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
  }
  return out;
}

}  // namespace detail

/// Compares the tape gradient of `build` against central differences for
/// every element of every tensor in `inputs`. `build` is called with a
/// std::vector<BasicTensor<T>>& for T = float and T = double and must return
/// the output tensor; a non-scalar output is projected onto a fixed random
/// direction so that all outputs contribute. Gradients of `inputs` are
/// overwritten.
template <class Build>
GradcheckResult gradcheck(const std::string& name, Build build, std::vector<NamedTensor> inputs,
                          GradcheckOptions opt = {}) {
  GradcheckResult res;
  res.name = name;

  std::vector<Tensor> xs;
  for (auto& [n, t] : inputs) {
    t.set_requires_grad(true);
    t.grad();
    t.zero_grad();
    xs.push_back(t);
  }
  std::vector<double> direction;
  {
    Tape tape;
    Tensor out = build(xs);
    if (out.numel() != 1) {
      Rng rng(opt.seed);
      direction.resize(out.numel());
      for (double& w : direction) w = rng.uniform(-1.0f, 1.0f);
      out = weighted_sum(out, std::span<const double>(direction));
    }
    tape.backward(out);
  }

  std::vector<Tensor64> xs64;
  for (const auto& t : xs) {
    Tensor64 c = t.cast<double>();
    c.set_requires_grad(opt.fp64_analytic);
    xs64.push_back(c);
  }
  std::vector<std::vector<double>> analytic64;
  if (opt.fp64_analytic) {
    {
      Tape tape;
      Tensor64 out = build(xs64);
      if (out.numel() != 1) out = weighted_sum(out, std::span<const double>(direction));
      tape.backward(out);
    }
    for (auto& t : xs64) {
      analytic64.push_back(t.grad_vector());
      t.set_requires_grad(false);
    }
  }
  std::vector<Tensor> xs32;
  for (const auto& t : xs) xs32.push_back(t.clone());

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto numeric = opt.fp64_reference
                             ? detail::numeric_gradient(build, xs64, k, direction, opt.step)
                             : detail::numeric_gradient(build, xs32, k, direction, opt.step);
    const auto grad = inputs[k].second.grad();
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double analytic = opt.fp64_analytic ? analytic64[k][i] : grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric[i]), opt.floor});
      const double rel = std::abs(analytic - numeric[i]) / denom;
      ++res.elements_checked;
      if (!(rel <= res.max_rel_error)) {
        res.max_rel_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
        res.worst_tensor = inputs[k].first;
        res.worst_index = i;
        res.worst_analytic = analytic;
        res.worst_numeric = numeric[i];
      }
    }
  }
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

}  // namespace wat
