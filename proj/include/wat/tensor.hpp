#pragma once

// Dense tensors with a tape-based reverse-mode autodiff.
//
// A tensor is a cheap handle to shared storage. Operations executed while a
// Tape is active (and with at least one input that requires grad) append a
// backward rule to that tape; Tape::backward() replays the rules in reverse
// recording order and then drops them. Without an active tape nothing is
// recorded, which is how evaluation and finite-difference probes run.
//
// Models train in FP32 (wat::Tensor). The same code instantiates in FP64
// (wat::Tensor64), which the gradient checker uses as its reference.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wat/errors.hpp"

namespace wat {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

/// Live/peak byte accounting over all tensor buffers (values and grads).
class MemoryStats {
 public:
  static void add(std::size_t bytes) {
    live_ += bytes;
    peak_ = std::max(peak_, live_);
  }
  static void sub(std::size_t bytes) { live_ -= bytes; }
  static std::size_t live() { return live_; }
  static std::size_t peak() { return peak_; }
  static void reset_peak() { peak_ = live_; }

 private:
  static inline thread_local std::size_t live_ = 0;
  static inline thread_local std::size_t peak_ = 0;
};

namespace detail {

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;

  TensorNode(Shape s, std::vector<T> d, bool rg)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    MemoryStats::add(data.size() * sizeof(T));
  }
  TensorNode(const TensorNode&) = delete;
  TensorNode& operator=(const TensorNode&) = delete;
  ~TensorNode() { MemoryStats::sub((data.size() + grad.size()) * sizeof(T)); }

  std::vector<T>& grad_buffer() {
    if (grad.empty() && !data.empty()) {
      grad.assign(data.size(), T(0));
      MemoryStats::add(grad.size() * sizeof(T));
    }
    return grad;
  }
};

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

}  // namespace detail

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode<T>>(
            shape, std::vector<T>(numel_of(shape), fill), requires_grad)) {}

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " needs " +
                           std::to_string(numel_of(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_ = std::make_shared<detail::TensorNode<T>>(std::move(shape), std::move(values),
                                                    requires_grad);
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, v); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  /// Size of axis `axis`; negative values count from the back.
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T> to_vector() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw PreconditionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; allocated (zero-filled) on first access.
  std::span<T> grad() { return node_->grad_buffer(); }
  std::span<const T> grad() const { return node_->grad_buffer(); }
  std::vector<T> grad_vector() const { return node_->grad_buffer(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Independent copy of the values, detached from any graph.
  BasicTensor clone() const { return BasicTensor(shape(), node_->data, false); }

  /// Copy converted to another scalar type (no graph, same requires_grad).
  template <class U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape(), std::vector<U>(node_->data.begin(), node_->data.end()),
                          requires_grad());
  }

  const detail::NodePtr<T>& node() const { return node_; }
  bool same_storage(const BasicTensor& o) const { return node_ == o.node_; }

 private:
  detail::NodePtr<T> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// One recorded operation and the rule that pushes its output gradient into
/// its inputs.
struct RecordedOp {
  const char* name;
  std::function<void()> rule;
};

/// Dynamic graph for one forward/backward pass. RAII: constructing a Tape
/// makes it the active recorder for the current thread, destroying it
/// restores the previous one.
class Tape {
 public:
  Tape() : previous_(active_) { active_ = this; }
  ~Tape() { active_ = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(RecordedOp op) { ops_.push_back(std::move(op)); }
  std::size_t size() const { return ops_.size(); }
  const std::vector<RecordedOp>& ops() const { return ops_; }

  /// Populates grad for every requires_grad tensor reachable from `loss`.
  /// Gradients accumulate into existing buffers. The graph is dropped
  /// afterwards.
  template <class T>
  void backward(const BasicTensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw PreconditionError("backward() needs a scalar loss, got shape " +
                              (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      ops_.clear();
      return;
    }
    loss.node()->grad_buffer()[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->rule();
    ops_.clear();
  }

  void clear() { ops_.clear(); }

 private:
  std::vector<RecordedOp> ops_;
  Tape* previous_;
  static inline thread_local Tape* active_ = nullptr;
};

/// backward() against the currently active tape.
template <class T>
void backward(const BasicTensor<T>& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw PreconditionError("backward() called with no active Tape");
  tape->backward(loss);
}

namespace detail {

/// Gradient sink for an input, or nullptr when it does not take gradients.
template <class T>
T* grad_sink(const NodePtr<T>& n) {
  return n && n->requires_grad ? n->grad_buffer().data() : nullptr;
}

template <class T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  for (const BasicTensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Wraps freshly computed values as the result of `name`. `make_rule` is only
/// invoked when the op is actually recorded; it receives the output node and
/// returns a callable taking the output gradient. Rules never run when no
/// gradient reached the output.
template <class T, class MakeRule>
BasicTensor<T> make_result(const char* name, Shape shape, std::vector<T> values,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           MakeRule&& make_rule) {
  Tape* tape = Tape::active();
  const bool record = tape != nullptr && any_requires_grad<T>(inputs);
  BasicTensor<T> out(std::move(shape), std::move(values), record);
  if (record) {
    NodePtr<T> on = out.node();
    auto rule = make_rule(on);
    tape->record(RecordedOp{name, [on, rule = std::move(rule)]() {
                              if (!on->grad.empty()) rule(on->grad);
                            }});
  }
  return out;
}

}  // namespace detail

}  // namespace wat
