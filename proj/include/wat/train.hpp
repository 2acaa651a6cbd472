#pragma once

// Optimizer, schedule, losses, evaluation and sampling.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "wat/data.hpp"
#include "wat/models.hpp"

namespace wat {

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t batch_size = 64;
  std::size_t epochs = 5;
  double eta_min = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 42;
  /// Epochs without improvement before stopping; 0 disables early stopping.
  std::size_t patience = 0;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (!(lr > eta_min) || eta_min < 0.0) throw ConfigError("need lr > eta_min >= 0");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (batch_size == 0 || epochs == 0) throw ConfigError("batch_size and epochs must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  }
};

using ParamList = std::vector<std::pair<std::string, Tensor>>;

/// AdamW with decoupled weight decay. Parameters without a gradient are
/// skipped entirely.
class AdamW {
 public:
  AdamW(ParamList params, const TrainConfig& cfg) : cfg_(cfg) {
    for (auto& [name, t] : params) {
      slots_.push_back({name, t, std::vector<float>(t.numel(), 0.0f), std::vector<float>(t.numel(), 0.0f)});
    }
  }

  std::size_t steps() const { return t_; }
  const std::vector<float>& first_moment(std::size_t i) const { return slots_.at(i).m; }
  const std::vector<float>& second_moment(std::size_t i) const { return slots_.at(i).v; }

  void step(double lr) {
    for (const auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      for (float g : s.param.grad()) {
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient in parameter " + s.name + " at optimizer step " +
                             std::to_string(t_ + 1));
        }
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      auto p = s.param.data();
      const auto g = s.param.grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        double pi = p[i];
        pi -= lr * cfg_.weight_decay * pi;
        const double gi = g[i];
        const double m = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        s.m[i] = static_cast<float>(m);
        s.v[i] = static_cast<float>(v);
        pi -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        p[i] = static_cast<float>(pi);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_)
      if (s.param.has_grad()) s.param.zero_grad();
  }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<float> m, v;
  };
  TrainConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

/// Cosine annealing from lr at t = 0 to eta_min at t = T.
inline double cosine_lr(std::size_t t, std::size_t T, double lr, double eta_min) {
  if (T == 0) return lr;
  const double c = std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(T));
  return eta_min + (lr - eta_min) * (1.0 + c) / 2.0;
}

inline double global_grad_norm(const ParamList& params) {
  double sq = 0.0;
  for (const auto& [n, t] : params) {
    if (!t.has_grad()) continue;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

/// Scales all gradients so their global L2 norm is at most clip_norm.
/// Returns the applied factor.
inline double clip_grads(ParamList& params, double clip_norm) {
  const double norm = global_grad_norm(params);
  if (!(norm > clip_norm)) return 1.0;
  const double scale = clip_norm / norm;
  for (auto& [n, t] : params) {
    if (!t.has_grad()) continue;
    for (float& g : t.grad()) g = static_cast<float>(g * scale);
  }
  return scale;
}

/// True iff the best value was reached more than `patience` epochs before
/// the latest one. Ties keep the earliest best.
inline bool early_stop(const std::vector<double>& history, std::size_t patience) {
  if (history.empty()) throw PreconditionError("early_stop needs a nonempty history");
  const auto best = static_cast<std::size_t>(std::max_element(history.begin(), history.end()) - history.begin());
  return history.size() - 1 - best > patience;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossOut {
  Tensor loss;
  std::size_t correct = 0;
  std::size_t count = 0;
};

namespace detail {

inline std::size_t count_correct(const Tensor& logits, std::span<const TokenId> targets) {
  const std::size_t V = logits.dim(logits.rank() - 1);
  const float* L = logits.data().data();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const float* row = L + r * V;
    const auto best = static_cast<TokenId>(std::max_element(row, row + V) - row);
    correct += best == targets[r];
  }
  return correct;
}

}  // namespace detail

/// Window length an LM batch needs for this model: seq_len plus a target
/// column for one-to-one, or when requested for seq2seq.
inline std::size_t lm_window(const ModelConfig& cfg, bool target_column) {
  return cfg.seq_len + (cfg.task == Task::lm_one_to_one || target_column ? 1 : 0);
}

/// Next-character cross entropy on a batch of windows. Without a target
/// column, seq2seq supervises positions 0..n-2 of the window.
inline LossOut lm_loss(const Model<float>& model, const Batch& b, bool target_column) {
  const ModelConfig& cfg = model.config();
  const std::size_t B = b.rows, W = b.cols;
  if (W != lm_window(cfg, target_column)) {
    throw DimensionError("window length " + std::to_string(W) + " does not match the model");
  }
  const std::size_t n = cfg.seq_len;
  std::vector<TokenId> inputs(B * n);
  for (std::size_t r = 0; r < B; ++r)
    std::copy_n(b.tokens.begin() + static_cast<std::ptrdiff_t>(r * W), n, inputs.begin() + static_cast<std::ptrdiff_t>(r * n));

  LossOut out;
  std::vector<TokenId> targets;
  Tensor logits;
  if (cfg.task == Task::lm_one_to_one) {
    for (std::size_t r = 0; r < B; ++r) targets.push_back(b.tokens[r * W + n]);
    logits = model.forward_one(inputs, B, n);
  } else {
    const std::size_t P = W == n ? n - 1 : n;
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t t = 0; t < P; ++t) targets.push_back(b.tokens[r * W + t + 1]);
    Tensor seq = model.forward_seq(inputs, B, n);
    if (P != n) seq = narrow(seq, 1, 0, P);
    logits = reshape(seq, {B * P, cfg.vocab_size});
  }
  out.loss = softmax_cross_entropy(logits, targets);
  out.correct = detail::count_correct(logits, targets);
  out.count = targets.size();
  return out;
}

inline LossOut classify_loss(const Model<float>& model, const Batch& b) {
  LossOut out;
  const Tensor logits = model.forward_classify(b.tokens, b.mask, b.rows, b.cols);
  out.loss = softmax_cross_entropy(logits, b.labels);
  out.correct = detail::count_correct(logits, b.labels);
  out.count = b.rows;
  return out;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

/// Mean loss and argmax accuracy over `num_batches` batches. Runs without a
/// tape, so parameters and gradients are untouched.
template <class BatchLoss>
EvalResult evaluate(std::size_t num_batches, BatchLoss&& batch_loss) {
  if (Tape::active() != nullptr) throw PreconditionError("evaluate must not run under an active tape");
  double loss_sum = 0.0;
  std::size_t correct = 0, count = 0;
  for (std::size_t i = 0; i < num_batches; ++i) {
    const LossOut o = batch_loss(i);
    loss_sum += static_cast<double>(o.loss.item()) * static_cast<double>(o.count);
    correct += o.correct;
    count += o.count;
  }
  EvalResult r;
  r.count = count;
  if (count > 0) {
    r.loss = loss_sum / static_cast<double>(count);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(count);
  }
  return r;
}

struct EpochResult {
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::size_t merges_performed = 0;
  std::size_t steps = 0;
};

/// One pass over `num_batches` batches: forward, loss, backward, clip, AdamW
/// step, zero grads. The batch order is whatever `batch_loss` implements.
template <class BatchLoss>
EpochResult train_epoch(const Model<float>& model, AdamW& opt, ParamList& params, const TrainConfig& cfg,
                        double lr, std::size_t num_batches, BatchLoss&& batch_loss) {
  EpochResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0, count = 0;
  for (std::size_t i = 0; i < num_batches; ++i) {
    Tape tape;
    LossOut o = batch_loss(i);
    const double l = o.loss.item();
    if (!std::isfinite(l)) throw NumericError("non-finite loss at batch " + std::to_string(i));
    r.merges_performed += model.stats().merges.merges_performed;
    tape.backward(o.loss);
    clip_grads(params, cfg.clip_norm);
    opt.step(lr);
    opt.zero_grad();
    loss_sum += l;
    correct += o.correct;
    count += o.count;
    ++r.steps;
  }
  if (r.steps > 0) r.train_loss = loss_sum / static_cast<double>(r.steps);
  if (count > 0) r.train_accuracy = static_cast<double>(correct) / static_cast<double>(count);
  return r;
}

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

struct MetricsRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
  std::size_t merges_performed = 0;

  bool operator==(const MetricsRecord&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MetricsRecord, epoch, train_loss, val_loss, val_accuracy, lr, wall_seconds,
                                   merges_performed)

/// One log line; fields in declaration order.
inline std::string to_jsonl(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["val_accuracy"] = r.val_accuracy;
  j["lr"] = r.lr;
  j["wall_seconds"] = r.wall_seconds;
  j["merges_performed"] = r.merges_performed;
  return j.dump();
}

inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<MetricsRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ": malformed metrics record: " + e.what());
    }
  }
  return out;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SampleOptions {
  double temperature = 0.8;
  std::size_t top_k = 40;
  bool greedy = false;
};

/// Draws one id from logits after temperature scaling and top-k filtering.
inline TokenId sample_logits(std::span<const float> logits, const SampleOptions& opt, Rng& rng) {
  const std::size_t V = logits.size();
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  if (opt.greedy || opt.top_k == 1) return static_cast<TokenId>(order[0]);
  if (!(opt.temperature > 0.0)) throw ConfigError("temperature must be positive unless greedy");
  const std::size_t k = opt.top_k == 0 ? V : std::min(opt.top_k, V);
  std::vector<double> w(k);
  const double top = logits[order[0]] / opt.temperature;
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += w[i] = std::exp(logits[order[i]] / opt.temperature - top);
  const double u = static_cast<double>(rng.next_u64() >> 11) * 0x1.0p-53 * z;
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += w[i];
    if (u < acc) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[k - 1]);
}

/// Final-position logits for a context of any length up to seq_len.
inline std::vector<float> next_logits(const Model<float>& model, const std::vector<TokenId>& context) {
  const ModelConfig& cfg = model.config();
  const std::size_t n = context.size();
  if (cfg.task == Task::lm_one_to_one) {
    if (n < 2) throw InputError("a one-to-one model needs a context of at least 2 tokens");
    const Tensor l = model.forward_one(context, 1, n);
    return {l.data().begin(), l.data().end()};
  }
  if (cfg.task != Task::lm_seq2seq) throw ConfigError("sampling needs a language model");
  std::vector<TokenId> padded = context;
  if (cfg.variant == Variant::wat_v3) padded.resize((n + cfg.chunk_size - 1) / cfg.chunk_size * cfg.chunk_size, 0);
  const Tensor l = model.forward_seq(padded, 1, padded.size());
  const auto all = l.data();
  const std::size_t V = cfg.vocab_size;
  return {all.begin() + static_cast<std::ptrdiff_t>((n - 1) * V), all.begin() + static_cast<std::ptrdiff_t>(n * V)};
}

/// Autoregressive continuation of `prompt` by `length` tokens over a sliding
/// window of at most seq_len tokens.
inline std::string sample_text(const Model<float>& model, const Vocab& vocab, const std::string& prompt,
                               std::size_t length, const SampleOptions& opt, Rng& rng) {
  if (prompt.empty()) throw InputError("prompt must not be empty");
  std::vector<TokenId> ids = vocab.encode(prompt);
  const std::size_t window = model.config().seq_len;
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t start = ids.size() > window ? ids.size() - window : 0;
    const std::vector<TokenId> ctx(ids.begin() + static_cast<std::ptrdiff_t>(start), ids.end());
    ids.push_back(sample_logits(next_logits(model, ctx), opt, rng));
  }
  return vocab.decode(ids);
}

}  // namespace wat
