#pragma once

// End-to-end runs: dataset setup, training loop, run-directory outputs.
//
// A run directory holds exactly config.txt, metrics.jsonl, best.ckpt and
// final.ckpt.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "wat/checkpoint.hpp"
#include "wat/config.hpp"
#include "wat/data.hpp"
#include "wat/train.hpp"

namespace wat {

struct RunResult {
  std::filesystem::path run_dir;
  std::vector<MetricsRecord> records;
  double best_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t param_count = 0;
  bool stopped_early = false;
};

namespace detail {

/// Streams derived from the seed, one per component.
struct RunRngs {
  Rng model, data, shuffle;
  explicit RunRngs(std::uint64_t seed) : model(0), data(0), shuffle(0) {
    Rng root(seed);
    model = root.fork(1);
    data = root.fork(2);
    shuffle = root.fork(3);
  }
};

inline std::filesystem::path prepare_run_dir(const RunConfig& cfg) {
  if (cfg.run.run_dir.empty()) throw ConfigError("run.run_dir is empty");
  const std::filesystem::path dir = cfg.run.run_dir;
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "config.txt") << print_config(cfg);
  std::ofstream(dir / "metrics.jsonl", std::ios::trunc);
  return dir;
}

inline void print_epoch(std::ostream& log, const MetricsRecord& r, double seconds) {
  std::ostringstream line;
  line << "epoch " << std::setw(3) << r.epoch << std::fixed << std::setprecision(4) << "  train_loss "
      << r.train_loss << "  val_loss " << r.val_loss << "  val_acc " << r.val_accuracy << std::setprecision(6)
      << "  lr " << r.lr << std::setprecision(1) << "  time " << seconds << "s  merges " << r.merges_performed
      << "\n";
  log << line.str() << std::flush;
}

template <class TrainLoss, class EvalLoss>
RunResult training_loop(const RunConfig& cfg, Model<float>& model, const Vocab& vocab, std::size_t train_batches,
                        TrainLoss&& train_loss, std::size_t eval_batches, EvalLoss&& eval_loss, std::ostream& log) {
  RunResult res;
  res.run_dir = prepare_run_dir(cfg);
  res.param_count = model.param_count();
  log << "run " << cfg.run.preset << ": " << to_string(cfg.model.variant) << "/" << to_string(cfg.model.task)
      << ", " << res.param_count << " parameters, " << train_batches << " batches per epoch\n";

  ParamList params = model.parameters();
  AdamW opt(params, cfg.train);
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    Stopwatch watch;
    const double lr = cosine_lr(epoch, cfg.train.epochs, cfg.train.lr, cfg.train.eta_min);
    const EpochResult er = train_epoch(model, opt, params, cfg.train, lr, train_batches,
                                       [&](std::size_t i) { return train_loss(epoch, i); });
    const EvalResult ev = evaluate(eval_batches, eval_loss);
    const double seconds = watch.seconds();

    MetricsRecord r;
    r.epoch = epoch + 1;
    r.train_loss = er.train_loss;
    r.val_loss = ev.loss;
    r.val_accuracy = ev.accuracy;
    r.lr = lr;
    r.wall_seconds = cfg.run.deterministic ? 0.0 : seconds;
    r.merges_performed = er.merges_performed;
    res.records.push_back(r);
    std::ofstream(res.run_dir / "metrics.jsonl", std::ios::app) << to_jsonl(r) << "\n";
    print_epoch(log, r, seconds);

    history.push_back(ev.accuracy);
    if (res.best_epoch == 0 || ev.accuracy > res.best_accuracy) {
      res.best_accuracy = ev.accuracy;
      res.best_epoch = r.epoch;
      save_checkpoint(res.run_dir / "best.ckpt", model, vocab);
    }
    if (cfg.train.patience > 0 && early_stop(history, cfg.train.patience)) {
      res.stopped_early = true;
      log << "early stop after epoch " << r.epoch << "\n";
      break;
    }
  }
  save_checkpoint(res.run_dir / "final.ckpt", model, vocab);
  log << "best val_acc " << res.best_accuracy << " at epoch " << res.best_epoch << "\n";
  return res;
}

}  // namespace detail

/// Train and test window offsets for an LM run. The train subset is drawn
/// once from the train range; test windows are spread evenly over the test
/// range.
struct LmWindows {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline LmWindows lm_windows(const RunConfig& cfg, std::size_t corpus_len, Rng& rng) {
  const std::size_t window = lm_window(cfg.model, cfg.data.target_column);
  LmSplit split;
  split.train_start = cfg.data.train_start;
  split.train_count = cfg.data.train_range;
  split.test_start = cfg.data.test_start;
  split.test_count = cfg.data.test_range;
  lm_splits(corpus_len, window, split);
  if (cfg.data.train_windows > split.train_count || cfg.data.test_windows > split.test_count) {
    throw ConfigError("window counts exceed the split (" + std::to_string(split.train_count) + " train, " +
                      std::to_string(split.test_count) + " test)");
  }
  LmWindows w;
  std::vector<std::size_t> pool(split.train_count);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = split.train_start + i;
  if (cfg.data.train_windows < pool.size()) {
    rng.shuffle(pool);
    pool.resize(cfg.data.train_windows);
    std::sort(pool.begin(), pool.end());
  }
  w.train = std::move(pool);
  for (std::size_t i = 0; i < cfg.data.test_windows; ++i)
    w.test.push_back(split.test_start + i * split.test_count / cfg.data.test_windows);
  return w;
}

inline RunResult run_train_lm(RunConfig cfg, std::ostream& log) {
  const CharCorpus corpus = load_corpus(resolve_corpus_path(cfg.run.corpus));
  cfg.model.vocab_size = corpus.vocab.size();
  cfg.validate();
  detail::RunRngs rngs(cfg.train.seed);
  Model<float> model(cfg.model, rngs.model);
  const LmWindows w = lm_windows(cfg, corpus.ids.size(), rngs.data);
  const std::size_t window = lm_window(cfg.model, cfg.data.target_column);
  const std::size_t B = cfg.train.batch_size;
  const std::size_t train_batches = (w.train.size() + B - 1) / B;
  const std::size_t eval_batches = (w.test.size() + B - 1) / B;

  std::vector<std::size_t> order;
  std::size_t order_epoch = SIZE_MAX;
  auto slice = [&](const std::vector<std::size_t>& v, std::size_t i) {
    const std::size_t end = std::min(v.size(), (i + 1) * B);
    return std::span<const std::size_t>(v.data() + i * B, end - i * B);
  };
  auto train_loss = [&](std::size_t epoch, std::size_t i) {
    if (epoch != order_epoch) {
      order = w.train;
      rngs.shuffle.shuffle(order);
      order_epoch = epoch;
    }
    return lm_loss(model, lm_batch(corpus.ids, slice(order, i), window), cfg.data.target_column);
  };
  auto eval_loss = [&](std::size_t i) {
    return lm_loss(model, lm_batch(corpus.ids, slice(w.test, i), window), cfg.data.target_column);
  };
  return detail::training_loop(cfg, model, corpus.vocab, train_batches, train_loss, eval_batches, eval_loss, log);
}

inline BracketDataset bracket_dataset(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  const std::string& cache = cfg.data.cache;
  if (!cache.empty() && fs::exists(cache + ".train.tsv") && fs::exists(cache + ".val.tsv")) {
    return {read_bracket_tsv(cache + ".train.tsv"), read_bracket_tsv(cache + ".val.tsv")};
  }
  detail::RunRngs rngs(cfg.train.seed);
  BracketDataset ds =
      make_bracket_dataset(rngs.data, cfg.data.num_examples, cfg.data.min_len, cfg.data.max_len, cfg.data.train_fraction);
  if (!cache.empty()) {
    if (fs::path(cache).has_parent_path()) fs::create_directories(fs::path(cache).parent_path());
    write_bracket_tsv(cache + ".train.tsv", ds.train);
    write_bracket_tsv(cache + ".val.tsv", ds.val);
  }
  return ds;
}

inline RunResult run_train_brackets(RunConfig cfg, std::ostream& log) {
  cfg.validate();
  const BracketDataset ds = bracket_dataset(cfg);
  const Vocab vocab = bracket_vocab();
  detail::RunRngs rngs(cfg.train.seed);
  Model<float> model(cfg.model, rngs.model);
  const std::size_t B = cfg.train.batch_size;

  std::vector<const BracketExample*> order, val;
  for (const auto& x : ds.val) val.push_back(&x);
  std::size_t order_epoch = SIZE_MAX;
  auto batch_of = [&](const std::vector<const BracketExample*>& v, std::size_t i) {
    const std::size_t end = std::min(v.size(), (i + 1) * B);
    return bracket_batch(std::span<const BracketExample* const>(v.data() + i * B, end - i * B), vocab);
  };
  auto train_loss = [&](std::size_t epoch, std::size_t i) {
    if (epoch != order_epoch) {
      order.clear();
      for (const auto& x : ds.train) order.push_back(&x);
      rngs.shuffle.shuffle(order);
      order_epoch = epoch;
    }
    return classify_loss(model, batch_of(order, i));
  };
  auto eval_loss = [&](std::size_t i) { return classify_loss(model, batch_of(val, i)); };
  return detail::training_loop(cfg, model, vocab, (ds.train.size() + B - 1) / B, train_loss,
                               (val.size() + B - 1) / B, eval_loss, log);
}

/// Evaluates a checkpoint on the held-out split of the run's task.
inline EvalResult run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  auto [model, vocab] = load_checkpoint(checkpoint);
  const std::size_t B = cfg.train.batch_size;
  if (model.config().task == Task::classify) {
    const BracketDataset ds = bracket_dataset(cfg);
    std::vector<const BracketExample*> val;
    for (const auto& x : ds.val) val.push_back(&x);
    return evaluate((val.size() + B - 1) / B, [&](std::size_t i) {
      const std::size_t end = std::min(val.size(), (i + 1) * B);
      return classify_loss(model, bracket_batch(std::span<const BracketExample* const>(val.data() + i * B, end - i * B), vocab));
    });
  }
  const CharCorpus corpus = load_corpus(resolve_corpus_path(cfg.run.corpus));
  if (!(corpus.vocab == vocab)) throw InputError("corpus vocabulary differs from the checkpoint's");
  RunConfig c = cfg;
  c.model = model.config();
  detail::RunRngs rngs(c.train.seed);
  const LmWindows w = lm_windows(c, corpus.ids.size(), rngs.data);
  const std::size_t window = lm_window(c.model, c.data.target_column);
  return evaluate((w.test.size() + B - 1) / B, [&](std::size_t i) {
    const std::size_t end = std::min(w.test.size(), (i + 1) * B);
    return lm_loss(model, lm_batch(corpus.ids, std::span<const std::size_t>(w.test.data() + i * B, end - i * B), window),
                   c.data.target_column);
  });
}

inline std::string run_generate(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  auto [model, vocab] = load_checkpoint(checkpoint);
  Rng rng(cfg.train.seed);
  SampleOptions opt;
  opt.temperature = cfg.generate.temperature;
  opt.top_k = cfg.generate.top_k;
  opt.greedy = cfg.generate.greedy;
  return sample_text(model, vocab, cfg.generate.prompt, cfg.generate.length, opt, rng);
}

}  // namespace wat
