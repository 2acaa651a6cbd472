#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "test_util.hpp"
#include "wat/runs.hpp"

using namespace wat;
using namespace wat::testing;

namespace {

Tensor scalar_param(float v) { return Tensor(Shape{1}, std::vector<float>{v}, true); }

void set_grad(Tensor& t, std::vector<float> g) {
  auto dst = t.grad();
  std::copy(g.begin(), g.end(), dst.begin());
}

TEST(AdamW, ZeroGradAndZeroDecayLeavesParametersUnchanged) {
  Tensor p = scalar_param(0.7f);
  set_grad(p, {0.0f});
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt({{"p", p}}, cfg);
  for (int i = 0; i < 5; ++i) opt.step(0.1);
  EXPECT_EQ(p.data()[0], 0.7f);
}

TEST(AdamW, FirstStepIsBiasCorrectedUnitStep) {
  Tensor p = scalar_param(1.0f);
  set_grad(p, {1.0f});
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt({{"p", p}}, cfg);
  opt.step(0.1);
  EXPECT_NEAR(p.data()[0], 0.9f, 1e-6);
}

TEST(AdamW, DecayOnlyPathShrinksByLrTimesWd) {
  Tensor p = scalar_param(1.0f);
  set_grad(p, {0.0f});
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  AdamW opt({{"p", p}}, cfg);
  opt.step(3e-4);
  EXPECT_EQ(p.data()[0], static_cast<float>(1.0 - 3e-6));
}

TEST(AdamW, DoublingWeightDecayDoublesShrinkage) {
  auto shrink = [](double wd) {
    Tensor p = scalar_param(0.75f);
    set_grad(p, {0.0f});
    TrainConfig cfg;
    cfg.weight_decay = wd;
    AdamW opt({{"p", p}}, cfg);
    opt.step(0.125);
    return 0.75 - static_cast<double>(p.data()[0]);
  };
  EXPECT_EQ(shrink(0.125), 2.0 * shrink(0.0625));
  EXPECT_NEAR(shrink(0.02), 2.0 * shrink(0.01), 1e-7);
}

TEST(AdamW, MatchesScalarReferenceOverSeveralSteps) {
  Tensor p(Shape{3}, std::vector<float>{0.5f, -1.0f, 2.0f}, true);
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  AdamW opt({{"p", p}}, cfg);
  std::vector<double> ref = {0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
  const std::vector<std::vector<float>> grads = {{0.3f, -0.2f, 1.0f}, {0.1f, 0.4f, -0.5f}, {-0.2f, 0.0f, 0.25f}};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    set_grad(p, grads[t - 1]);
    opt.step(1e-2);
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = grads[t - 1][i];
      ref[i] *= 1.0 - 1e-2 * 0.01;
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      ref[i] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.data()[i], ref[i], 1e-6) << "step " << t << " element " << i;
    }
  }
  EXPECT_EQ(opt.first_moment(0).size(), 3u);
  EXPECT_EQ(opt.second_moment(0).size(), 3u);
}

TEST(AdamW, NanGradientAbortsNamingTheParameter) {
  Tensor a = scalar_param(1.0f), b = scalar_param(2.0f);
  set_grad(a, {0.5f});
  set_grad(b, {std::nanf("")});
  AdamW opt({{"merge.val.weight", a}, {"head.bias", b}}, TrainConfig{});
  try {
    opt.step(0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("head.bias"), std::string::npos);
  }
  EXPECT_EQ(a.data()[0], 1.0f);
}

TEST(CosineLr, EndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 30, 3e-4, 1e-5), 3e-4);
  EXPECT_DOUBLE_EQ(cosine_lr(30, 30, 3e-4, 1e-5), 1e-5);
  EXPECT_NEAR(cosine_lr(15, 30, 3e-4, 1e-5), 1.55e-4, 1e-15);
  for (std::size_t t = 1; t <= 30; ++t) EXPECT_LT(cosine_lr(t, 30, 3e-4, 1e-5), cosine_lr(t - 1, 30, 3e-4, 1e-5));
}

TEST(ClipGrads, SmallNormIsUntouched) {
  Tensor p(Shape{2}, std::vector<float>{0.0f, 0.0f}, true);
  set_grad(p, {0.6f, 0.7f});
  ParamList ps = {{"p", p}};
  EXPECT_EQ(clip_grads(ps, 1.0), 1.0);
  EXPECT_EQ(p.grad()[0], 0.6f);
}

TEST(ClipGrads, ThreeFourBecomesPointSixPointEight) {
  Tensor p(Shape{2}, std::vector<float>{0.0f, 0.0f}, true);
  set_grad(p, {3.0f, 4.0f});
  ParamList ps = {{"p", p}};
  EXPECT_DOUBLE_EQ(clip_grads(ps, 1.0), 0.2);
  EXPECT_NEAR(p.grad()[0], 0.6f, 1e-7);
  EXPECT_NEAR(p.grad()[1], 0.8f, 1e-7);
}

TEST(ClipGrads, PostClipNormNeverExceedsLimit) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    ParamList ps;
    for (int k = 0; k < 3; ++k) {
      Tensor t = random_tensor({1 + rng.below(20)}, rng);
      const float scale = std::pow(10.0f, rng.uniform(-3.0f, 3.0f));
      for (float& g : t.grad()) g = rng.uniform(-scale, scale);
      ps.emplace_back("t" + std::to_string(k), t);
    }
    clip_grads(ps, 1.0);
    EXPECT_LE(global_grad_norm(ps), 1.0 + 1e-6);
  }
}

TEST(EarlyStop, Examples) {
  std::vector<double> rising;
  for (int i = 0; i < 40; ++i) {
    rising.push_back(0.5 + 0.01 * i);
    EXPECT_FALSE(early_stop(rising, 10));
  }
  std::vector<double> h(19, 0.5);
  h[7] = 0.9;  // epoch 8
  EXPECT_TRUE(early_stop(h, 10));
  h.resize(17);
  EXPECT_FALSE(early_stop(h, 10));
  h.resize(18);
  EXPECT_FALSE(early_stop(h, 10));
  EXPECT_THROW(early_stop({}, 10), PreconditionError);
}

TEST(MetricsRecord, JsonRoundTripWithStableFieldNames) {
  MetricsRecord r{3, 2.5, 2.25, 0.4375, 1.55e-4, 0.0, 12345};
  const std::string line = to_jsonl(r);
  EXPECT_EQ(line,
            "{\"epoch\":3,\"train_loss\":2.5,\"val_loss\":2.25,\"val_accuracy\":0.4375,\"lr\":0.000155,"
            "\"wall_seconds\":0.0,\"merges_performed\":12345}");
  EXPECT_EQ(nlohmann::json::parse(line).get<MetricsRecord>(), r);
}

// ---------------------------------------------------------------------------

ModelConfig tiny_lm(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.task = v == Variant::wat_v1 ? Task::lm_one_to_one : Task::lm_seq2seq;
  c.embed_dim = 16;
  c.vocab_size = 6;
  c.seq_len = 16;
  c.chunk_size = 4;
  c.n_max = 32;
  c.heads = 2;
  return c;
}

// Text from a sparse Markov chain over six symbols: learnable, not constant.
std::vector<TokenId> markov_text(std::size_t n, Rng& rng) {
  std::vector<TokenId> ids = {0};
  while (ids.size() < n) {
    const TokenId prev = ids.back();
    ids.push_back(rng.below(10) < 8 ? (prev + 1) % 6 : static_cast<TokenId>(rng.below(6)));
  }
  return ids;
}

double checksum(const Model<float>& m) {
  double s = 0.0;
  for (const auto& [n, t] : m.parameters())
    for (float v : t.data()) s += v;
  return s;
}

TEST(Evaluate, LeavesParametersUntouched) {
  Rng rng(1);
  Model<float> m(tiny_lm(Variant::wat_v3), rng);
  const auto ids = markov_text(400, rng);
  std::vector<std::size_t> offsets = {0, 10, 50, 100};
  const Batch b = lm_batch(ids, offsets, 16);
  const double before = checksum(m);
  const auto before_params = m.parameters();
  const EvalResult r = evaluate(1, [&](std::size_t) { return lm_loss(m, b, false); });
  EXPECT_EQ(checksum(m), before);
  for (const auto& [n, t] : before_params) EXPECT_FALSE(t.has_grad() && t.grad()[0] != 0.0f) << n;
  EXPECT_EQ(r.count, 4u * 15u);
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);
}

TEST(Evaluate, ConstantClassifierScoresHalfOnBalancedSet) {
  ModelConfig c;
  c.variant = Variant::wat_v1;
  c.task = Task::classify;
  c.embed_dim = 8;
  c.vocab_size = 7;
  c.positions = PositionMode::none;
  Rng rng(2);
  Model<float> m(c, rng);
  for (auto& [n, t] : m.parameters())
    if (n.starts_with("head.")) std::fill(t.data().begin(), t.data().end(), 0.0f);
  const auto ds = make_bracket_dataset(rng, 40, 8, 16);
  std::vector<const BracketExample*> xs;
  for (const auto& x : ds.train) xs.push_back(&x);
  const Batch b = bracket_batch(xs, bracket_vocab());
  const EvalResult r = evaluate(1, [&](std::size_t) { return classify_loss(m, b); });
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
}

TEST(Evaluate, RandomPredictionsSitNearChance) {
  ModelConfig c = tiny_lm(Variant::wat_v3);
  c.vocab_size = 65;
  Rng rng(3);
  Model<float> m(c, rng);
  const auto ids = random_tokens(3000, 65, rng);
  std::vector<std::size_t> offsets;
  for (std::size_t o = 0; o + 16 <= ids.size(); o += 16) offsets.push_back(o);
  const Batch b = lm_batch(ids, offsets, 16);
  const EvalResult r = evaluate(1, [&](std::size_t) { return lm_loss(m, b, false); });
  EXPECT_LT(r.accuracy, 0.05);
}

TEST(LmLoss, TargetColumnSupervisesEveryPosition) {
  Rng rng(4);
  Model<float> m(tiny_lm(Variant::wat_v2), rng);
  const auto ids = markov_text(200, rng);
  std::vector<std::size_t> offsets = {0, 30};
  EXPECT_EQ(lm_loss(m, lm_batch(ids, offsets, 17), true).count, 32u);
  EXPECT_EQ(lm_loss(m, lm_batch(ids, offsets, 16), false).count, 30u);
  EXPECT_THROW(lm_loss(m, lm_batch(ids, offsets, 17), false), DimensionError);
}

struct SmokeRun {
  std::vector<EpochResult> epochs;
  std::vector<std::vector<float>> params;
};

SmokeRun smoke_train(Variant v, std::size_t windows, std::size_t epochs, std::uint64_t seed) {
  Rng rng(seed);
  Model<float> m(tiny_lm(v), rng);
  const auto ids = markov_text(windows + 40, rng);
  const std::size_t W = lm_window(m.config(), false);
  std::vector<std::size_t> offsets(windows);
  std::iota(offsets.begin(), offsets.end(), std::size_t{0});
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 25;
  ParamList params = m.parameters();
  AdamW opt(params, cfg);
  SmokeRun out;
  const std::size_t batches = windows / cfg.batch_size;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(offsets);
    out.epochs.push_back(train_epoch(m, opt, params, cfg, cosine_lr(e, epochs, cfg.lr, cfg.eta_min), batches,
                                     [&](std::size_t i) {
                                       std::span<const std::size_t> s(offsets.data() + i * 25, 25);
                                       return lm_loss(m, lm_batch(ids, s, W), false);
                                     }));
  }
  for (const auto& [n, t] : m.parameters()) out.params.emplace_back(t.data().begin(), t.data().end());
  return out;
}

TEST(TrainEpoch, LossDecreasesOnSmallLmSubset) {
  const SmokeRun r = smoke_train(Variant::wat_v3, 500, 5, 42);
  ASSERT_EQ(r.epochs.size(), 5u);
  EXPECT_LT(r.epochs.back().train_loss, r.epochs.front().train_loss);
  EXPECT_EQ(r.epochs[0].steps, 20u);
}

TEST(TrainEpoch, IdenticalSeedsGiveBitwiseIdenticalParameters) {
  const SmokeRun a = smoke_train(Variant::wat_v2, 100, 2, 9);
  const SmokeRun b = smoke_train(Variant::wat_v2, 100, 2, 9);
  for (std::size_t e = 0; e < a.epochs.size(); ++e) EXPECT_EQ(a.epochs[e].train_loss, b.epochs[e].train_loss);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_TRUE(bitwise_equal(a.params[i], b.params[i]));
}

TEST(TrainEpoch, V1MergeCounterMatchesTreeArithmetic) {
  const SmokeRun r = smoke_train(Variant::wat_v1, 100, 1, 3);
  // 4 batches of 25 rows; each row reduces n-1 = 15 encoded nodes
  EXPECT_EQ(r.epochs[0].merges_performed, 4u * 25u * (16u - 2u));
}

TEST(TrainEpoch, NonFiniteLossAbortsWithBatchIndex) {
  Rng rng(1);
  Model<float> m(tiny_lm(Variant::wat_v3), rng);
  for (auto& [n, t] : m.parameters())
    if (n == "head.bias") t.data()[0] = std::numeric_limits<float>::infinity();
  const auto ids = markov_text(100, rng);
  std::vector<std::size_t> offsets = {0, 1};
  ParamList params = m.parameters();
  TrainConfig cfg;
  AdamW opt(params, cfg);
  try {
    train_epoch(m, opt, params, cfg, 1e-3, 1, [&](std::size_t) { return lm_loss(m, lm_batch(ids, offsets, 16), false); });
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------

TEST(Sampling, TopOneIsGreedyRegardlessOfTemperature) {
  const std::vector<float> logits = {0.1f, 2.0f, 1.9f, -1.0f};
  Rng rng(1);
  SampleOptions opt;
  opt.top_k = 1;
  for (double temp : {0.1, 1.0, 10.0}) {
    opt.temperature = temp;
    EXPECT_EQ(sample_logits(logits, opt, rng), 1);
  }
  SampleOptions greedy;
  greedy.greedy = true;
  EXPECT_EQ(sample_logits(logits, greedy, rng), 1);
}

TEST(Sampling, TopKRestrictsSupportAndFollowsSoftmax) {
  const std::vector<float> logits = {1.0f, 0.0f, 3.0f, 2.9f, -5.0f};
  Rng rng(7);
  SampleOptions opt;
  opt.top_k = 2;
  opt.temperature = 1.0;
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 20000; ++i) ++counts[static_cast<std::size_t>(sample_logits(logits, opt, rng))];
  EXPECT_EQ(counts[0] + counts[1] + counts[4], 0);
  const double p2 = 1.0 / (1.0 + std::exp(-0.1));
  EXPECT_NEAR(counts[2] / 20000.0, p2, 0.015);
}

TEST(Sampling, OutputLengthAndPrompt) {
  const Vocab vocab = build_char_vocab("abcdef");
  for (Variant v : {Variant::wat_v1, Variant::wat_v2, Variant::wat_v3, Variant::transformer}) {
    Rng rng(11);
    Model<float> m(tiny_lm(v), rng);
    SampleOptions opt;
    const std::string out = sample_text(m, vocab, "abcab", 40, opt, rng);
    EXPECT_EQ(out.size(), 45u) << to_string(v);
    EXPECT_EQ(out.substr(0, 5), "abcab");
    opt.greedy = true;
    Rng r1(1), r2(2);
    EXPECT_EQ(sample_text(m, vocab, "abcab", 20, opt, r1), sample_text(m, vocab, "abcab", 20, opt, r2));
  }
}

TEST(Sampling, V3RightPaddingDoesNotChangeLastLogits) {
  Rng rng(12);
  Model<float> m(tiny_lm(Variant::wat_v3), rng);
  const auto ids = random_tokens(12, 6, rng);
  for (std::size_t len : {5u, 7u, 9u, 12u}) {
    const std::vector<TokenId> ctx(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(len));
    std::vector<TokenId> full = ids;
    full.resize(12);
    const Tensor all = m.forward_seq(full, 1, 12);
    const std::span<const float> ref(all.data().data() + (len - 1) * 6, 6);
    EXPECT_TRUE(bitwise_equal(next_logits(m, ctx), ref)) << "len " << len;
  }
}

// ---------------------------------------------------------------------------

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("wat_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto dir = temp_dir("ckpt");
  for (Variant v : {Variant::wat_v1, Variant::wat_v2, Variant::wat_v3, Variant::transformer}) {
    Rng rng(5);
    Model<float> m(tiny_lm(v), rng);
    const Vocab vocab = build_char_vocab("ab\ncd ef");
    save_checkpoint(dir / "m.ckpt", m, vocab);
    auto [back, vb] = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(vb, vocab);
    const auto pa = m.parameters(), pb = back.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      EXPECT_EQ(pa[i].first, pb[i].first);
      EXPECT_TRUE(bitwise_equal(pa[i].second.data(), pb[i].second.data())) << pa[i].first;
      EXPECT_TRUE(pb[i].second.requires_grad());
    }
    const auto toks = random_tokens(16, 6, rng);
    auto fwd = [&](const Model<float>& x) {
      return v == Variant::wat_v1 ? x.forward_one(toks, 1, 16) : x.forward_seq(toks, 1, 16);
    };
    const Tensor la = fwd(m), lb = fwd(back);
    EXPECT_TRUE(bitwise_equal(la.data(), lb.data()));
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, BracketVocabAndPadSurvive) {
  const auto dir = temp_dir("ckpt_br");
  ModelConfig c;
  c.variant = Variant::transformer;
  c.task = Task::classify;
  c.embed_dim = 8;
  c.heads = 2;
  c.vocab_size = 7;
  c.positions = PositionMode::sinusoidal;
  c.n_max = 64;
  Rng rng(1);
  Model<float> m(c, rng);
  save_checkpoint(dir / "b.ckpt", m, bracket_vocab());
  auto [back, vocab] = load_checkpoint(dir / "b.ckpt");
  EXPECT_EQ(vocab, bracket_vocab());
  EXPECT_EQ(back.param_count(), m.param_count());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MissingOrTruncatedFilesAreFileErrors) {
  const auto dir = temp_dir("ckpt_bad");
  EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), FileError);
  Rng rng(1);
  Model<float> m(tiny_lm(Variant::wat_v3), rng);
  save_checkpoint(dir / "m.ckpt", m, build_char_vocab("abcdef"));
  const std::string bytes = read_text_file(dir / "m.ckpt");
  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 10);
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), FileError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), FileError);
  std::filesystem::remove_all(dir);
}

RunConfig tiny_bracket_run(const std::filesystem::path& dir) {
  RunConfig c = preset("brackets-wat-desk");
  c.model.embed_dim = 8;
  c.data.num_examples = 40;
  c.data.min_len = 8;
  c.data.max_len = 16;
  c.train.epochs = 3;
  c.train.batch_size = 8;
  c.run.run_dir = dir.string();
  return c;
}

TEST(Runs, RunDirectoryHoldsExactlyFourFiles) {
  const auto dir = temp_dir("run_files");
  std::ostringstream log;
  const RunResult r = run_train_brackets(tiny_bracket_run(dir / "run"), log);
  EXPECT_EQ(r.records.size(), 3u);
  std::set<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir / "run")) names.insert(e.path().filename().string());
  EXPECT_EQ(names, (std::set<std::string>{"best.ckpt", "config.txt", "final.ckpt", "metrics.jsonl"}));
  EXPECT_EQ(read_metrics(dir / "run" / "metrics.jsonl"), r.records);
  const RunConfig snapshot = load_config_file(dir / "run" / "config.txt");
  EXPECT_EQ(snapshot, tiny_bracket_run(dir / "run"));
  const EvalResult ev = run_eval(snapshot, dir / "run" / "best.ckpt");
  EXPECT_DOUBLE_EQ(ev.accuracy, r.best_accuracy);
  std::filesystem::remove_all(dir);
}

TEST(Runs, SameSeedReproducesLogAndFinalCheckpointBytes) {
  const auto dir = temp_dir("run_det");
  std::ostringstream log;
  run_train_brackets(tiny_bracket_run(dir / "a"), log);
  run_train_brackets(tiny_bracket_run(dir / "b"), log);
  EXPECT_EQ(read_text_file(dir / "a" / "metrics.jsonl"), read_text_file(dir / "b" / "metrics.jsonl"));
  EXPECT_EQ(read_text_file(dir / "a" / "final.ckpt"), read_text_file(dir / "b" / "final.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST(Runs, EarlyStoppingCutsTheRunShort) {
  const auto dir = temp_dir("run_stop");
  RunConfig c = tiny_bracket_run(dir / "run");
  c.train.epochs = 40;
  c.train.patience = 1;
  std::ostringstream log;
  const RunResult r = run_train_brackets(c, log);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_LT(r.records.size(), 40u);
  EXPECT_EQ(r.records.size() - r.best_epoch, 2u);
  std::filesystem::remove_all(dir);
}

TEST(Runs, LmRunOnSyntheticCorpus) {
  const auto dir = temp_dir("run_lm");
  {
    Rng rng(3);
    const auto ids = markov_text(2000, rng);
    std::string text;
    for (TokenId t : ids) text += static_cast<char>('a' + t);
    std::ofstream(dir / "corpus.txt") << text;
  }
  RunConfig c = preset("lm-v3-desk");
  c.run.corpus = (dir / "corpus.txt").string();
  c.run.run_dir = (dir / "run").string();
  c.model.embed_dim = 8;
  c.model.seq_len = 16;
  c.model.chunk_size = 4;
  c.data.train_windows = 200;
  c.data.test_windows = 50;
  c.data.train_range = 400;
  c.data.test_range = 100;
  c.data.train_start = 0;
  c.data.test_start = 1500;
  c.train.epochs = 2;
  c.train.batch_size = 50;
  std::ostringstream log;
  const RunResult r = run_train_lm(c, log);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.records[0].lr, c.train.lr);
  EXPECT_GT(r.records[0].merges_performed, 0u);
  EXPECT_EQ(r.records[0].wall_seconds, 0.0);
  const RunConfig snapshot = load_config_file(dir / "run" / "config.txt");
  EXPECT_EQ(snapshot.model.vocab_size, 6u);
  const EvalResult ev = run_eval(snapshot, dir / "run" / "final.ckpt");
  EXPECT_DOUBLE_EQ(ev.accuracy, r.records.back().val_accuracy);
  RunConfig g = snapshot;
  g.generate.prompt = "abc";
  g.generate.length = 10;
  const std::string text = run_generate(g, dir / "run" / "final.ckpt");
  EXPECT_EQ(text.size(), 13u);
  EXPECT_EQ(text.substr(0, 3), "abc");
  c.data.test_start = 100;
  EXPECT_THROW(run_train_lm(c, log), InputError);
  std::filesystem::remove_all(dir);
}

}  // namespace
