// Acceptance gate: criteria 1-10, one PASS/FAIL line each.
//
//   acceptance [--only 1,2,...] [--work-dir DIR] [--corpus PATH]
//
// Training logs go to <work-dir>/<run>.log; the exit status is nonzero when
// any selected criterion fails.

#include <bit>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "wat/wat.hpp"

namespace fs = std::filesystem;
using namespace wat;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<TokenId> ids(n);
  for (auto& t : ids) t = static_cast<TokenId>(rng.below(vocab));
  return ids;
}

ModelConfig tiny_lm(Variant v, Task t) {
  ModelConfig c;
  c.variant = v;
  c.task = t;
  c.embed_dim = 8;
  c.vocab_size = 11;
  c.seq_len = 16;
  c.chunk_size = 4;
  c.n_max = 32;
  c.heads = 2;
  return c;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Context {
  fs::path work;
  std::string corpus;
  std::map<std::string, RunResult> runs;

  /// Trains `preset_name` once into <work>/<dir>; later calls reuse it.
  const RunResult& run(const std::string& preset_name, const std::string& dir) {
    if (auto it = runs.find(dir); it != runs.end()) return it->second;
    RunConfig cfg = preset(preset_name);
    cfg.run.run_dir = (work / dir).string();
    cfg.run.corpus = corpus;
    cfg.run.deterministic = true;
    fs::remove_all(cfg.run.run_dir);
    std::ofstream log(work / (dir + ".log"));
    std::cerr << "  training " << preset_name << " -> " << cfg.run.run_dir << "\n";
    Stopwatch w;
    RunResult r = cfg.is_lm() ? run_train_lm(cfg, log) : run_train_brackets(cfg, log);
    log << "seconds " << w.seconds() << "\n";
    seconds[dir] = w.seconds();
    return runs.emplace(dir, std::move(r)).first->second;
  }
  std::map<std::string, double> seconds;
};

Outcome gradients(Context&) {
  Stopwatch w;
  const SuiteReport rep = run_gradcheck_suite();
  const double secs = w.seconds();
  std::string failed;
  for (const auto& e : rep.entries)
    if (!e.passed()) failed += " " + e.result.name;
  // literal FP32 numeric side at h = 1e-3, reported only
  SuiteOptions lit;
  lit.check.step = 1e-3;
  lit.check.fp64_reference = false;
  const SuiteReport raw = run_gradcheck_suite(lit);
  Outcome o;
  o.pass = rep.all_passed() && secs < 60.0;
  o.detail = fmt("%zu checks, worst primitive %.2e (<1e-3), worst model %.2e (<1e-2), corrupted rule %s, %.1fs; "
                 "pure FP32 h=1e-3 worst %.2e / %.2e",
                 rep.entries.size(), rep.worst("primitive"), rep.worst("model"),
                 rep.corrupted_rule_detected ? "flagged" : "MISSED", secs, raw.worst("primitive"), raw.worst("model"));
  if (!failed.empty()) o.detail += "; failing:" + failed;
  return o;
}

Outcome causality(Context&) {
  const std::size_t n = 16, V = 11;
  std::size_t pairs = 0, broken = 0;
  for (Variant v : {Variant::wat_v2, Variant::wat_v3, Variant::transformer}) {
    Rng rng(5);
    const Model<float> m(tiny_lm(v, Task::lm_seq2seq), rng);
    const std::vector<TokenId> ids = random_tokens(n, V, rng);
    const Tensor base = m.forward_seq(ids, 1, n);
    for (std::size_t j = 1; j < n; ++j) {
      std::vector<TokenId> p = ids;
      p[j] = static_cast<TokenId>((p[j] + 1 + rng.below(V - 1)) % V);
      const Tensor out = m.forward_seq(p, 1, n);
      for (std::size_t t = 0; t < j; ++t) {
        ++pairs;
        if (!bitwise_equal(std::span(base.data()).subspan(t * V, V), std::span(out.data()).subspan(t * V, V)))
          ++broken;
      }
    }
  }
  for (Variant v : {Variant::wat_v1, Variant::transformer}) {
    Rng rng(6);
    const Model<float> m(tiny_lm(v, Task::lm_one_to_one), rng);
    const std::vector<TokenId> ids = random_tokens(n, V, rng);
    // the prediction after prefix 0..t must ignore every token j > t
    for (std::size_t t = 1; t < n - 1; ++t) {
      const Tensor ref = m.forward_one(std::span<const TokenId>(ids).first(t + 1), 1, t + 1);
      for (std::size_t j = t + 1; j < n; ++j) {
        std::vector<TokenId> p = ids;
        p[j] = static_cast<TokenId>((p[j] + 1) % V);
        const Tensor out = m.forward_one(std::span<const TokenId>(p).first(t + 1), 1, t + 1);
        ++pairs;
        if (!bitwise_equal(ref.data(), out.data())) ++broken;
      }
    }
  }
  return {broken == 0, fmt("%zu (t, j>t) pairs over V1, V2, V3, Transformer seq2seq and one-to-one; %zu changed", pairs,
                           broken)};
}

Outcome complexity(Context&) {
  Rng rng(10);
  MergeCell<float> cell(4, true, rng);
  bool ok = true;
  std::string bad;
  for (std::size_t n = 2; n <= 1024; n *= 2) {
    MergeStats s;
    tree_reduce(init::normal<float>({1, n, 4}, 1.0, rng), cell, &s);
    const auto levels = static_cast<std::uint64_t>(std::countr_zero(n));
    if (s.merges_performed != n - 1 || s.levels != levels) {
      ok = false;
      bad += fmt(" n=%zu:%llu/%llu", n, (unsigned long long)s.merges_performed, (unsigned long long)s.levels);
    }
  }
  ModelConfig c;
  c.variant = Variant::wat_v3;
  c.embed_dim = 8;
  c.seq_len = 512;
  c.chunk_size = 32;
  const Model<float> v3(c, rng);
  v3.forward_seq(random_tokens(512, 65, rng), 1, 512);
  const auto v3_merges = v3.stats().merges.merges_performed;
  const MergeCell<float> cell8(8, true, rng);
  const Tensor summaries = chunk_summaries(chunk_partition(init::normal<float>({1, 512, 8}, 1.0, rng), 32), cell8);
  ok = ok && v3_merges == 16u * 31u && summaries.dim(1) == 16;
  return {ok, fmt("tree n=2..1024: n-1 merges in log2 n levels%s; V3 n=512 K=32: %zu summaries, %llu merges (C(K-1) = %u)",
                  bad.empty() ? "" : (" FAILED at" + bad).c_str(), summaries.dim(1), (unsigned long long)v3_merges,
                  16u * 31u)};
}

Outcome averaging(Context&) {
  Rng rng(13);
  MergeCell<float> cell(8, true, rng);
  for (float& g : cell.gain.data()) g = rng.uniform(0.5f, 1.5f);
  cell.force_res_gate = 0.0;
  double worst = 0.0;
  for (std::size_t n = 1; n <= 256; n *= 2) {
    const Tensor h = init::normal<float>({2, n, 8}, 1.0, rng);
    const Tensor root = tree_reduce(h, cell);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < 8; ++j) {
        double mean = 0.0;
        for (std::size_t t = 0; t < n; ++t) mean += h[(b * n + t) * 8 + j];
        worst = std::max(worst, std::abs(root[b * 8 + j] - mean / static_cast<double>(n)));
      }
  }
  return {worst <= 1e-5, fmt("res_gate = 0, n = 1..256: max |root - mean| = %.2e (<= 1e-5)", worst)};
}

Outcome batched_chunks(Context&) {
  Rng rng(31);
  MergeCell<float> cell(5, true, rng);
  std::size_t checked = 0, differ = 0;
  for (auto [B, n, K] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 48, 8}, {2, 512, 32}, {1, 64, 4}, {2, 7, 7}}) {
    const Tensor x = init::normal<float>({B, n, 5}, 1.0, rng);
    const std::size_t C = n / K;
    const Tensor batched = chunk_summaries(chunk_partition(x, K), cell);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const Tensor one = tree_reduce(narrow(narrow(x, 0, b, 1), 1, c * K, K), cell);
        ++checked;
        if (!bitwise_equal(std::span(batched.data()).subspan((b * C + c) * 5, 5), one.data())) ++differ;
      }
  }
  return {differ == 0, fmt("%zu chunks vs sequential per-chunk tree_reduce; %zu differ bitwise", checked, differ)};
}

Outcome brackets(Context& cx) {
  const RunResult& wat = cx.run("brackets-wat-desk", "brackets-wat-desk");
  const RunResult& chunk = cx.run("brackets-chunk-desk", "brackets-chunk-desk");
  const RunResult& tr = cx.run("brackets-transformer-desk", "brackets-transformer-desk");
  const double a = wat.best_accuracy, c = chunk.best_accuracy, t = tr.best_accuracy;
  const double secs = cx.seconds["brackets-wat-desk"] + cx.seconds["brackets-chunk-desk"] +
                      cx.seconds["brackets-transformer-desk"];
  const bool pass = a >= 0.70 && a - t >= 0.05 && std::abs(c - t) <= 0.05;
  return {pass, fmt("best val acc WAT %.3f (ep %zu), WAT-Chunk %.3f (ep %zu), Transformer %.3f (ep %zu); "
                    "WAT-TF %+.1f pp (>= 5), Chunk-TF %+.1f pp (|.| <= 5); params %zu/%zu/%zu; %.0fs",
                    a, wat.best_epoch, c, chunk.best_epoch, t, tr.best_epoch, 100 * (a - t), 100 * (c - t),
                    wat.param_count, chunk.param_count, tr.param_count, secs)};
}

Outcome language_model(Context& cx) {
  const RunResult& v1 = cx.run("lm-v1-desk", "lm-v1-desk");
  const RunResult& v2 = cx.run("lm-v2-desk", "lm-v2-desk");
  const RunResult& v3 = cx.run("lm-v3-desk", "lm-v3-desk");
  const double a1 = v1.records.back().val_accuracy, a2 = v2.records.back().val_accuracy,
               a3 = v3.records.back().val_accuracy;
  const bool pass = v3.records.size() == 5 && a3 >= 0.30 && a3 >= a1 && std::abs(a2 - a3) <= 0.02;
  return {pass, fmt("final val acc after %zu epochs: V3 %.4f (>= 0.30), V1 %.4f (V3 >= V1), V2 %.4f (|V2-V3| = %.2f pp "
                    "<= 2)",
                    v3.records.size(), a3, a1, a2, 100 * std::abs(a2 - a3))};
}

Outcome scaling(Context&) {
  BenchOptions opt;
  const BenchReport rep = run_benchmark(opt);
  bool counters = true, times = true;
  std::string ratios;
  for (std::size_t i = 1; i < opt.lengths.size(); ++i) {
    const std::size_t n = opt.lengths[i], h = opt.lengths[i - 1];
    if (n != 2 * h) continue;
    counters = counters && rep.at("wat_v3", n).merges == 2 * rep.at("wat_v3", h).merges &&
               rep.at("attention", n).attention_scores == 4 * rep.at("attention", h).attention_scores &&
               rep.at("wat_tree", n).merges == opt.batch * (n - 1);
    const double tree = rep.time_ratio("wat_tree", n), v3 = rep.time_ratio("wat_v3", n),
                 attn = rep.time_ratio("attention", n);
    times = times && tree >= 1.5 && tree <= 2.8 && v3 >= 1.5 && v3 <= 2.8 && (n < 512 || attn >= 3.0);
    ratios += fmt(" %zu: %.2f/%.2f/%.2f", n, tree, v3, attn);
  }
  return {counters && times, fmt("counters %s; median time ratio t(n)/t(n/2) tree/V3/attention:%s", counters ? "exact" : "WRONG",
                                 ratios.c_str())};
}

Outcome determinism(Context& cx) {
  const RunResult& a = cx.run("lm-v3-desk", "lm-v3-desk");
  const RunResult& b = cx.run("lm-v3-desk", "lm-v3-desk-repeat");
  const bool metrics = read_bytes(a.run_dir / "metrics.jsonl") == read_bytes(b.run_dir / "metrics.jsonl");
  const bool ckpt = read_bytes(a.run_dir / "final.ckpt") == read_bytes(b.run_dir / "final.ckpt");
  const bool best = read_bytes(a.run_dir / "best.ckpt") == read_bytes(b.run_dir / "best.ckpt");
  return {metrics && ckpt && best, fmt("lm-v3-desk seed 42 twice: metrics.jsonl %s, final.ckpt %s, best.ckpt %s",
                                       metrics ? "identical" : "DIFFER", ckpt ? "identical" : "DIFFER",
                                       best ? "identical" : "DIFFER")};
}

Outcome parameters(Context&) {
  auto count = [](const std::string& name) {
    Rng rng(0);
    return Model<float>(preset(name).model, rng).param_count();
  };
  bool ok = true;
  std::string detail;
  for (auto [w, t] : {std::pair<const char*, const char*>{"lm-v1-paper", "lm-transformer-one-paper"},
                      {"lm-v2-paper", "lm-transformer-paper"},
                      {"lm-v3-paper", "lm-transformer-paper"},
                      {"brackets-wat-paper", "brackets-transformer-paper"},
                      {"brackets-chunk-paper", "brackets-transformer-paper"}}) {
    const double a = static_cast<double>(count(w)), b = static_cast<double>(count(t));
    const double gap = std::abs(a - b) / std::max(a, b);
    ok = ok && gap < 0.10;
    detail += fmt("%s%s %.0f vs %.0f (%.1f%%)", detail.empty() ? "" : "; ", w, a, b, 100 * gap);
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  std::vector<int> only;
  std::string work = "acceptance_runs", corpus;
  app.add_option("--only", only, "Criteria to run")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--work-dir", work, "Directory for training runs and logs");
  app.add_option("--corpus", corpus, "Character corpus path");
  CLI11_PARSE(app, argc, argv);

  Context cx;
  cx.work = work;
  fs::create_directories(cx.work);
  try {
    cx.corpus = resolve_corpus_path(corpus).string();
  } catch (const FileError&) {
    cx.corpus = corpus;
  }

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"gradient correctness", gradients},       {"causality", causality},
      {"complexity laws", complexity},           {"averaging-tree limit", averaging},
      {"batched-chunk equivalence", batched_chunks}, {"bracket task (desk)", brackets},
      {"language model (desk)", language_model}, {"scaling benchmark", scaling},
      {"determinism", determinism},              {"parameter matching", parameters}};
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second(cx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
