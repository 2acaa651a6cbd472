#pragma once

// Forward-only scaling benchmark: WAT tree reduction, the V3 chunk pipeline
// and one causal attention block at growing n, with exact operation counters.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "json.hpp"
#include "wat/models.hpp"
#include "wat/train.hpp"

namespace wat {

struct BenchOptions {
  std::vector<std::size_t> lengths{128, 256, 512, 1024, 2048};
  std::size_t embed_dim = 40;
  std::size_t batch = 2;
  std::size_t heads = 4;
  std::size_t chunk_size = 32;
  std::size_t warmup = 1;
  std::size_t reps = 5;
  std::uint64_t seed = 42;
};

struct BenchRow {
  std::string model;
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t batch = 0;
  std::size_t reps = 0;
  double min_seconds = 0.0;
  double median_seconds = 0.0;
  double max_seconds = 0.0;
  std::uint64_t merges = 0;
  std::uint64_t attention_scores = 0;
  std::size_t peak_bytes = 0;
  std::size_t workers = 1;
};

inline nlohmann::ordered_json to_json(const BenchRow& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["n"] = r.n;
  j["d"] = r.d;
  j["batch"] = r.batch;
  j["reps"] = r.reps;
  j["min_seconds"] = r.min_seconds;
  j["median_seconds"] = r.median_seconds;
  j["max_seconds"] = r.max_seconds;
  j["merges"] = r.merges;
  j["attention_scores"] = r.attention_scores;
  j["peak_bytes"] = r.peak_bytes;
  j["workers"] = r.workers;
  return j;
}

struct BenchReport {
  std::vector<BenchRow> rows;

  const BenchRow& at(const std::string& model, std::size_t n) const {
    for (const auto& r : rows)
      if (r.model == model && r.n == n) return r;
    throw InputError("no bench row for " + model + " at n = " + std::to_string(n));
  }
  /// median(n) / median(n / 2)
  double time_ratio(const std::string& model, std::size_t n) const {
    return at(model, n).median_seconds / at(model, n / 2).median_seconds;
  }

  void write_jsonl(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FileError("cannot write " + path.string());
    for (const auto& r : rows) out << to_json(r).dump() << "\n";
  }

  void print(std::ostream& os) const {
    os << "model          n      median_ms   min_ms     max_ms     merges      attn_scores  peak_MB\n";
    char line[160];
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-12s %5zu  %10.3f %10.3f %10.3f %10llu %12llu %8.2f\n", r.model.c_str(), r.n,
                    r.median_seconds * 1e3, r.min_seconds * 1e3, r.max_seconds * 1e3,
                    static_cast<unsigned long long>(r.merges), static_cast<unsigned long long>(r.attention_scores),
                    static_cast<double>(r.peak_bytes) / (1 << 20));
      os << line;
    }
  }
};

namespace detail {

/// Times `fn` and fills the timing fields; `fn` returns the output tensor so
/// that its buffers count towards the peak.
template <class F>
void time_forward(BenchRow& row, const BenchOptions& opt, F&& fn) {
  for (std::size_t i = 0; i < opt.warmup; ++i) fn();
  std::vector<double> times;
  MemoryStats::reset_peak();
  const std::size_t base = MemoryStats::live();
  for (std::size_t i = 0; i < std::max<std::size_t>(opt.reps, 1); ++i) {
    Stopwatch w;
    const Tensor out = fn();
    times.push_back(w.seconds());
    if (out.numel() == 0) throw NumericError("empty benchmark output");
  }
  row.peak_bytes = MemoryStats::peak() - base;
  std::sort(times.begin(), times.end());
  row.reps = times.size();
  row.min_seconds = times.front();
  row.max_seconds = times.back();
  row.median_seconds = times.size() % 2 ? times[times.size() / 2]
                                        : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
}

}  // namespace detail

inline BenchReport run_benchmark(const BenchOptions& opt, std::ostream* progress = nullptr) {
  if (Tape::active()) throw PreconditionError("run_benchmark is forward-only; a Tape is active");
  const std::size_t B = opt.batch, d = opt.embed_dim;
  BenchReport rep;
  Rng rng(opt.seed);
  MergeCell<float> cell(d, true, rng);
  AttentionBlock<float> block(d, opt.heads, 4, rng);

  for (std::size_t n : opt.lengths) {
    const Tensor h = init::normal<float>({B, n, d}, 1.0, rng);
    std::vector<TokenId> tokens(B * n);
    for (auto& t : tokens) t = static_cast<TokenId>(rng.below(65));
    auto row_for = [&](const std::string& model) {
      BenchRow r;
      r.model = model;
      r.n = n;
      r.d = d;
      r.batch = B;
      return r;
    };

    BenchRow tree = row_for("wat_tree");
    MergeStats ms;
    detail::time_forward(tree, opt, [&] {
      ms.reset();
      return tree_reduce(h, cell, &ms);
    });
    tree.merges = ms.merges_performed;
    rep.rows.push_back(tree);

    if (n % opt.chunk_size == 0) {
      ModelConfig mc;
      mc.variant = Variant::wat_v3;
      mc.embed_dim = d;
      mc.seq_len = n;
      mc.chunk_size = opt.chunk_size;
      mc.n_max = std::max<std::size_t>(n, 2048);
      Rng mr(opt.seed);
      const Model<float> v3(mc, mr);
      BenchRow r = row_for("wat_v3");
      detail::time_forward(r, opt, [&] { return v3.forward_seq(tokens, B, n); });
      r.merges = v3.stats().merges.merges_performed;
      rep.rows.push_back(r);
    }

    BenchRow attn = row_for("attention");
    AttentionStats as;
    detail::time_forward(attn, opt, [&] {
      as = {};
      return causal_self_attention(h, block, true, {}, &as);
    });
    attn.attention_scores = as.scores;
    rep.rows.push_back(attn);

    if (progress) *progress << "bench n=" << n << " done\n" << std::flush;
  }
  return rep;
}

}  // namespace wat
