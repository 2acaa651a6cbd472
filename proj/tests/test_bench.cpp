#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "wat/bench.hpp"

using namespace wat;

namespace {

BenchReport small_report() {
  BenchOptions o;
  o.lengths = {64, 128, 256};
  o.embed_dim = 8;
  o.heads = 2;
  o.chunk_size = 16;
  o.reps = 5;
  return run_benchmark(o);
}

TEST(Bench, CountersAreExact) {
  const BenchReport r = small_report();
  for (std::size_t n : {64, 128, 256}) {
    EXPECT_EQ(r.at("wat_tree", n).merges, 2u * (n - 1));
    EXPECT_EQ(r.at("wat_v3", n).merges, 2u * (n / 16) * 15);
    EXPECT_EQ(r.at("attention", n).attention_scores, 2u * 2 * n * n);
  }
  EXPECT_EQ(r.at("wat_v3", 256).merges, 2 * r.at("wat_v3", 128).merges);
  EXPECT_EQ(r.at("attention", 256).attention_scores, 4 * r.at("attention", 128).attention_scores);
}

TEST(Bench, RowsKeepOrderedTimings) {
  const BenchReport r = small_report();
  EXPECT_EQ(r.rows.size(), 9u);
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.reps, 5u);
    EXPECT_LE(row.min_seconds, row.median_seconds);
    EXPECT_LE(row.median_seconds, row.max_seconds);
    EXPECT_GT(row.peak_bytes, 0u);
  }
  EXPECT_GT(r.at("attention", 256).peak_bytes, r.at("attention", 128).peak_bytes);
  EXPECT_THROW(r.at("attention", 100), InputError);
}

TEST(Bench, JsonlHasStableFields) {
  const BenchReport r = small_report();
  const auto path = std::filesystem::temp_directory_path() / "wat_bench_test.jsonl";
  r.write_jsonl(path);
  std::ifstream in(path);
  std::string line, first;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    if (count == 0) first = line;
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"model", "n", "d", "batch", "reps", "min_seconds", "median_seconds", "max_seconds",
                            "merges", "attention_scores", "peak_bytes", "workers"})
      EXPECT_TRUE(j.contains(key)) << key;
    ++count;
  }
  EXPECT_EQ(count, r.rows.size());
  EXPECT_EQ(first.rfind("{\"model\":", 0), 0u);
  std::filesystem::remove(path);
}

TEST(Bench, RefusesAnActiveTape) {
  Tape tape;
  EXPECT_THROW(run_benchmark(BenchOptions{}), PreconditionError);
}

}  // namespace
