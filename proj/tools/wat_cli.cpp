#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "wat/wat.hpp"

namespace fs = std::filesystem;
using namespace wat;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

struct CommonFlags {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
  std::optional<bool> deterministic;
  std::string corpus;
  std::string checkpoint;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Config file (key = value sections)");
  cmd->add_option("--preset", f.preset, "Named preset, e.g. lm-v3-desk");
  cmd->add_option("--seed", f.seed, "Seed for every random stream");
  cmd->add_option("--run-dir", f.run_dir, "Run directory");
  cmd->add_flag("--deterministic,!--no-deterministic", f.deterministic, "Zero wall-clock fields in logs");
  cmd->add_option("--corpus", f.corpus, "Character corpus path");
  cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint path");
  cmd->add_option("--set", f.sets, "Override one value: section.key=value")->take_all();
}

/// Preset, then config file, then flags. For generate/eval a run directory's
/// config.txt stands in for --config.
RunConfig resolve(const std::string& command, const CommonFlags& f) {
  std::string name = f.preset;
  if (name.empty()) name = command == "train-brackets" ? "brackets-wat-desk" : "lm-v3-desk";
  RunConfig cfg = preset(name);
  std::string config_path = f.config;
  if (config_path.empty() && (command == "generate" || command == "eval") && !f.run_dir.empty() &&
      fs::exists(fs::path(f.run_dir) / "config.txt")) {
    config_path = (fs::path(f.run_dir) / "config.txt").string();
  }
  if (!config_path.empty()) cfg = load_config_file(config_path, cfg);
  if (command == "train-lm" || command == "train-brackets") cfg.run.command = command;
  if (f.seed) cfg.train.seed = *f.seed;
  if (!f.run_dir.empty()) cfg.run.run_dir = f.run_dir;
  if (f.deterministic) cfg.run.deterministic = *f.deterministic;
  if (!f.corpus.empty()) cfg.run.corpus = f.corpus;
  if (!f.checkpoint.empty()) cfg.run.checkpoint = f.checkpoint;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
    set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

fs::path checkpoint_path(const RunConfig& cfg) {
  if (!cfg.run.checkpoint.empty()) return cfg.run.checkpoint;
  if (cfg.run.run_dir.empty()) throw ConfigError("give --checkpoint or --run-dir");
  const fs::path best = fs::path(cfg.run.run_dir) / "best.ckpt";
  return fs::exists(best) ? best : fs::path(cfg.run.run_dir) / "final.ckpt";
}

int print_suite(const SuiteReport& rep) {
  for (const auto& e : rep.entries) {
    std::printf("%-5s %-10s %-28s rel %.3e  (tol %.0e)\n", e.passed() ? "ok" : "FAIL", e.group.c_str(),
                e.result.name.c_str(), e.result.max_rel_error, e.tolerance);
  }
  std::printf("%-5s %-10s corrupted backward rule flagged\n", rep.corrupted_rule_detected ? "ok" : "FAIL", "fixture");
  std::printf("worst primitive %.3e, worst model %.3e, %.1fs\n", rep.worst("primitive"), rep.worst("model"),
              rep.seconds);
  return rep.all_passed() ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wave-Attractor-Tree models: training, sampling and verification"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* train_lm = app.add_subcommand("train-lm", "Train a character language model");
  auto* train_br = app.add_subcommand("train-brackets", "Train a balanced-bracket classifier");
  auto* generate = app.add_subcommand("generate", "Sample text from a checkpoint");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference suite over every primitive and model");
  auto* bench = app.add_subcommand("bench", "Forward-time scaling benchmark");
  auto* presets = app.add_subcommand("presets", "List preset names");
  auto* show = app.add_subcommand("show-config", "Print the resolved config");
  for (auto* c : {train_lm, train_br, generate, eval, show}) add_common(c, flags);

  std::optional<std::string> prompt;
  std::optional<std::size_t> length, top_k;
  std::optional<double> temperature;
  bool greedy = false;
  generate->add_option("--prompt", prompt);
  generate->add_option("--length", length);
  generate->add_option("--temperature", temperature);
  generate->add_option("--top-k", top_k);
  generate->add_flag("--greedy", greedy);

  bool literal = false, primitives_only = false;
  gradcheck_cmd->add_flag("--fp32-reference", literal, "FP32 numeric side with h = 1e-3 (report only)");
  gradcheck_cmd->add_flag("--primitives-only", primitives_only);

  BenchOptions bopt;
  std::string bench_out = "runs/bench.jsonl";
  std::uint64_t bench_seed = 42;
  bench->add_option("--out", bench_out, "JSONL report path");
  bench->add_option("--lengths", bopt.lengths)->delimiter(',');
  bench->add_option("--reps", bopt.reps)->check(CLI::PositiveNumber);
  bench->add_option("--dim", bopt.embed_dim);
  bench->add_option("--seed", bench_seed);
  bench->add_flag("--deterministic", "Single worker (always the case here)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*presets) {
      for (const auto& n : preset_names()) std::cout << n << "\n";
      return kOk;
    }
    if (*gradcheck_cmd) {
      SuiteOptions so;
      so.include_models = !primitives_only;
      if (literal) {
        so.check.step = 1e-3;
        so.check.fp64_reference = false;
      }
      return print_suite(run_gradcheck_suite(so));
    }
    if (*bench) {
      bopt.seed = bench_seed;
      for (std::size_t n : bopt.lengths)
        if (n < 2) throw ConfigError("bench lengths must be at least 2");
      const BenchReport rep = run_benchmark(bopt, &std::cerr);
      rep.print(std::cout);
      rep.write_jsonl(bench_out);
      std::cout << "workers 1, report " << bench_out << "\n";
      return kOk;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    RunConfig cfg = resolve(command, flags);
    if (command == "show-config") {
      std::cout << print_config(cfg);
      return kOk;
    }
    if (command == "train-lm" || command == "train-brackets") {
      cfg.validate();
      if (command == "train-lm") {
        std::cout << "corpus " << resolve_corpus_path(cfg.run.corpus).string() << "\n";
        run_train_lm(cfg, std::cout);
      } else {
        run_train_brackets(cfg, std::cout);
      }
      return kOk;
    }
    if (prompt) cfg.generate.prompt = *prompt;
    if (length) cfg.generate.length = *length;
    if (temperature) cfg.generate.temperature = *temperature;
    if (top_k) cfg.generate.top_k = *top_k;
    if (greedy) cfg.generate.greedy = true;
    const fs::path ckpt = checkpoint_path(cfg);
    if (command == "generate") {
      std::cout << run_generate(cfg, ckpt) << "\n";
      return kOk;
    }
    const EvalResult r = run_eval(cfg, ckpt);
    std::cout << "checkpoint " << ckpt.string() << "\nloss " << r.loss << "\naccuracy " << r.accuracy << "\ncount "
              << r.count << "\n";
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kInvalid;
  } catch (const InputError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
