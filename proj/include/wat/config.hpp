#pragma once

// Run configuration: sectioned `key = value` text and named presets.

#include <charconv>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wat/models.hpp"
#include "wat/train.hpp"

namespace wat {

struct RunSection {
  std::string command = "train-lm";
  std::string preset;
  std::string corpus;
  std::string run_dir;
  std::string checkpoint;
  bool deterministic = true;
  bool desk_scale = true;

  bool operator==(const RunSection&) const = default;
};

struct DataConfig {
  // language modeling
  bool target_column = false;
  std::size_t train_windows = 50000;
  std::size_t test_windows = 5000;
  std::size_t train_start = 0;
  std::size_t train_range = 50000;
  std::size_t test_start = 50512;
  std::size_t test_range = 5000;
  // brackets
  std::size_t num_examples = 2000;
  std::size_t min_len = 512;
  std::size_t max_len = 1024;
  double train_fraction = 0.8;
  std::string cache;

  bool operator==(const DataConfig&) const = default;
};

struct GenerateConfig {
  std::string prompt = "First";
  std::size_t length = 500;
  double temperature = 0.8;
  std::size_t top_k = 40;
  bool greedy = false;

  bool operator==(const GenerateConfig&) const = default;
};

struct RunConfig {
  RunSection run;
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  GenerateConfig generate;

  bool operator==(const RunConfig&) const = default;

  bool is_lm() const { return model.task != Task::classify; }

  void validate() const {
    model.validate();
    train.validate();
    if (run.command == "train-lm" && !is_lm()) throw ConfigError("train-lm needs an lm_* task");
    if (run.command == "train-brackets" && is_lm()) throw ConfigError("train-brackets needs task = classify");
    if (is_lm()) {
      if (data.train_windows == 0 || data.test_windows == 0) throw ConfigError("window counts must be positive");
      if (data.train_windows > data.train_range || data.test_windows > data.test_range)
        throw ConfigError("window counts exceed train_range/test_range");
    } else {
      if (data.min_len < 2 || data.min_len % 2 || data.max_len % 2 || data.max_len < data.min_len)
        throw ConfigError("bracket lengths must be even with 2 <= min_len <= max_len");
      if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0))
        throw ConfigError("train_fraction must lie in (0, 1)");
      if (model.vocab_size != bracket_vocab().size())
        throw ConfigError("bracket models need vocab_size = " + std::to_string(bracket_vocab().size()));
      if (model.positions != PositionMode::none && data.max_len > model.n_max)
        throw ConfigError("max_len exceeds the positional table size n_max");
    }
    if (generate.top_k == 0 && !generate.greedy && !(generate.temperature > 0.0))
      throw ConfigError("temperature must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_value(const std::string& v) {
  std::string out = "\"";
  for (char c : v) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '"': out += "\\\""; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  return out + "\"";
}
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(std::size_t v) { return std::to_string(v); }
inline std::string format_value(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string format_value(Variant v) { return to_string(v); }
inline std::string format_value(Task v) { return to_string(v); }
inline std::string format_value(PositionMode v) { return to_string(v); }

inline void parse_value(const std::string& s, std::string& out) {
  if (s.size() < 2 || s.front() != '"' || s.back() != '"') {
    out = s;
    return;
  }
  out.clear();
  for (std::size_t i = 1; i + 1 < s.size(); ++i) {
    if (s[i] != '\\' || i + 2 >= s.size()) {
      out += s[i];
      continue;
    }
    const char c = s[++i];
    out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
  }
}
inline void parse_value(const std::string& s, bool& out) {
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw ConfigError("expected true or false, got '" + s + "'");
}
template <class N>
  requires std::is_arithmetic_v<N>
void parse_number(const std::string& s, N& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
}
inline void parse_value(const std::string& s, std::size_t& out) {
  if (!s.empty() && s[0] == '-') throw ConfigError("expected a non-negative integer, got '" + s + "'");
  parse_number(s, out);
}
inline void parse_value(const std::string& s, double& out) { parse_number(s, out); }
inline void parse_value(const std::string& s, Variant& out) { out = parse_variant(s); }
inline void parse_value(const std::string& s, Task& out) { out = parse_task(s); }
inline void parse_value(const std::string& s, PositionMode& out) { out = parse_position_mode(s); }

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class S, class M>
std::pair<std::string, Field> field(const char* section, const char* key, S RunConfig::*sub, M S::*mem) {
  return {std::string(section) + "." + key,
          Field{[=](const RunConfig& c) { return format_value(c.*sub.*mem); },
                [=](RunConfig& c, const std::string& v) { parse_value(v, c.*sub.*mem); }}};
}

/// Keys are "section.key"; std::map keeps them sorted, which is the
/// canonical print order.
inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto add = [&](std::pair<std::string, Field> f) { t.emplace(std::move(f)); };
    add(field("run", "command", &RunConfig::run, &RunSection::command));
    add(field("run", "preset", &RunConfig::run, &RunSection::preset));
    add(field("run", "corpus", &RunConfig::run, &RunSection::corpus));
    add(field("run", "run_dir", &RunConfig::run, &RunSection::run_dir));
    add(field("run", "checkpoint", &RunConfig::run, &RunSection::checkpoint));
    add(field("run", "deterministic", &RunConfig::run, &RunSection::deterministic));
    add(field("run", "desk_scale", &RunConfig::run, &RunSection::desk_scale));

    add(field("model", "variant", &RunConfig::model, &ModelConfig::variant));
    add(field("model", "task", &RunConfig::model, &ModelConfig::task));
    add(field("model", "embed_dim", &RunConfig::model, &ModelConfig::embed_dim));
    add(field("model", "vocab_size", &RunConfig::model, &ModelConfig::vocab_size));
    add(field("model", "seq_len", &RunConfig::model, &ModelConfig::seq_len));
    add(field("model", "chunk_size", &RunConfig::model, &ModelConfig::chunk_size));
    add(field("model", "n_max", &RunConfig::model, &ModelConfig::n_max));
    add(field("model", "positions", &RunConfig::model, &ModelConfig::positions));
    add(field("model", "layers", &RunConfig::model, &ModelConfig::layers));
    add(field("model", "heads", &RunConfig::model, &ModelConfig::heads));
    add(field("model", "ff_mult", &RunConfig::model, &ModelConfig::ff_mult));
    add(field("model", "num_classes", &RunConfig::model, &ModelConfig::num_classes));
    add(field("model", "v1_symmetric_conv", &RunConfig::model, &ModelConfig::v1_symmetric_conv));
    add(field("model", "input_gate_bias", &RunConfig::model, &ModelConfig::input_gate_bias));
    add(field("model", "merge_bias", &RunConfig::model, &ModelConfig::merge_bias));

    add(field("train", "lr", &RunConfig::train, &TrainConfig::lr));
    add(field("train", "weight_decay", &RunConfig::train, &TrainConfig::weight_decay));
    add(field("train", "clip_norm", &RunConfig::train, &TrainConfig::clip_norm));
    add(field("train", "batch_size", &RunConfig::train, &TrainConfig::batch_size));
    add(field("train", "epochs", &RunConfig::train, &TrainConfig::epochs));
    add(field("train", "eta_min", &RunConfig::train, &TrainConfig::eta_min));
    add(field("train", "beta1", &RunConfig::train, &TrainConfig::beta1));
    add(field("train", "beta2", &RunConfig::train, &TrainConfig::beta2));
    add(field("train", "eps", &RunConfig::train, &TrainConfig::eps));
    add(field("train", "seed", &RunConfig::train, &TrainConfig::seed));
    add(field("train", "patience", &RunConfig::train, &TrainConfig::patience));

    add(field("data", "target_column", &RunConfig::data, &DataConfig::target_column));
    add(field("data", "train_windows", &RunConfig::data, &DataConfig::train_windows));
    add(field("data", "test_windows", &RunConfig::data, &DataConfig::test_windows));
    add(field("data", "train_start", &RunConfig::data, &DataConfig::train_start));
    add(field("data", "test_start", &RunConfig::data, &DataConfig::test_start));
    add(field("data", "train_range", &RunConfig::data, &DataConfig::train_range));
    add(field("data", "test_range", &RunConfig::data, &DataConfig::test_range));
    add(field("data", "num_examples", &RunConfig::data, &DataConfig::num_examples));
    add(field("data", "min_len", &RunConfig::data, &DataConfig::min_len));
    add(field("data", "max_len", &RunConfig::data, &DataConfig::max_len));
    add(field("data", "train_fraction", &RunConfig::data, &DataConfig::train_fraction));
    add(field("data", "cache", &RunConfig::data, &DataConfig::cache));

    add(field("generate", "prompt", &RunConfig::generate, &GenerateConfig::prompt));
    add(field("generate", "length", &RunConfig::generate, &GenerateConfig::length));
    add(field("generate", "temperature", &RunConfig::generate, &GenerateConfig::temperature));
    add(field("generate", "top_k", &RunConfig::generate, &GenerateConfig::top_k));
    add(field("generate", "greedy", &RunConfig::generate, &GenerateConfig::greedy));
    return t;
  }();
  return table;
}

}  // namespace detail

/// Sets one "section.key" entry from its text form.
inline void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
  const auto& table = detail::fields();
  auto it = table.find(dotted_key);
  if (it == table.end()) throw ConfigError("unknown config key '" + dotted_key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(dotted_key + ": " + e.what());
  }
}

/// Canonical text form: sections and keys in sorted order. When `only` is
/// nonempty, just that section is printed.
inline std::string print_config(const RunConfig& cfg, const std::string& only = "") {
  std::ostringstream out;
  std::string section;
  for (const auto& [key, f] : detail::fields()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (!only.empty() && sec != only) continue;
    if (sec != section) {
      if (!section.empty()) out << "\n";
      out << "[" << sec << "]\n";
      section = sec;
    }
    out << key.substr(dot + 1) << " = " << f.get(cfg) << "\n";
  }
  return out.str();
}

/// Applies the entries of a config text on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside any [section]");
    set_config_value(base, section + "." + detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {}) {
  return parse_config(read_text_file(path), std::move(base));
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

inline std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const char* task : {"lm-v1", "lm-v2", "lm-v3", "lm-transformer", "lm-transformer-one",
                           "brackets-wat", "brackets-chunk", "brackets-transformer"}) {
    out.push_back(std::string(task) + "-desk");
    out.push_back(std::string(task) + "-paper");
  }
  return out;
}

inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.run.preset = name;
  bool paper;
  std::string base;
  if (name.ends_with("-desk")) {
    paper = false;
    base = name.substr(0, name.size() - 5);
  } else if (name.ends_with("-paper")) {
    paper = true;
    base = name.substr(0, name.size() - 6);
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  c.run.desk_scale = !paper;
  c.run.run_dir = "runs/" + name;

  if (base.starts_with("lm-")) {
    c.run.command = "train-lm";
    c.model.embed_dim = 40;
    c.model.vocab_size = 65;
    c.model.n_max = 2048;
    c.model.positions = PositionMode::learned;
    c.model.seq_len = paper ? 512 : 128;
    c.train.batch_size = paper ? 64 : 32;
    c.train.weight_decay = 0.01;
    c.train.patience = 0;
    c.data.train_windows = paper ? 50000 : 5000;
    c.data.test_windows = paper ? 5000 : 1000;
    c.train.epochs = paper ? 30 : 5;
    c.train.lr = paper ? 3e-4 : 3e-3;
    if (base == "lm-v1") {
      c.model.variant = Variant::wat_v1;
      c.model.task = Task::lm_one_to_one;
      c.model.v1_symmetric_conv = true;
      c.train.weight_decay = 0.0;
      if (paper) c.train.epochs = 60;
    } else if (base == "lm-v2") {
      c.model.variant = Variant::wat_v2;
      c.model.task = Task::lm_seq2seq;
    } else if (base == "lm-v3") {
      c.model.variant = Variant::wat_v3;
      c.model.task = Task::lm_seq2seq;
      c.model.chunk_size = 32;
    } else if (base == "lm-transformer" || base == "lm-transformer-one") {
      c.model.variant = Variant::transformer;
      c.model.embed_dim = 36;
      c.model.heads = 4;
      c.model.layers = 2;
      c.model.ff_mult = 4;
      if (base == "lm-transformer-one") {
        c.model.task = Task::lm_one_to_one;
        if (paper) c.train.epochs = 60;
      } else {
        c.model.task = Task::lm_seq2seq;
      }
    } else {
      throw ConfigError("unknown preset '" + name + "'");
    }
    return c;
  }

  if (base.starts_with("brackets-")) {
    c.run.command = "train-brackets";
    c.model.task = Task::classify;
    c.model.vocab_size = bracket_vocab().size();
    c.model.num_classes = 2;
    c.model.positions = PositionMode::none;
    c.model.n_max = 1024;
    c.data.num_examples = 2000;
    c.data.min_len = paper ? 512 : 64;
    c.data.max_len = paper ? 1024 : 128;
    c.train.epochs = paper ? 100 : 30;
    c.train.patience = 10;
    c.train.batch_size = 32;
    c.train.weight_decay = 0.01;
    if (base == "brackets-wat") {
      c.model.variant = Variant::wat_v1;
      c.model.embed_dim = 56;
    } else if (base == "brackets-chunk") {
      c.model.variant = Variant::wat_v3;
      c.model.embed_dim = 56;
      c.model.chunk_size = 32;
    } else if (base == "brackets-transformer") {
      c.model.variant = Variant::transformer;
      c.model.embed_dim = 36;
      c.model.heads = 4;
      c.model.layers = 2;
      c.model.ff_mult = 4;
      c.model.positions = PositionMode::sinusoidal;
    } else {
      throw ConfigError("unknown preset '" + name + "'");
    }
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

}  // namespace wat
