#pragma once

// Checkpoint file: a text header (format version, model config, vocabulary,
// tensor manifest) followed by raw little-endian FP32 parameter data.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "wat/config.hpp"
#include "wat/data.hpp"
#include "wat/models.hpp"

namespace wat {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Vocab vocab;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace detail {

inline std::string hex_encode(const std::string& s) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    out += digits[c >> 4];
    out += digits[c & 15];
  }
  return out;
}

inline std::string hex_decode(const std::string& s) {
  if (s.size() % 2) throw FileError("malformed hex token in checkpoint");
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw FileError("malformed hex token in checkpoint");
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); i += 2) out += static_cast<char>(nib(s[i]) * 16 + nib(s[i + 1]));
  return out;
}

inline std::string compact_shape(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const Vocab& vocab) {
  RunConfig holder;
  holder.model = model.config();
  const std::string config_text = print_config(holder, "model");

  std::ostringstream head;
  head << "wat-checkpoint " << kCheckpointVersion << "\n";
  head << "config " << config_text.size() << "\n" << config_text;
  head << "vocab " << vocab.size() << " pad " << (vocab.pad_id() ? std::to_string(*vocab.pad_id()) : "-") << "\n";
  for (const auto& t : vocab.tokens()) head << detail::hex_encode(t) << "\n";
  const auto params = model.parameters();
  head << "tensors " << params.size() << "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    head << name << " " << detail::compact_shape(t.shape()) << " " << offset << " " << t.numel() << "\n";
    offset += t.numel() * sizeof(float);
  }
  head << "payload " << offset << "\n";

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot write " + tmp.string());
    const std::string h = head.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : params) {
      const auto d = t.data();
      out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
    }
    if (!out) throw FileError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("checkpoint not found: " + path.string());
  auto fail = [&](const std::string& m) -> FileError { return FileError(path.string() + ": " + m); };
  auto expect_word = [&](const std::string& w) {
    std::string got;
    in >> got;
    if (got != w) throw fail("expected '" + w + "', found '" + got + "'");
  };

  Checkpoint ck;
  int version = 0;
  expect_word("wat-checkpoint");
  in >> version;
  if (version != kCheckpointVersion) throw fail("unsupported checkpoint version " + std::to_string(version));

  std::size_t config_bytes = 0;
  expect_word("config");
  in >> config_bytes;
  in.get();
  std::string config_text(config_bytes, '\0');
  in.read(config_text.data(), static_cast<std::streamsize>(config_bytes));
  ck.config = parse_config(config_text).model;

  std::size_t vocab_size = 0;
  std::string pad;
  expect_word("vocab");
  in >> vocab_size;
  expect_word("pad");
  in >> pad;
  std::vector<std::string> tokens(vocab_size);
  for (auto& t : tokens) {
    std::string hex;
    in >> hex;
    t = detail::hex_decode(hex);
  }
  ck.vocab = Vocab(tokens, pad == "-" ? std::nullopt : std::optional<TokenId>(std::stoi(pad)));

  std::size_t count = 0;
  expect_word("tensors");
  in >> count;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset, numel;
  };
  std::vector<Entry> entries(count);
  for (auto& e : entries) {
    std::string shape;
    in >> e.name >> shape >> e.offset >> e.numel;
    if (shape.size() < 2 || shape.front() != '[' || shape.back() != ']') throw fail("malformed shape " + shape);
    std::stringstream dims(shape.substr(1, shape.size() - 2));
    std::string dim;
    while (std::getline(dims, dim, ',')) e.shape.push_back(std::stoul(dim));
  }
  std::size_t payload = 0;
  expect_word("payload");
  in >> payload;
  in.get();
  if (!in) throw fail("truncated header");
  std::vector<char> bytes(payload);
  in.read(bytes.data(), static_cast<std::streamsize>(payload));
  if (static_cast<std::size_t>(in.gcount()) != payload) throw fail("truncated payload");

  for (const auto& e : entries) {
    if (e.offset + e.numel * sizeof(float) > payload) throw fail("tensor " + e.name + " runs past the payload");
    std::vector<float> values(e.numel);
    std::memcpy(values.data(), bytes.data() + e.offset, e.numel * sizeof(float));
    ck.tensors.emplace_back(e.name, Tensor(e.shape, std::move(values)));
  }
  return ck;
}

/// Rebuilds the model stored in a checkpoint; the manifest must match the
/// model's parameter list exactly.
inline std::pair<Model<float>, Vocab> load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  Rng scratch(0);
  Model<float> model(ck.config, scratch);
  const auto params = model.parameters();
  if (params.size() != ck.tensors.size()) throw FileError(path.string() + ": parameter count mismatch");
  std::vector<Tensor> values;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != ck.tensors[i].first || params[i].second.shape() != ck.tensors[i].second.shape()) {
      throw FileError(path.string() + ": tensor " + ck.tensors[i].first + " does not match parameter " +
                      params[i].first);
    }
    Tensor t = ck.tensors[i].second;
    t.set_requires_grad(true);
    values.push_back(t);
  }
  model.assign(values);
  return {std::move(model), std::move(ck.vocab)};
}

}  // namespace wat
