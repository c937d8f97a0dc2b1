#pragma once

// Checkpoint = <stem>.json manifest + <stem>.bin flat little-endian float64
// array. The manifest carries the model config, step count, data-stream RNG
// state, free-form trainer state and a tensor index (buffer, name, shape,
// byte offset). Each file is written to a temporary and renamed into place.

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "chaoscast/error.hpp"
#include "chaoscast/model.hpp"

namespace chaoscast {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using json = nlohmann::json;

inline const char* to_string(PositionalEncoding p) {
  return p == PositionalEncoding::learned ? "learned" : "sinusoidal";
}

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::weight: return "weight";
    case ParamGroup::bias: return "bias";
    case ParamGroup::norm_gain: return "norm_gain";
    case ParamGroup::norm_bias: return "norm_bias";
    case ParamGroup::positional: return "positional";
  }
  return "?";
}

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_layers", c.n_layers},     {"d_model", c.d_model}, {"n_heads", c.n_heads},
           {"context_len", c.context_len}, {"d_ff", c.d_ff},       {"in_dim", c.in_dim},
           {"out_dim", c.out_dim},       {"positional", to_string(c.positional)}};
}

inline void from_json(const json& j, ModelConfig& c) {
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.in_dim = j.value("in_dim", std::size_t{3});
  c.out_dim = j.value("out_dim", std::size_t{3});
  const auto pos = j.value("positional", std::string("sinusoidal"));
  if (pos == "learned") {
    c.positional = PositionalEncoding::learned;
  } else if (pos == "sinusoidal") {
    c.positional = PositionalEncoding::sinusoidal;
  } else {
    throw SchemaMismatch("unknown positional encoding '" + pos + "'");
  }
}

// Writes `bytes` to path via a sibling temporary and an atomic rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename to " + path.string() + " failed: " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

struct Checkpoint {
  ModelConfig config;
  std::uint64_t step = 0;
  json rng = json::object();
  json extra = json::object();
  // Named flat buffers in the ParamLayout of `config`; "params" comes first.
  std::vector<std::pair<std::string, AlignedVector<double>>> buffers;

  const AlignedVector<double>& buffer(const std::string& name) const {
    for (const auto& [n, b] : buffers)
      if (n == name) return b;
    throw CheckpointMismatch("checkpoint has no buffer '" + name + "'");
  }
  bool has_buffer(const std::string& name) const {
    for (const auto& [n, b] : buffers)
      if (n == name) return true;
    return false;
  }

  ModelParams<double> params() const {
    ModelParams<double> p(config);
    p.values = buffer("params");
    return p;
  }
};

inline std::filesystem::path checkpoint_bin_path(const std::filesystem::path& manifest) {
  auto bin = manifest;
  bin.replace_extension(".bin");
  return bin;
}

// `manifest` is the .json path; the array file sits next to it as .bin.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& manifest) {
  const ParamLayout layout(ck.config);
  json index = json::array();
  std::string blob;
  for (const auto& [name, buf] : ck.buffers) {
    if (buf.size() != layout.size())
      throw ShapeMismatch("buffer '" + name + "' has " + std::to_string(buf.size()) + " values, layout needs " +
                          std::to_string(layout.size()));
    const std::size_t base = blob.size();
    for (const auto& t : layout.tensors())
      index.push_back({{"buffer", name},
                       {"name", t.name},
                       {"shape", {t.rows, t.cols}},
                       {"group", to_string(t.group)},
                       {"byte_offset", base + t.offset * sizeof(double)}});
    blob.append(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(double));
  }
  json buffers = json::array();
  for (const auto& [name, buf] : ck.buffers) buffers.push_back(name);
  json j = {{"format", "chaoscast-checkpoint"},
            {"version", 1},
            {"dtype", "float64-le"},
            {"config", ck.config},
            {"param_count", layout.size()},
            {"step", ck.step},
            {"rng", ck.rng},
            {"extra", ck.extra},
            {"buffers", buffers},
            {"data_file", checkpoint_bin_path(manifest).filename().string()},
            {"data_bytes", blob.size()},
            {"tensors", index}};
  write_file_atomic(checkpoint_bin_path(manifest), blob);
  write_file_atomic(manifest, j.dump(2) + "\n");
}

// Loads and validates a checkpoint. With `expected` set, any config
// difference is refused with CheckpointMismatch.
inline Checkpoint load_checkpoint(const std::filesystem::path& manifest, const ModelConfig* expected = nullptr) {
  if (!std::filesystem::exists(manifest)) throw MissingCheckpoint("no checkpoint at " + manifest.string());
  json j;
  try {
    j = json::parse(read_file(manifest));
  } catch (const json::exception& e) {
    throw SchemaMismatch("malformed checkpoint manifest " + manifest.string() + ": " + e.what());
  }
  Checkpoint ck;
  try {
    if (j.at("format") != "chaoscast-checkpoint" || j.at("dtype") != "float64-le")
      throw SchemaMismatch("not a chaoscast float64 checkpoint: " + manifest.string());
    ck.config = j.at("config").get<ModelConfig>();
    ck.step = j.at("step").get<std::uint64_t>();
    ck.rng = j.at("rng");
    ck.extra = j.at("extra");
  } catch (const json::exception& e) {
    throw SchemaMismatch("checkpoint manifest " + manifest.string() + ": " + e.what());
  }
  ck.config.validate();
  if (expected && !(*expected == ck.config))
    throw CheckpointMismatch("checkpoint config " + json(ck.config).dump() + " does not match requested " +
                             json(*expected).dump());

  const ParamLayout layout(ck.config);
  const std::string blob = read_file(manifest.parent_path() / j.at("data_file").get<std::string>());
  const auto names = j.at("buffers").get<std::vector<std::string>>();
  const std::size_t per_buffer = layout.size() * sizeof(double);
  if (blob.size() != names.size() * per_buffer || j.at("data_bytes").get<std::size_t>() != blob.size())
    throw CheckpointMismatch("checkpoint data size does not match its config");

  // Every indexed tensor must agree with the layout the config implies.
  const auto& index = j.at("tensors");
  if (index.size() != names.size() * layout.tensors().size())
    throw CheckpointMismatch("checkpoint tensor index does not match its config");
  std::size_t row = 0;
  for (std::size_t b = 0; b < names.size(); ++b) {
    for (const auto& t : layout.tensors()) {
      const auto& e = index[row++];
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      if (e.at("buffer") != names[b] || e.at("name") != t.name || shape.size() != 2 || shape[0] != t.rows ||
          shape[1] != t.cols || e.at("byte_offset").get<std::size_t>() != b * per_buffer + t.offset * sizeof(double))
        throw CheckpointMismatch("tensor " + t.name + " in " + names[b] + " does not match the model layout");
    }
    AlignedVector<double> buf(layout.size());
    std::memcpy(buf.data(), blob.data() + b * per_buffer, per_buffer);
    ck.buffers.emplace_back(names[b], std::move(buf));
  }
  if (!ck.has_buffer("params")) throw CheckpointMismatch("checkpoint has no params buffer");
  for (double v : ck.buffer("params"))
    if (!std::isfinite(v)) throw CheckpointMismatch("checkpoint contains non-finite parameters");
  return ck;
}

}  // namespace chaoscast
