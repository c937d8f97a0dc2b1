#pragma once

// Per-run record: command, resolved config, input digests, outputs, timing.

#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "chaoscast/checkpoint.hpp"
#include "chaoscast/error.hpp"

#ifndef CHAOSCAST_VERSION
#define CHAOSCAST_VERSION "unknown"
#endif

namespace chaoscast {

// Hex SHA-256 of a file's bytes, streamed.
inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0 && EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount())) != 1)
      throw IoError("sha256 update failed");
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) throw IoError("sha256 final failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

class RunManifest {
 public:
  RunManifest(std::string command, std::uint64_t seed)
      : command_(std::move(command)), seed_(seed), start_(std::chrono::steady_clock::now()) {}

  void set_config(json config) { config_ = std::move(config); }
  void add_input(const std::filesystem::path& p) { inputs_.push_back(p); }
  void add_output(const std::filesystem::path& p) { outputs_.push_back(p); }
  const std::vector<std::filesystem::path>& outputs() const { return outputs_; }

  json to_json() const {
    json in = json::array(), out = json::array();
    for (const auto& p : inputs_) in.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    for (const auto& p : outputs_) {
      json o = {{"path", p.string()}};
      if (std::filesystem::is_regular_file(p)) o["sha256"] = sha256_file(p);
      out.push_back(o);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return {{"command", command_}, {"version", CHAOSCAST_VERSION}, {"seed", seed_},  {"config", config_},
            {"inputs", in},        {"outputs", out},                 {"wall_clock_seconds", secs},
            {"finished_unix", static_cast<std::int64_t>(std::time(nullptr))}};
  }

  // Written at the end of a run, atomically.
  void write(const std::filesystem::path& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }

 private:
  std::string command_;
  std::uint64_t seed_;
  std::chrono::steady_clock::time_point start_;
  json config_ = json::object();
  std::vector<std::filesystem::path> inputs_, outputs_;
};

}  // namespace chaoscast
