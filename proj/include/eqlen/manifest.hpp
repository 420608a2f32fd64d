#pragma once

/**
 * Run manifests: a JSON record of what a command ran (config snapshot, seed,
 * tool version) and what it wrote (relative output paths with content
 * hashes), so a rerun can be checked for byte-identical artifacts. Hashes
 * are FNV-1a 64 over the file bytes, rendered as 16 hex digits.
 */

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <eqlen/core.hpp>

namespace eqlen::manifest {

inline constexpr const char* kToolVersion = "eqlen 0.1.0";
inline constexpr int kSchemaVersion = 1;

/** FNV-1a 64-bit over the bytes of `data`. */
inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : data) {
    h ^= static_cast<std::uint64_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

/** The hash as fixed-width lowercase hex (16 digits). */
inline std::string hash_hex(std::string_view data) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = fnv1a64(data);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

struct RunManifest {
  int schema_version = kSchemaVersion;
  std::string tool_version = kToolVersion;
  std::string command;                         // train / lab / gradcheck / rollout-dump
  nlohmann::json config;                       // full config snapshot
  std::uint64_t seed = 0;
  std::map<std::string, std::string> outputs;  // relative path -> content hash

  void record(const std::string& relative_path, std::string_view content) {
    outputs[relative_path] = hash_hex(content);
  }

  bool operator==(const RunManifest&) const = default;
};

inline void to_json(nlohmann::json& j, const RunManifest& m) {
  j = {{"schema_version", m.schema_version},
       {"tool_version", m.tool_version},
       {"command", m.command},
       {"config", m.config},
       {"seed", m.seed},
       {"outputs", m.outputs}};
}
inline void from_json(const nlohmann::json& j, RunManifest& m) {
  j.at("schema_version").get_to(m.schema_version);
  j.at("tool_version").get_to(m.tool_version);
  j.at("command").get_to(m.command);
  m.config = j.at("config");
  j.at("seed").get_to(m.seed);
  j.at("outputs").get_to(m.outputs);
}

/** Write `content` to `path`, throwing std::ios_base::failure on any failure. */
inline void write_text(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot open for writing: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) throw std::ios_base::failure("write failed: " + path);
}

/** Read the whole file, throwing std::ios_base::failure when unreadable. */
inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open for reading: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw std::ios_base::failure("read failed: " + path);
  return std::move(buf).str();
}

}  // namespace eqlen::manifest
