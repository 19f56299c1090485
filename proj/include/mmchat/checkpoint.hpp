#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmchat/layers.hpp"

namespace mmchat::nn {

// On-disk layout:
//   8 bytes   magic "MMCKPT01"
//   8 bytes   little-endian u64 header length
//   N bytes   JSON header {names, shapes, dtype:"f32", config, ...extra keys}
//   payloads  little-endian f32 arrays in header order
struct Container {
  nlohmann::json config;
  nlohmann::json extra;  // additional header keys (index id table, fingerprints)
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[9] = "MMCKPT01";

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

Container snapshot(const ParameterSet& params, nlohmann::json config);
// Copies values by name; every parameter must be present with a matching shape.
void restore(ParameterSet& params, const Container& container);

// FNV-1a over parameter names, shapes and payload bytes, as 16 hex digits.
std::string fingerprint(const ParameterSet& params);
std::string fingerprint(const Container& container);

}  // namespace mmchat::nn
