#pragma once

// Tensor checkpoint file:
//   u64 little-endian header length N
//   N bytes of JSON: {"config": {...}, "tensors": {name: {"shape": [...], "offset": byte_offset}}}
//   little-endian float64 payload; offsets are relative to the payload start.

#include <filesystem>
#include <string>
#include <vector>

#include "chart/nn.hpp"
#include "json.hpp"

namespace chart {

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
  // Copies every registry entry (optionally looked up under `prefix`) from this checkpoint.
  void load_into(ParamRegistry& registry, const std::string& prefix = "") const;
};

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors, const nlohmann::json& config);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& config = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace chart
