#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "chexofa/tensor.hpp"

namespace cxo {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr char kCheckpointMagic[4] = {'C', 'X', 'O', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout, all integers little-endian:
//   "CXOF" | u32 version | u64 count |
//   count x { u64 name_len | name | u64 rank | rank x u64 dim | f64 data... }
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& params);
NamedTensors load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const NamedTensors& params);
NamedTensors parse_checkpoint(const std::string& bytes);

}  // namespace cxo
