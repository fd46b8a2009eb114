#pragma once
//
// Versioned binary checkpoint. All integers and floats are little-endian.
//
//   magic        6 bytes   "LPMII\0"
//   version      u32       kCheckpointVersion
//   digest       u64       ModelConfig::digest()
//   config_len   u32
//   config       bytes     ModelConfig::to_json()
//   count        u32       number of tensors
//   per tensor:
//     name_len   u32
//     name       bytes
//     rank       u32
//     dims       u64 * rank
//     values     f64 * prod(dims)
//

#include "lpmii/model.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace lpmii::model {

inline constexpr std::array<char, 6> kCheckpointMagic{'L', 'P', 'M', 'I', 'I', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace lpmii::model
