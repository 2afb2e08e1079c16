#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dosediff/config.hpp"
#include "dosediff/nets.hpp"
#include "dosediff/tensor.hpp"

namespace dosediff::io {

// DDPX checkpoint: magic "DDPX", u32 LE version, 32-byte config digest,
// u32 LE entry count, then per entry a u16 LE name length, the UTF-8 name and
// an embedded DDTF tensor body. Parameter names are unique; load(save(m))
// reproduces every parameter bit-identically.
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct Checkpoint {
  std::array<std::uint8_t, 32> digest{};
  std::vector<std::pair<std::string, Tensor>> entries;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Reads and fully validates the file before returning; a corrupt file throws
// without producing a partial checkpoint.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::array<std::uint8_t, 32> config_digest(const RunConfig& config, std::string_view kind);

// Registry <-> checkpoint glue. Loading verifies the digest, the exact name
// set and every shape before any parameter is written.
Checkpoint checkpoint_from_params(const nets::ParamRegistry& params,
                                  const std::array<std::uint8_t, 32>& digest);
void load_params_from_checkpoint(const Checkpoint& ckpt, const nets::ParamRegistry& params,
                                 const std::array<std::uint8_t, 32>& expected_digest);

}  // namespace dosediff::io
