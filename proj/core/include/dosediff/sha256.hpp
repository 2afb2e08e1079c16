#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace dosediff::io {

// Minimal SHA-256 (FIPS 180-4), used to fingerprint architecture-relevant
// configuration inside checkpoints.
std::array<std::uint8_t, 32> sha256(std::string_view bytes);

}  // namespace dosediff::io
