#pragma once

#include <filesystem>
#include <iosfwd>

#include "dosediff/tensor.hpp"

namespace dosediff::io {

// DDTF tensor file: magic "DDTF", then little-endian u32 version, u32 rank,
// rank x u32 dims, and product(dims) float32 payload values in row-major
// order. Round-trips bit-exactly.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor_stream(std::ostream& out, const Tensor& t);
Tensor read_tensor_stream(std::istream& in);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace dosediff::io
