#include "dosediff/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace dosediff::io {

namespace {

constexpr char kMagic[4] = {'D', 'D', 'T', 'F'};
constexpr std::uint32_t kMaxRank = 8;

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in.good()) {
    throw IoError(IoError::Kind::Truncated, std::string("tensor file truncated reading ") + what);
  }
  return v;
}

}  // namespace

void write_tensor_stream(std::ostream& out, const Tensor& t) {
  DD_CHECK(t.defined(), "write_tensor: undefined tensor");
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kTensorFormatVersion);
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * sizeof(float)));
}

Tensor read_tensor_stream(std::istream& in) {
  char magic[4] = {};
  in.read(magic, sizeof(magic));
  if (!in.good()) {
    throw IoError(IoError::Kind::Truncated, "tensor file truncated reading magic");
  }
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError(IoError::Kind::BadMagic, "not a DDTF tensor file (bad magic)");
  }
  const std::uint32_t version = read_u32(in, "version");
  if (version != kTensorFormatVersion) {
    throw IoError(IoError::Kind::BadVersion,
                  "unsupported tensor format version " + std::to_string(version));
  }
  const std::uint32_t rank = read_u32(in, "rank");
  if (rank == 0 || rank > kMaxRank) {
    throw IoError(IoError::Kind::Malformed, "tensor rank " + std::to_string(rank) +
                                                " out of supported range [1, 8]");
  }
  Shape shape;
  std::uint64_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = read_u32(in, "dims");
    if (d == 0) throw IoError(IoError::Kind::Malformed, "tensor file has a zero dimension");
    shape.push_back(static_cast<int>(d));
    numel *= d;
    if (numel > (1ull << 32)) {
      throw IoError(IoError::Kind::Malformed, "tensor file dimensions overflow");
    }
  }
  std::vector<float> data(static_cast<std::size_t>(numel));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(data.size() * sizeof(float))) {
    throw IoError(IoError::Kind::Truncated, "tensor file truncated reading payload");
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) {
    throw IoError(IoError::Kind::OpenFailed, "cannot open " + path.string() + " for writing");
  }
  write_tensor_stream(out, t);
  out.flush();
  if (!out.good()) {
    throw IoError(IoError::Kind::OpenFailed, "failed writing " + path.string());
  }
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) {
    throw IoError(IoError::Kind::OpenFailed, "cannot open " + path.string() + " for reading");
  }
  return read_tensor_stream(in);
}

}  // namespace dosediff::io
