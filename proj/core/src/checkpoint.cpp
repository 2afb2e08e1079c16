#include "dosediff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include "dosediff/tensor_io.hpp"
#include "dosediff/sha256.hpp"

namespace dosediff::io {

namespace {

constexpr char kMagic[4] = {'D', 'D', 'P', 'X'};

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u16(std::ostream& out, std::uint16_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in.good()) {
    throw IoError(IoError::Kind::Truncated, std::string("checkpoint truncated reading ") + what);
  }
  return v;
}

std::uint16_t read_u16(std::istream& in, const char* what) {
  std::uint16_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in.good()) {
    throw IoError(IoError::Kind::Truncated, std::string("checkpoint truncated reading ") + what);
  }
  return v;
}

std::string hex(const std::array<std::uint8_t, 32>& digest) {
  static const char* kHex = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (std::uint8_t b : digest) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xf]);
  }
  return out;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  {
    std::set<std::string> names;
    for (const auto& [name, t] : ckpt.entries) {
      DD_CHECK(names.insert(name).second, "checkpoint: duplicate parameter name " + name);
      DD_CHECK(name.size() <= 0xffff, "checkpoint: parameter name too long");
      DD_CHECK(t.defined(), "checkpoint: undefined tensor for " + name);
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) {
    throw IoError(IoError::Kind::OpenFailed, "cannot open " + path.string() + " for writing");
  }
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kCheckpointFormatVersion);
  out.write(reinterpret_cast<const char*>(ckpt.digest.data()),
            static_cast<std::streamsize>(ckpt.digest.size()));
  write_u32(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& [name, t] : ckpt.entries) {
    write_u16(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor_stream(out, t);
  }
  out.flush();
  if (!out.good()) {
    throw IoError(IoError::Kind::OpenFailed, "failed writing " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) {
    throw IoError(IoError::Kind::OpenFailed, "cannot open " + path.string() + " for reading");
  }
  char magic[4] = {};
  in.read(magic, sizeof(magic));
  if (!in.good()) {
    throw IoError(IoError::Kind::Truncated, "checkpoint truncated reading magic");
  }
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError(IoError::Kind::BadMagic, "not a DDPX checkpoint (bad magic)");
  }
  const std::uint32_t version = read_u32(in, "version");
  if (version != kCheckpointFormatVersion) {
    throw IoError(IoError::Kind::BadVersion,
                  "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  in.read(reinterpret_cast<char*>(ckpt.digest.data()),
          static_cast<std::streamsize>(ckpt.digest.size()));
  if (!in.good()) {
    throw IoError(IoError::Kind::Truncated, "checkpoint truncated reading digest");
  }
  const std::uint32_t count = read_u32(in, "entry count");
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = read_u16(in, "name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in.good()) {
      throw IoError(IoError::Kind::Truncated, "checkpoint truncated reading name");
    }
    if (!names.insert(name).second) {
      throw IoError(IoError::Kind::DuplicateName,
                    "checkpoint has duplicate parameter name " + name);
    }
    Tensor t = read_tensor_stream(in);
    ckpt.entries.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

std::array<std::uint8_t, 32> config_digest(const RunConfig& config, std::string_view kind) {
  return sha256(config.digest_input(kind));
}

Checkpoint checkpoint_from_params(const nets::ParamRegistry& params,
                                  const std::array<std::uint8_t, 32>& digest) {
  Checkpoint ckpt;
  ckpt.digest = digest;
  for (const auto& [name, t] : params.items()) {
    ckpt.entries.emplace_back(name, t);
  }
  return ckpt;
}

void load_params_from_checkpoint(const Checkpoint& ckpt, const nets::ParamRegistry& params,
                                 const std::array<std::uint8_t, 32>& expected_digest) {
  if (ckpt.digest != expected_digest) {
    throw IoError(IoError::Kind::DigestMismatch,
                  "checkpoint config digest " + hex(ckpt.digest) +
                      " does not match the current configuration (" + hex(expected_digest) +
                      ")");
  }
  DD_CHECK(ckpt.entries.size() == params.items().size(),
           "checkpoint entry count does not match the model");
  // Validate everything before touching any parameter buffer.
  for (const auto& [name, t] : params.items()) {
    const Tensor* src = ckpt.find(name);
    if (src == nullptr) {
      throw IoError(IoError::Kind::Malformed, "checkpoint is missing parameter " + name);
    }
    if (src->shape() != t.shape()) {
      throw IoError(IoError::Kind::Malformed,
                    "checkpoint parameter " + name + " has shape " + shape_str(src->shape()) +
                        ", model expects " + shape_str(t.shape()));
    }
  }
  for (const auto& [name, t] : params.items()) {
    const Tensor* src = ckpt.find(name);
    Tensor dst = t;
    std::memcpy(dst.mutable_data().data(), src->data().data(),
                src->data().size() * sizeof(float));
  }
}

}  // namespace dosediff::io
