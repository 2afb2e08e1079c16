#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dosediff/checkpoint.hpp"
#include "dosediff/config.hpp"
#include "dosediff/sha256.hpp"
#include "dosediff/tensor_io.hpp"
#include "dosediff/trainer.hpp"
#include "testutil.hpp"

using namespace dosediff;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) { return fs::temp_directory_path() / name; }

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("tensor file round-trips bit-exactly") {
  Rng rng(1);
  Tensor t = testutil::randn_tensor({3, 5, 7}, rng);
  const fs::path path = temp_file("dosediff_tensor.ddtf");
  io::write_tensor(path, t);
  Tensor back = io::read_tensor(path);
  CHECK(back.shape() == t.shape());
  CHECK(std::memcmp(back.data().data(), t.data().data(), t.data().size() * sizeof(float)) == 0);
  fs::remove(path);
}

TEST_CASE("tensor file: corruption is rejected with distinct kinds") {
  Rng rng(2);
  Tensor t = testutil::randn_tensor({2, 4}, rng);
  const fs::path path = temp_file("dosediff_tensor_bad.ddtf");
  io::write_tensor(path, t);
  std::string bytes = read_bytes(path);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write_bytes(path, bad_magic);
  CHECK_THROWS_WITH_AS(static_cast<void>(io::read_tensor(path)),
                       doctest::Contains("magic"), IoError);

  std::string bad_version = bytes;
  bad_version[4] = 9;
  write_bytes(path, bad_version);
  try {
    io::read_tensor(path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.kind() == IoError::Kind::BadVersion);
  }

  std::string truncated = bytes.substr(0, bytes.size() - 5);
  write_bytes(path, truncated);
  try {
    io::read_tensor(path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.kind() == IoError::Kind::Truncated);
  }
  fs::remove(path);
}

TEST_CASE("sha256 known answer") {
  auto digest = io::sha256("abc");
  const std::uint8_t expect[32] = {0xba, 0x78, 0x16, 0xbf, 0x8f, 0x01, 0xcf, 0xea,
                                   0x41, 0x41, 0x40, 0xde, 0x5d, 0xae, 0x22, 0x23,
                                   0xb0, 0x03, 0x61, 0xa3, 0x96, 0x17, 0x7a, 0x9c,
                                   0xb4, 0x10, 0xff, 0x61, 0xf2, 0x00, 0x15, 0xad};
  CHECK(std::memcmp(digest.data(), expect, 32) == 0);
  auto empty = io::sha256("");
  const std::uint8_t expect_empty[4] = {0xe3, 0xb0, 0xc4, 0x42};
  CHECK(std::memcmp(empty.data(), expect_empty, 4) == 0);
}

TEST_CASE("checkpoint round-trips every parameter bit-exactly") {
  io::RunConfig cfg;
  cfg.widths = {8, 8, 16, 16, 16, 16};
  cfg.temb_dim = 16;
  nets::DiffusionModel model(cfg.net_config(), 77);
  const fs::path path = temp_file("dosediff_model.ckpt");
  train::save_diffusion_checkpoint(path, model, cfg);

  nets::DiffusionModel loaded = train::load_diffusion_checkpoint(path, cfg);
  nets::ParamRegistry a = model.named_params();
  nets::ParamRegistry b = loaded.named_params();
  REQUIRE(a.items().size() == b.items().size());
  for (std::size_t i = 0; i < a.items().size(); ++i) {
    CHECK(a.items()[i].first == b.items()[i].first);
    const Tensor& ta = a.items()[i].second;
    const Tensor& tb = b.items()[i].second;
    CHECK(std::memcmp(ta.data().data(), tb.data().data(),
                      ta.data().size() * sizeof(float)) == 0);
  }
  fs::remove(path);
}

TEST_CASE("checkpoint: corrupt magic fails without partial loads") {
  io::RunConfig cfg;
  cfg.widths = {8, 8, 16, 16, 16, 16};
  cfg.temb_dim = 16;
  nets::DiffusionModel model(cfg.net_config(), 78);
  const fs::path path = temp_file("dosediff_model_bad.ckpt");
  train::save_diffusion_checkpoint(path, model, cfg);
  std::string bytes = read_bytes(path);
  bytes[2] = 'z';
  write_bytes(path, bytes);

  nets::DiffusionModel victim(cfg.net_config(), 79);
  nets::ParamRegistry victim_reg = victim.named_params();
  std::vector<float> before(victim_reg.items()[3].second.data().begin(),
                            victim_reg.items()[3].second.data().end());
  try {
    io::Checkpoint ckpt = io::load_checkpoint(path);
    io::load_params_from_checkpoint(ckpt, victim.named_params(),
                                    io::config_digest(cfg, "diffusion"));
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.kind() == IoError::Kind::BadMagic);
  }
  const Tensor& t = victim_reg.items()[3].second;
  CHECK(std::memcmp(t.data().data(), before.data(), before.size() * sizeof(float)) == 0);
  fs::remove(path);
}

TEST_CASE("checkpoint: incompatible config is a digest mismatch") {
  io::RunConfig cfg_a;
  cfg_a.widths = {8, 8, 16, 16, 16, 16};
  cfg_a.temb_dim = 16;
  nets::DiffusionModel model(cfg_a.net_config(), 80);
  const fs::path path = temp_file("dosediff_model_digest.ckpt");
  train::save_diffusion_checkpoint(path, model, cfg_a);

  io::RunConfig cfg_b = cfg_a;
  cfg_b.widths = {8, 16, 16, 16, 16, 16};  // different channel widths
  try {
    train::load_diffusion_checkpoint(path, cfg_b);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.kind() == IoError::Kind::DigestMismatch);
  }
  fs::remove(path);
}

TEST_CASE("checkpoint: duplicate parameter names are rejected") {
  std::ostringstream os;
  os.write("DDPX", 4);
  const std::uint32_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), 4);
  std::array<std::uint8_t, 32> digest{};
  os.write(reinterpret_cast<const char*>(digest.data()), 32);
  const std::uint32_t count = 2;
  os.write(reinterpret_cast<const char*>(&count), 4);
  Tensor t = Tensor::from_data({2}, {1.0f, 2.0f});
  for (int i = 0; i < 2; ++i) {
    const std::uint16_t len = 4;
    os.write(reinterpret_cast<const char*>(&len), 2);
    os.write("same", 4);
    io::write_tensor_stream(os, t);
  }
  const fs::path path = temp_file("dosediff_dup.ckpt");
  write_bytes(path, os.str());
  try {
    io::load_checkpoint(path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.kind() == IoError::Kind::DuplicateName);
  }
  fs::remove(path);
}

TEST_CASE("config: unknown keys and bad values are rejected") {
  CHECK_THROWS_AS(io::RunConfig::from_json_text("{\"sizee\": 64}"), ContractError);
  CHECK_THROWS_AS(io::RunConfig::from_json_text("{\"size\": 63}"), ContractError);
  CHECK_THROWS_AS(io::RunConfig::from_json_text("{\"size\": \"big\"}"), ContractError);
  CHECK_THROWS_AS(io::RunConfig::from_json_text("not json"), ContractError);
  CHECK_THROWS_AS(io::RunConfig::from_json_text("{\"split\": [0.5, 0.5]}"), ContractError);
  CHECK_THROWS_AS(io::RunConfig::from_json_text("{\"widths\": [8, 8]}"), ContractError);
}

TEST_CASE("config: JSON round-trip preserves every field") {
  io::RunConfig cfg;
  cfg.size = 32;
  cfg.cases = 7;
  cfg.T = 25;
  cfg.beta_start = 0.04;
  cfg.widths = {8, 8, 16, 16, 16, 16};
  cfg.temb_dim = 16;
  cfg.lr = 5e-4;
  cfg.seed = 99;
  cfg.data_dir = "/tmp/somewhere";
  io::RunConfig back = io::RunConfig::from_json_text(cfg.to_json_text());
  CHECK(back.size == cfg.size);
  CHECK(back.cases == cfg.cases);
  CHECK(back.T == cfg.T);
  CHECK(back.beta_start == cfg.beta_start);
  CHECK(back.widths == cfg.widths);
  CHECK(back.lr == cfg.lr);
  CHECK(back.seed == cfg.seed);
  CHECK(back.data_dir == cfg.data_dir);
}

TEST_CASE("config digests separate kinds and architectures") {
  io::RunConfig cfg;
  CHECK(io::config_digest(cfg, "diffusion") != io::config_digest(cfg, "encoder"));
  io::RunConfig other = cfg;
  other.T = cfg.T + 1;
  CHECK(io::config_digest(cfg, "diffusion") != io::config_digest(other, "diffusion"));
}

TEST_CASE("case directory round-trip") {
  phantom::PhantomCase c = phantom::generate_case(5, 32, 4);
  c.case_id = "case_0000";
  const fs::path dir = fs::temp_directory_path() / "dosediff_case_rt";
  fs::remove_all(dir);
  train::write_case(dir / c.case_id, c);
  phantom::PhantomCase back = train::read_case(dir / c.case_id);
  CHECK(back.case_id == c.case_id);
  CHECK(back.seed == c.seed);
  CHECK(back.size == c.size);
  REQUIRE(back.beams.size() == c.beams.size());
  CHECK(back.beams[0].angle == c.beams[0].angle);
  CHECK(std::memcmp(back.x.data().data(), c.x.data().data(),
                    c.x.data().size() * sizeof(float)) == 0);
  CHECK(std::memcmp(back.y.data().data(), c.y.data().data(),
                    c.y.data().size() * sizeof(float)) == 0);
  fs::remove_all(dir);
}
