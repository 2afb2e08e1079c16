#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "dosediff/nets.hpp"
#include "testutil.hpp"

using namespace dosediff;
using namespace dosediff::nets;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.widths = {8, 8, 16, 16, 16, 16};
  cfg.temb_dim = 16;
  return cfg;
}

void zero_all_params(const ParamRegistry& reg) {
  for (const auto& [name, t] : reg.items()) {
    Tensor p = t;
    std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0f);
  }
}

}  // namespace

TEST_CASE("structure encoder emits six levels with halving spatial sizes") {
  Rng rng(100);
  StructureEncoder enc(NetConfig{}, rng);
  Tensor x = testutil::rand_tensor({1, 6, 64, 64}, rng, 0.0f, 1.0f);
  std::vector<Tensor> levels = enc.forward(x);
  REQUIRE(levels.size() == 6);
  const int expect_sizes[6] = {64, 32, 16, 8, 4, 4};
  const NetConfig cfg;
  for (int k = 0; k < 6; ++k) {
    CHECK(levels[static_cast<std::size_t>(k)].dim(1) ==
          cfg.widths[static_cast<std::size_t>(k)]);
    CHECK(levels[static_cast<std::size_t>(k)].dim(2) == expect_sizes[k]);
    CHECK(levels[static_cast<std::size_t>(k)].dim(3) == expect_sizes[k]);
  }
}

TEST_CASE("structure encoder rejects indivisible spatial sizes") {
  Rng rng(101);
  StructureEncoder enc(tiny_config(), rng);
  Tensor x = Tensor::zeros({1, 6, 24, 24});
  CHECK_THROWS_AS(enc.forward(x), ContractError);
}

TEST_CASE("structure encoder with zero weights emits zero features") {
  Rng rng(102);
  StructureEncoder enc(tiny_config(), rng);
  ParamRegistry reg;
  enc.register_params(reg, "g");
  zero_all_params(reg);
  Tensor x = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  for (const Tensor& level : enc.forward(x)) {
    for (float v : level.data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("structure encoder gradient w.r.t. input matches finite differences") {
  Rng rng(103);
  StructureEncoder enc(tiny_config(), rng);
  Tensor x = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  // One check per emitted level; deep levels use the network-scale step.
  for (std::size_t level = 0; level < 6; ++level) {
    auto fwd = [&] { return enc.forward(x)[level]; };
    auto res = testutil::grad_check(fwd, {x}, 1e-2, 1e-2, 1e-4, 12, 42 + level, 2e-3);
    CHECK_MESSAGE(res.checked > 0, "level " << level);
    CHECK_MESSAGE(res.failed == 0, "level " << level << " worst " << res.worst_rel);
  }
}

TEST_CASE("noise predictor: zero output layer forces zero output") {
  Rng rng(104);
  NetConfig cfg = tiny_config();
  DiffusionModel model(cfg, 105);
  ParamRegistry reg = model.named_params();
  for (const char* name : {"f.out.w", "f.out.b"}) {
    const Tensor* t = reg.find(name);
    REQUIRE(t != nullptr);
    Tensor p = *t;
    std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0f);
  }
  Tensor x = testutil::rand_tensor({2, 6, 16, 16}, rng, 0.0f, 1.0f);
  Tensor y_t = testutil::randn_tensor({2, 1, 16, 16}, rng);
  Tensor out = model.predict(model.encode(x), y_t, {0.5f, 0.2f});
  for (float v : out.data()) CHECK(v == 0.0f);
}

TEST_CASE("noise predictor: output shape equals y_t shape across sizes") {
  Rng rng(106);
  NetConfig cfg = tiny_config();
  DiffusionModel model(cfg, 107);
  for (int size : {16, 32}) {
    Tensor x = testutil::rand_tensor({1, 6, size, size}, rng, 0.0f, 1.0f);
    Tensor y_t = testutil::randn_tensor({1, 1, size, size}, rng);
    Tensor out = model.predict(model.encode(x), y_t, {0.4f});
    CHECK(out.shape() == y_t.shape());
  }
}

TEST_CASE("noise predictor honors the shape contract at full-scale widths") {
  Rng rng(145);
  NetConfig cfg;
  cfg.widths = {32, 64, 128, 128, 256, 256};
  cfg.temb_dim = 128;
  DiffusionModel model(cfg, 146);
  Tensor x = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  Tensor y_t = testutil::randn_tensor({1, 1, 16, 16}, rng);
  Tensor out = model.predict(model.encode(x), y_t, {0.5f});
  CHECK(out.shape() == y_t.shape());
}

TEST_CASE("noise predictor: batch permutation equivariance") {
  Rng rng(108);
  DiffusionModel model(tiny_config(), 109);
  Tensor x0 = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  Tensor x1 = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  Tensor y0 = testutil::randn_tensor({1, 1, 16, 16}, rng);
  Tensor y1 = testutil::randn_tensor({1, 1, 16, 16}, rng);

  std::vector<Tensor> fwd_items = {take_slice(x0, 0), take_slice(x1, 0)};
  std::vector<Tensor> rev_items = {take_slice(x1, 0), take_slice(x0, 0)};
  std::vector<Tensor> yf = {take_slice(y0, 0), take_slice(y1, 0)};
  std::vector<Tensor> yr = {take_slice(y1, 0), take_slice(y0, 0)};
  Tensor out_f = model.predict(model.encode(stack(fwd_items)), stack(yf), {0.3f, 0.7f});
  Tensor out_r = model.predict(model.encode(stack(rev_items)), stack(yr), {0.7f, 0.3f});

  Tensor f0 = take_slice(out_f, 0), f1 = take_slice(out_f, 1);
  Tensor r0 = take_slice(out_r, 0), r1 = take_slice(out_r, 1);
  CHECK(std::memcmp(f0.data().data(), r1.data().data(), f0.data().size() * sizeof(float)) == 0);
  CHECK(std::memcmp(f1.data().data(), r0.data().data(), f1.data().size() * sizeof(float)) == 0);
}

TEST_CASE("noise predictor: distinct gamma values change the output") {
  Rng rng(110);
  DiffusionModel model(tiny_config(), 111);
  Tensor x = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  Tensor y_t = testutil::randn_tensor({1, 1, 16, 16}, rng);
  std::vector<Tensor> features = model.encode(x);
  Tensor a = model.predict(features, y_t, {0.9f});
  Tensor b = model.predict(features, y_t, {0.1f});
  float max_abs = 0.0f;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    max_abs = std::max(max_abs, std::abs(a.data()[i] - b.data()[i]));
  }
  CHECK(max_abs > 1e-6f);
}

TEST_CASE("noise predictor rejects malformed feature lists") {
  Rng rng(112);
  DiffusionModel model(tiny_config(), 113);
  Tensor x = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  Tensor y_t = testutil::randn_tensor({1, 1, 16, 16}, rng);
  std::vector<Tensor> features = model.encode(x);
  std::vector<Tensor> five(features.begin(), features.end() - 1);
  CHECK_THROWS_AS(model.predict(five, y_t, {0.5f}), ContractError);
  features[2] = Tensor::zeros({1, 3, 4, 4});
  CHECK_THROWS_AS(model.predict(features, y_t, {0.5f}), ContractError);
}

TEST_CASE("noise level embedding distinguishes gamma values and is deterministic") {
  Rng rng(114);
  NoiseLevelEmbedding emb(16, 32, rng);
  Tensor a = emb.forward({0.1f, 0.5f, 0.9f});
  Tensor b = emb.forward({0.1f, 0.5f, 0.9f});
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0);
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      float diff = 0.0f;
      for (int d = 0; d < 32; ++d) {
        diff = std::max(diff, std::abs(a.at({i, d}) - a.at({j, d})));
      }
      CHECK(diff > 1e-6f);
    }
  }
}

TEST_CASE("full model gradients match finite differences at 16x16") {
  Rng rng(115);
  NetConfig cfg = tiny_config();
  DiffusionModel model(cfg, 116);
  Tensor x = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  Tensor y_t = testutil::randn_tensor({1, 1, 16, 16}, rng);
  auto fwd = [&] { return model.predict(model.encode(x), y_t, {0.6f}); };
  // Check the inputs plus a few representative parameters.
  ParamRegistry reg = model.named_params();
  std::vector<Tensor> wrt = {x, y_t};
  for (const char* name : {"f.in.w", "f.out.w", "g.stage1.cb1.w", "f.mid1.cb2.w",
                           "f.dec5.rb2.cb1.w", "f.temb.w1", "f.fuse4.wv"}) {
    const Tensor* t = reg.find(name);
    REQUIRE_MESSAGE(t != nullptr, name);
    wrt.push_back(*t);
  }
  auto res = testutil::grad_check(fwd, wrt, 1e-2, 1e-2, 1e-4, 16, 900, 2e-3);
  CHECK(res.checked > 40);
  CHECK(res.failed == 0);
}

TEST_CASE("no dead parameters: weighted loss reaches every parameter") {
  // 32x32 keeps every attention junction at >= 4 spatial positions; at 16x16
  // the deepest levels collapse to 1x1 where softmax over a single key makes
  // the Q/K projections mathematically gradient-free.
  Rng rng(117);
  NetConfig cfg = tiny_config();
  DiffusionModel model(cfg, 118);
  Tensor x = testutil::rand_tensor({2, 6, 32, 32}, rng, 0.0f, 1.0f);
  Tensor y_t = testutil::randn_tensor({2, 1, 32, 32}, rng);
  Tensor weights = testutil::rand_tensor({2, 1, 32, 32}, rng);

  auto run_backward = [&] {
    std::vector<Tensor> params = model.parameters();
    GradientTape tape;
    Tensor out = model.predict(model.encode(x), y_t, {0.3f, 0.8f});
    Tensor loss = sum(mul(out, weights));
    tape.backward(loss);
  };
  run_backward();

  // The zero-initialized attention output projections shadow two groups at
  // init: the Q/K/V projections inside every attention block, and the deep
  // structure-encoder stages whose features reach the output only through
  // the cross-attention fusion junctions. Both must wake up after one
  // optimizer step (the projections themselves receive gradient at init).
  auto behind_zero_projection = [](const std::string& name) {
    for (const char* prefix : {"g.stage3", "g.stage4", "g.stage5", "g.down3", "g.down4"}) {
      if (name.rfind(prefix, 0) == 0) return true;
    }
    if (name.find("fuse") == std::string::npos && name.find("attn") == std::string::npos) {
      return false;
    }
    for (const char* stem : {".wq", ".bq", ".wk", ".bk", ".wv", ".bv"}) {
      if (name.size() >= 3 && name.compare(name.size() - 3, 3, stem) == 0) return true;
    }
    return false;
  };

  std::set<std::string> pending;
  nets::ParamRegistry reg_after = model.named_params();
  for (const auto& [name, t] : reg_after.items()) {
    float max_abs = 0.0f;
    for (float g : t.grad()) max_abs = std::max(max_abs, std::abs(g));
    if (behind_zero_projection(name)) {
      if (max_abs == 0.0f) pending.insert(name);
      continue;
    }
    CHECK_MESSAGE(max_abs > 0.0f, "dead parameter at init: " << name);
    if (name.find(".wo") != std::string::npos || name.find(".bo") != std::string::npos) {
      // zero-initialized output projections still receive gradient
      CHECK_MESSAGE(max_abs > 0.0f, "zero-init projection got no gradient: " << name);
    }
  }

  // One optimizer step makes the output projections nonzero; afterwards the
  // Q/K/V projections receive gradient too.
  Adam opt(model.parameters(), AdamConfig{.lr = 1e-3f});
  opt.step();
  run_backward();
  nets::ParamRegistry reg_second = model.named_params();
  for (const auto& [name, t] : reg_second.items()) {
    if (!pending.count(name)) continue;
    float max_abs = 0.0f;
    for (float g : t.grad()) max_abs = std::max(max_abs, std::abs(g));
    CHECK_MESSAGE(max_abs > 0.0f, "parameter still dead after one step: " << name);
  }
}

TEST_CASE("baseline unet: zero final layer gives a constant map") {
  Rng rng(119);
  BaselineUNet model(tiny_config(), 120);
  ParamRegistry reg = model.named_params();
  const Tensor* w = reg.find("b.out.w");
  REQUIRE(w != nullptr);
  Tensor wt = *w;
  std::fill(wt.mutable_data().begin(), wt.mutable_data().end(), 0.0f);
  Tensor x = testutil::rand_tensor({1, 6, 16, 16}, rng, 0.0f, 1.0f);
  Tensor out = model.forward(x);
  const float first = out.data()[0];
  for (float v : out.data()) CHECK(v == first);
}

TEST_CASE("pretrain: zero epochs returns the freshly initialized encoder") {
  std::vector<phantom::PhantomCase> dataset = {phantom::generate_case(1, 32, 3)};
  PretrainConfig cfg;
  cfg.net = tiny_config();
  cfg.epochs = 0;
  cfg.seed = 7;
  PretrainResult result = pretrain_structure_encoder(dataset, cfg);
  CHECK(result.epoch_loss.empty());

  Rng init_rng = Rng::stream(7, "init-structure-encoder");
  StructureEncoder fresh(cfg.net, init_rng);
  ParamRegistry got, expect;
  result.encoder.register_params(got, "g");
  fresh.register_params(expect, "g");
  REQUIRE(got.items().size() == expect.items().size());
  for (std::size_t i = 0; i < got.items().size(); ++i) {
    const auto& [name_a, ta] = got.items()[i];
    const auto& [name_b, tb] = expect.items()[i];
    CHECK(name_a == name_b);
    CHECK(std::memcmp(ta.data().data(), tb.data().data(),
                      ta.data().size() * sizeof(float)) == 0);
  }
}

TEST_CASE("pretrain: constant-dose dataset converges below 0.05 L1") {
  std::vector<phantom::PhantomCase> dataset;
  for (int i = 0; i < 4; ++i) {
    phantom::PhantomCase c = phantom::generate_case(100 + static_cast<std::uint64_t>(i), 32, 3);
    c.y = Tensor::full({1, 32, 32}, 0.5f);
    dataset.push_back(std::move(c));
  }
  PretrainConfig cfg;
  cfg.net = tiny_config();
  cfg.epochs = 150;
  cfg.batch_size = 4;
  cfg.lr = 5e-3f;
  cfg.seed = 9;
  PretrainResult result = pretrain_structure_encoder(dataset, cfg);
  CHECK(result.epoch_loss.back() < 0.05f);
}

TEST_CASE("pretrain: training L1 drops on a small phantom set") {
  std::vector<phantom::PhantomCase> dataset;
  for (int i = 0; i < 8; ++i) {
    dataset.push_back(phantom::generate_case(200 + static_cast<std::uint64_t>(i), 32, 4));
  }
  PretrainConfig cfg;
  cfg.net = tiny_config();
  cfg.epochs = 60;
  cfg.batch_size = 4;
  cfg.lr = 2e-3f;
  cfg.seed = 10;
  PretrainResult result = pretrain_structure_encoder(dataset, cfg);
  CHECK(result.epoch_loss.back() < 0.7f * result.epoch_loss.front());
}

TEST_CASE("pretrain: empty dataset is rejected") {
  PretrainConfig cfg;
  cfg.net = tiny_config();
  CHECK_THROWS_AS(pretrain_structure_encoder({}, cfg), ContractError);
}
