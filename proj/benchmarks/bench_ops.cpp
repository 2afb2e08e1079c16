#include <benchmark/benchmark.h>

#include "dosediff/adam.hpp"
#include "dosediff/config.hpp"
#include "dosediff/diffusion.hpp"
#include "dosediff/nets.hpp"
#include "dosediff/ops.hpp"
#include "dosediff/phantom.hpp"
#include "dosediff/rng.hpp"

using namespace dosediff;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  rng.fill_normal(t.mutable_data());
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int hw = static_cast<int>(state.range(1));
  Rng rng(1);
  Tensor x = rand_tensor({8, c, hw, hw}, rng);
  Tensor w = rand_tensor({c, c, 3, 3}, rng);
  Tensor b = Tensor::zeros({c});
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1));
  }
  state.SetItemsProcessed(state.iterations() * 8LL * c * c * 9 * hw * hw * 2);
}
BENCHMARK(BM_Conv2dForward)->Args({16, 64})->Args({32, 32})->Args({64, 16});

void BM_Conv2dTrain(benchmark::State& state) {
  Rng rng(2);
  Tensor x = rand_tensor({8, 16, 64, 64}, rng);
  Tensor w = rand_tensor({16, 16, 3, 3}, rng);
  w.set_requires_grad(true);
  Tensor b = Tensor::zeros({16});
  b.set_requires_grad(true);
  for (auto _ : state) {
    GradientTape tape;
    Tensor loss = mean(conv2d(x, w, b, 1, 1));
    tape.backward(loss);
  }
}
BENCHMARK(BM_Conv2dTrain);

void BM_GroupNorm(benchmark::State& state) {
  Rng rng(3);
  Tensor x = rand_tensor({8, 32, 32, 32}, rng);
  Tensor gamma = Tensor::full({32}, 1.0f);
  Tensor beta = Tensor::zeros({32});
  for (auto _ : state) {
    benchmark::DoNotOptimize(group_norm(x, 8, gamma, beta));
  }
}
BENCHMARK(BM_GroupNorm);

void BM_Attention(benchmark::State& state) {
  const int hw = static_cast<int>(state.range(0));
  Rng rng(4);
  Tensor q = rand_tensor({8, 96, hw, hw}, rng);
  Tensor kv = rand_tensor({8, 96, hw, hw}, rng);
  AttentionParams p = make_attention_params(96, 96, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(attention(q, kv, p));
  }
}
BENCHMARK(BM_Attention)->Arg(4)->Arg(8);

void BM_PredictNoise(benchmark::State& state) {
  Rng rng(5);
  nets::NetConfig cfg;
  nets::DiffusionModel model(cfg, 42);
  Tensor x = rand_tensor({8, 6, 64, 64}, rng);
  Tensor y_t = rand_tensor({8, 1, 64, 64}, rng);
  std::vector<Tensor> features = model.encode(x);
  const std::vector<float> gamma(8, 0.5f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.predict(features, y_t, gamma));
  }
}
BENCHMARK(BM_PredictNoise);

void BM_TrainingStep(benchmark::State& state) {
  Rng rng(6);
  io::RunConfig cfg;
  nets::DiffusionModel model(cfg.net_config(), 42);
  auto sched = diffusion::build_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  Tensor x = rand_tensor({8, 6, 64, 64}, rng);
  Tensor y0 = rand_tensor({8, 1, 64, 64}, rng);
  Adam opt(model.parameters(), AdamConfig{.lr = 1e-4f});
  Rng step_rng(7);
  for (auto _ : state) {
    benchmark::DoNotOptimize(diffusion::training_step(x, y0, model, sched, opt, step_rng));
  }
}
BENCHMARK(BM_TrainingStep);

void BM_GenerateCase(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(phantom::generate_case(++seed, 64, 9));
  }
}
BENCHMARK(BM_GenerateCase);

}  // namespace

BENCHMARK_MAIN();
