#include <benchmark/benchmark.h>

#include <random>

#include "aerialformer/encoder.hpp"
#include "aerialformer/flops.hpp"
#include "aerialformer/model.hpp"
#include "aerialformer/ops.hpp"

namespace af = aerialformer;
using af::Index;
using af::Tensor;

namespace {

Tensor random(af::Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(af::numel(shape)));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Window attention over an side x side token map; cost should track tokens.
void BM_WindowAttention(benchmark::State& state) {
  const Index side = state.range(0), m = 8, d = 32;
  af::nn::Initializer init(1);
  af::encoder::WindowAttention attn(d, 2, m, init);
  const Tensor windows = random({(side / m) * (side / m), m * m, d}, 2);
  af::NoGradGuard no_grad;
  std::uint64_t flops = 0;
  for (auto _ : state) {
    af::FlopCounter counter;
    benchmark::DoNotOptimize(attn.forward(windows, Tensor()));
    flops = counter.count();
  }
  state.counters["tokens"] = static_cast<double>(side * side);
  state.counters["flops_per_token"] = static_cast<double>(flops) / static_cast<double>(side * side);
  state.SetItemsProcessed(state.iterations() * side * side);
}
BENCHMARK(BM_WindowAttention)->Arg(32)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Conv2d(benchmark::State& state) {
  const Index c = state.range(0), dilation = state.range(1);
  const Tensor x = random({1, c, 64, 64}, 3);
  const Tensor w = random({c, c, 3, 3}, 4);
  af::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(af::ops::conv2d(x, w, Tensor(), {1, dilation, dilation}));
  state.SetItemsProcessed(state.iterations() * 2 * c * c * 9 * 64 * 64);
}
BENCHMARK(BM_Conv2d)->Args({16, 1})->Args({32, 1})->Args({32, 3})->Unit(benchmark::kMillisecond);

void BM_ToyTrainStep(benchmark::State& state) {
  af::AerialFormer model(af::ModelConfig::preset("toy"));
  const Tensor image = random({2, 3, 64, 64}, 5);
  for (auto _ : state) {
    af::GradTape tape;
    const Tensor loss = af::ops::mean(model.forward(image, af::nn::Mode::kTrain));
    tape.backward(loss);
  }
}
BENCHMARK(BM_ToyTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
