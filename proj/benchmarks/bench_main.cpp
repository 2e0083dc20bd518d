// Micro benchmarks for the hot kernels.
#include <benchmark/benchmark.h>

#include "densesiam/evaluation.hpp"
#include "densesiam/geometry.hpp"
#include "densesiam/networks.hpp"
#include "densesiam/ops.hpp"
#include "densesiam/rng.hpp"

using namespace dsiam;

namespace {

TensorF randn(Shape s, Rng& rng, bool grad = false) {
  TensorF t(s, grad);
  for (auto& v : t.data_mut()) v = static_cast<float>(normal(rng, 0.0, 1.0));
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  auto x = randn(Shape{8, c, 32, 32}, rng), w = randn(Shape{c, c, 3, 3}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, TensorF{}, 1, 1));
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  auto x = randn(Shape{8, c, 32, 32}, rng, true), w = randn(Shape{c, c, 3, 3}, rng, true);
  for (auto _ : state) {
    auto y = sum(conv2d(x, w, TensorF{}, 1, 1));
    y.backward();
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_GridSample(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  auto field = randn(Shape{32, 32, 16, 16}, rng);
  TensorF coords(Shape{32, k, k, 2});
  for (auto& v : coords.data_mut()) v = static_cast<float>(uniform(rng, 0.0, 15.0));
  for (auto _ : state) benchmark::DoNotOptimize(grid_sample_bilinear(field, coords));
}
BENCHMARK(BM_GridSample)->Arg(7)->Arg(14)->Unit(benchmark::kMicrosecond);

void BM_EncoderForward(benchmark::State& state) {
  ModelConfig c;
  ModelF m(c, 4);
  Rng rng(4);
  auto x = randn(Shape{static_cast<std::size_t>(state.range(0)), 3, 64, 64}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(m.project(m.encode(x, true), true));
}
BENCHMARK(BM_EncoderForward)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Hungarian(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  std::vector<double> cost(n * n);
  for (auto& v : cost) v = static_cast<double>(uniform_int(rng, 0, 10000));
  for (auto _ : state) benchmark::DoNotOptimize(hungarian_assign(cost, n, n));
}
BENCHMARK(BM_Hungarian)->Arg(7)->Arg(27)->Arg(128)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
