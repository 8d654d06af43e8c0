// Serial reference vs OpenMP kernels. Run with OMP_NUM_THREADS to vary width.
#include <benchmark/benchmark.h>

#include <vector>

#include "flowseg/kernels.hpp"
#include "flowseg/model.hpp"
#include "flowseg/network.hpp"
#include "flowseg/rng.hpp"

using namespace flowseg;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <auto Kernel>
void gemm(benchmark::State& st) {
  const std::size_t m = st.range(0), k = st.range(1), n = st.range(2);
  const auto a = noise(m * k, 1), b = noise(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : st) {
    Kernel(a, b, c, m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  st.counters["GMAC/s"] = benchmark::Counter(double(m * k * n) * st.iterations() / 1e9, benchmark::Counter::kIsRate);
}

template <auto Kernel>
void edt(benchmark::State& st) {
  const std::size_t side = st.range(0);
  Rng rng(3);
  std::vector<unsigned char> f(side * side);
  for (auto& v : f) v = rng.bernoulli(0.02);
  std::vector<double> out(side * side);
  for (auto _ : st) {
    Kernel(f, out, side, side);
    benchmark::DoNotOptimize(out.data());
  }
}

// shapes that occur in a 64x64 frame: tokens x dim, pixels x head width
void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({64, 64, 64})->Args({64, 64, 128})->Args({4096, 18, 16})->Args({256, 256, 256});
}

void frame(benchmark::State& st) {
  const ModelParams params(ModelConfig{}, 0);
  const Flow flow = generate_volume_flow(1, 1, TaskClass::ellipse, 64);
  const Prompt p = auto_prompt(flow.frames[0].mask, PromptKind::mask, 0);
  for (auto _ : st) benchmark::DoNotOptimize(net::forward_frame(flow.frames[0].image, p, {}, {}, params));
}

}  // namespace

BENCHMARK(gemm<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::gemm_nn>)->Name("gemm_nn/parallel")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::gemm_nt>)->Name("gemm_nt/parallel")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::serial::gemm_tn>)->Name("gemm_tn/serial")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::gemm_tn>)->Name("gemm_tn/parallel")->Apply(gemm_shapes);
BENCHMARK(edt<kernels::serial::squared_edt>)->Name("edt/serial")->Arg(64)->Arg(256);
BENCHMARK(edt<kernels::squared_edt>)->Name("edt/parallel")->Arg(64)->Arg(256);
BENCHMARK(frame)->Name("forward_frame/64x64")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
