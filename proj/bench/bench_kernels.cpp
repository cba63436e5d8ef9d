#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "convbert/kernels.hpp"

namespace {

namespace k = convbert::kernels;

std::vector<double> random_values(std::size_t count, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(count);
  for (double& x : v) x = dist(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  k::GemmArgs args;
  args.m = args.n = args.k = n;
  args.a = a.data();
  args.lda = n;
  args.b = b.data();
  args.ldb = n;
  args.c = c.data();
  args.ldc = n;
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::gemm(args); else k::serial::gemm(args);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n * n));
}

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  const k::AttentionShape s{static_cast<std::size_t>(state.range(0)), 2, 64};
  const std::size_t width = s.heads * s.head_dim;
  const auto q = random_values(s.n * width, 3), kk = random_values(s.n * width, 4), v = random_values(s.n * width, 5);
  std::vector<double> out(s.n * width), weights(s.heads * s.n * s.n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::attention_forward(q, kk, v, {}, s, out, weights);
    } else {
      k::serial::attention_forward(q, kk, v, {}, s, out, weights);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Lconv(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0)), d = 128, heads = 2, taps = 9;
  const auto v = random_values(n * d, 6), kern = random_values(n * heads * taps, 7);
  std::vector<double> out(n * d);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::lconv_forward(v, kern, n, d, heads, taps, out);
    } else {
      k::serial::lconv_forward(v, kern, n, d, heads, taps, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Dwconv(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0)), d = 256, taps = 9;
  const auto x = random_values(n * d, 8), w = random_values(d * taps, 9);
  std::vector<double> out(n * d);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::dwconv_forward(x, w, n, d, taps, out);
    } else {
      k::serial::dwconv_forward(x, w, n, d, taps, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Attention<false>)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(BM_Attention<true>)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(BM_Lconv<false>)->Arg(128)->Arg(512);
BENCHMARK(BM_Lconv<true>)->Arg(128)->Arg(512);
BENCHMARK(BM_Dwconv<false>)->Arg(128)->Arg(512);
BENCHMARK(BM_Dwconv<true>)->Arg(128)->Arg(512);

BENCHMARK_MAIN();
