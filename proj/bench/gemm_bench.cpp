// Serial reference vs parallel GEMM at the shapes a training step uses.
#include <benchmark/benchmark.h>

#include <vector>

#include "promoe/kernels.hpp"
#include "promoe/rng.hpp"

namespace {

using promoe::Rng;
using promoe::Stream;

std::vector<float> random_matrix(std::size_t n, std::uint64_t key) {
  Rng rng(0, Stream::kTest, key);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

enum class Kind { kNN, kNT, kTN };

template <bool Parallel, Kind K>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_matrix(m * k, 1);
  const auto b = random_matrix(k * n, 2);
  std::vector<float> c(m * n);
  namespace kn = promoe::kernels;
  for (auto _ : state) {
    if constexpr (Parallel) {
      if constexpr (K == Kind::kNN) kn::gemm_nn(m, k, n, a.data(), b.data(), c.data(), false);
      if constexpr (K == Kind::kNT) kn::gemm_nt(m, k, n, a.data(), b.data(), c.data(), false);
      if constexpr (K == Kind::kTN) kn::gemm_tn(m, k, n, a.data(), b.data(), c.data(), false);
    } else {
      if constexpr (K == Kind::kNN) kn::serial::gemm_nn(m, k, n, a.data(), b.data(), c.data(), false);
      if constexpr (K == Kind::kNT) kn::serial::gemm_nt(m, k, n, a.data(), b.data(), c.data(), false);
      if constexpr (K == Kind::kTN) kn::serial::gemm_tn(m, k, n, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * k * n, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
  state.counters["threads"] = Parallel ? kn::max_threads() : 1;
}

// B*L = 512 tokens, D = 64, FFN inner 256 (dense) or 128 (segmented).
void Shapes(benchmark::internal::Benchmark* b) {
  b->Args({512, 64, 256})->Args({512, 256, 64})->Args({512, 64, 128})->Args({512, 64, 192})->Args({256, 256, 256});
}

BENCHMARK(BM_Gemm<false, Kind::kNN>)->Name("serial/gemm_nn")->Apply(Shapes);
BENCHMARK(BM_Gemm<true, Kind::kNN>)->Name("parallel/gemm_nn")->Apply(Shapes);
BENCHMARK(BM_Gemm<false, Kind::kNT>)->Name("serial/gemm_nt")->Apply(Shapes);
BENCHMARK(BM_Gemm<true, Kind::kNT>)->Name("parallel/gemm_nt")->Apply(Shapes);
BENCHMARK(BM_Gemm<false, Kind::kTN>)->Name("serial/gemm_tn")->Apply(Shapes);
BENCHMARK(BM_Gemm<true, Kind::kTN>)->Name("parallel/gemm_tn")->Apply(Shapes);

}  // namespace

BENCHMARK_MAIN();
