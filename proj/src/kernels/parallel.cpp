#include <algorithm>
#include <cstring>
#include <vector>

#include "promoe/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace promoe::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelThreshold = 1u << 15;

constexpr std::size_t kMR = 4;

template <typename T>
struct Vec;
template <>
struct Vec<float> {
  typedef float type __attribute__((vector_size(32)));
};
template <>
struct Vec<double> {
  typedef double type __attribute__((vector_size(32)));
};

template <typename T>
using V = typename Vec<T>::type;
template <typename T>
constexpr std::size_t kLanes = 32 / sizeof(T);

template <typename T>
[[gnu::always_inline]] inline V<T> load(const T* p) {
  V<T> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
template <typename T>
[[gnu::always_inline]] inline void store(T* p, V<T> v) {
  std::memcpy(p, &v, sizeof v);
}

// C rows [i0, i1) (+)= A * B where A(i, p) = a[i * ai + p * ap] and B is
// row-major k x n. Register tiles of kMR rows by two vectors. Each C element
// still sums its products in increasing p, so the result matches the serial
// reference bit for bit regardless of vector width.
template <typename T>
[[gnu::always_inline]] inline void block_rows(std::size_t i0, std::size_t i1, std::size_t k, std::size_t n,
                                              const T* a, std::size_t ai, std::size_t ap, const T* b, T* c,
                                              bool accumulate) {
  constexpr std::size_t L = kLanes<T>, NR = 2 * L;
  std::size_t i = i0;
  for (; i + kMR <= i1; i += kMR) {
    std::size_t j = 0;
    for (; j + NR <= n; j += NR) {
      V<T> acc[kMR][2];
      for (std::size_t r = 0; r < kMR; ++r) {
        acc[r][0] = accumulate ? load(c + (i + r) * n + j) : V<T>{};
        acc[r][1] = accumulate ? load(c + (i + r) * n + j + L) : V<T>{};
      }
      const T* ar = a + i * ai;
      for (std::size_t p = 0; p < k; ++p) {
        const V<T> b0 = load(b + p * n + j), b1 = load(b + p * n + j + L);
        for (std::size_t r = 0; r < kMR; ++r) {
          const V<T> av = V<T>{} + ar[r * ai + p * ap];
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (std::size_t r = 0; r < kMR; ++r) {
        store(c + (i + r) * n + j, acc[r][0]);
        store(c + (i + r) * n + j + L, acc[r][1]);
      }
    }
    for (std::size_t r = 0; r < kMR; ++r) {
      T* crow = c + (i + r) * n;
      if (!accumulate) std::fill(crow + j, crow + n, T{0});
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[(i + r) * ai + p * ap];
        const T* brow = b + p * n;
        for (std::size_t jj = j; jj < n; ++jj) crow[jj] += av * brow[jj];
      }
    }
  }
  for (; i < i1; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T{0});
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * ai + p * ap];
      const T* brow = b + p * n;
      for (std::size_t jj = 0; jj < n; ++jj) crow[jj] += av * brow[jj];
    }
  }
}

// Wider vector units are picked at load time when the CPU has them. Without
// FMA contraction the per-element arithmetic is the same on every path.
[[gnu::target_clones("avx2", "default")]] void row_range(std::size_t i0, std::size_t i1, std::size_t k,
                                                         std::size_t n, const float* a, std::size_t ai,
                                                         std::size_t ap, const float* b, float* c, bool accumulate) {
  block_rows(i0, i1, k, n, a, ai, ap, b, c, accumulate);
}

[[gnu::target_clones("avx2", "default")]] void row_range(std::size_t i0, std::size_t i1, std::size_t k,
                                                         std::size_t n, const double* a, std::size_t ai,
                                                         std::size_t ap, const double* b, double* c,
                                                         bool accumulate) {
  block_rows(i0, i1, k, n, a, ai, ap, b, c, accumulate);
}

template <typename T>
void gemm_strided(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t ai, std::size_t ap,
                  const T* b, T* c, bool accumulate) {
  if (m * k * n < kParallelThreshold || max_threads() == 1) {
    row_range(0, m, k, n, a, ai, ap, b, c, accumulate);
    return;
  }
  const auto blocks = static_cast<std::ptrdiff_t>((m + kMR - 1) / kMR);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * kMR;
    row_range(i0, std::min(m, i0 + kMR), k, n, a, ai, ap, b, c, accumulate);
  }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  gemm_strided(m, k, n, a, k, 1, b, c, accumulate);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_strided(m, k, n, a, k, 1, bt.data(), c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  gemm_strided(m, k, n, a, 1, m, b, c, accumulate);
}

#define PROMOE_INSTANTIATE(T)                                                                      \
  template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
  template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);
PROMOE_INSTANTIATE(float)
PROMOE_INSTANTIATE(double)
#undef PROMOE_INSTANTIATE

}  // namespace promoe::kernels
