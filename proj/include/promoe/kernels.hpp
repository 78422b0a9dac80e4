#pragma once

#include <cstddef>

// Dense GEMM kernels used by the autodiff tape. Every kernel writes
//   C[m x n] = op(A) * op(B)          (accumulate == false)
//   C[m x n] += op(A) * op(B)         (accumulate == true)
// with row-major storage. The `serial` namespace holds the plain triple-loop
// reference kept for testing; the top-level kernels are the OpenMP versions
// the library calls. Both accumulate each C element over k in increasing
// order, so results agree to rounding (bitwise without FMA contraction).
namespace promoe::kernels {

/// C = A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);

/// C = A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);

/// C = A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);

/// Number of threads the parallel kernels will use (1 without OpenMP).
int max_threads();

namespace serial {

template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);

}  // namespace serial

}  // namespace promoe::kernels
