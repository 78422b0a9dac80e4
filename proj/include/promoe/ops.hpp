#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "promoe/tape.hpp"

// Differentiable operations recorded on a Tape. Binary elementwise ops accept
// a second operand that either matches the first, is a scalar, or matches the
// first operand's trailing dimensions. All ops throw ShapeError on mismatch.
namespace promoe {

using Mask = std::vector<std::uint8_t>;

inline constexpr double kNormEps = 1e-8;
inline constexpr double kLayerNormEps = 1e-5;

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// a[m x k] * b[n x k]^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
/// Batched product over the leading axis: a[b x m x k] * b[b x k x n] (or b[b x n x k]^T).
template <typename T> Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false);
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
/// out.flat[i] = a.flat[src[i]]; indices may repeat (gradients accumulate).
template <typename T> Var<T> reindex(Var<T> a, Shape shape, std::vector<std::size_t> src);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T c);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
/// tanh approximation.
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> softmax(Var<T> a, std::size_t axis);
template <typename T> Var<T> log_softmax(Var<T> a, std::size_t axis);
/// Zero mean, unit variance along `axis`; no affine terms.
template <typename T> Var<T> layer_norm(Var<T> a, std::size_t axis, double eps = kLayerNormEps);
/// x / max(||x||, eps) along `axis`.
template <typename T> Var<T> l2_normalize(Var<T> a, std::size_t axis, double eps = kNormEps);

/// Rows of x[n x D] whose mask entry is set, in original order.
template <typename T> Var<T> gather_rows(Var<T> x, const Mask& mask);
/// Copy of target with its masked rows replaced, in order, by the rows of values.
template <typename T> Var<T> scatter_rows(Var<T> target, const Mask& mask, Var<T> values);
/// Rows of x[n x D] at `rows` (repeats allowed).
template <typename T> Var<T> index_rows(Var<T> x, const std::vector<std::size_t>& rows);
/// out[i] = x[rows[i], cols[i]] for a 2-D x; output shape [m].
template <typename T> Var<T> pick(Var<T> x, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols);
/// out[i, :] = x[i, :] * g[i]
template <typename T> Var<T> scale_rows(Var<T> x, Var<T> g);

Mask mask_not(const Mask& m);
std::size_t mask_count(const Mask& m);

}  // namespace promoe
