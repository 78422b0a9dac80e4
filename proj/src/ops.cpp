#include "promoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "promoe/kernels.hpp"

namespace promoe {

namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands live on different tapes");
}

// How the second operand of a binary op lines up with the first.
enum class Broadcast { kSame, kScalar, kTrailing };

Broadcast classify(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::kSame;
  if (shape_numel(b) == 1) return Broadcast::kScalar;
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return Broadcast::kTrailing;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

inline std::size_t bindex(Broadcast mode, std::size_t i, std::size_t bsize) {
  switch (mode) {
    case Broadcast::kSame: return i;
    case Broadcast::kScalar: return 0;
    default: return i % bsize;
  }
}

template <typename T, typename F>
Var<T> unary(Var<T> a, F&& f, std::function<void(const Array<T>& x, const Array<T>& y, const Array<T>& g, Array<T>& gx)> bw) {
  const Array<T>& x = a.value();
  Array<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia, bw = std::move(bw)](Tape<T>& t, std::size_t self) {
    if (auto* gx = t.accumulate(ia)) bw(t.value_of(ia), t.value_of(self), t.grad_of(self), *gx);
  });
}

}  // namespace

Mask mask_not(const Mask& m) {
  Mask r(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) r[i] = m[i] ? 0 : 1;
  return r;
}

std::size_t mask_count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw ShapeError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Array<T> C({m, n});
  kernels::gemm_nn(m, k, n, A.ptr(), B.ptr(), C.ptr(), false);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(C), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (auto* ga = t.accumulate(ia)) kernels::gemm_nt(m, n, k, g.ptr(), t.value_of(ib).ptr(), ga->ptr(), true);
    if (auto* gb = t.accumulate(ib)) kernels::gemm_tn(k, m, n, t.value_of(ia).ptr(), g.ptr(), gb->ptr(), true);
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "matmul_nt");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1)) {
    throw ShapeError("matmul_nt: " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
  Array<T> C({m, n});
  kernels::gemm_nt(m, k, n, A.ptr(), B.ptr(), C.ptr(), false);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(C), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (auto* ga = t.accumulate(ia)) kernels::gemm_nn(m, n, k, g.ptr(), t.value_of(ib).ptr(), ga->ptr(), true);
    if (auto* gb = t.accumulate(ib)) kernels::gemm_tn(n, m, k, g.ptr(), t.value_of(ia).ptr(), gb->ptr(), true);
  });
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b) {
  require_same_tape(a, b, "bmm");
  const auto& A = a.value();
  const auto& B = b.value();
  const bool ok = A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0) &&
                  A.dim(2) == (transpose_b ? B.dim(2) : B.dim(1));
  if (!ok) throw ShapeError("bmm: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const std::size_t batch = A.dim(0), m = A.dim(1), k = A.dim(2);
  const std::size_t n = transpose_b ? B.dim(1) : B.dim(2);
  Array<T> C({batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    const T* ap = A.ptr() + s * m * k;
    const T* bp = B.ptr() + s * k * n;
    T* cp = C.ptr() + s * m * n;
    if (transpose_b) kernels::gemm_nt(m, k, n, ap, bp, cp, false);
    else kernels::gemm_nn(m, k, n, ap, bp, cp, false);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(C), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    auto* ga = t.accumulate(ia);
    auto* gb = t.accumulate(ib);
    const T* av = t.value_of(ia).ptr();
    const T* bv = t.value_of(ib).ptr();
    for (std::size_t s = 0; s < batch; ++s) {
      const T* gs = g.ptr() + s * m * n;
      if (ga) {
        T* gap = ga->ptr() + s * m * k;
        if (transpose_b) kernels::gemm_nn(m, n, k, gs, bv + s * k * n, gap, true);
        else kernels::gemm_nt(m, n, k, gs, bv + s * k * n, gap, true);
      }
      if (gb) {
        T* gbp = gb->ptr() + s * k * n;
        if (transpose_b) kernels::gemm_tn(n, m, k, gs, av + s * m * k, gbp, true);
        else kernels::gemm_tn(k, m, n, av + s * m * k, gs, gbp, true);
      }
    }
  });
}

template <typename T>
Var<T> reindex(Var<T> a, Shape shape, std::vector<std::size_t> src) {
  if (shape_numel(shape) != src.size()) {
    throw ShapeError("reindex: " + std::to_string(src.size()) + " indices for shape " + shape_str(shape));
  }
  const auto& x = a.value();
  Array<T> y(std::move(shape));
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] >= x.size()) throw ShapeError("reindex: source index out of range");
    y[i] = x[src[i]];
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia, src = std::move(src)](Tape<T>& t, std::size_t self) {
    if (auto* gx = t.accumulate(ia)) {
      const auto& g = t.grad_of(self);
      for (std::size_t i = 0; i < src.size(); ++i) (*gx)[src[i]] += g[i];
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& x = a.value();
  if (x.rank() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<std::size_t> src(r * c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < r; ++j) src[i * r + j] = j * c + i;
  return reindex(a, Shape{c, r}, std::move(src));
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Array<T> y = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia](Tape<T>& t, std::size_t self) {
    if (auto* gx = t.accumulate(ia)) {
      const auto& g = t.grad_of(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "add");
  const auto& A = a.value();
  const auto& B = b.value();
  const Broadcast mode = classify(A.shape(), B.shape(), "add");
  const std::size_t bs = B.size();
  Array<T> y(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) y[i] = A[i] + B[bindex(mode, i, bs)];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (auto* ga = t.accumulate(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = t.accumulate(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[bindex(mode, i, bs)] += g[i];
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "sub");
  const auto& A = a.value();
  const auto& B = b.value();
  const Broadcast mode = classify(A.shape(), B.shape(), "sub");
  const std::size_t bs = B.size();
  Array<T> y(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) y[i] = A[i] - B[bindex(mode, i, bs)];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (auto* ga = t.accumulate(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = t.accumulate(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[bindex(mode, i, bs)] -= g[i];
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "mul");
  const auto& A = a.value();
  const auto& B = b.value();
  const Broadcast mode = classify(A.shape(), B.shape(), "mul");
  const std::size_t bs = B.size();
  Array<T> y(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) y[i] = A[i] * B[bindex(mode, i, bs)];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& av = t.value_of(ia);
    const auto& bv = t.value_of(ib);
    if (auto* ga = t.accumulate(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[bindex(mode, i, bs)];
    if (auto* gb = t.accumulate(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[bindex(mode, i, bs)] += g[i] * av[i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  const auto& x = a.value();
  Array<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * c;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia, c](Tape<T>& t, std::size_t self) {
    if (auto* gx = t.accumulate(ia)) {
      const auto& g = t.grad_of(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * c;
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& x = a.value();
  T s{0};
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  const std::size_t ia = a.id;
  return a.tape->record(Array<T>::scalar(s), {ia}, [ia](Tape<T>& t, std::size_t self) {
    if (auto* gx = t.accumulate(ia)) {
      const T g = t.grad_of(self)[0];
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g;
    }
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary<T>(a, [](T v) { return std::exp(v); },
                  [](const Array<T>&, const Array<T>& y, const Array<T>& g, Array<T>& gx) {
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
                  });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary<T>(a, [](T v) { return std::log(v); },
                  [](const Array<T>& x, const Array<T>&, const Array<T>& g, Array<T>& gx) {
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x[i];
                  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(a, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
                  [](const Array<T>&, const Array<T>& y, const Array<T>& g, Array<T>& gx) {
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T{1} - y[i]);
                  });
}

namespace {

// tanh through a single exp; saturates cleanly to +-1 for large |u|.
template <typename T>
T tanh_via_exp(T u) {
  return T{1} - T{2} / (T{1} + std::exp(T{2} * u));
}

}  // namespace

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return unary<T>(
      a, [](T v) { return T(0.5) * v * (T{1} + tanh_via_exp(kC * (v + kA * v * v * v))); },
      [](const Array<T>& x, const Array<T>&, const Array<T>& g, Array<T>& gx) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = x[i];
          const T th = tanh_via_exp(kC * (v + kA * v * v * v));
          const T d = T(0.5) * (T{1} + th) + T(0.5) * v * (T{1} - th * th) * kC * (T{1} + T(3) * kA * v * v);
          gx[i] += g[i] * d;
        }
      });
}

template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const auto& x = a.value();
  const AxisSplit s = split_axis(x.shape(), axis);
  Array<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = x[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, x[base + e * s.inner]);
      T z{0};
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(x[base + e * s.inner] - mx);
        y[base + e * s.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] /= z;
    }
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia, s](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulate(ia);
    if (!gx) return;
    const auto& g = t.grad_of(self);
    const auto& yv = t.value_of(self);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T dot{0};
        for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * yv[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          (*gx)[k] += yv[k] * (g[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a, std::size_t axis) {
  const auto& x = a.value();
  const AxisSplit s = split_axis(x.shape(), axis);
  Array<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = x[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, x[base + e * s.inner]);
      T z{0};
      for (std::size_t e = 0; e < s.extent; ++e) z += std::exp(x[base + e * s.inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] = x[base + e * s.inner] - lse;
    }
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia, s](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulate(ia);
    if (!gx) return;
    const auto& g = t.grad_of(self);
    const auto& yv = t.value_of(self);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T gs{0};
        for (std::size_t e = 0; e < s.extent; ++e) gs += g[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          (*gx)[k] += g[k] - std::exp(yv[k]) * gs;
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> a, std::size_t axis, double eps) {
  const auto& x = a.value();
  const AxisSplit s = split_axis(x.shape(), axis);
  Array<T> y(x.shape());
  std::vector<T> inv_std(s.outer * s.inner);
  const T n = static_cast<T>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mu{0};
      for (std::size_t e = 0; e < s.extent; ++e) mu += x[base + e * s.inner];
      mu /= n;
      T var{0};
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T d = x[base + e * s.inner] - mu;
        var += d * d;
      }
      var /= n;
      const T is = T{1} / std::sqrt(var + static_cast<T>(eps));
      inv_std[o * s.inner + in] = is;
      for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] = (x[base + e * s.inner] - mu) * is;
    }
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia, s, n, inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulate(ia);
    if (!gx) return;
    const auto& g = t.grad_of(self);
    const auto& yv = t.value_of(self);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T gm{0}, gy{0};
        for (std::size_t e = 0; e < s.extent; ++e) {
          gm += g[base + e * s.inner];
          gy += g[base + e * s.inner] * yv[base + e * s.inner];
        }
        gm /= n;
        gy /= n;
        const T is = inv_std[o * s.inner + in];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          (*gx)[k] += is * (g[k] - gm - yv[k] * gy);
        }
      }
    }
  });
}

template <typename T>
Var<T> l2_normalize(Var<T> a, std::size_t axis, double eps) {
  const auto& x = a.value();
  const AxisSplit s = split_axis(x.shape(), axis);
  Array<T> y(x.shape());
  std::vector<T> norms(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T ss{0};
      for (std::size_t e = 0; e < s.extent; ++e) ss += x[base + e * s.inner] * x[base + e * s.inner];
      const T r = std::sqrt(ss);
      norms[o * s.inner + in] = r;
      const T den = std::max(r, static_cast<T>(eps));
      for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] = x[base + e * s.inner] / den;
    }
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia, s, eps, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulate(ia);
    if (!gx) return;
    const auto& g = t.grad_of(self);
    const auto& xv = t.value_of(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        const T r = norms[o * s.inner + in];
        const T den = std::max(r, static_cast<T>(eps));
        T xg{0};
        for (std::size_t e = 0; e < s.extent; ++e) xg += xv[base + e * s.inner] * g[base + e * s.inner];
        // Above the floor: (I - y y^T) / |x|. Below it the map is linear, x / eps.
        const T coef = r > static_cast<T>(eps) ? xg / (r * r * r) : T{0};
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          (*gx)[k] += g[k] / den - xv[k] * coef;
        }
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, const Mask& mask) {
  const auto& X = x.value();
  if (X.rank() != 2 || X.dim(0) != mask.size()) {
    throw ShapeError("gather_rows: mask of length " + std::to_string(mask.size()) + " for " + shape_str(X.shape()));
  }
  std::vector<std::size_t> rows;
  rows.reserve(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) rows.push_back(i);
  return index_rows(x, rows);
}

template <typename T>
Var<T> scatter_rows(Var<T> target, const Mask& mask, Var<T> values) {
  require_same_tape(target, values, "scatter_rows");
  const auto& X = target.value();
  const auto& V = values.value();
  if (X.rank() != 2 || X.dim(0) != mask.size()) {
    throw ShapeError("scatter_rows: mask of length " + std::to_string(mask.size()) + " for " + shape_str(X.shape()));
  }
  const std::size_t d = X.dim(1);
  const std::size_t m = mask_count(mask);
  if (V.size() != m * d || (V.rank() == 2 && V.dim(0) != m)) {
    throw ShapeError("scatter_rows: " + std::to_string(m) + " masked rows but values " + shape_str(V.shape()));
  }
  Array<T> y = X;
  std::vector<std::size_t> rows;
  rows.reserve(m);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) rows.push_back(i);
  for (std::size_t r = 0; r < m; ++r) std::copy_n(V.ptr() + r * d, d, y.ptr() + rows[r] * d);
  const std::size_t it = target.id, iv = values.id;
  return target.tape->record(std::move(y), {it, iv}, [=, rows = std::move(rows)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (auto* gt = t.accumulate(it)) {
      std::size_t next = 0;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (next < rows.size() && rows[next] == i) {
          ++next;
          continue;
        }
        for (std::size_t c = 0; c < d; ++c) (*gt)[i * d + c] += g[i * d + c];
      }
    }
    if (auto* gv = t.accumulate(iv)) {
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*gv)[r * d + c] += g[rows[r] * d + c];
    }
  });
}

template <typename T>
Var<T> index_rows(Var<T> x, const std::vector<std::size_t>& rows) {
  const auto& X = x.value();
  if (X.rank() != 2) throw ShapeError("index_rows: expected 2-D, got " + shape_str(X.shape()));
  const std::size_t n = X.dim(0), d = X.dim(1);
  Array<T> y({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ShapeError("index_rows: row index out of range");
    std::copy_n(X.ptr() + rows[r] * d, d, y.ptr() + r * d);
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(y), {ix}, [ix, d, rows](Tape<T>& t, std::size_t self) {
    if (auto* gx = t.accumulate(ix)) {
      const auto& g = t.grad_of(self);
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*gx)[rows[r] * d + c] += g[r * d + c];
    }
  });
}

template <typename T>
Var<T> pick(Var<T> x, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  const auto& X = x.value();
  if (X.rank() != 2 || rows.size() != cols.size()) throw ShapeError("pick: expected 2-D input and matching index lists");
  const std::size_t n = X.dim(0), c = X.dim(1);
  std::vector<std::size_t> src(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n || cols[i] >= c) throw ShapeError("pick: index out of range");
    src[i] = rows[i] * c + cols[i];
  }
  return reindex(x, Shape{rows.size()}, std::move(src));
}

template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> g) {
  require_same_tape(x, g, "scale_rows");
  const auto& X = x.value();
  const auto& G = g.value();
  if (X.rank() != 2 || G.size() != X.dim(0)) {
    throw ShapeError("scale_rows: " + shape_str(G.shape()) + " row scales for " + shape_str(X.shape()));
  }
  const std::size_t n = X.dim(0), d = X.dim(1);
  Array<T> y(X.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) y[r * d + c] = X[r * d + c] * G[r];
  const std::size_t ix = x.id, ig = g.id;
  return x.tape->record(std::move(y), {ix, ig}, [=](Tape<T>& t, std::size_t self) {
    const auto& gr = t.grad_of(self);
    const auto& xv = t.value_of(ix);
    const auto& gv = t.value_of(ig);
    if (auto* gx = t.accumulate(ix))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*gx)[r * d + c] += gr[r * d + c] * gv[r];
    if (auto* gg = t.accumulate(ig))
      for (std::size_t r = 0; r < n; ++r) {
        T acc{0};
        for (std::size_t c = 0; c < d; ++c) acc += gr[r * d + c] * xv[r * d + c];
        (*gg)[r] += acc;
      }
  });
}

#define PROMOE_INSTANTIATE(T)                                                                        \
  template Var<T> matmul(Var<T>, Var<T>);                                                            \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                         \
  template Var<T> bmm(Var<T>, Var<T>, bool);                                                         \
  template Var<T> transpose(Var<T>);                                                                 \
  template Var<T> reshape(Var<T>, Shape);                                                            \
  template Var<T> reindex(Var<T>, Shape, std::vector<std::size_t>);                                  \
  template Var<T> add(Var<T>, Var<T>);                                                               \
  template Var<T> sub(Var<T>, Var<T>);                                                               \
  template Var<T> mul(Var<T>, Var<T>);                                                               \
  template Var<T> scale(Var<T>, T);                                                                  \
  template Var<T> sum(Var<T>);                                                                       \
  template Var<T> mean(Var<T>);                                                                      \
  template Var<T> exp(Var<T>);                                                                       \
  template Var<T> log(Var<T>);                                                                       \
  template Var<T> sigmoid(Var<T>);                                                                   \
  template Var<T> gelu(Var<T>);                                                                      \
  template Var<T> softmax(Var<T>, std::size_t);                                                      \
  template Var<T> log_softmax(Var<T>, std::size_t);                                                  \
  template Var<T> layer_norm(Var<T>, std::size_t, double);                                           \
  template Var<T> l2_normalize(Var<T>, std::size_t, double);                                         \
  template Var<T> gather_rows(Var<T>, const Mask&);                                                  \
  template Var<T> scatter_rows(Var<T>, const Mask&, Var<T>);                                         \
  template Var<T> index_rows(Var<T>, const std::vector<std::size_t>&);                               \
  template Var<T> pick(Var<T>, const std::vector<std::size_t>&, const std::vector<std::size_t>&);    \
  template Var<T> scale_rows(Var<T>, Var<T>);
PROMOE_INSTANTIATE(float)
PROMOE_INSTANTIATE(double)
#undef PROMOE_INSTANTIATE

}  // namespace promoe
