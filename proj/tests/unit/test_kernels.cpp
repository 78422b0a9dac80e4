#include <gtest/gtest.h>

#include <array>
#include <cstring>
#include <vector>

#include "promoe/kernels.hpp"
#include "promoe/rng.hpp"

using namespace promoe;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, Rng& r) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(r.normal());
  return v;
}

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
void check_shapes() {
  Rng r(11, Stream::kTest);
  const std::array<std::array<std::size_t, 3>, 10> dims{{{1, 1, 1},  {3, 5, 7},    {4, 8, 16},  {5, 3, 9},   {17, 33, 65},
                                 {64, 64, 64}, {130, 70, 33}, {512, 64, 128}, {9, 256, 3}, {2, 1, 300}}};
  for (auto [m, k, n] : dims) {
    for (bool acc : {false, true}) {
      const auto a = random_vec<T>(m * k, r);
      const auto b_nn = random_vec<T>(k * n, r);
      const auto b_nt = random_vec<T>(n * k, r);
      const auto c0 = random_vec<T>(m * n, r);
      auto c1 = c0, c2 = c0;
      kernels::gemm_nn(m, k, n, a.data(), b_nn.data(), c1.data(), acc);
      kernels::serial::gemm_nn(m, k, n, a.data(), b_nn.data(), c2.data(), acc);
      EXPECT_TRUE(bitwise_equal(c1, c2)) << "nn " << m << "x" << k << "x" << n << " acc " << acc;
      c1 = c0, c2 = c0;
      kernels::gemm_nt(m, k, n, a.data(), b_nt.data(), c1.data(), acc);
      kernels::serial::gemm_nt(m, k, n, a.data(), b_nt.data(), c2.data(), acc);
      EXPECT_TRUE(bitwise_equal(c1, c2)) << "nt " << m << "x" << k << "x" << n << " acc " << acc;
      c1 = c0, c2 = c0;
      // a reinterpreted as [k x m] for the transposed-A form.
      kernels::gemm_tn(m, k, n, a.data(), b_nn.data(), c1.data(), acc);
      kernels::serial::gemm_tn(m, k, n, a.data(), b_nn.data(), c2.data(), acc);
      EXPECT_TRUE(bitwise_equal(c1, c2)) << "tn " << m << "x" << k << "x" << n << " acc " << acc;
    }
  }
}

}  // namespace

TEST(Kernels, ParallelMatchesSerialBitwiseFloat) { check_shapes<float>(); }
TEST(Kernels, ParallelMatchesSerialBitwiseDouble) { check_shapes<double>(); }

TEST(Kernels, SerialIsTheTextbookProduct) {
  const double a[] = {1, 2, 3, 4};  // 2x2
  const double b[] = {1, 1};        // 2x1
  double c[2] = {};
  kernels::serial::gemm_nn<double>(2, 2, 1, a, b, c, false);
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 7.0);
  kernels::gemm_nn<double>(2, 2, 1, a, b, c, true);
  EXPECT_EQ(c[0], 6.0);
  EXPECT_EQ(c[1], 14.0);
}

TEST(Kernels, EmptyInnerDimensionZeroesOrKeeps) {
  std::vector<float> c{1, 2, 3, 4};
  kernels::gemm_nn<float>(2, 0, 2, nullptr, nullptr, c.data(), true);
  EXPECT_EQ(c, (std::vector<float>{1, 2, 3, 4}));
  kernels::gemm_nn<float>(2, 0, 2, nullptr, nullptr, c.data(), false);
  EXPECT_EQ(c, (std::vector<float>{0, 0, 0, 0}));
}

TEST(Kernels, ThreadCountIsPositive) { EXPECT_GE(kernels::max_threads(), 1); }
