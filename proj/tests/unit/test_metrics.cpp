#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "promoe/error.hpp"
#include "promoe/metrics.hpp"

using namespace promoe;

namespace {

Array<double> randn(Shape s, std::uint64_t key) {
  Rng r(13, Stream::kTest, key);
  Array<double> a(std::move(s));
  for (auto& v : a.vec()) v = r.normal();
  return a;
}

Eigen::MatrixXd to_eigen(const Array<double>& a) {
  Eigen::MatrixXd m(a.dim(0), a.dim(1));
  for (std::size_t r = 0; r < a.dim(0); ++r)
    for (std::size_t c = 0; c < a.dim(1); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a.at(r, c);
  return m;
}

double eigen_similarity(const Array<double>& a, const Array<double>& b, std::size_t k) {
  const auto kk = static_cast<Eigen::Index>(k);
  Eigen::JacobiSVD<Eigen::MatrixXd> sa(to_eigen(a), Eigen::ComputeThinU), sb(to_eigen(b), Eigen::ComputeThinU);
  const Eigen::MatrixXd ua = sa.matrixU().leftCols(kk), ub = sb.matrixU().leftCols(kk);
  return (ua.transpose() * ub).squaredNorm() / static_cast<double>(k);
}

Array<double> random_orthogonal(std::size_t n, std::uint64_t key) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(to_eigen(randn({n, n}, key)));
  Eigen::MatrixXd q = qr.householderQ();
  Array<double> out({n, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) = q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  return out;
}

Array<double> matmul(const Array<double>& a, const Array<double>& b) {
  Array<double> c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t k = 0; k < a.dim(1); ++k)
      for (std::size_t j = 0; j < b.dim(1); ++j) c.at(i, j) += a.at(i, k) * b.at(k, j);
  return c;
}

ExpertFFN<double> expert_with_w1(const Array<double>& w1) {
  ExpertFFN<double> e;
  e.w1 = Parameter<double>("w1", w1);
  e.b1 = Parameter<double>("b1", Array<double>({w1.dim(1)}));
  e.w2 = Parameter<double>("w2", Array<double>({w1.dim(1), w1.dim(0)}));
  e.b2 = Parameter<double>("b2", Array<double>({w1.dim(0)}));
  return e;
}

}  // namespace

TEST(Svd, SingularValuesMatchEigen) {
  for (auto [m, n] : std::vector<std::pair<std::size_t, std::size_t>>{{8, 6}, {6, 8}, {10, 10}, {5, 1}}) {
    const auto a = randn({m, n}, m * 100 + n);
    const auto s = jacobi_svd(a);
    Eigen::JacobiSVD<Eigen::MatrixXd> ref(to_eigen(a));
    for (std::size_t i = 0; i < std::min(m, n); ++i)
      EXPECT_NEAR(s.sigma[i], ref.singularValues()(static_cast<Eigen::Index>(i)), 1e-10);
  }
}

TEST(Svd, LeftVectorsOrthonormal) {
  const auto u = top_left_singular(randn({9, 5}, 1), 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double d = 0;
      for (std::size_t r = 0; r < 9; ++r) d += u.at(r, i) * u.at(r, j);
      EXPECT_NEAR(d, i == j ? 1.0 : 0.0, 1e-12);
    }
}

TEST(Similarity, IdenticalIsOne) {
  const auto w = randn({8, 6}, 2);
  EXPECT_NEAR(subspace_similarity(w, w, 3), 1.0, 1e-12);
}

TEST(Similarity, OrthogonalIsZero) {
  Array<double> a({6, 2}), b({6, 2});
  a.at(0, 0) = 3, a.at(1, 1) = 2;
  b.at(2, 0) = 1, b.at(3, 1) = 5;
  EXPECT_NEAR(subspace_similarity(a, b, 2), 0.0, 1e-15);
}

TEST(Similarity, MatchesDenseSvdOracle) {
  for (std::uint64_t key = 0; key < 20; ++key) {
    const auto a = randn({8, 6}, 10 + key), b = randn({8, 6}, 50 + key);
    EXPECT_NEAR(subspace_similarity(a, b, 2), eigen_similarity(a, b, 2), 1e-4);
  }
}

TEST(Similarity, Symmetric) {
  const auto a = randn({10, 7}, 3), b = randn({10, 7}, 4);
  EXPECT_NEAR(subspace_similarity(a, b, 4), subspace_similarity(b, a, 4), 1e-10);
}

TEST(Similarity, InvariantToRightRotation) {
  for (std::uint64_t key = 0; key < 5; ++key) {
    const auto a = randn({12, 6}, 20 + key), b = randn({12, 6}, 30 + key);
    const auto q = random_orthogonal(6, 40 + key);
    EXPECT_NEAR(subspace_similarity(a, b, 3), subspace_similarity(matmul(a, q), b, 3), 1e-6);
    EXPECT_NEAR(subspace_similarity(a, b, 3), subspace_similarity(a, matmul(b, q), 3), 1e-6);
  }
}

TEST(Similarity, InUnitInterval) {
  for (std::uint64_t key = 0; key < 10; ++key) {
    const double s = subspace_similarity(randn({8, 8}, key), randn({8, 8}, 100 + key), 5);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0 + 1e-12);
  }
}

TEST(Similarity, KOutOfRange) {
  const auto a = randn({8, 6}, 5);
  EXPECT_THROW(subspace_similarity(a, a, 0), ConfigError);
  EXPECT_THROW(subspace_similarity(a, a, 7), ConfigError);
}

TEST(Diversity, IdenticalExpertsGiveOne) {
  ExpertPool<double> pool;
  const auto w = randn({8, 6}, 6);
  for (int i = 0; i < 3; ++i) pool.standard.push_back(expert_with_w1(w));
  EXPECT_NEAR(expert_diversity(pool, 3).mean, 1.0, 1e-12);
}

TEST(Diversity, OrthogonalRangesGiveZero) {
  ExpertPool<double> pool;
  Array<double> a({4, 2}), b({4, 2});
  a.at(0, 0) = 1, a.at(1, 1) = 1;
  b.at(2, 0) = 1, b.at(3, 1) = 1;
  pool.standard.push_back(expert_with_w1(a));
  pool.standard.push_back(expert_with_w1(b));
  EXPECT_NEAR(expert_diversity(pool, 2).mean, 0.0, 1e-15);
}

TEST(Diversity, PairwiseLoopOracle) {
  ExpertPool<double> pool;
  for (int i = 0; i < 3; ++i) pool.standard.push_back(expert_with_w1(randn({8, 6}, 70 + i)));
  const auto rep = expert_diversity(pool, 2);
  double s = 0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) {
      const double sij = eigen_similarity(pool.standard[i].w1.value, pool.standard[j].w1.value, 2);
      EXPECT_NEAR(rep.pair_matrix[i * 3 + j], sij, 1e-8);
      EXPECT_NEAR(rep.pair_matrix[j * 3 + i], sij, 1e-8);
      s += sij / 3.0;
    }
  EXPECT_NEAR(rep.mean, s, 1e-8);
  EXPECT_EQ(rep.n_experts, 3u);
}

TEST(Diversity, FewerThanTwoExpertsIsContractError) {
  ExpertPool<double> pool;
  pool.standard.push_back(expert_with_w1(randn({4, 4}, 8)));
  EXPECT_THROW(expert_diversity(pool, 2), ContractError);
}

TEST(ClusterRatio, HandOracle) {
  // Class 0 at (0,0),(2,0): centroid (1,0). Class 1 at (1,3),(1,5): centroid (1,4).
  const Array<double> x({4, 2}, {0, 0, 2, 0, 1, 3, 1, 5});
  const auto r = cluster_ratio(x, {0, 0, 1, 1});
  EXPECT_NEAR(r.intra, 1.0, 1e-12);
  EXPECT_NEAR(r.inter, 4.0, 1e-12);
  EXPECT_NEAR(r.ratio, 4.0, 1e-12);
}

TEST(ClusterRatio, PointMassesHitTheFloor) {
  const Array<double> x({4, 1}, {0, 0, 2, 2});
  const auto r = cluster_ratio(x, {0, 0, 1, 1});
  EXPECT_EQ(r.intra, 0.0);
  EXPECT_NEAR(r.ratio, 2.0 / 1e-12, 1.0);
}

TEST(ClusterRatio, SameDistributionIsSmall) {
  const auto x = randn({2000, 4}, 9);
  std::vector<int> labels(2000);
  for (std::size_t i = 0; i < 2000; ++i) labels[i] = static_cast<int>(i % 2);
  EXPECT_LT(cluster_ratio(x, labels).ratio, 0.1);
}

TEST(ClusterRatio, TranslationAndScaleInvariant) {
  const auto x = randn({30, 3}, 10);
  std::vector<int> labels(30);
  for (std::size_t i = 0; i < 30; ++i) labels[i] = static_cast<int>(i % 3);
  const double base = cluster_ratio(x, labels).ratio;
  Array<double> moved = x, scaled = x;
  for (std::size_t i = 0; i < 30; ++i) {
    moved.at(i, 0) += 5.0, moved.at(i, 2) -= 2.0;
    for (std::size_t j = 0; j < 3; ++j) scaled.at(i, j) *= 3.5;
  }
  EXPECT_NEAR(cluster_ratio(moved, labels).ratio, base, 1e-9);
  EXPECT_NEAR(cluster_ratio(scaled, labels).ratio, base, 1e-9);
}

TEST(ClusterRatio, SingleClassIsContractError) {
  EXPECT_THROW(cluster_ratio(randn({5, 2}, 11), {1, 1, 1, 1, 1}), ContractError);
}

TEST(Usage, OneExpertEntropyZero) {
  const auto u = usage_from_counts({0, 10, 0, 0});
  EXPECT_EQ(u.entropy, 0.0);
  EXPECT_EQ(u.fractions[1], 1.0);
}

TEST(Usage, UniformEntropyOne) {
  const auto u = usage_from_counts({5, 5, 5, 5, 5});
  EXPECT_NEAR(u.entropy, 1.0, 1e-12);
  double s = 0;
  for (double f : u.fractions) s += f;
  EXPECT_NEAR(s, 1.0, 1e-9);
}

TEST(Usage, CountingOracle) {
  Rng r(14, Stream::kTest);
  RoutingLog log;
  log.gating.n = 40;
  log.gating.k = 2;
  log.gating.n_experts = 5;
  std::vector<std::size_t> want(5, 0);
  for (std::size_t i = 0; i < 80; ++i) {
    const auto e = r.below(5);
    log.gating.indices.push_back(e);
    log.gating.gates.push_back(r.uniform());
    ++want[e];
  }
  const auto u = usage_stats(log);
  EXPECT_EQ(u.counts, want);
  EXPECT_EQ(u.total(), 80u);
  double h = 0;
  for (auto c : want)
    if (c) h -= (c / 80.0) * std::log(c / 80.0);
  EXPECT_NEAR(u.entropy, h / std::log(5.0), 1e-12);
}

TEST(Export, WritesRowsAndHeader) {
  RoutingLog log;
  log.layer = 2;
  log.token_ids = {0, 3};
  log.gating.n = 2;
  log.gating.k = 1;
  log.gating.n_experts = 4;
  log.gating.indices = {1, 3};
  log.gating.gates = {0.5, -0.25};
  const auto path = (std::filesystem::temp_directory_path() / "promoe_assign_test.csv").string();
  export_assignments({log}, 17, path);
  export_assignments({log}, 18, path, true);
  std::ifstream in(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "step,layer,token_id,expert_id,gate");
  EXPECT_EQ(lines[1].rfind("17,2,0,1,0.5", 0), 0u);
  EXPECT_EQ(lines[2].rfind("17,2,3,3,-0.25", 0), 0u);
  EXPECT_EQ(lines[3].rfind("18,2,0,1", 0), 0u);
  std::filesystem::remove(path);
}

TEST(Export, BadPathNamesThePath) {
  try {
    export_assignments({}, 0, "/nonexistent_dir_promoe/x.csv");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent_dir_promoe/x.csv"), std::string::npos);
  }
}
