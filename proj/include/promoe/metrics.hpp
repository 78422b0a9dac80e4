#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "promoe/array.hpp"
#include "promoe/experts.hpp"
#include "promoe/router.hpp"

namespace promoe {

/// Thin SVD by one-sided Jacobi rotations. Singular values descending;
/// u is m x min(m, n), with zero columns where sigma == 0 for tall inputs.
struct Svd {
  Array<double> u;
  std::vector<double> sigma;
};
Svd jacobi_svd(const Array<double>& a, double tol = 1e-15, std::size_t max_sweeps = 80);

/// First k left singular vectors of w[D x d] as a D x k matrix.
Array<double> top_left_singular(const Array<double>& w, std::size_t k);

/// ||U_i^T U_j||_F^2 / k over the top-k left singular subspaces.
/// ConfigError unless 1 <= k <= min(D, d).
double subspace_similarity(const Array<double>& wi, const Array<double>& wj, std::size_t k);

struct DiversityReport {
  std::size_t k = 0;
  double mean = 0.0;                 // mean over unordered pairs
  std::vector<double> pair_matrix;  // N x N, ones on the diagonal
  std::size_t n_experts = 0;
};

/// Pairwise similarity of the standard experts' w1 subspaces.
/// ContractError with fewer than two standard experts.
template <typename T>
DiversityReport expert_diversity(const ExpertPool<T>& pool, std::size_t k = 8);

struct ClusterRatio {
  double inter = 0.0;  // mean pairwise distance between class centroids
  double intra = 0.0;  // mean distance of tokens to their class centroid
  double ratio = 0.0;  // inter / max(intra, eps)
};

/// Euclidean cluster separation of token features grouped by label.
/// ContractError when fewer than two distinct labels are present.
template <typename T>
ClusterRatio cluster_ratio(const Array<T>& tokens, const std::vector<int>& labels, double eps = 1e-12);

struct UsageStats {
  std::vector<std::size_t> counts;
  std::vector<double> fractions;
  double entropy = 0.0;  // normalized by log N_E, in [0, 1]
  std::size_t total() const;
};

UsageStats usage_from_counts(std::vector<std::size_t> counts);
/// Counts every top-K slot of every routed token.
UsageStats usage_stats(const RoutingLog& log);
UsageStats usage_stats(const std::vector<RoutingLog>& logs);

/// Writes rows (step, layer, token_id, expert_id, gate). With `append` the
/// header is only written to an empty file. IoError names the path on failure.
void export_assignments(const std::vector<RoutingLog>& logs, std::uint64_t step, const std::string& path,
                        bool append = false);

}  // namespace promoe
