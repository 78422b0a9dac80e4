#include "promoe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "promoe/error.hpp"

namespace promoe {

namespace {

// Orthogonalizes the n columns (length m, column-major in w) in place and
// applies the same rotations to v (n x n, column-major) when given.
void hestenes(std::vector<double>& w, std::size_t m, std::size_t n, std::vector<double>* v, double tol,
              std::size_t max_sweeps) {
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* cp = w.data() + p * m;
        double* cq = w.data() + q * m;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = cp[i], y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
        if (v) {
          double* vp = v->data() + p * n;
          double* vq = v->data() + q * n;
          for (std::size_t i = 0; i < n; ++i) {
            const double x = vp[i], y = vq[i];
            vp[i] = c * x - s * y;
            vq[i] = s * x + c * y;
          }
        }
      }
    }
    if (!rotated) break;
  }
}

}  // namespace

Svd jacobi_svd(const Array<double>& a, double tol, std::size_t max_sweeps) {
  if (a.rank() != 2) throw ShapeError("jacobi_svd: expected a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  // Wide matrices are handled through A^T = V S U^T so the sweep runs over
  // the shorter side; the accumulated rotations are then A's left vectors.
  const bool wide = n > m;
  const std::size_t len = wide ? n : m, cols = wide ? m : n;
  std::vector<double> w(len * cols);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (wide) w[i * n + j] = a.at(i, j);
      else w[j * m + i] = a.at(i, j);
    }
  std::vector<double> v;
  if (wide) {
    v.assign(cols * cols, 0.0);
    for (std::size_t i = 0; i < cols; ++i) v[i * cols + i] = 1.0;
  }
  hestenes(w, len, cols, wide ? &v : nullptr, tol, max_sweeps);

  std::vector<double> norms(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < len; ++i) ss += w[j * len + i] * w[j * len + i];
    norms[j] = std::sqrt(ss);
  }
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  Svd out;
  out.u = Array<double>({m, cols});
  out.sigma.resize(cols);
  for (std::size_t r = 0; r < cols; ++r) {
    const std::size_t j = order[r];
    out.sigma[r] = norms[j];
    if (wide) {
      for (std::size_t i = 0; i < m; ++i) out.u.at(i, r) = v[j * cols + i];
    } else if (norms[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u.at(i, r) = w[j * m + i] / norms[j];
    }
  }
  return out;
}

Array<double> top_left_singular(const Array<double>& w, std::size_t k) {
  if (w.rank() != 2) throw ShapeError("top_left_singular: expected a matrix, got " + shape_str(w.shape()));
  const std::size_t m = w.dim(0), n = w.dim(1);
  if (k == 0 || k > std::min(m, n)) {
    throw ConfigError("subspace k=" + std::to_string(k) + " outside [1, " + std::to_string(std::min(m, n)) + "]");
  }
  const Svd svd = jacobi_svd(w);
  Array<double> u({m, k});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t r = 0; r < k; ++r) u.at(i, r) = svd.u.at(i, r);
  return u;
}

double subspace_similarity(const Array<double>& wi, const Array<double>& wj, std::size_t k) {
  if (wi.shape() != wj.shape()) {
    throw ShapeError("subspace_similarity: " + shape_str(wi.shape()) + " vs " + shape_str(wj.shape()));
  }
  const Array<double> ui = top_left_singular(wi, k), uj = top_left_singular(wj, k);
  const std::size_t m = ui.dim(0);
  double fro = 0.0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      double dot = 0.0;
      for (std::size_t i = 0; i < m; ++i) dot += ui.at(i, a) * uj.at(i, b);
      fro += dot * dot;
    }
  return fro / static_cast<double>(k);
}

template <typename T>
DiversityReport expert_diversity(const ExpertPool<T>& pool, std::size_t k) {
  const std::size_t n = pool.standard.size();
  if (n < 2) throw ContractError("expert_diversity: need at least two standard experts, have " + std::to_string(n));
  std::vector<Array<double>> bases;
  for (const auto& e : pool.standard) bases.push_back(top_left_singular(e.w1.value.template cast<double>(), k));

  DiversityReport rep;
  rep.k = k;
  rep.n_experts = n;
  rep.pair_matrix.assign(n * n, 1.0);
  const std::size_t m = bases[0].dim(0);
  double total = 0.0;
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = x + 1; y < n; ++y) {
      double fro = 0.0;
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) {
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) dot += bases[x].at(i, a) * bases[y].at(i, b);
          fro += dot * dot;
        }
      const double sim = fro / static_cast<double>(k);
      rep.pair_matrix[x * n + y] = rep.pair_matrix[y * n + x] = sim;
      total += sim;
    }
  rep.mean = total / static_cast<double>(n * (n - 1) / 2);
  return rep;
}

template <typename T>
ClusterRatio cluster_ratio(const Array<T>& tokens, const std::vector<int>& labels, double eps) {
  if (tokens.rank() != 2 || tokens.dim(0) != labels.size()) {
    throw ShapeError("cluster_ratio: tokens " + shape_str(tokens.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t n = tokens.dim(0), d = tokens.dim(1);
  std::map<int, std::size_t> slot;
  for (int y : labels) slot.emplace(y, 0);
  if (slot.size() < 2) throw ContractError("cluster_ratio: need at least two classes");
  std::size_t next = 0;
  for (auto& [y, s] : slot) s = next++;

  const std::size_t c = slot.size();
  std::vector<double> cent(c * d, 0.0);
  std::vector<std::size_t> count(c, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = slot[labels[i]];
    ++count[s];
    for (std::size_t j = 0; j < d; ++j) cent[s * d + j] += static_cast<double>(tokens.at(i, j));
  }
  for (std::size_t s = 0; s < c; ++s)
    for (std::size_t j = 0; j < d; ++j) cent[s * d + j] /= static_cast<double>(count[s]);

  ClusterRatio r;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = slot[labels[i]];
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(tokens.at(i, j)) - cent[s * d + j];
      ss += diff * diff;
    }
    r.intra += std::sqrt(ss);
  }
  r.intra /= static_cast<double>(n);
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = a + 1; b < c; ++b) {
      double ss = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = cent[a * d + j] - cent[b * d + j];
        ss += diff * diff;
      }
      r.inter += std::sqrt(ss);
    }
  r.inter /= static_cast<double>(c * (c - 1) / 2);
  r.ratio = r.inter / std::max(r.intra, eps);
  return r;
}

std::size_t UsageStats::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

UsageStats usage_from_counts(std::vector<std::size_t> counts) {
  UsageStats u;
  u.counts = std::move(counts);
  const std::size_t total = u.total();
  u.fractions.assign(u.counts.size(), 0.0);
  if (total == 0 || u.counts.size() < 2) return u;
  double h = 0.0;
  for (std::size_t e = 0; e < u.counts.size(); ++e) {
    const double f = static_cast<double>(u.counts[e]) / static_cast<double>(total);
    u.fractions[e] = f;
    if (f > 0.0) h -= f * std::log(f);
  }
  u.entropy = std::clamp(h / std::log(static_cast<double>(u.counts.size())), 0.0, 1.0);
  return u;
}

UsageStats usage_stats(const RoutingLog& log) { return usage_stats(std::vector<RoutingLog>{log}); }

UsageStats usage_stats(const std::vector<RoutingLog>& logs) {
  std::vector<std::size_t> counts;
  for (const auto& log : logs) {
    if (counts.size() < log.gating.n_experts) counts.resize(log.gating.n_experts, 0);
    for (std::size_t e : log.gating.indices) ++counts.at(e);
  }
  return usage_from_counts(std::move(counts));
}

void export_assignments(const std::vector<RoutingLog>& logs, std::uint64_t step, const std::string& path,
                        bool append) {
  const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot open assignments file '" + path + "' for writing");
  if (fresh) out << "step,layer,token_id,expert_id,gate\n";
  for (const auto& log : logs) {
    const GatingResult& g = log.gating;
    if (log.token_ids.size() != g.n) throw ContractError("export_assignments: token_ids do not match gating rows");
    for (std::size_t r = 0; r < g.n; ++r)
      for (std::size_t s = 0; s < g.k; ++s) {
        out << step << ',' << log.layer << ',' << log.token_ids[r] << ',' << g.index(r, s) << ',' << g.gate(r, s)
            << '\n';
      }
  }
  if (!out) throw IoError("write failed for assignments file '" + path + "'");
}

template DiversityReport expert_diversity<float>(const ExpertPool<float>&, std::size_t);
template DiversityReport expert_diversity<double>(const ExpertPool<double>&, std::size_t);
template ClusterRatio cluster_ratio<float>(const Array<float>&, const std::vector<int>&, double);
template ClusterRatio cluster_ratio<double>(const Array<double>&, const std::vector<int>&, double);

}  // namespace promoe
