#include "protofuse/slide_aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "protofuse/errors.hpp"

namespace protofuse {

const char* to_string(AggregationBackend b) {
  switch (b) {
    case AggregationBackend::kGmm: return "gmm";
    case AggregationBackend::kOt: return "ot";
    case AggregationBackend::kHc: return "hc";
  }
  return "?";
}

AggregationBackend parse_aggregation_backend(const std::string& s) {
  if (s == "gmm") return AggregationBackend::kGmm;
  if (s == "ot") return AggregationBackend::kOt;
  if (s == "hc") return AggregationBackend::kHc;
  throw ArgumentError("unknown aggregation backend '" + s + "' (gmm|ot|hc)");
}

std::size_t summary_dim(AggregationBackend backend, std::size_t embedding_dim) {
  return backend == AggregationBackend::kGmm ? 2 * embedding_dim + 1 : embedding_dim;
}

namespace {

void check_inputs(const PatchEmbeddingSet& s, const PrototypeBank& bank) {
  if (s.count() == 0) throw ArgumentError("slide '" + s.slide_id + "' has no patches");
  if (bank.count() == 0) throw ArgumentError("prototype bank is empty");
  if (s.dim() != bank.dim()) {
    throw ArgumentError("slide '" + s.slide_id + "' has embedding dimension " +
                        std::to_string(s.dim()) + ", bank has " +
                        std::to_string(bank.dim()));
  }
  if (!all_finite(s.embeddings))
    throw ArgumentError("slide '" + s.slide_id + "' has non-finite embeddings");
}

// log π_c + log N(z; μ_c, diag σ_c) for every (i, c).
Matrix joint_log_density(const Matrix& points, std::span<const double> pi,
                         const Matrix& mu, const Matrix& sigma) {
  const std::size_t n = points.rows();
  const std::size_t k = mu.rows();
  const std::size_t dim = points.cols();
  const double log_2pi = std::log(2.0 * std::numbers::pi);

  std::vector<double> log_norm(k);
  for (std::size_t c = 0; c < k; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dim; ++j) acc += log_2pi + std::log(sigma(c, j));
    log_norm[c] = (pi[c] > 0.0 ? std::log(pi[c])
                               : -std::numeric_limits<double>::infinity()) -
                  0.5 * acc;
  }

  Matrix out(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    auto z = points.row(i);
    for (std::size_t c = 0; c < k; ++c) {
      if (std::isinf(log_norm[c])) {
        out(i, c) = log_norm[c];
        continue;
      }
      auto m = mu.row(c);
      auto v = sigma.row(c);
      double quad = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double d = z[j] - m[j];
        quad += d * d / v[j];
      }
      out(i, c) = log_norm[c] - 0.5 * quad;
    }
  }
  return out;
}

}  // namespace

double gmm_log_likelihood(const Matrix& points, std::span<const double> pi,
                          const Matrix& mu, const Matrix& sigma) {
  const Matrix joint = joint_log_density(points, pi, mu, sigma);
  CompensatedSum acc;
  for (std::size_t i = 0; i < joint.rows(); ++i) acc.add(logsumexp(joint.row(i)));
  return acc.value();
}

Matrix gmm_responsibilities(const Matrix& points, std::span<const double> pi,
                            const Matrix& mu, const Matrix& sigma) {
  Matrix q = joint_log_density(points, pi, mu, sigma);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    auto row = q.row(i);
    const double lse = logsumexp(row);
    for (double& v : row) v = std::exp(v - lse);
  }
  return q;
}

GmmFit fit_gmm(const PatchEmbeddingSet& s, const PrototypeBank& bank,
               const GmmConfig& cfg) {
  check_inputs(s, bank);
  if (cfg.em_iters < 1) throw ArgumentError("GMM: em_iters must be positive");
  if (!(cfg.variance_floor > 0.0)) throw ArgumentError("GMM: variance floor must be positive");
  if (!(cfg.init_sigma > 0.0)) throw ArgumentError("GMM: init_sigma must be positive");

  const Matrix& z = s.embeddings;
  const std::size_t n = s.count();
  const std::size_t k = bank.count();
  const std::size_t dim = s.dim();

  GmmFit fit;
  fit.pi.assign(k, 1.0 / static_cast<double>(k));
  fit.mu = bank.centroids;
  fit.sigma = Matrix(k, dim, cfg.init_sigma);
  fit.log_likelihood.push_back(gmm_log_likelihood(z, fit.pi, fit.mu, fit.sigma));

  for (int it = 0; it < cfg.em_iters; ++it) {
    const Matrix q = gmm_responsibilities(z, fit.pi, fit.mu, fit.sigma);

    // M-step. Reductions run in patch order so results are reproducible.
    std::vector<double> mass(k, 0.0);
    Matrix weighted(k, dim);
    for (std::size_t i = 0; i < n; ++i) {
      auto zi = z.row(i);
      for (std::size_t c = 0; c < k; ++c) {
        const double w = q(i, c);
        mass[c] += w;
        auto acc = weighted.row(c);
        for (std::size_t j = 0; j < dim; ++j) acc[j] += w * zi[j];
      }
    }
    for (std::size_t c = 0; c < k; ++c) {
      fit.pi[c] = mass[c] / static_cast<double>(n);
      // A component whose responsibilities all underflowed keeps its previous
      // mean and variance; its weight is zero so it no longer contributes.
      if (mass[c] <= 0.0) continue;
      for (std::size_t j = 0; j < dim; ++j) fit.mu(c, j) = weighted(c, j) / mass[c];
    }
    Matrix spread(k, dim);
    for (std::size_t i = 0; i < n; ++i) {
      auto zi = z.row(i);
      for (std::size_t c = 0; c < k; ++c) {
        const double w = q(i, c);
        if (w == 0.0) continue;
        auto acc = spread.row(c);
        for (std::size_t j = 0; j < dim; ++j) {
          const double d = zi[j] - fit.mu(c, j);
          acc[j] += w * d * d;
        }
      }
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (mass[c] <= 0.0) continue;
      for (std::size_t j = 0; j < dim; ++j)
        fit.sigma(c, j) = std::max(spread(c, j) / mass[c], cfg.variance_floor);
    }
    fit.log_likelihood.push_back(gmm_log_likelihood(z, fit.pi, fit.mu, fit.sigma));
  }

  fit.posteriors = gmm_responsibilities(z, fit.pi, fit.mu, fit.sigma);
  return fit;
}

SlideSummary aggregate_gmm(const PatchEmbeddingSet& s, const PrototypeBank& bank,
                           const GmmConfig& cfg) {
  GmmFit fit = fit_gmm(s, bank, cfg);
  const std::size_t k = bank.count();
  const std::size_t dim = s.dim();

  SlideSummary out;
  out.backend = AggregationBackend::kGmm;
  out.rows = Matrix(k, 2 * dim + 1);
  for (std::size_t c = 0; c < k; ++c) {
    auto r = out.rows.row(c);
    r[0] = fit.pi[c];
    for (std::size_t j = 0; j < dim; ++j) {
      r[1 + j] = fit.mu(c, j);
      r[1 + dim + j] = fit.sigma(c, j);
    }
  }
  out.pi = std::move(fit.pi);
  out.mu = std::move(fit.mu);
  out.sigma = std::move(fit.sigma);
  return out;
}

Matrix gmm_posteriors(const PatchEmbeddingSet& s, const PrototypeBank& bank,
                      const GmmConfig& cfg) {
  return fit_gmm(s, bank, cfg).posteriors;
}

SlideSummary aggregate_ot(const PatchEmbeddingSet& s, const PrototypeBank& bank,
                          const SinkhornConfig& cfg, bool normalize_columns) {
  check_inputs(s, bank);
  if (cfg.epsilon && !(*cfg.epsilon > 0.0))
    throw ArgumentError("OT aggregation: epsilon must be positive");

  const Matrix cost = transport_cost(s.embeddings, bank.centroids, cfg.cost);
  const auto row_mass = uniform_mass(s.count());
  const auto col_mass = uniform_mass(bank.count());
  TransportPlan tp = sinkhorn(cost, row_mass, col_mass, cfg);

  SlideSummary out;
  out.backend = AggregationBackend::kOt;
  out.rows = matmul_at(tp.plan, s.embeddings);
  if (normalize_columns) out.rows = scaled(out.rows, static_cast<double>(bank.count()));
  out.plan = std::move(tp.plan);
  return out;
}

std::vector<std::size_t> assignment_map(const PatchEmbeddingSet& s,
                                        const PrototypeBank& bank) {
  check_inputs(s, bank);
  std::vector<std::size_t> out(s.count());
  for (std::size_t i = 0; i < s.count(); ++i)
    out[i] = nearest_prototype(bank, s.embeddings.row(i));
  return out;
}

SlideSummary aggregate_hc(const PatchEmbeddingSet& s, const PrototypeBank& bank) {
  const auto assign = assignment_map(s, bank);
  const std::size_t k = bank.count();
  const std::size_t dim = s.dim();

  Matrix sums(k, dim);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < s.count(); ++i) {
    auto acc = sums.row(assign[i]);
    auto zi = s.embeddings.row(i);
    for (std::size_t j = 0; j < dim; ++j) acc[j] += zi[j];
    ++counts[assign[i]];
  }

  SlideSummary out;
  out.backend = AggregationBackend::kHc;
  out.rows = bank.centroids;
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t j = 0; j < dim; ++j)
      out.rows(c, j) = sums(c, j) / static_cast<double>(counts[c]);
  }
  return out;
}

std::vector<std::size_t> top_k_patches(const PatchEmbeddingSet& s,
                                       const SlideSummary& summary, std::size_t c,
                                       std::size_t k) {
  if (summary.backend != AggregationBackend::kGmm)
    throw ArgumentError("top_k_patches needs a GMM summary");
  if (c >= summary.mu.rows())
    throw ArgumentError("top_k_patches: prototype index out of range");
  if (k > s.count()) {
    throw ArgumentError("top_k_patches: k = " + std::to_string(k) + " exceeds " +
                        std::to_string(s.count()) + " patches");
  }
  if (s.dim() != summary.mu.cols())
    throw ArgumentError("top_k_patches: dimension mismatch");

  std::vector<double> dist(s.count());
  for (std::size_t i = 0; i < s.count(); ++i)
    dist[i] = squared_distance(s.embeddings.row(i), summary.mu.row(c));
  std::vector<std::size_t> order(s.count());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                    order.end(), [&](std::size_t a, std::size_t b) {
                      return dist[a] != dist[b] ? dist[a] < dist[b] : a < b;
                    });
  order.resize(k);
  return order;
}

SlideSummary aggregate(const PatchEmbeddingSet& s, const PrototypeBank& bank,
                       const AggregationOptions& opts) {
  switch (opts.backend) {
    case AggregationBackend::kGmm: return aggregate_gmm(s, bank, opts.gmm);
    case AggregationBackend::kOt:
      return aggregate_ot(s, bank, opts.ot, opts.ot_normalize_columns);
    case AggregationBackend::kHc: return aggregate_hc(s, bank);
  }
  throw ArgumentError("unknown aggregation backend");
}

}  // namespace protofuse
