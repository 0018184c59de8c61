#include "protofuse/prototype_bank.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <spdlog/spdlog.h>

#include "protofuse/errors.hpp"

namespace protofuse {

namespace {

std::size_t nearest_row(const Matrix& centroids, std::span<const double> z,
                        double* best_dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = squared_distance(z, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (best_dist) *best_dist = best_d;
  return best;
}

}  // namespace

std::size_t nearest_prototype(const PrototypeBank& bank, std::span<const double> z) {
  if (z.size() != bank.dim()) {
    throw ArgumentError("nearest_prototype: vector has dimension " +
                        std::to_string(z.size()) + ", bank has " +
                        std::to_string(bank.dim()));
  }
  if (bank.count() == 0) throw ArgumentError("nearest_prototype: empty bank");
  return nearest_row(bank.centroids, z);
}

double within_cluster_ss(const Matrix& points, const Matrix& centroids) {
  CompensatedSum acc;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    double d = 0.0;
    nearest_row(centroids, points.row(i), &d);
    acc.add(d);
  }
  return acc.value();
}

Matrix kmeanspp_init(const Matrix& points, std::size_t count, SeededRng& rng) {
  const std::size_t n = points.rows();
  Matrix centroids(count, points.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);

  std::size_t pick = rng.below(n);
  for (std::size_t c = 0; c < count; ++c) {
    if (c > 0) {
      double total = 0.0;
      for (double v : d2) total += v;
      if (total > 0.0) {
        double target = rng.uniform() * total;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          target -= d2[i];
          if (target < 0.0) {
            pick = i;
            break;
          }
        }
        // Rounding can land the walk on a zero-weight tail point.
        while (d2[pick] == 0.0 && pick > 0) --pick;
      } else {
        // Every point coincides with a chosen centroid: take the next unused.
        pick = 0;
        while (pick < n && chosen[pick]) ++pick;
        if (pick == n) pick = 0;
      }
    }
    chosen[pick] = true;
    std::copy(points.row(pick).begin(), points.row(pick).end(),
              centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(points.row(i), centroids.row(c)));
  }
  return centroids;
}

PrototypeBank fit_kmeans(const Matrix& points, const KMeansConfig& cfg,
                         SeededRng& rng, KMeansTrace* trace) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  if (cfg.count == 0) throw ArgumentError("k-means: prototype count must be positive");
  if (n < cfg.count) {
    throw ArgumentError("k-means: " + std::to_string(n) + " points cannot form " +
                        std::to_string(cfg.count) + " prototypes");
  }
  if (cfg.max_iters < 1) throw ArgumentError("k-means: max_iters must be positive");
  if (!all_finite(points)) throw ArgumentError("k-means: non-finite input");

  Matrix centroids;
  if (cfg.init == KMeansInit::kProvided) {
    if (!cfg.provided || cfg.provided->rows() != cfg.count ||
        cfg.provided->cols() != dim) {
      throw ArgumentError("k-means: provided centroids have the wrong shape");
    }
    centroids = *cfg.provided;
  } else {
    centroids = kmeanspp_init(points, cfg.count, rng);
  }

  KMeansTrace local;
  KMeansTrace& tr = trace ? *trace : local;
  tr = KMeansTrace{};

  std::vector<std::size_t> assign(n);
  std::vector<double> dist(n);
  auto assign_all = [&] {
    CompensatedSum wcss;
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = nearest_row(centroids, points.row(i), &dist[i]);
      wcss.add(dist[i]);
    }
    return wcss.value();
  };

  tr.wcss.push_back(assign_all());
  for (int it = 1; it <= cfg.max_iters; ++it) {
    // Update step, fixed index order.
    Matrix sums(cfg.count, dim);
    std::vector<std::size_t> counts(cfg.count, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sums.row(assign[i]);
      auto p = points.row(i);
      for (std::size_t j = 0; j < dim; ++j) s[j] += p[j];
      ++counts[assign[i]];
    }
    Matrix next = centroids;
    for (std::size_t c = 0; c < cfg.count; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < dim; ++j)
        next(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }

    // Empty clusters take the point farthest from its current centroid; that
    // point's old cluster keeps its mean and the moved point contributes 0.
    for (std::size_t c = 0; c < cfg.count; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      if (dist[far] == 0.0) continue;
      spdlog::debug("k-means: re-seeding empty cluster {} at point {}", c, far);
      std::copy(points.row(far).begin(), points.row(far).end(), next.row(c).begin());
      dist[far] = 0.0;
    }

    double shift = 0.0;
    for (std::size_t c = 0; c < cfg.count; ++c)
      shift = std::max(shift, std::sqrt(squared_distance(next.row(c), centroids.row(c))));
    centroids = std::move(next);
    tr.wcss.push_back(assign_all());
    tr.iterations = it;
    if (shift < cfg.tol) {
      tr.converged = true;
      break;
    }
  }

  return PrototypeBank{std::move(centroids), rng.seed()};
}

}  // namespace protofuse
