#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "protofuse/numerics.hpp"

namespace protofuse {

/// Cohort-level morphological prototypes: one centroid per row.
struct PrototypeBank {
  Matrix centroids;
  std::uint64_t source_seed = 0;

  std::size_t count() const noexcept { return centroids.rows(); }
  std::size_t dim() const noexcept { return centroids.cols(); }
};

enum class KMeansInit { kKMeansPlusPlus, kProvided };

struct KMeansConfig {
  std::size_t count = 16;
  int max_iters = 100;
  /// stop once the largest centroid move (Euclidean) drops below this
  double tol = 1e-6;
  KMeansInit init = KMeansInit::kKMeansPlusPlus;
  /// starting centroids when init == kProvided
  std::optional<Matrix> provided;
};

struct KMeansTrace {
  /// WCSS of the initial centroids, then after every Lloyd iteration
  std::vector<double> wcss;
  int iterations = 0;
  bool converged = false;
};

/// Lloyd's algorithm with kmeans++ seeding. Clusters that lose all their
/// points are re-seeded at the point currently farthest from its centroid.
PrototypeBank fit_kmeans(const Matrix& points, const KMeansConfig& cfg,
                         SeededRng& rng, KMeansTrace* trace = nullptr);

/// kmeans++ seeding alone (D² sampling).
Matrix kmeanspp_init(const Matrix& points, std::size_t count, SeededRng& rng);

/// argmin_c ||z - a_c||², lowest index on ties.
std::size_t nearest_prototype(const PrototypeBank& bank, std::span<const double> z);

double within_cluster_ss(const Matrix& points, const Matrix& centroids);

}  // namespace protofuse
