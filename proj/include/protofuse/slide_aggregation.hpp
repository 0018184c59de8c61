#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "protofuse/numerics.hpp"
#include "protofuse/prototype_bank.hpp"
#include "protofuse/transport.hpp"

namespace protofuse {

/// One slide's (or one patient's pooled) patch embeddings, one row per patch.
struct PatchEmbeddingSet {
  std::string slide_id;
  Matrix embeddings;

  std::size_t count() const noexcept { return embeddings.rows(); }
  std::size_t dim() const noexcept { return embeddings.cols(); }
};

enum class AggregationBackend { kGmm, kOt, kHc };

const char* to_string(AggregationBackend b);
AggregationBackend parse_aggregation_backend(const std::string& s);

/// Fixed-length summary of a slide against a prototype bank.
///
/// rows is C_h × d_h. For kGmm each row is [π̂_c, μ̂_c, Σ̂_c] (d_h = 2D+1) and
/// pi/mu/sigma hold the same numbers unpacked. For kOt and kHc d_h = D, and
/// kOt additionally keeps the N_h × C_h transport plan.
struct SlideSummary {
  AggregationBackend backend = AggregationBackend::kGmm;
  Matrix rows;
  std::vector<double> pi;
  Matrix mu;
  Matrix sigma;
  Matrix plan;

  std::size_t count() const noexcept { return rows.rows(); }
  std::size_t dim() const noexcept { return rows.cols(); }
};

struct GmmConfig {
  int em_iters = 1;
  double variance_floor = 1e-6;
  double init_sigma = 1.0;
};

/// Diagonal-covariance mixture state after EM.
struct GmmFit {
  std::vector<double> pi;
  Matrix mu;
  Matrix sigma;
  /// responsibilities under the final parameters (N_h × C_h)
  Matrix posteriors;
  /// Σ_i log p(z_i; θ) at the initial parameters and after each M-step
  std::vector<double> log_likelihood;
};

GmmFit fit_gmm(const PatchEmbeddingSet& s, const PrototypeBank& bank,
               const GmmConfig& cfg);

/// Σ_i log Σ_c π_c N(z_i; μ_c, diag σ_c), compensated summation.
double gmm_log_likelihood(const Matrix& points, std::span<const double> pi,
                          const Matrix& mu, const Matrix& sigma);

/// q(c | z_i) for the given parameters, via logsumexp.
Matrix gmm_responsibilities(const Matrix& points, std::span<const double> pi,
                            const Matrix& mu, const Matrix& sigma);

SlideSummary aggregate_gmm(const PatchEmbeddingSet& s, const PrototypeBank& bank,
                           const GmmConfig& cfg);

Matrix gmm_posteriors(const PatchEmbeddingSet& s, const PrototypeBank& bank,
                      const GmmConfig& cfg);

/// z_c = Σ_i T̂_ic z_i for the balanced plan between uniform measures on the
/// patches and on the prototypes. Each row therefore carries mass 1/C_h;
/// normalize_columns multiplies by C_h to get barycentres instead.
SlideSummary aggregate_ot(const PatchEmbeddingSet& s, const PrototypeBank& bank,
                          const SinkhornConfig& cfg, bool normalize_columns = false);

/// Mean of the patches whose nearest prototype is c; a prototype with no
/// patches contributes its own centroid.
SlideSummary aggregate_hc(const PatchEmbeddingSet& s, const PrototypeBank& bank);

std::vector<std::size_t> assignment_map(const PatchEmbeddingSet& s,
                                        const PrototypeBank& bank);

/// Indices of the k patches closest to μ̂_c, ascending by distance then index.
std::vector<std::size_t> top_k_patches(const PatchEmbeddingSet& s,
                                       const SlideSummary& summary, std::size_t c,
                                       std::size_t k);

struct AggregationOptions {
  AggregationBackend backend = AggregationBackend::kGmm;
  GmmConfig gmm;
  SinkhornConfig ot;
  bool ot_normalize_columns = false;
};

SlideSummary aggregate(const PatchEmbeddingSet& s, const PrototypeBank& bank,
                       const AggregationOptions& opts);

/// Width of a summary row for the backend: 2D+1 for GMM, D otherwise.
std::size_t summary_dim(AggregationBackend backend, std::size_t embedding_dim);

}  // namespace protofuse
