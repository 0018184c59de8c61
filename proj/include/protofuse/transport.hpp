#pragma once

#include <optional>
#include <span>
#include <vector>

#include "protofuse/numerics.hpp"

namespace protofuse {

enum class CostKind { kSqL2, kNegDot };

/// Entropic OT solver settings. When epsilon is unset the solver uses
/// 0.1 × mean (cost - min cost), 1.0 for a constant cost.
struct SinkhornConfig {
  std::optional<double> epsilon;
  int max_iters = 1000;
  double marginal_tol = 1e-6;
  CostKind cost = CostKind::kSqL2;
};

struct TransportPlan {
  Matrix plan;
  double epsilon = 0.0;
  /// max |marginal - target| over both marginals (constrained sides only)
  double residual = 0.0;
  int iterations = 0;
};

/// cost(i, k) between rows of a and rows of b.
Matrix transport_cost(const Matrix& a, const Matrix& b, CostKind kind);

double default_epsilon(const Matrix& cost);

/// Balanced entropic OT, min <C, T> + ε Σ T log T with T 1 = a and Tᵀ 1 = b,
/// by log-domain Sinkhorn. Throws ConvergenceError when the residual is still
/// above tol after max_iters.
TransportPlan sinkhorn(const Matrix& cost, std::span<const double> row_mass,
                       std::span<const double> col_mass, double epsilon,
                       int max_iters, double tol);

inline TransportPlan sinkhorn(const Matrix& cost, std::span<const double> row_mass,
                              std::span<const double> col_mass,
                              const SinkhornConfig& cfg) {
  return sinkhorn(cost, row_mass, col_mass,
                  cfg.epsilon ? *cfg.epsilon : default_epsilon(cost),
                  cfg.max_iters, cfg.marginal_tol);
}

/// Which marginal constraints the entropic problem enforces. kRows drops the
/// column constraint entirely (the semi-relaxed / unbalanced limit where the
/// column KL penalty goes to zero and the row penalty to infinity).
enum class MarginalConstraint { kBoth, kRows, kCols };

/// Entropic OT with a chosen subset of marginal constraints, by log-domain
/// scaling. With kBoth this is the balanced solver above. The residual is the
/// marginal error on the constrained sides only.
TransportPlan sinkhorn_constrained(const Matrix& cost, std::span<const double> row_mass,
                                   std::span<const double> col_mass, double epsilon,
                                   MarginalConstraint constraint, int max_iters,
                                   double tol);

/// <C, T> + ε Σ T log T
double transport_objective(const Matrix& plan, const Matrix& cost, double epsilon);

std::vector<double> uniform_mass(std::size_t n);

}  // namespace protofuse
