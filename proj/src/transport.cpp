#include "protofuse/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "protofuse/errors.hpp"

namespace protofuse {

Matrix transport_cost(const Matrix& a, const Matrix& b, CostKind kind) {
  switch (kind) {
    case CostKind::kSqL2:
      return pairwise_sq_l2(a, b);
    case CostKind::kNegDot:
      return scaled(matmul_bt(a, b), -1.0);
  }
  throw ArgumentError("unknown cost kind");
}

double default_epsilon(const Matrix& cost) {
  if (cost.empty()) return 1.0;
  // measured from the smallest entry: adding a constant to the cost leaves
  // the balanced plan unchanged, so it should leave ε unchanged too
  const auto data = cost.data();
  const double lo = *std::min_element(data.begin(), data.end());
  double total = 0.0;
  for (double v : data) total += v - lo;
  const double mean = total / static_cast<double>(cost.size());
  return mean > 0.0 ? 0.1 * mean : 1.0;
}

std::vector<double> uniform_mass(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

namespace {

void validate(const Matrix& cost, std::span<const double> row_mass,
              std::span<const double> col_mass, double epsilon) {
  if (cost.rows() == 0 || cost.cols() == 0) throw ArgumentError("empty cost matrix");
  if (row_mass.size() != cost.rows() || col_mass.size() != cost.cols())
    throw ArgumentError("marginal lengths do not match the cost matrix");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon))
    throw ArgumentError("entropic regularisation epsilon must be positive");
  if (!all_finite(cost)) throw ArgumentError("non-finite transport cost");
  for (double m : row_mass)
    if (!(m > 0.0)) throw ArgumentError("row marginal entries must be positive");
  for (double m : col_mass)
    if (!(m > 0.0)) throw ArgumentError("column marginal entries must be positive");
}

Matrix plan_from_potentials(const Matrix& cost, const std::vector<double>& f,
                            const std::vector<double>& g, double epsilon) {
  Matrix plan(cost.rows(), cost.cols());
  for (std::size_t i = 0; i < cost.rows(); ++i)
    for (std::size_t k = 0; k < cost.cols(); ++k)
      plan(i, k) = std::exp((f[i] + g[k] - cost(i, k)) / epsilon);
  return plan;
}

double marginal_residual(const Matrix& plan, std::span<const double> row_mass,
                         std::span<const double> col_mass,
                         MarginalConstraint constraint) {
  double worst = 0.0;
  if (constraint != MarginalConstraint::kCols) {
    const auto rows = row_sums(plan);
    for (std::size_t i = 0; i < rows.size(); ++i)
      worst = std::max(worst, std::abs(rows[i] - row_mass[i]));
  }
  if (constraint != MarginalConstraint::kRows) {
    const auto cols = column_sums(plan);
    for (std::size_t k = 0; k < cols.size(); ++k)
      worst = std::max(worst, std::abs(cols[k] - col_mass[k]));
  }
  return worst;
}

}  // namespace

TransportPlan sinkhorn_constrained(const Matrix& cost, std::span<const double> row_mass,
                                   std::span<const double> col_mass, double epsilon,
                                   MarginalConstraint constraint, int max_iters,
                                   double tol) {
  validate(cost, row_mass, col_mass, epsilon);
  if (max_iters < 1) throw ArgumentError("max_iters must be positive");
  const std::size_t m = cost.rows();
  const std::size_t k = cost.cols();

  // Dual potentials; the plan is exp((f_i + g_k - C_ik) / ε).
  std::vector<double> f(m, 0.0), g(k, 0.0);
  std::vector<double> buf(std::max(m, k));

  TransportPlan out;
  out.epsilon = epsilon;
  out.residual = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= max_iters; ++it) {
    if (constraint != MarginalConstraint::kRows) {
      for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t i = 0; i < m; ++i) buf[i] = (f[i] - cost(i, c)) / epsilon;
        g[c] = epsilon * (std::log(col_mass[c]) -
                          logsumexp(std::span<const double>(buf.data(), m)));
      }
    }
    if (constraint != MarginalConstraint::kCols) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < k; ++c) buf[c] = (g[c] - cost(i, c)) / epsilon;
        f[i] = epsilon * (std::log(row_mass[i]) -
                          logsumexp(std::span<const double>(buf.data(), k)));
      }
    }
    out.plan = plan_from_potentials(cost, f, g, epsilon);
    out.residual = marginal_residual(out.plan, row_mass, col_mass, constraint);
    out.iterations = it;
    if (out.residual < tol) return out;
  }
  throw ConvergenceError("Sinkhorn did not reach marginal tolerance " +
                             std::to_string(tol) + " in " +
                             std::to_string(max_iters) + " iterations",
                         out.residual);
}

TransportPlan sinkhorn(const Matrix& cost, std::span<const double> row_mass,
                       std::span<const double> col_mass, double epsilon,
                       int max_iters, double tol) {
  return sinkhorn_constrained(cost, row_mass, col_mass, epsilon,
                              MarginalConstraint::kBoth, max_iters, tol);
}

double transport_objective(const Matrix& plan, const Matrix& cost, double epsilon) {
  if (plan.rows() != cost.rows() || plan.cols() != cost.cols())
    throw ArgumentError("transport_objective: shape mismatch");
  CompensatedSum acc;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const double t = plan.data()[i];
    acc.add(cost.data()[i] * t);
    if (t > 0.0) acc.add(epsilon * t * std::log(t));
  }
  return acc.value();
}

}  // namespace protofuse
