#pragma once

// Brute-force reference implementations. This header and its library use only
// the standard library so that nothing here can share a code path with the
// implementations it is used to check.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace protofuse::oracle {

/// Twice the concordance weight and the number of comparable pairs, by
/// enumerating every ordered pair.
struct PairCounts {
  std::uint64_t concordant2 = 0;
  std::uint64_t comparable = 0;
};

PairCounts brute_pair_counts(std::span<const double> scores, std::span<const double> times,
                             std::span<const std::uint8_t> events);

/// O(n²) Harrell's C with the same comparability and tie rules as the library.
/// Throws std::domain_error when no pair is comparable.
double brute_cindex(std::span<const double> scores, std::span<const double> times,
                    std::span<const std::uint8_t> events);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h);

/// Dense entropic OT in the primal scaling form u = a / (K v), v = b / (Kᵀ u)
/// with K = exp(-C / ε), run until both marginals are within 1e-14.
/// cost is row-major m × k, m · k <= 64. Throws std::runtime_error if the
/// iteration stalls.
std::vector<double> exact_ot_small(std::span<const double> cost, std::size_t m,
                                   std::size_t k, std::span<const double> row_mass,
                                   std::span<const double> col_mass, double epsilon);

/// Direct O(n²) Cox negative partial log-likelihood with Breslow risk sets,
/// naive exponentials. For small, well-scaled instances only.
double naive_cox_loss(std::span<const double> scores, std::span<const double> times,
                      std::span<const std::uint8_t> events);

/// Reference softmax of one row without any max shift.
std::vector<double> naive_softmax(std::span<const double> row);

}  // namespace protofuse::oracle
