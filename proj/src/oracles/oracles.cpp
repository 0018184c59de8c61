#include "protofuse/oracles.hpp"

#include <cmath>
#include <stdexcept>

namespace protofuse::oracle {

PairCounts brute_pair_counts(std::span<const double> scores, std::span<const double> times,
                             std::span<const std::uint8_t> events) {
  if (scores.size() != times.size() || times.size() != events.size())
    throw std::invalid_argument("brute_pair_counts: length mismatch");
  PairCounts pc;
  const std::size_t n = scores.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!(times[j] < times[i]) || !events[j]) continue;
      ++pc.comparable;
      if (scores[j] > scores[i]) {
        pc.concordant2 += 2;
      } else if (scores[j] == scores[i]) {
        pc.concordant2 += 1;
      }
    }
  }
  return pc;
}

double brute_cindex(std::span<const double> scores, std::span<const double> times,
                    std::span<const std::uint8_t> events) {
  const PairCounts pc = brute_pair_counts(scores, times, events);
  if (pc.comparable == 0) throw std::domain_error("no comparable pairs");
  return static_cast<double>(pc.concordant2) / (2.0 * static_cast<double>(pc.comparable));
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

std::vector<double> exact_ot_small(std::span<const double> cost, std::size_t m,
                                   std::size_t k, std::span<const double> row_mass,
                                   std::span<const double> col_mass, double epsilon) {
  if (m * k > 64 || m == 0 || k == 0)
    throw std::invalid_argument("exact_ot_small: size must satisfy 0 < m*k <= 64");
  if (cost.size() != m * k || row_mass.size() != m || col_mass.size() != k)
    throw std::invalid_argument("exact_ot_small: shape mismatch");

  std::vector<double> kernel(m * k);
  for (std::size_t i = 0; i < m * k; ++i) kernel[i] = std::exp(-cost[i] / epsilon);
  std::vector<double> u(m, 1.0), v(k, 1.0), plan(m * k);

  for (int it = 0; it < 200000; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += kernel[i * k + c] * v[c];
      u[i] = row_mass[i] / s;
    }
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += kernel[i * k + c] * u[i];
      v[c] = col_mass[c] / s;
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        plan[i * k + c] = u[i] * kernel[i * k + c] * v[c];
        s += plan[i * k + c];
      }
      worst = std::fmax(worst, std::fabs(s - row_mass[i]));
    }
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += plan[i * k + c];
      worst = std::fmax(worst, std::fabs(s - col_mass[c]));
    }
    if (worst < 1e-14) return plan;
  }
  throw std::runtime_error("exact_ot_small did not converge");
}

double naive_cox_loss(std::span<const double> scores, std::span<const double> times,
                      std::span<const std::uint8_t> events) {
  double loss = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!events[i]) continue;
    double risk = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (times[j] >= times[i]) risk += std::exp(scores[j]);
    loss -= scores[i] - std::log(risk);
  }
  return loss;
}

std::vector<double> naive_softmax(std::span<const double> row) {
  std::vector<double> out(row.size());
  double total = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) total += out[i] = std::exp(row[i]);
  for (double& v : out) v /= total;
  return out;
}

}  // namespace protofuse::oracle
