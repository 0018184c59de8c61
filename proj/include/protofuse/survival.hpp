#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "protofuse/numerics.hpp"

namespace protofuse {

/// event == true means the death was observed; false means censored at time.
struct SurvivalRecord {
  std::string patient_id;
  double time = 0.0;
  bool event = false;
};

// ---------------------------------------------------------------------------
// Cox partial likelihood

/// Negative Cox partial log-likelihood with Breslow ties:
///   -Σ_{i: event} ( s_i - log Σ_{j: t_j >= t_i} exp s_j ).
/// Zero when no event is observed.
double cox_loss(std::span<const double> scores, std::span<const SurvivalRecord> records);

/// ∂cox_loss/∂s_i = -δ_i + Σ_{k: event, t_k <= t_i} exp(s_i) / Σ_{j: t_j >= t_k} exp s_j
std::vector<double> cox_gradient(std::span<const double> scores,
                                 std::span<const SurvivalRecord> records);

struct TrainConfig {
  double lr = 1e-2;
  int epochs = 200;
  std::size_t batch = 64;
};

struct TrainTrace {
  /// full-data objective before training and after each epoch
  std::vector<double> loss;
  std::size_t increases = 0;
};

/// Linear risk head, risk = θ · x. No bias: the baseline hazard absorbs it.
struct CoxHead {
  std::vector<double> theta;

  double risk(std::span<const double> x) const { return dot(theta, x); }
  std::vector<double> risks(const Matrix& x) const;
};

/// Mini-batch gradient descent on the per-batch Cox loss divided by the
/// batch's event count. Batches come from a seeded shuffle each epoch.
/// Throws ArgumentError for batch < 2: a single patient has no risk set.
CoxHead fit_cox_head(const Matrix& embeddings, std::span<const SurvivalRecord> records,
                     const TrainConfig& cfg, SeededRng& rng, TrainTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Discrete-time NLL

/// Right-closed intervals (e_{j-1}, e_j] with e_{-1} = -inf.
struct DiscreteBins {
  std::vector<double> edges;

  std::size_t count() const noexcept { return edges.size(); }
  /// Bin of time t. Times past the last edge fall in the last bin and set
  /// *clamped when given.
  std::size_t bin_of(double t, bool* clamped = nullptr) const;
};

/// Quantile edges (inverse empirical CDF at j/n_bins) of the observed-event
/// times; all times are used when no event is observed. Coinciding edges are
/// merged, so fewer than n_bins bins can come back.
DiscreteBins make_quantile_bins(std::span<const SurvivalRecord> records,
                                std::size_t n_bins = 4);

/// Mean over patients of -[c log S_y + (1-c)(log S_{y-1} + log h_y)] with
/// h = sigmoid(logit), S_j = Π_{k<=j}(1-h_k), S_{-1} = 1, c = censored.
double nll_surv_loss(const Matrix& hazard_logits, std::span<const SurvivalRecord> records,
                     const DiscreteBins& bins);

/// Gradient of nll_surv_loss with respect to the logits.
Matrix nll_surv_gradient(const Matrix& hazard_logits,
                         std::span<const SurvivalRecord> records,
                         const DiscreteBins& bins);

/// Linear hazard head: logits = x W + b, one column per bin.
struct NllHead {
  Matrix weight;
  std::vector<double> bias;

  Matrix logits(const Matrix& x) const;
  /// risk = -Σ_j S_j, higher for shorter predicted survival
  std::vector<double> risks(const Matrix& x) const;
};

NllHead fit_nll_head(const Matrix& embeddings, std::span<const SurvivalRecord> records,
                     const DiscreteBins& bins, const TrainConfig& cfg, SeededRng& rng,
                     TrainTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Evaluation

/// Harrell's C: pair (i, j) is comparable when t_j < t_i and j had the event;
/// concordant when s_j > s_i, tied scores count one half. O(n log n).
double concordance_index(std::span<const double> scores,
                         std::span<const SurvivalRecord> records);

struct KmPoint {
  double time = 0.0;
  double survival = 1.0;
  std::size_t at_risk = 0;
  std::size_t events = 0;
};

/// Product-limit estimate: (0, 1) followed by one point per distinct event time.
std::vector<KmPoint> km_curve(std::span<const SurvivalRecord> records);
/// Right-continuous evaluation of a km_curve.
double km_survival_at(std::span<const KmPoint> curve, double t);

struct LogRankResult {
  double chi_sq = 0.0;
  double p = 1.0;
  double observed_a = 0.0;
  double expected_a = 0.0;
  double variance = 0.0;
};

LogRankResult logrank_test(std::span<const SurvivalRecord> group_a,
                           std::span<const SurvivalRecord> group_b);

struct RiskGroups {
  std::vector<std::size_t> high;
  std::vector<std::size_t> low;
  double median = 0.0;
};

/// High risk iff score > median, where median is the lower-middle order
/// statistic (index (n-1)/2 of the sorted scores).
RiskGroups stratify_median(std::span<const double> scores);

/// Regularised upper incomplete gamma Q(a, x): series for x < a + 1,
/// Lentz continued fraction otherwise. Relative accuracy about 1e-14.
double regularized_gamma_q(double a, double x);
/// Upper tail of the chi-square distribution.
double chi_square_sf(double x, double dof);

}  // namespace protofuse
