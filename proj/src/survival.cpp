#include "protofuse/survival.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "protofuse/errors.hpp"

namespace protofuse {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(-std::abs(a - b)));
}

void check_lengths(std::span<const double> scores, std::span<const SurvivalRecord> records) {
  if (scores.size() != records.size()) {
    throw ArgumentError("got " + std::to_string(scores.size()) + " scores for " +
                        std::to_string(records.size()) + " survival records");
  }
  if (!all_finite(scores)) throw ArgumentError("risk scores must be finite");
}

std::vector<std::size_t> order_by_time(std::span<const SurvivalRecord> records,
                                       bool descending) {
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? records[a].time > records[b].time
                      : records[a].time < records[b].time;
  });
  return idx;
}

// log Σ_{j: t_j >= t_i} exp s_j for every i.
std::vector<double> log_risk_set_sums(std::span<const double> scores,
                                      std::span<const SurvivalRecord> records) {
  const auto idx = order_by_time(records, /*descending=*/true);
  std::vector<double> out(records.size());
  double acc = kNegInf;
  for (std::size_t g = 0; g < idx.size();) {
    std::size_t end = g;
    while (end < idx.size() && records[idx[end]].time == records[idx[g]].time) {
      acc = log_add(acc, scores[idx[end]]);
      ++end;
    }
    for (std::size_t k = g; k < end; ++k) out[idx[k]] = acc;
    g = end;
  }
  return out;
}

double softplus(double x) {
  if (x == std::numeric_limits<double>::infinity()) return x;
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

double cox_loss(std::span<const double> scores, std::span<const SurvivalRecord> records) {
  check_lengths(scores, records);
  const auto log_risk = log_risk_set_sums(scores, records);
  CompensatedSum acc;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].event) acc.add(log_risk[i] - scores[i]);
  return acc.value();
}

std::vector<double> cox_gradient(std::span<const double> scores,
                                 std::span<const SurvivalRecord> records) {
  check_lengths(scores, records);
  const auto log_risk = log_risk_set_sums(scores, records);
  const auto idx = order_by_time(records, /*descending=*/false);

  // Ascending in time: acc = log Σ_{k: event, t_k <= t_i} 1 / R_k.
  std::vector<double> grad(records.size(), 0.0);
  double acc = kNegInf;
  for (std::size_t g = 0; g < idx.size();) {
    std::size_t end = g;
    while (end < idx.size() && records[idx[end]].time == records[idx[g]].time) {
      if (records[idx[end]].event) acc = log_add(acc, -log_risk[idx[end]]);
      ++end;
    }
    for (std::size_t k = g; k < end; ++k) {
      const std::size_t i = idx[k];
      grad[i] = (acc == kNegInf ? 0.0 : std::exp(scores[i] + acc)) -
                (records[i].event ? 1.0 : 0.0);
    }
    g = end;
  }
  return grad;
}

std::vector<double> CoxHead::risks(const Matrix& x) const {
  std::vector<double> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = risk(x.row(r));
  return out;
}

namespace {

std::size_t count_events(std::span<const SurvivalRecord> records) {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(), [](const SurvivalRecord& r) { return r.event; }));
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch,
                                                       std::size_t min_size,
                                                       SeededRng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    if (end - start < min_size) continue;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

void check_training_inputs(const Matrix& x, std::span<const SurvivalRecord> records,
                           const TrainConfig& cfg) {
  if (x.rows() != records.size())
    throw ArgumentError("embedding rows and survival records differ in count");
  if (x.rows() == 0) throw ArgumentError("no training patients");
  if (cfg.epochs < 0) throw ArgumentError("epochs must be non-negative");
  if (!(cfg.lr >= 0.0)) throw ArgumentError("learning rate must be non-negative");
  if (!all_finite(x)) throw ArgumentError("non-finite embeddings");
}

void report_increases(const TrainTrace& tr, const char* what) {
  if (tr.increases > 0) {
    spdlog::warn("{} training loss rose in {} of {} epochs; consider a smaller learning rate",
                 what, tr.increases, tr.loss.size() - 1);
  }
}

void record_epoch(TrainTrace& tr, double loss, const char* what, int epoch) {
  if (!tr.loss.empty() && loss > tr.loss.back() + 1e-12) {
    ++tr.increases;
    spdlog::debug("{} training loss rose at epoch {} ({:.6g} -> {:.6g})", what, epoch,
                  tr.loss.back(), loss);
  }
  tr.loss.push_back(loss);
}

}  // namespace

CoxHead fit_cox_head(const Matrix& embeddings, std::span<const SurvivalRecord> records,
                     const TrainConfig& cfg, SeededRng& rng, TrainTrace* trace) {
  if (cfg.batch < 2) {
    throw ArgumentError("Cox training needs batch size >= 2 (got " +
                        std::to_string(cfg.batch) + "); a single patient has no risk set");
  }
  check_training_inputs(embeddings, records, cfg);
  const std::size_t p = embeddings.cols();
  CoxHead head{std::vector<double>(p, 0.0)};

  const std::size_t total_events = count_events(records);
  auto full_loss = [&] {
    return total_events ? cox_loss(head.risks(embeddings), records) /
                              static_cast<double>(total_events)
                        : 0.0;
  };

  TrainTrace local;
  TrainTrace& tr = trace ? *trace : local;
  tr = TrainTrace{};
  tr.loss.push_back(full_loss());

  std::vector<SurvivalRecord> batch_records;
  std::vector<double> batch_scores;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (const auto& batch : shuffled_batches(records.size(), cfg.batch, 2, rng)) {
      batch_records.clear();
      batch_scores.clear();
      for (std::size_t i : batch) {
        batch_records.push_back(records[i]);
        batch_scores.push_back(head.risk(embeddings.row(i)));
      }
      const std::size_t events = count_events(batch_records);
      if (events == 0) continue;
      const auto g = cox_gradient(batch_scores, batch_records);
      std::vector<double> step(p, 0.0);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        auto x = embeddings.row(batch[b]);
        for (std::size_t j = 0; j < p; ++j) step[j] += g[b] * x[j];
      }
      const double scale = cfg.lr / static_cast<double>(events);
      for (std::size_t j = 0; j < p; ++j) head.theta[j] -= scale * step[j];
    }
    record_epoch(tr, full_loss(), "Cox", epoch);
  }
  report_increases(tr, "Cox");
  return head;
}

// ---------------------------------------------------------------------------

std::size_t DiscreteBins::bin_of(double t, bool* clamped) const {
  if (edges.empty()) throw ArgumentError("empty bin definition");
  auto it = std::lower_bound(edges.begin(), edges.end(), t);
  if (clamped) *clamped = it == edges.end();
  if (it == edges.end()) return edges.size() - 1;
  return static_cast<std::size_t>(it - edges.begin());
}

DiscreteBins make_quantile_bins(std::span<const SurvivalRecord> records,
                                std::size_t n_bins) {
  if (n_bins == 0) throw ArgumentError("need at least one time bin");
  std::vector<double> times;
  for (const auto& r : records)
    if (r.event) times.push_back(r.time);
  if (times.empty())
    for (const auto& r : records) times.push_back(r.time);
  if (times.empty()) throw ArgumentError("cannot build time bins without records");
  std::sort(times.begin(), times.end());

  DiscreteBins bins;
  const double n = static_cast<double>(times.size());
  for (std::size_t j = 1; j <= n_bins; ++j) {
    // smallest x with F(x) >= j / n_bins
    const double p = static_cast<double>(j) / static_cast<double>(n_bins);
    auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, times.size());
    const double edge = times[rank - 1];
    if (bins.edges.empty() || edge > bins.edges.back()) bins.edges.push_back(edge);
  }
  return bins;
}

namespace {

void check_nll_inputs(const Matrix& logits, std::span<const SurvivalRecord> records,
                      const DiscreteBins& bins) {
  if (logits.rows() != records.size())
    throw ArgumentError("hazard logits and survival records differ in count");
  if (logits.cols() != bins.count()) {
    throw ArgumentError("hazard logits have " + std::to_string(logits.cols()) +
                        " columns for " + std::to_string(bins.count()) + " bins");
  }
  if (records.empty()) throw ArgumentError("NLL loss of an empty cohort");
}

double nll_loss_impl(const Matrix& hazard_logits, std::span<const SurvivalRecord> records,
                     const DiscreteBins& bins, bool warn) {
  check_nll_inputs(hazard_logits, records, bins);
  CompensatedSum acc;
  std::size_t clamped_count = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    bool clamped = false;
    const std::size_t y = bins.bin_of(records[i].time, &clamped);
    clamped_count += clamped ? 1 : 0;
    auto l = hazard_logits.row(i);
    // -log(1 - h_k) = softplus(l_k); -log h_y = softplus(-l_y)
    for (std::size_t k = 0; k < y; ++k) acc.add(softplus(l[k]));
    acc.add(records[i].event ? softplus(-l[y]) : softplus(l[y]));
  }
  if (warn && clamped_count > 0) {
    spdlog::warn("{} patient(s) have times past the last bin edge {}; using the last bin",
                 clamped_count, bins.edges.back());
  }
  return acc.value() / static_cast<double>(records.size());
}

}  // namespace

double nll_surv_loss(const Matrix& hazard_logits, std::span<const SurvivalRecord> records,
                     const DiscreteBins& bins) {
  return nll_loss_impl(hazard_logits, records, bins, true);
}

Matrix nll_surv_gradient(const Matrix& hazard_logits,
                         std::span<const SurvivalRecord> records,
                         const DiscreteBins& bins) {
  check_nll_inputs(hazard_logits, records, bins);
  Matrix grad(hazard_logits.rows(), hazard_logits.cols());
  const double inv_n = 1.0 / static_cast<double>(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::size_t y = bins.bin_of(records[i].time);
    auto l = hazard_logits.row(i);
    for (std::size_t k = 0; k < y; ++k) grad(i, k) = sigmoid(l[k]) * inv_n;
    grad(i, y) = (records[i].event ? -sigmoid(-l[y]) : sigmoid(l[y])) * inv_n;
  }
  return grad;
}

Matrix NllHead::logits(const Matrix& x) const {
  Matrix out = matmul(x, weight);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bias[c];
  return out;
}

std::vector<double> NllHead::risks(const Matrix& x) const {
  const Matrix l = logits(x);
  std::vector<double> out(l.rows());
  for (std::size_t r = 0; r < l.rows(); ++r) {
    double log_surv = 0.0;
    double total = 0.0;
    for (double v : l.row(r)) {
      log_surv -= softplus(v);
      total += std::exp(log_surv);
    }
    out[r] = -total;
  }
  return out;
}

NllHead fit_nll_head(const Matrix& embeddings, std::span<const SurvivalRecord> records,
                     const DiscreteBins& bins, const TrainConfig& cfg, SeededRng& rng,
                     TrainTrace* trace) {
  if (cfg.batch < 1) throw ArgumentError("NLL training needs batch size >= 1");
  check_training_inputs(embeddings, records, cfg);
  const std::size_t p = embeddings.cols();
  const std::size_t nb = bins.count();
  NllHead head{Matrix(p, nb), std::vector<double>(nb, 0.0)};

  TrainTrace local;
  TrainTrace& tr = trace ? *trace : local;
  tr = TrainTrace{};
  tr.loss.push_back(nll_loss_impl(head.logits(embeddings), records, bins, true));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (const auto& batch : shuffled_batches(records.size(), cfg.batch, 1, rng)) {
      Matrix x(batch.size(), p);
      std::vector<SurvivalRecord> r;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        std::copy(embeddings.row(batch[b]).begin(), embeddings.row(batch[b]).end(),
                  x.row(b).begin());
        r.push_back(records[batch[b]]);
      }
      const Matrix g = nll_surv_gradient(head.logits(x), r, bins);
      const Matrix gw = matmul_at(x, g);
      const auto gb = column_sums(g);
      for (std::size_t i = 0; i < head.weight.size(); ++i)
        head.weight.data()[i] -= cfg.lr * gw.data()[i];
      for (std::size_t j = 0; j < nb; ++j) head.bias[j] -= cfg.lr * gb[j];
    }
    record_epoch(tr, nll_loss_impl(head.logits(embeddings), records, bins, false), "NLL", epoch);
  }
  report_increases(tr, "NLL");
  return head;
}

// ---------------------------------------------------------------------------

double concordance_index(std::span<const double> scores,
                         std::span<const SurvivalRecord> records) {
  check_lengths(scores, records);
  const std::size_t n = records.size();
  if (n < 2) throw UndefinedMetricError("C-index needs at least two patients");

  // Fenwick tree over score ranks, filled with patients of strictly larger
  // time before each tied-time group is queried.
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  auto rank_of = [&](double s) {
    return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), s) -
                                    sorted.begin()) + 1;
  };
  std::vector<std::uint64_t> tree(sorted.size() + 1, 0);
  auto add = [&](std::size_t r) {
    for (; r < tree.size(); r += r & (~r + 1)) ++tree[r];
  };
  auto prefix = [&](std::size_t r) {
    std::uint64_t s = 0;
    for (; r > 0; r -= r & (~r + 1)) s += tree[r];
    return s;
  };

  const auto idx = order_by_time(records, /*descending=*/true);
  std::uint64_t comparable = 0;
  std::uint64_t concordant2 = 0;  // twice the concordance weight
  std::uint64_t inserted = 0;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    while (end < n && records[idx[end]].time == records[idx[g]].time) ++end;
    for (std::size_t k = g; k < end; ++k) {
      const std::size_t j = idx[k];
      if (!records[j].event) continue;
      const std::size_t r = rank_of(scores[j]);
      const std::uint64_t below = prefix(r - 1);
      const std::uint64_t equal = prefix(r) - below;
      comparable += inserted;
      concordant2 += 2 * below + equal;
    }
    for (std::size_t k = g; k < end; ++k) add(rank_of(scores[idx[k]]));
    inserted += end - g;
    g = end;
  }
  if (comparable == 0) throw UndefinedMetricError("C-index: no comparable pairs");
  return static_cast<double>(concordant2) / (2.0 * static_cast<double>(comparable));
}

std::vector<KmPoint> km_curve(std::span<const SurvivalRecord> records) {
  if (records.empty()) throw ArgumentError("Kaplan-Meier curve of an empty group");
  std::map<double, std::pair<std::size_t, std::size_t>> by_time;  // events, removed
  for (const auto& r : records) {
    auto& slot = by_time[r.time];
    if (r.event) ++slot.first;
    ++slot.second;
  }
  std::vector<KmPoint> curve{{0.0, 1.0, records.size(), 0}};
  std::size_t at_risk = records.size();
  double surv = 1.0;
  for (const auto& [t, counts] : by_time) {
    const auto [events, removed] = counts;
    if (events > 0) {
      surv *= 1.0 - static_cast<double>(events) / static_cast<double>(at_risk);
      curve.push_back({t, surv, at_risk, events});
    }
    at_risk -= removed;
  }
  return curve;
}

double km_survival_at(std::span<const KmPoint> curve, double t) {
  double s = 1.0;
  for (const auto& p : curve) {
    if (p.time > t) break;
    s = p.survival;
  }
  return s;
}

LogRankResult logrank_test(std::span<const SurvivalRecord> group_a,
                           std::span<const SurvivalRecord> group_b) {
  if (group_a.empty() || group_b.empty())
    throw ArgumentError("log-rank test needs two non-empty groups");

  struct Tally {
    std::size_t events_a = 0, events_b = 0, removed_a = 0, removed_b = 0;
  };
  std::map<double, Tally> by_time;
  for (const auto& r : group_a) {
    auto& t = by_time[r.time];
    t.events_a += r.event;
    ++t.removed_a;
  }
  for (const auto& r : group_b) {
    auto& t = by_time[r.time];
    t.events_b += r.event;
    ++t.removed_b;
  }

  double at_risk_a = static_cast<double>(group_a.size());
  double at_risk_b = static_cast<double>(group_b.size());
  LogRankResult res;
  std::size_t total_events = 0;
  for (const auto& [time, t] : by_time) {
    const double d = static_cast<double>(t.events_a + t.events_b);
    const double n = at_risk_a + at_risk_b;
    if (d > 0.0) {
      total_events += t.events_a + t.events_b;
      const double frac = at_risk_a / n;
      res.observed_a += static_cast<double>(t.events_a);
      res.expected_a += d * frac;
      if (n > 1.0) res.variance += d * frac * (1.0 - frac) * (n - d) / (n - 1.0);
    }
    at_risk_a -= static_cast<double>(t.removed_a);
    at_risk_b -= static_cast<double>(t.removed_b);
  }
  if (total_events == 0) throw UndefinedMetricError("log-rank test: no events observed");
  const double diff = res.observed_a - res.expected_a;
  res.chi_sq = res.variance > 0.0 ? diff * diff / res.variance : 0.0;
  res.p = chi_square_sf(res.chi_sq, 1.0);
  return res;
}

RiskGroups stratify_median(std::span<const double> scores) {
  if (scores.size() < 2) throw ArgumentError("median split needs at least two patients");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  RiskGroups g;
  g.median = sorted[(sorted.size() - 1) / 2];
  for (std::size_t i = 0; i < scores.size(); ++i)
    (scores[i] > g.median ? g.high : g.low).push_back(i);
  if (g.high.empty() || g.low.empty())
    throw DataError("median split is degenerate: risk scores do not vary");
  return g;
}

double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0 || std::isnan(x))
    throw ArgumentError("regularized_gamma_q: need a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  const double log_prefix = a * std::log(x) - x - std::lgamma(a);
  constexpr double kEps = 1e-16;
  constexpr int kMaxIter = 10000;
  if (x < a + 1.0) {
    // P(a, x) = e^{-x} x^a / Γ(a+1) Σ x^n / ((a+1)...(a+n))
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < kMaxIter; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * kEps) break;
    }
    return 1.0 - sum * std::exp(log_prefix);
  }
  // Modified Lentz for the continued fraction of Q(a, x).
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::exp(log_prefix) * h;
}

double chi_square_sf(double x, double dof) {
  if (!(dof > 0.0)) throw ArgumentError("chi-square needs positive degrees of freedom");
  if (x <= 0.0) return 1.0;
  return regularized_gamma_q(0.5 * dof, 0.5 * x);
}

}  // namespace protofuse
