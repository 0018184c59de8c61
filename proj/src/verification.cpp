#include "protofuse/verification.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

#include "protofuse/errors.hpp"
#include "protofuse/fusion.hpp"
#include "protofuse/numerics.hpp"
#include "protofuse/oracles.hpp"
#include "protofuse/slide_aggregation.hpp"
#include "protofuse/survival.hpp"
#include "protofuse/transport.hpp"

namespace protofuse {

Sabotage parse_sabotage(const std::string& s) {
  if (s.empty() || s == "none") return Sabotage::kNone;
  if (s == "cox-grad") return Sabotage::kCoxGradient;
  throw ArgumentError("unknown sabotage mode '" + s + "' (cox-grad)");
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Matrix random_matrix(std::size_t r, std::size_t c, double sd, SeededRng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = sd * rng.normal();
  return m;
}

std::size_t pick(SeededRng& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.below(hi - lo + 1);
}

double marginal_error(const Matrix& plan, std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  const auto rows = row_sums(plan);
  const auto cols = column_sums(plan);
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(rows[i] - a[i]));
  for (std::size_t j = 0; j < b.size(); ++j) worst = std::max(worst, std::fabs(cols[j] - b[j]));
  return worst;
}

}  // namespace

CheckResult check_equivalence_sweep(const VerifyOptions& opt) {
  const auto t0 = Clock::now();
  CheckResult r{"ot_equals_cross_attention", true, 0.0, 1e-8, opt.equivalence_instances, 0, ""};
  SeededRng rng(mix_seed(opt.seed, 101));
  double worst_residual = 0.0;
  for (std::size_t k = 0; k < opt.equivalence_instances; ++k) {
    const std::size_t cg = pick(rng, 1, 8), ch = pick(rng, 1, 8), d = pick(rng, 1, 8);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const Matrix zg = random_matrix(cg, d, 1.0, rng);
    const Matrix zh = random_matrix(ch, d, 1.0, rng);
    const Matrix wq = random_matrix(d, d, sd, rng);
    const Matrix wk = random_matrix(d, d, sd, rng);
    const EquivalenceReport rep = check_ot_attention_equivalence(zg, zh, wq, wk, r.threshold, 1e-12);
    r.max_deviation = std::max(r.max_deviation, rep.max_abs_dev);
    worst_residual = std::max(worst_residual, rep.solver_residual);
    r.pass = r.pass && rep.pass && rep.solver_residual <= 1e-12;
  }
  r.detail = fmt::format("worst solver residual {:.3g}", worst_residual);
  r.seconds = since(t0);
  return r;
}

CheckResult check_em_monotonicity(const VerifyOptions& opt) {
  const auto t0 = Clock::now();
  CheckResult r{"em_log_likelihood_monotone", true, 0.0, 1e-9, opt.em_instances, 0, ""};
  SeededRng rng(mix_seed(opt.seed, 102));
  const std::size_t dims[] = {2, 16, 64};
  const std::size_t comps[] = {2, 8, 16};
  std::size_t worst_instance = 0;
  for (std::size_t k = 0; k < opt.em_instances; ++k) {
    const std::size_t n = pick(rng, 50, 2000);
    const std::size_t d = dims[rng.below(3)];
    const std::size_t c = comps[rng.below(3)];
    // patches from a handful of well-spread blobs, bank from random patches
    const std::size_t blobs = pick(rng, 1, 6);
    const Matrix centres = random_matrix(blobs, d, 3.0, rng);
    PatchEmbeddingSet s{"em", Matrix(n, d)};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t b = rng.below(blobs);
      const double spread = 0.3 + rng.uniform();
      for (std::size_t j = 0; j < d; ++j) s.embeddings(i, j) = centres(b, j) + spread * rng.normal();
    }
    PrototypeBank bank{Matrix(c, d), 0};
    for (std::size_t p = 0; p < c; ++p) {
      auto src = s.embeddings.row(rng.below(n));
      std::copy(src.begin(), src.end(), bank.centroids.row(p).begin());
    }
    GmmConfig cfg;
    cfg.em_iters = 5;
    const GmmFit fit = fit_gmm(s, bank, cfg);
    for (std::size_t t = 1; t < fit.log_likelihood.size(); ++t) {
      const double drop = fit.log_likelihood[t - 1] - fit.log_likelihood[t];
      if (drop > r.max_deviation) {
        r.max_deviation = drop;
        worst_instance = k;
      }
    }
    if (fit.log_likelihood.size() != 6) r.pass = false;
  }
  r.pass = r.pass && r.max_deviation <= r.threshold;
  r.detail = fmt::format("largest decrease at instance {}", worst_instance);
  r.seconds = since(t0);
  return r;
}

CheckResult check_sinkhorn_marginals(const VerifyOptions& opt) {
  const auto t0 = Clock::now();
  CheckResult r{"sinkhorn_marginals", true, 0.0, 1e-6, 0, 0, ""};
  SeededRng rng(mix_seed(opt.seed, 103));
  double ref_dev = 0.0;
  for (std::size_t k = 0; k < opt.sinkhorn_instances; ++k) {
    // aggregation plan: patches against prototypes
    {
      const std::size_t n = pick(rng, 5, 400), c = pick(rng, 2, 16), d = pick(rng, 2, 32);
      PatchEmbeddingSet s{"ot", random_matrix(n, d, 1.0, rng)};
      PrototypeBank bank{random_matrix(c, d, 1.0, rng), 0};
      const SlideSummary sum = aggregate_ot(s, bank, SinkhornConfig{});
      r.max_deviation = std::max(r.max_deviation,
                                 marginal_error(sum.plan, uniform_mass(n), uniform_mass(c)));
      ++r.instances;
    }
    // fusion plan: pathway tokens against histology tokens
    {
      const std::size_t cg = pick(rng, 1, 50), ch = pick(rng, 1, 16), d = pick(rng, 2, 64);
      const double sd = 1.0 / std::sqrt(static_cast<double>(d));
      AttentionWeights w{random_matrix(d, d, sd, rng), random_matrix(d, d, sd, rng),
                         random_matrix(d, d, sd, rng)};
      SinkhornConfig cfg;
      cfg.cost = CostKind::kNegDot;
      const FusedTokens ft =
          fuse_ot(random_matrix(cg, d, 1.0, rng), random_matrix(ch, d, 1.0, rng), w, cfg);
      r.max_deviation = std::max(r.max_deviation,
                                 marginal_error(ft.plan, uniform_mass(cg), uniform_mass(ch)));
      ++r.instances;
    }
    // dense reference on a small problem
    {
      std::size_t m = pick(rng, 1, 8), c = pick(rng, 1, 8);
      while (m * c > 64) c = pick(rng, 1, 8);
      Matrix cost(m, c);
      for (double& v : cost.data()) v = rng.uniform(0.0, 2.0);
      const double eps = rng.uniform(0.1, 1.0);
      std::vector<double> a(m), b(c);
      for (double& v : a) v = rng.uniform(0.5, 1.5);
      for (double& v : b) v = rng.uniform(0.5, 1.5);
      const double sa = std::accumulate(a.begin(), a.end(), 0.0);
      const double sb = std::accumulate(b.begin(), b.end(), 0.0);
      for (double& v : a) v /= sa;
      for (double& v : b) v /= sb;
      const TransportPlan tp = sinkhorn(cost, a, b, eps, 100000, 1e-14);
      const auto ref = oracle::exact_ot_small(cost.data(), m, c, a, b, eps);
      ref_dev = std::max(ref_dev, max_abs_diff(tp.plan, Matrix(m, c, ref)));
      r.max_deviation = std::max(r.max_deviation, tp.residual);
      ++r.instances;
    }
  }
  r.pass = r.max_deviation <= r.threshold && ref_dev <= 1e-10;
  r.detail = fmt::format("max marginal error {:.3g}; reference solver agreement {:.3g} (limit 1e-10)",
                         r.max_deviation, ref_dev);
  r.seconds = since(t0);
  return r;
}

CheckResult check_cox_gradient(const VerifyOptions& opt) {
  const auto t0 = Clock::now();
  CheckResult r{"cox_gradient_vs_finite_differences", true, 0.0, 1e-5, opt.cox_instances, 0, ""};
  SeededRng rng(mix_seed(opt.seed, 104));
  for (std::size_t k = 0; k < opt.cox_instances; ++k) {
    const std::size_t n = pick(rng, 2, 40);
    const double censoring = rng.uniform(0.0, 0.6);
    // few distinct times so ties are common
    const std::size_t distinct = pick(rng, 1, std::max<std::size_t>(1, n / 2));
    std::vector<SurvivalRecord> recs(n);
    std::vector<double> scores(n), times(n);
    std::vector<std::uint8_t> events(n);
    for (std::size_t i = 0; i < n; ++i) {
      recs[i].patient_id = std::to_string(i);
      recs[i].time = static_cast<double>(1 + rng.below(distinct));
      recs[i].event = rng.uniform() >= censoring;
      scores[i] = rng.normal();
    }
    recs[rng.below(n)].event = true;
    for (std::size_t i = 0; i < n; ++i) {
      times[i] = recs[i].time;
      events[i] = recs[i].event ? 1 : 0;
    }
    std::vector<double> analytic = cox_gradient(scores, recs);
    if (opt.sabotage == Sabotage::kCoxGradient)
      for (double& g : analytic) g = -g;
    const auto numeric = oracle::finite_diff_grad(
        [&](std::span<const double> s) { return oracle::naive_cox_loss(s, times, events); },
        scores, 1e-6);
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      err = std::max(err, std::fabs(analytic[i] - numeric[i]));
      scale = std::max(scale, std::fabs(numeric[i]));
    }
    // normwise: ||g - g_fd||_inf / ||g_fd||_inf
    r.max_deviation = std::max(r.max_deviation, err / std::max(scale, 1e-12));
  }
  r.pass = r.max_deviation < r.threshold;
  if (opt.sabotage == Sabotage::kCoxGradient) r.detail = "sabotaged: analytic gradient sign flipped";
  r.seconds = since(t0);
  return r;
}

CheckResult check_cindex_oracle(const VerifyOptions& opt) {
  const auto t0 = Clock::now();
  CheckResult r{"cindex_equals_brute_force", true, 0.0, 0.0, opt.cindex_instances, 0, ""};
  SeededRng rng(mix_seed(opt.seed, 105));
  std::size_t mismatches = 0, undefined = 0;
  for (std::size_t k = 0; k < opt.cindex_instances; ++k) {
    const std::size_t n = pick(rng, 1, 60);
    const std::size_t score_levels = pick(rng, 1, 10), time_levels = pick(rng, 1, 20);
    std::vector<SurvivalRecord> recs(n);
    std::vector<double> scores(n), times(n);
    std::vector<std::uint8_t> events(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = rng.uniform() < 0.5 ? static_cast<double>(rng.below(score_levels)) : rng.normal();
      times[i] = static_cast<double>(rng.below(time_levels));
      events[i] = rng.uniform() < 0.6 ? 1 : 0;
      recs[i] = {std::to_string(i), times[i], events[i] != 0};
    }
    bool lib_undefined = false, ref_undefined = false;
    double lib = 0.0, ref = 0.0;
    try {
      lib = concordance_index(scores, recs);
    } catch (const UndefinedMetricError&) {
      lib_undefined = true;
    }
    try {
      ref = oracle::brute_cindex(scores, times, events);
    } catch (const std::domain_error&) {
      ref_undefined = true;
    }
    if (lib_undefined || ref_undefined) {
      ++undefined;
      if (lib_undefined != ref_undefined) ++mismatches;
      continue;
    }
    if (lib != ref) {
      ++mismatches;
      r.max_deviation = std::max(r.max_deviation, std::fabs(lib - ref));
    }
  }
  r.pass = mismatches == 0;
  r.detail = fmt::format("{} mismatches, {} instances without comparable pairs", mismatches, undefined);
  r.seconds = since(t0);
  return r;
}

std::vector<CheckResult> run_verification(const VerifyOptions& opt) {
  return {check_equivalence_sweep(opt), check_em_monotonicity(opt), check_sinkhorn_marginals(opt),
          check_cox_gradient(opt), check_cindex_oracle(opt)};
}

std::string format_check(const CheckResult& r) {
  std::string s = fmt::format("{} {:<38} max_dev={:.3e} threshold={:.1e} ({} instances, {:.2f}s)",
                              r.pass ? "PASS" : "FAIL", r.name, r.max_deviation, r.threshold,
                              r.instances, r.seconds);
  if (!r.detail.empty()) s += "  " + r.detail;
  return s;
}

}  // namespace protofuse
