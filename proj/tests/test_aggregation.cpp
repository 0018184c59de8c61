#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "protofuse/errors.hpp"
#include "protofuse/prototype_bank.hpp"
#include "protofuse/slide_aggregation.hpp"

using namespace protofuse;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, SeededRng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal(0.0, scale);
  return m;
}

PrototypeBank bank_of(Matrix m) { return PrototypeBank{std::move(m), 0}; }

PatchEmbeddingSet slide_of(Matrix m) { return PatchEmbeddingSet{"S", std::move(m)}; }

bool same_rows_any_order(const Matrix& a, const Matrix& b, double tol) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  std::vector<bool> used(b.rows(), false);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    bool found = false;
    for (std::size_t j = 0; j < b.rows() && !found; ++j) {
      if (used[j]) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) d = std::max(d, std::fabs(a(i, k) - b(j, k)));
      if (d <= tol) used[j] = found = true;
    }
    if (!found) return false;
  }
  return true;
}

std::size_t brute_nearest(const Matrix& centroids, std::span<const double> z) {
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    double d = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) d += (z[k] - centroids(c, k)) * (z[k] - centroids(c, k));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy(m.row(perm[i]).begin(), m.row(perm[i]).end(), out.row(i).begin());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// prototype bank

TEST_CASE("kmeans finds the two obvious clusters") {
  const Matrix pts{{0, 0}, {0, 0.1}, {10, 10}, {10, 10.1}};
  KMeansConfig cfg;
  cfg.count = 2;
  SeededRng rng(1);
  const PrototypeBank bank = fit_kmeans(pts, cfg, rng);
  CHECK(same_rows_any_order(bank.centroids, Matrix{{0, 0.05}, {10, 10.05}}, 1e-12));
}

TEST_CASE("kmeans degenerate counts") {
  SeededRng rng(9);
  const Matrix pts = random_matrix(30, 4, rng);
  KMeansConfig one;
  one.count = 1;
  const PrototypeBank b1 = fit_kmeans(pts, one, rng);
  const auto mean = column_means(pts);
  for (std::size_t k = 0; k < 4; ++k) CHECK(b1.centroids(0, k) == doctest::Approx(mean[k]).epsilon(1e-12));

  const Matrix few = random_matrix(6, 3, rng);
  KMeansConfig all;
  all.count = 6;
  CHECK(same_rows_any_order(fit_kmeans(few, all, rng).centroids, few, 0.0));

  KMeansConfig too_many;
  too_many.count = 7;
  CHECK_THROWS_AS(fit_kmeans(few, too_many, rng), ArgumentError);
}

TEST_CASE("kmeans improves on its initialisation and is reproducible") {
  SeededRng data(21);
  const Matrix pts = random_matrix(200, 5, data);
  KMeansConfig cfg;
  cfg.count = 8;
  SeededRng r1(3), r2(3);
  KMeansTrace trace;
  const PrototypeBank a = fit_kmeans(pts, cfg, r1, &trace);
  const PrototypeBank b = fit_kmeans(pts, cfg, r2);
  CHECK(a.centroids == b.centroids);
  REQUIRE(trace.wcss.size() >= 2);
  CHECK(trace.wcss.back() <= trace.wcss.front());
  for (std::size_t i = 1; i < trace.wcss.size(); ++i)
    CHECK(trace.wcss[i] <= trace.wcss[i - 1] * (1 + 1e-12));
  CHECK(within_cluster_ss(pts, a.centroids) == doctest::Approx(trace.wcss.back()));
}

TEST_CASE("kmeans centroids are the mean of their points at convergence") {
  SeededRng data(31);
  const Matrix pts = random_matrix(120, 3, data);
  KMeansConfig cfg;
  cfg.count = 4;
  cfg.max_iters = 500;
  SeededRng rng(0);
  KMeansTrace trace;
  const PrototypeBank bank = fit_kmeans(pts, cfg, rng, &trace);
  REQUIRE(trace.converged);
  for (std::size_t c = 0; c < 4; ++c) {
    std::vector<double> sum(3, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < pts.rows(); ++i) {
      if (nearest_prototype(bank, pts.row(i)) != c) continue;
      ++n;
      for (std::size_t k = 0; k < 3; ++k) sum[k] += pts(i, k);
    }
    REQUIRE(n > 0);
    for (std::size_t k = 0; k < 3; ++k) CHECK(bank.centroids(c, k) == doctest::Approx(sum[k] / n).epsilon(1e-9));
  }
}

TEST_CASE("nearest prototype") {
  SeededRng rng(6);
  const PrototypeBank bank = bank_of(random_matrix(8, 4, rng));
  CHECK(nearest_prototype(bank, bank.centroids.row(3)) == 3);
  const PrototypeBank pair = bank_of(Matrix{{-1, 0}, {1, 0}});
  const std::vector<double> mid{0, 5};
  CHECK(nearest_prototype(pair, mid) == 0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> z(4);
    for (double& v : z) v = rng.normal();
    CHECK(nearest_prototype(bank, z) == brute_nearest(bank.centroids, z));
  }
  CHECK_THROWS_AS(nearest_prototype(bank, mid), ArgumentError);
}

// ---------------------------------------------------------------------------
// GMM

TEST_CASE("gmm with a single prototype is the sample moments") {
  SeededRng rng(12);
  const Matrix pts = random_matrix(40, 3, rng, 2.0);
  const GmmFit fit = fit_gmm(slide_of(pts), bank_of(Matrix{{0.0, 0.0, 0.0}}), GmmConfig{});
  CHECK(fit.pi[0] == doctest::Approx(1.0));
  const auto mean = column_means(pts);
  for (std::size_t k = 0; k < 3; ++k) {
    double var = 0.0;
    for (std::size_t i = 0; i < 40; ++i) var += (pts(i, k) - mean[k]) * (pts(i, k) - mean[k]);
    var /= 40.0;
    CHECK(fit.mu(0, k) == doctest::Approx(mean[k]).epsilon(1e-12));
    CHECK(fit.sigma(0, k) == doctest::Approx(var).epsilon(1e-10));
  }
  for (std::size_t i = 0; i < 40; ++i) CHECK(fit.posteriors(i, 0) == 1.0);
}

TEST_CASE("gmm separates two distant clusters") {
  SeededRng rng(13);
  Matrix pts(60, 2);
  for (std::size_t i = 0; i < 60; ++i) {
    const double centre = i < 30 ? 0.0 : 100.0;
    pts(i, 0) = centre + rng.normal(0.0, 0.01);
    pts(i, 1) = centre + rng.normal(0.0, 0.01);
  }
  Matrix means(2, 2);
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t k = 0; k < 2; ++k) means(i < 30 ? 0 : 1, k) += pts(i, k) / 30.0;
  const GmmFit fit = fit_gmm(slide_of(pts), bank_of(means), GmmConfig{});
  CHECK(fit.pi[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(fit.pi[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(max_abs_diff(fit.mu, means) < 1e-6);
  for (std::size_t i = 0; i < 60; ++i) CHECK(std::fabs(fit.posteriors(i, i < 30 ? 0 : 1) - 1.0) < 1e-6);
}

TEST_CASE("gmm symmetric data gives equal weights") {
  const Matrix pts{{-2, 0}, {-1, 1}, {1, 1}, {2, 0}, {0, 3}, {0, -3}};
  const GmmFit fit = fit_gmm(slide_of(pts), bank_of(Matrix{{-1, 0}, {1, 0}}), GmmConfig{});
  CHECK(std::fabs(fit.pi[0] - fit.pi[1]) < 1e-9);

  const Matrix post = gmm_posteriors(slide_of(Matrix{{0, 7}}), bank_of(Matrix{{-1, 0}, {1, 0}}), GmmConfig{});
  CHECK(post(0, 0) == doctest::Approx(0.5));
  CHECK(post(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("gmm posteriors follow Bayes rule from the reported parameters") {
  SeededRng rng(14);
  const Matrix pts = random_matrix(50, 3, rng, 3.0);
  const PrototypeBank bank = bank_of(random_matrix(4, 3, rng, 3.0));
  const GmmFit fit = fit_gmm(slide_of(pts), bank, GmmConfig{});
  for (std::size_t i = 0; i < 50; ++i) {
    std::vector<double> logp(4);
    for (std::size_t c = 0; c < 4; ++c) {
      double lp = std::log(fit.pi[c]);
      for (std::size_t k = 0; k < 3; ++k) {
        const double s = fit.sigma(c, k);
        const double d = pts(i, k) - fit.mu(c, k);
        lp += -0.5 * (std::log(2 * M_PI * s) + d * d / s);
      }
      logp[c] = lp;
    }
    const double mx = *std::max_element(logp.begin(), logp.end());
    double z = 0.0;
    for (double v : logp) z += std::exp(v - mx);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::fabs(fit.posteriors(i, c) - std::exp(logp[c] - mx) / z) < 1e-10);
  }
}

TEST_CASE("gmm invariants over random inputs") {
  SeededRng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 10 + rng.below(40);
    const Matrix pts = random_matrix(n, 3, rng, 2.0);
    const PrototypeBank bank = bank_of(random_matrix(1 + rng.below(5), 3, rng, 2.0));
    GmmConfig cfg;
    cfg.em_iters = 6;
    const GmmFit fit = fit_gmm(slide_of(pts), bank, cfg);
    double s = 0.0;
    for (double p : fit.pi) s += p;
    CHECK(std::fabs(s - 1.0) < 1e-9);
    for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i)
      CHECK(fit.log_likelihood[i] >= fit.log_likelihood[i - 1] - 1e-9);
    for (double v : fit.sigma.data()) CHECK(v >= cfg.variance_floor);
    // each mean lies inside the bounding box of the data
    for (std::size_t c = 0; c < bank.count(); ++c)
      for (std::size_t k = 0; k < 3; ++k) {
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t i = 0; i < n; ++i) lo = std::min(lo, pts(i, k)), hi = std::max(hi, pts(i, k));
        CHECK(fit.mu(c, k) >= lo - 1e-12);
        CHECK(fit.mu(c, k) <= hi + 1e-12);
      }
  }
}

TEST_CASE("gmm duplicated patches stay finite") {
  const Matrix pts(10, 3, 2.5);
  const SlideSummary s = aggregate_gmm(slide_of(pts), bank_of(Matrix{{2.5, 2.5, 2.5}, {0, 0, 0}}), GmmConfig{});
  CHECK(all_finite(s.rows));
  for (double v : s.sigma.data()) CHECK(v >= 1e-6);
}

// ---------------------------------------------------------------------------
// OT and hard clustering

TEST_CASE("ot aggregation examples") {
  const Matrix same(5, 2, 1.0);
  const SlideSummary u = aggregate_ot(slide_of(same), bank_of(Matrix(3, 2, 1.0)), SinkhornConfig{});
  for (double v : u.plan.data()) CHECK(v == doctest::Approx(1.0 / 15.0).epsilon(1e-12));
  for (double v : u.rows.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  SeededRng rng(16);
  const Matrix pts = random_matrix(20, 3, rng);
  const PrototypeBank bank = bank_of(random_matrix(4, 3, rng));
  SinkhornConfig tight;
  tight.marginal_tol = 1e-10;
  const SlideSummary s = aggregate_ot(slide_of(pts), bank, tight);
  const auto rs = row_sums(s.plan);
  const auto cs = column_sums(s.plan);
  for (double v : rs) CHECK(std::fabs(v - 1.0 / 20.0) < 1e-8);
  for (double v : cs) CHECK(std::fabs(v - 1.0 / 4.0) < 1e-8);
  for (double v : s.plan.data()) CHECK(v > 0.0);

  const Matrix cost = transport_cost(pts, bank.centroids, CostKind::kSqL2);
  const Matrix product(20, 4, 1.0 / 80.0);
  double linear = 0.0, linear_product = 0.0;
  for (std::size_t i = 0; i < cost.size(); ++i) {
    linear += cost.data()[i] * s.plan.data()[i];
    linear_product += cost.data()[i] * product.data()[i];
  }
  const double eps = default_epsilon(cost);
  CHECK(transport_objective(s.plan, cost, eps) <= transport_objective(product, cost, eps));
  CHECK(linear <= linear_product);

  SinkhornConfig wide;
  double cmax = 0.0;
  for (double v : cost.data()) cmax = std::max(cmax, v);
  wide.epsilon = 1e6 * cmax;
  const SlideSummary flat = aggregate_ot(slide_of(pts), bank, wide);
  for (double v : flat.plan.data()) CHECK(std::fabs(v - 1.0 / 80.0) < 1e-6);

  const SlideSummary scaled_cols = aggregate_ot(slide_of(pts), bank, tight, true);
  CHECK(max_abs_diff(scaled_cols.rows, scaled(s.rows, 4.0)) < 1e-12);
}

TEST_CASE("hard clustering examples") {
  const PrototypeBank bank = bank_of(Matrix{{0, 0}, {10, 0}, {0, 10}});
  const Matrix near0{{0.1, 0.2}, {-0.3, 0.1}, {0.5, -0.5}};
  const SlideSummary s = aggregate_hc(slide_of(near0), bank);
  const auto mean = column_means(near0);
  CHECK(s.rows(0, 0) == doctest::Approx(mean[0]));
  CHECK(s.rows(0, 1) == doctest::Approx(mean[1]));
  CHECK(slice_rows(s.rows, 1, 3) == slice_rows(bank.centroids, 1, 3));

  CHECK(aggregate_hc(slide_of(bank.centroids), bank).rows == bank.centroids);

  SeededRng rng(18);
  const Matrix pts = random_matrix(40, 3, rng, 2.0);
  const PrototypeBank rb = bank_of(random_matrix(5, 3, rng, 2.0));
  const SlideSummary r = aggregate_hc(slide_of(pts), rb);
  Matrix sum(5, 3);
  std::vector<std::size_t> n(5, 0);
  for (std::size_t i = 0; i < 40; ++i) {
    const std::size_t c = brute_nearest(rb.centroids, pts.row(i));
    ++n[c];
    for (std::size_t k = 0; k < 3; ++k) sum(c, k) += pts(i, k);
  }
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(r.rows(c, k) == (n[c] ? sum(c, k) / static_cast<double>(n[c]) : rb.centroids(c, k)));
}

TEST_CASE("assignment map") {
  SeededRng rng(19);
  const PrototypeBank bank = bank_of(random_matrix(6, 3, rng));
  const auto ident = assignment_map(slide_of(bank.centroids), bank);
  for (std::size_t i = 0; i < 6; ++i) CHECK(ident[i] == i);

  Matrix c(6, 1);
  for (std::size_t i = 0; i < 6; ++i) c(i, 0) = 10.0 * static_cast<double>(i + 1);
  c(2, 0) = -1.0;
  c(5, 0) = 1.0;
  CHECK(assignment_map(slide_of(Matrix{{0.0}}), bank_of(c)).front() == 2);

  const Matrix pts = random_matrix(30, 3, rng);
  const auto a = assignment_map(slide_of(pts), bank);
  for (std::size_t i = 0; i < 30; ++i) CHECK(a[i] == brute_nearest(bank.centroids, pts.row(i)));
}

TEST_CASE("top k patches") {
  SeededRng rng(20);
  const Matrix pts = random_matrix(15, 3, rng);
  const PrototypeBank bank = bank_of(random_matrix(3, 3, rng));
  const SlideSummary s = aggregate_gmm(slide_of(pts), bank, GmmConfig{});
  auto dist = [&](std::size_t i, std::size_t c) {
    double d = 0.0;
    for (std::size_t k = 0; k < 3; ++k) d += (pts(i, k) - s.mu(c, k)) * (pts(i, k) - s.mu(c, k));
    return d;
  };
  const auto all = top_k_patches(slide_of(pts), s, 1, 15);
  REQUIRE(all.size() == 15);
  for (std::size_t i = 1; i < 15; ++i) CHECK(dist(all[i - 1], 1) <= dist(all[i], 1));

  std::vector<std::size_t> order(15);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist(a, 2) < dist(b, 2); });
  const auto top3 = top_k_patches(slide_of(pts), s, 2, 3);
  CHECK(std::vector<std::size_t>(order.begin(), order.begin() + 3) == top3);

  Matrix with_mu = pts;
  std::copy(s.mu.row(0).begin(), s.mu.row(0).end(), with_mu.row(7).begin());
  CHECK(top_k_patches(slide_of(with_mu), s, 0, 1).front() == 7);

  CHECK_THROWS_AS(top_k_patches(slide_of(pts), s, 0, 16), ArgumentError);
  CHECK_THROWS_AS(top_k_patches(slide_of(pts), aggregate_hc(slide_of(pts), bank), 0, 1), ArgumentError);
}

TEST_CASE("summaries are invariant to patch order") {
  SeededRng rng(22);
  const Matrix pts = random_matrix(25, 4, rng);
  const PrototypeBank bank = bank_of(random_matrix(3, 4, rng));
  std::vector<std::size_t> perm(25);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  const Matrix shuffled = permute_rows(pts, perm);
  for (auto backend : {AggregationBackend::kGmm, AggregationBackend::kOt, AggregationBackend::kHc}) {
    AggregationOptions opts;
    opts.backend = backend;
    opts.ot.marginal_tol = 1e-12;
    const SlideSummary a = aggregate(slide_of(pts), bank, opts);
    const SlideSummary b = aggregate(slide_of(shuffled), bank, opts);
    CHECK(max_abs_diff(a.rows, b.rows) < 1e-10);
    CHECK(a.count() == 3);
    CHECK(a.dim() == summary_dim(backend, 4));
  }
}

TEST_CASE("summary size does not depend on the patch count") {
  SeededRng rng(23);
  const PrototypeBank bank = bank_of(random_matrix(16, 4, rng));
  for (std::size_t n : {16u, 500u, 5000u}) {
    const SlideSummary s = aggregate_gmm(slide_of(random_matrix(n, 4, rng)), bank, GmmConfig{});
    CHECK(s.count() == 16);
  }
  CHECK(5000.0 / 16.0 >= 300.0);
}

TEST_CASE("aggregation rejects bad input") {
  const PrototypeBank bank = bank_of(Matrix{{0, 0}});
  CHECK_THROWS_AS(aggregate_hc(slide_of(Matrix(0, 2)), bank), ArgumentError);
  CHECK_THROWS_AS(aggregate_hc(slide_of(Matrix(3, 3)), bank), ArgumentError);
  CHECK_THROWS_AS(aggregate_gmm(slide_of(Matrix{{NAN, 0}}), bank, GmmConfig{}), ArgumentError);
  CHECK_THROWS_AS(parse_aggregation_backend("mean"), ArgumentError);
  SinkhornConfig bad;
  bad.epsilon = 0.0;
  CHECK_THROWS_AS(aggregate_ot(slide_of(Matrix(3, 2)), bank, bad), ArgumentError);
}
