#include <cmath>
#include <vector>

#include <doctest.h>

#include "protofuse/errors.hpp"
#include "protofuse/numerics.hpp"
#include "protofuse/oracles.hpp"
#include "protofuse/transport.hpp"

using namespace protofuse;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, SeededRng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal(0.0, scale);
  return m;
}

}  // namespace

TEST_CASE("logsumexp examples") {
  const std::vector<double> zeros{0.0, 0.0};
  CHECK(logsumexp(zeros) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const std::vector<double> big{1000.0, 1000.0};
  CHECK(logsumexp(big) == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));

  const std::vector<double> v{0.5, 1.5, -2.0};
  const double naive = std::log(std::exp(0.5) + std::exp(1.5) + std::exp(-2.0));
  CHECK(std::fabs(logsumexp(v) - naive) < 1e-12);

  const std::vector<double> with_inf{-INFINITY, 0.0};
  CHECK(logsumexp(with_inf) == doctest::Approx(0.0));
}

TEST_CASE("logsumexp shift invariance") {
  SeededRng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(7);
    for (double& x : v) x = rng.normal(0.0, 10.0);
    const double s = rng.uniform(-500.0, 500.0);
    std::vector<double> shifted = v;
    for (double& x : shifted) x += s;
    CHECK(std::fabs(logsumexp(shifted) - (logsumexp(v) + s)) < 1e-12 * std::max(1.0, std::fabs(s)));
  }
}

TEST_CASE("row_softmax examples") {
  const Matrix u = row_softmax(Matrix{{0.0, 0.0}});
  CHECK(u(0, 0) == doctest::Approx(0.5));
  CHECK(u(0, 1) == doctest::Approx(0.5));

  const Matrix e = row_softmax(Matrix{{1.0, 0.0}});
  CHECK(std::fabs(e(0, 0) - 0.7310585786300049) < 1e-15);
  CHECK(std::fabs(e(0, 1) - 0.2689414213699951) < 1e-15);

  const Matrix sat = row_softmax(Matrix{{700.0, 0.0}});
  CHECK(all_finite(sat));
  CHECK(sat(0, 0) == doctest::Approx(1.0));
  CHECK(sat(0, 1) < 1e-300);
}

TEST_CASE("row_softmax rows are stochastic") {
  SeededRng rng(3);
  const Matrix m = random_matrix(20, 9, rng, 30.0);
  const Matrix s = row_softmax(m);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double sum = 0.0;
    for (double v : s.row(r)) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("pairwise_sq_l2") {
  CHECK(pairwise_sq_l2(Matrix{{0.0, 0.0}}, Matrix{{3.0, 4.0}})(0, 0) == 25.0);

  SeededRng rng(5);
  const Matrix a = random_matrix(5, 3, rng);
  const Matrix self = pairwise_sq_l2(a, a);
  for (std::size_t i = 0; i < 5; ++i) CHECK(self(i, i) == doctest::Approx(0.0).epsilon(1e-14));

  const Matrix b = random_matrix(4, 3, rng);
  const Matrix d = pairwise_sq_l2(a, b);
  REQUIRE(d.rows() == 5);
  REQUIRE(d.cols() == 4);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      double ref = 0.0;
      for (std::size_t k = 0; k < 3; ++k) ref += (a(i, k) - b(c, k)) * (a(i, k) - b(c, k));
      CHECK(std::fabs(d(i, c) - ref) < 1e-10);
    }
  }
  CHECK(max_abs_diff(transpose(pairwise_sq_l2(b, a)), d) < 1e-12);
  CHECK_THROWS_AS(pairwise_sq_l2(a, Matrix(2, 4)), ArgumentError);
}

TEST_CASE("matrix helpers") {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}};
  CHECK(matmul(a, b) == Matrix{{19, 22}, {43, 50}});
  CHECK(matmul_bt(a, b) == matmul(a, transpose(b)));
  CHECK(matmul_at(a, b) == matmul(transpose(a), b));
  CHECK(vstack(a, b).rows() == 4);
  CHECK(hstack(a, b) == Matrix{{1, 2, 5, 6}, {3, 4, 7, 8}});
  CHECK(slice_rows(vstack(a, b), 2, 4) == b);
  CHECK(column_means(a) == std::vector<double>{2, 3});
  CHECK(row_sums(a) == std::vector<double>{3, 7});
  CHECK_THROWS_AS(matmul(a, Matrix(3, 2)), ArgumentError);
  CHECK_THROWS_AS((Matrix{{1, 2}, {3}}), ArgumentError);
}

TEST_CASE("seeded rng is reproducible") {
  SeededRng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const double x = a.uniform();
    CHECK(x == b.uniform());
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
    differs = differs || x != c.uniform();
  }
  CHECK(differs);
  for (int i = 0; i < 200; ++i) CHECK(a.below(7) < 7);
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(a.derive(5).seed() == SeededRng(a.seed()).derive(5).seed());
}

TEST_CASE("sinkhorn agrees with dense reference on small problems") {
  SeededRng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix cost = random_matrix(4, 3, rng);
    const std::vector<double> a{0.1, 0.2, 0.3, 0.4};
    const std::vector<double> b{0.5, 0.25, 0.25};
    const double eps = 0.5;
    const TransportPlan tp = sinkhorn(cost, a, b, eps, 5000, 1e-14);
    const auto ref = oracle::exact_ot_small(cost.data(), 4, 3, a, b, eps);
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::fabs(tp.plan.data()[i] - ref[i]) < 1e-10);
    for (double v : tp.plan.data()) CHECK(v > 0.0);
  }
}

TEST_CASE("sinkhorn limits") {
  // constant cost gives the product plan
  const Matrix flat(3, 2, 1.5);
  const TransportPlan tp = sinkhorn(flat, uniform_mass(3), uniform_mass(2), SinkhornConfig{});
  for (double v : tp.plan.data()) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-12));

  const Matrix one{{3.0}};
  CHECK(sinkhorn(one, std::vector<double>{1.0}, std::vector<double>{1.0}, 0.1, 10, 1e-12)
            .plan(0, 0) == doctest::Approx(1.0));

  SeededRng rng(2);
  const Matrix cost = random_matrix(5, 4, rng);
  double cmax = 0.0;
  for (double v : cost.data()) cmax = std::max(cmax, std::fabs(v));
  const TransportPlan wide =
      sinkhorn(cost, uniform_mass(5), uniform_mass(4), 1e6 * cmax, 1000, 1e-12);
  for (double v : wide.plan.data()) CHECK(std::fabs(v - 1.0 / 20.0) < 1e-6);
}

TEST_CASE("default epsilon ignores constant cost shifts") {
  SeededRng rng(8);
  const Matrix cost = random_matrix(6, 5, rng);
  Matrix shifted = cost;
  for (double& v : shifted.data()) v += 123.0;
  CHECK(default_epsilon(cost) == doctest::Approx(default_epsilon(shifted)).epsilon(1e-12));
  CHECK(default_epsilon(Matrix(2, 2, 4.0)) == 1.0);
}

TEST_CASE("sinkhorn reports non-convergence") {
  SeededRng rng(4);
  const Matrix cost = random_matrix(6, 6, rng, 50.0);
  CHECK_THROWS_AS(sinkhorn(cost, uniform_mass(6), uniform_mass(6), 1e-3, 2, 1e-12),
                  ConvergenceError);
}

TEST_CASE("dense reference examples") {
  const std::vector<double> flat(6, 2.0);
  const std::vector<double> a{0.5, 0.5}, b{0.2, 0.3, 0.5};
  const auto plan = oracle::exact_ot_small(flat, 2, 3, a, b, 1.0);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) CHECK(plan[i * 3 + k] == doctest::Approx(a[i] * b[k]));
  const std::vector<double> single{7.0}, mass{1.0};
  CHECK(oracle::exact_ot_small(single, 1, 1, mass, mass, 0.3)[0] == doctest::Approx(1.0));
}

TEST_CASE("finite difference oracle") {
  const std::vector<double> x{1.0, 2.0};
  auto sq = [](std::span<const double> v) { return v[0] * v[0] + v[1] * v[1]; };
  const auto g = oracle::finite_diff_grad(sq, x, 1e-5);
  CHECK(std::fabs(g[0] - 2.0) < 1e-6);
  CHECK(std::fabs(g[1] - 4.0) < 1e-6);
  const auto z = oracle::finite_diff_grad([](std::span<const double>) { return 3.0; }, x, 1e-5);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
}
