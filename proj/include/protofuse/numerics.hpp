#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace protofuse {

/// Dense row-major matrix of doubles. Row-major is also the layout used by
/// every CSV writer in the library.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& m);
/// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& m, double s);
/// Stack a above b. Column counts must match.
Matrix vstack(const Matrix& a, const Matrix& b);
/// [a, b] column-wise concatenation. Row counts must match.
Matrix hstack(const Matrix& a, const Matrix& b);
Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end);
std::vector<double> column_means(const Matrix& m);
std::vector<double> row_sums(const Matrix& m);
std::vector<double> column_sums(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

bool all_finite(std::span<const double> values);
inline bool all_finite(const Matrix& m) { return all_finite(m.data()); }

/// log Σ exp(v_i), evaluated with a max shift. -inf entries are allowed as long
/// as at least one entry is finite.
double logsumexp(std::span<const double> values);

/// Row-wise softmax through logsumexp.
Matrix row_softmax(const Matrix& m);

/// entry (i, c) = ||a_i - b_c||²
Matrix pairwise_sq_l2(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);

/// Neumaier-compensated running sum. Used where long reductions are compared
/// at tolerances close to machine precision.
class CompensatedSum {
 public:
  void add(double x) noexcept;
  double value() const noexcept { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

/// Deterministic random source: std::mt19937_64 for raw 64-bit words, with
/// the floating-point transforms implemented here rather than through the
/// <random> distributions, whose output is implementation-defined.
///   uniform():  (word >> 11) · 2⁻⁵³, in [0, 1)
///   normal():   Box–Muller on two uniforms, no cached spare
///   below(n):   rejection sampling on 64-bit words, unbiased
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  double exponential(double rate);
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  /// Child stream with a seed derived from this one; does not advance this.
  SeededRng derive(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// splitmix64 finaliser, used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace protofuse
