#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfclt {

// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  std::vector<double> column(std::size_t j) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
  }
  const std::vector<double>& data() const { return data_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_cdf(double x, double mean, double variance) { return normal_cdf((x - mean) / std::sqrt(variance)); }

// Acklam's rational approximation followed by two Newton steps on the CDF.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw std::invalid_argument("normal quantile needs p in [0,1]");
  }
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  const double lower = 0.02425;
  double x = 0.0;
  if (p < lower) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - lower) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  for (int step = 0; step < 2; ++step) {
    const double err = (p < 0.5 ? normal_cdf(x) - p : -(0.5 * std::erfc(x / std::numbers::sqrt2) - (1.0 - p)));
    const double dens = normal_pdf(x);
    if (dens <= 0.0) break;
    x -= err / dens;
  }
  return x;
}

// P(sqrt(n) D_n > x) in the Kolmogorov limit.
inline double kolmogorov_survival(double x) {
  if (x <= 0.0) return 1.0;
  if (x < 1.18) {
    // Dual theta-series, accurate where the alternating series converges slowly.
    const double pi2 = std::numbers::pi * std::numbers::pi;
    double cdf = 0.0;
    for (int k = 1; k < 50; ++k) {
      const double term = std::exp(-static_cast<double>((2 * k - 1) * (2 * k - 1)) * pi2 / (8.0 * x * x));
      cdf += term;
      if (term < 1e-16) break;
    }
    cdf *= std::sqrt(2.0 * std::numbers::pi) / x;
    return std::clamp(1.0 - cdf, 0.0, 1.0);
  }
  double sum = 0.0;
  for (int k = 1; k < 100; ++k) {
    const double term = std::exp(-2.0 * k * k * x * x);
    sum += (k % 2 == 1 ? term : -term);
    if (term < 1e-12) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

inline constexpr std::size_t kKsMinSamples = 20;

inline KsResult ks_test_normal(std::span<const double> samples, double mean, double variance) {
  if (!(variance > 0.0)) throw std::invalid_argument("degenerate reference");
  if (samples.size() < kKsMinSamples) throw std::invalid_argument("KS test needs at least 20 samples");
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  const double sd = std::sqrt(variance);
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = normal_cdf((x[i] - mean) / sd);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return {d, kolmogorov_survival(std::sqrt(n) * d), x.size()};
}

struct CovarianceEstimate {
  Matrix value;
  Matrix std_error;
};

// Unbiased covariance of the columns; jackknife standard errors.
inline CovarianceEstimate empirical_cov(const Matrix& samples) {
  const std::size_t r = samples.rows();
  const std::size_t k = samples.cols();
  if (r < 2) throw std::invalid_argument("covariance needs at least two rows");
  std::vector<double> mean(k, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) mean[j] += samples(i, j);
  for (double& m : mean) m /= static_cast<double>(r);
  Matrix centered(r, k);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) centered(i, j) = samples(i, j) - mean[j];
  Matrix cross(k, k);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a; b < k; ++b) cross(a, b) += centered(i, a) * centered(i, b);
  CovarianceEstimate out{Matrix(k, k), Matrix(k, k, std::numeric_limits<double>::quiet_NaN())};
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a; b < k; ++b) {
      out.value(a, b) = cross(a, b) / static_cast<double>(r - 1);
      out.value(b, a) = out.value(a, b);
    }
  if (r < 3) return out;
  // Leave-one-out covariances from the centered sums: sum c = 0, so the reduced mean is -c_i/(r-1).
  const double rm1 = static_cast<double>(r - 1);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a; b < k; ++b) {
      std::vector<double> loo(r);
      double loo_mean = 0.0;
      for (std::size_t i = 0; i < r; ++i) {
        const double ca = centered(i, a), cb = centered(i, b);
        const double reduced = cross(a, b) - ca * cb - rm1 * (ca / rm1) * (cb / rm1);
        loo[i] = reduced / static_cast<double>(r - 2);
        loo_mean += loo[i];
      }
      loo_mean /= static_cast<double>(r);
      double ss = 0.0;
      for (double v : loo) ss += (v - loo_mean) * (v - loo_mean);
      const double se = std::sqrt(rm1 / static_cast<double>(r) * ss);
      out.std_error(a, b) = se;
      out.std_error(b, a) = se;
    }
  return out;
}

struct MeanEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

inline MeanEstimate mean_with_error(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("mean of empty sample");
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, std::numeric_limits<double>::infinity()};
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()))};
}

// Unbiased variance with the delta-method standard error sqrt((m4 - s^4)/n).
inline MeanEstimate variance_with_error(std::span<const double> xs) {
  if (xs.size() < 2) throw std::invalid_argument("variance needs at least two samples");
  const double n = static_cast<double>(xs.size());
  double m = 0.0;
  for (double x : xs) m += x;
  m /= n;
  double m2 = 0.0, m4 = 0.0;
  for (double x : xs) {
    const double c = (x - m) * (x - m);
    m2 += c;
    m4 += c * c;
  }
  const double var = m2 / (n - 1.0);
  m2 /= n;
  m4 /= n;
  return {var, std::sqrt(std::max(m4 - m2 * m2, 0.0) / n)};
}

// P(chi^2_k > x) for integer degrees of freedom, by the closed-form finite series.
inline double chi_square_survival(double x, unsigned k) {
  if (k == 0) throw std::invalid_argument("chi-square needs positive degrees of freedom");
  if (x <= 0.0) return 1.0;
  const double half = 0.5 * x;
  double sum = 0.0;
  if (k % 2 == 0) {
    double term = 1.0;
    for (unsigned j = 0; j < k / 2; ++j) {
      if (j > 0) term *= half / j;
      sum += term;
    }
    return std::clamp(std::exp(-half) * sum, 0.0, 1.0);
  }
  double term = std::sqrt(half) * 2.0 / std::sqrt(std::numbers::pi);
  for (unsigned j = 0; 2 * j + 3 <= k; ++j) {
    if (j > 0) term *= half / (j + 0.5);
    sum += term;
  }
  return std::clamp(std::erfc(std::sqrt(half)) + std::exp(-half) * sum, 0.0, 1.0);
}

// Solves A x = b by Gaussian elimination with partial pivoting.
inline std::vector<double> solve_linear(Matrix a, std::vector<double> b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n) throw std::invalid_argument("solve_linear needs a square system");
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t pivot = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(pivot, c))) pivot = r;
    if (a(pivot, c) == 0.0) throw std::invalid_argument("singular linear system");
    if (pivot != c) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(c, j), a(pivot, j));
      std::swap(b[c], b[pivot]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a(r, c) / a(c, c);
      for (std::size_t j = c; j < n; ++j) a(r, j) -= f * a(c, j);
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= a(i, j) * x[j];
    x[i] = s / a(i, i);
  }
  return x;
}

struct WaldResult {
  std::vector<double> coefficients;
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t observations = 0;
};

// Least squares of y on the columns of x, then a Wald test that every coefficient is zero
// using the heteroskedasticity-robust (sandwich) covariance.
inline WaldResult wald_zero_test(const Matrix& x, std::span<const double> y) {
  const std::size_t n = x.rows(), k = x.cols();
  if (y.size() != n) throw std::invalid_argument("regression needs one response per row");
  if (n <= k) throw std::invalid_argument("regression needs more rows than features");
  Matrix xtx(k, k);
  std::vector<double> xty(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < k; ++a) {
      xty[a] += x(i, a) * y[i];
      for (std::size_t b = 0; b < k; ++b) xtx(a, b) += x(i, a) * x(i, b);
    }
  WaldResult out;
  out.observations = n;
  out.coefficients = solve_linear(xtx, xty);
  Matrix meat(k, k);
  for (std::size_t i = 0; i < n; ++i) {
    double e = y[i];
    for (std::size_t a = 0; a < k; ++a) e -= x(i, a) * out.coefficients[a];
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) meat(a, b) += e * e * x(i, a) * x(i, b);
  }
  // beta' V^{-1} beta with V = B^{-1} M B^{-1} equals (B beta)' M^{-1} (B beta) = xty' M^{-1} xty.
  const auto solved = solve_linear(meat, xty);
  for (std::size_t a = 0; a < k; ++a) out.statistic += xty[a] * solved[a];
  out.p_value = chi_square_survival(out.statistic, static_cast<unsigned>(k));
  return out;
}

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

inline SlopeFit loglog_slope(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("slope fit needs equally many x and y values");
  if (xs.size() < 3) throw std::invalid_argument("slope fit needs at least three points");
  std::vector<double> lx(xs.size()), ly(ys.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0.0) || !(ys[i] > 0.0)) throw std::invalid_argument("nonpositive input to log-log fit");
    lx[i] = std::log(xs[i]);
    ly[i] = std::log(ys[i]);
  }
  const double n = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("slope fit needs distinct x values");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

struct QqPoint {
  double theoretical_quantile;
  double sample_quantile;
};

// Sorted samples against N(mean, variance) quantiles at plotting positions (i + 0.5)/n.
inline std::vector<QqPoint> qq_data(std::span<const double> samples, double mean, double variance) {
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  std::vector<QqPoint> out(x.size());
  const double sd = std::sqrt(std::max(variance, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(x.size());
    out[i] = {mean + sd * normal_quantile(p), x[i]};
  }
  return out;
}

inline void write_qq_csv(const std::string& path, std::span<const QqPoint> points) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "theoretical_quantile,sample_quantile\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", p.theoretical_quantile, p.sample_quantile);
    out << buf;
  }
}

}  // namespace mfclt
