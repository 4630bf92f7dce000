#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "errors.hpp"
#include "functional.hpp"
#include "law.hpp"
#include "parallel.hpp"
#include "quadrature.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace mfclt {

inline constexpr double kDegeneracyThreshold = 1e-12;

// U(m0) and an error estimate: zero for atom laws, else the gap to a proxy of half the size.
struct ReferenceValue {
  double value = 0.0;
  double error = 0.0;
  std::size_t proxy_size = 0;
  std::string method;
};

struct VarianceEstimate {
  double value = 0.0;
  double std_error = 0.0;
  bool degenerate = false;
  std::string method;
};

struct CltOptions {
  unsigned workers = 0;
  std::size_t mc_size = 200000;
  std::size_t proxy_size = 1000000;
  // Total number of integrand evaluations allowed when a proxy enters a multiple integral.
  double evaluation_budget = 1e8;
  std::optional<ReferenceValue> reference;
  std::optional<VarianceEstimate> variance;
};

namespace detail {

// Largest proxy size whose evaluation cost (size^degree) stays within the budget.
inline std::size_t capped_proxy_size(std::size_t requested, int degree, double budget) {
  if (degree <= 1) return requested;
  const double cap = std::floor(std::pow(budget, 1.0 / degree) * (1.0 + 1e-12));
  return std::max<std::size_t>(2, std::min<std::size_t>(requested, static_cast<std::size_t>(cap)));
}

inline std::optional<double> exact_quantile(const Functional& u) {
  const QuantileSpec* spec = u.quantile_spec();
  if (!spec || !spec->cdf) return std::nullopt;
  return quantile_from_cdf(spec->cdf, spec->level, 1e-15);
}

}  // namespace detail

inline ReferenceValue reference_value(const Functional& u, const SamplerSpec& law, const CltOptions& options = {}) {
  if (options.reference) return *options.reference;
  if (u.dim() != law.dim()) throw std::invalid_argument("functional and law dimensions differ");
  if (law.is_discrete()) return {u.value(law.atoms()), 0.0, law.atoms().size(), "exact"};
  if (const auto q = detail::exact_quantile(u)) return {*q, 0.0, 0, "cdf-bisection"};
  const std::size_t size = detail::capped_proxy_size(options.proxy_size, u.evaluation_degree(), options.evaluation_budget);
  const double value = u.value(law.proxy(size));
  const double coarse = u.value(law.proxy(std::max<std::size_t>(1, size / 2)));
  return {value, std::abs(value - coarse), size, "quasi-random-proxy"};
}

// Var(dU/dm(m0, zeta)) for zeta ~ m0.
inline VarianceEstimate asymptotic_variance(const Functional& u, const SamplerSpec& law, std::uint64_t seed,
                                            const CltOptions& options = {}) {
  if (options.variance) return *options.variance;
  if (u.dim() != law.dim()) throw std::invalid_argument("functional and law dimensions differ");
  VarianceEstimate out;
  if (law.is_discrete()) {
    const auto& atoms = law.atoms();
    const auto f = u.bind(1, atoms);
    const double mean = atoms.integrate(f);
    detail::CompensatedSum ss;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      const double c = f(atoms.point(i)) - mean;
      ss.add(atoms.weight(i) * c * c);
    }
    out.value = ss.value();
    out.method = "exact";
  } else if (const QuantileSpec* spec = u.quantile_spec(); spec && spec->cdf && spec->density) {
    // The derivative is an indicator scaled by 1/p0(q); its variance is F(q)(1-F(q))/p0(q)^2.
    const double q = quantile_from_cdf(spec->cdf, spec->level, 1e-15);
    const double p = spec->cdf(q), dens = spec->density(q);
    out.value = p * (1.0 - p) / (dens * dens);
    out.method = "closed-form-indicator";
  } else {
    // Evaluating the bound derivative costs about inner^(degree - 1) per outer draw.
    const int degree = u.evaluation_degree();
    std::size_t inner = options.proxy_size;
    if (degree > 1) {
      const double per_draw = options.evaluation_budget / static_cast<double>(std::max<std::size_t>(1, options.mc_size));
      const double cap = std::floor(std::pow(per_draw, 1.0 / static_cast<double>(degree - 1)));
      inner = std::min(inner, static_cast<std::size_t>(std::max(2.0, cap)));
    }
    const auto f = u.bind(1, law.proxy(inner));
    std::vector<double> values(options.mc_size);
    const std::size_t blocks = std::max<std::size_t>(1, std::min<std::size_t>(64, options.mc_size / 1024));
    const std::size_t per_block = (options.mc_size + blocks - 1) / blocks;
    parallel_for(blocks, options.workers, [&](std::size_t b) {
      RandomStream rng(seed, StreamTag::kVarianceOuter, 0, static_cast<std::uint32_t>(b));
      std::vector<double> point(law.dim());
      for (std::size_t i = b * per_block; i < std::min(options.mc_size, (b + 1) * per_block); ++i) {
        law.sample(rng, point);
        values[i] = f(point);
      }
    });
    const auto v = variance_with_error(values);
    out.value = std::max(v.mean, 0.0);
    out.std_error = v.std_error;
    out.method = "monte-carlo";
  }
  out.degenerate = out.value < kDegeneracyThreshold;
  return out;
}

struct CltReport {
  std::size_t n = 0;
  std::size_t replications = 0;
  std::uint64_t seed = 0;
  std::vector<double> samples;
  double sigma2_theory = 0.0;
  double sigma2_theory_se = 0.0;
  double sigma2_empirical = 0.0;
  double sigma2_empirical_se = 0.0;
  double sample_mean = 0.0;
  double ks_stat = 0.0;
  double ks_pvalue = 1.0;
  bool ks_skipped = false;
  bool degenerate = false;
  double mean_abs_scaled = 0.0;
  double mean_abs_scaled_se = 0.0;
  ReferenceValue reference;
  std::string variance_method;
};

inline DiscreteMeasure draw_empirical(const SamplerSpec& law, std::size_t n, RandomStream& rng) {
  return empirical_from_samples(law.dim(), law.sample_many(rng, n));
}

// Replicates sqrt(N)(U(m^N) - U(m0)); replication r draws from stream (seed, r).
inline CltReport run_clt_experiment(const Functional& u, const SamplerSpec& law, std::size_t n, std::size_t replications,
                                    std::uint64_t seed, const CltOptions& options = {}) {
  if (replications < 100) throw std::invalid_argument("CLT experiment needs at least 100 replications");
  if (n == 0) throw std::invalid_argument("sample size must be positive");
  CltReport report;
  report.n = n;
  report.replications = replications;
  report.seed = seed;
  report.reference = reference_value(u, law, options);
  const auto variance = asymptotic_variance(u, law, seed, options);
  report.sigma2_theory = variance.value;
  report.sigma2_theory_se = variance.std_error;
  report.degenerate = variance.degenerate;
  report.variance_method = variance.method;
  report.samples.resize(replications);
  const double root_n = std::sqrt(static_cast<double>(n));
  parallel_for(replications, options.workers, [&](std::size_t r) {
    RandomStream rng(seed, StreamTag::kCltReplication, static_cast<std::uint32_t>(r));
    report.samples[r] = root_n * (u.value(draw_empirical(law, n, rng)) - report.reference.value);
  });
  for (double x : report.samples)
    if (!std::isfinite(x)) throw NumericError("non-finite CLT sample");
  const auto var = variance_with_error(report.samples);
  report.sigma2_empirical = var.mean;
  report.sigma2_empirical_se = var.std_error;
  report.sample_mean = mean_with_error(report.samples).mean;
  std::vector<double> abs_values(replications);
  for (std::size_t r = 0; r < replications; ++r) abs_values[r] = std::abs(report.samples[r]);
  const auto abs_mean = mean_with_error(abs_values);
  report.mean_abs_scaled = abs_mean.mean;
  report.mean_abs_scaled_se = abs_mean.std_error;
  if (report.degenerate) {
    report.ks_skipped = true;
  } else {
    const auto ks = ks_test_normal(report.samples, 0.0, report.sigma2_theory);
    report.ks_stat = ks.statistic;
    report.ks_pvalue = ks.p_value;
  }
  return report;
}

struct DecompositionRecord {
  double q_n = 0.0;
  double r_n = 0.0;
  double delta_u = 0.0;
  double identity_residual = 0.0;
};

struct DecompositionOptions {
  std::size_t quad_points = 8;
  // Size of the proxy for a continuous m0 when U(m0) and dU/dm(m0, .) enter integrals directly.
  std::size_t proxy_size = 1000000;
  // Proxy size for continuous m0 when the functional has no moment form.
  std::size_t generic_proxy_size = 64;
};

// Sequential interpolation m^{N,i}_s = (1 + (1-i-s)/N) m0 + (1/N) sum_{j<i} delta_zeta_j + (s/N) delta_zeta_i.
// Q_N collects the s = 0 terms; R_N integrates the change in s by Gauss-Legendre quadrature.
class Decomposer {
 public:
  Decomposer(Functional u, const SamplerSpec& law, DecompositionOptions options = {})
      : u_(std::move(u)), dim_(law.dim()), rule_(gauss_legendre_unit(options.quad_points)), form_(u_.moment_form()) {
    if (u_.dim() != law.dim()) throw std::invalid_argument("functional and law dimensions differ");
    if (form_) {
      const DiscreteMeasure base = law.is_discrete() ? law.atoms() : law.proxy(options.proxy_size);
      base_integrals_.assign(form_->integrands.size(), 0.0);
      for (std::size_t k = 0; k < form_->integrands.size(); ++k) base_integrals_[k] = base.integrate(form_->integrands[k]);
      base_value_ = form_->outer(base_integrals_);
    } else {
      base_ = law.is_discrete() ? law.atoms() : law.proxy(options.generic_proxy_size);
      base_value_ = u_.value(*base_);
    }
  }

  bool uses_moment_form() const { return form_.has_value(); }
  double base_value() const { return base_value_; }

  // samples holds zeta_1..zeta_N back to back. If increments is given it receives
  // X_{N,i} = (dU/dm(m^{N,i}_0, zeta_i) - int dU/dm(m^{N,i}_0, x) m0(dx)) / sqrt(N).
  DecompositionRecord run(std::span<const double> samples, std::vector<double>* increments = nullptr) const {
    if (samples.empty() || samples.size() % dim_ != 0) throw std::invalid_argument("bad sample buffer");
    const std::size_t n = samples.size() / dim_;
    if (increments) increments->assign(n, 0.0);
    return form_ ? run_moment_form(samples, n, increments) : run_generic(samples, n, increments);
  }

 private:
  DecompositionRecord finish(double delta_u, double q_sum, double r_sum, std::size_t n) const {
    DecompositionRecord rec;
    rec.delta_u = delta_u;
    rec.q_n = q_sum / static_cast<double>(n);
    rec.r_n = r_sum / static_cast<double>(n);
    rec.identity_residual = std::abs(rec.delta_u - rec.q_n - rec.r_n);
    return rec;
  }

  DecompositionRecord run_moment_form(std::span<const double> samples, std::size_t n, std::vector<double>* increments) const {
    const std::size_t q = base_integrals_.size();
    const double nd = static_cast<double>(n);
    std::vector<double> g_at(q), prefix(q, 0.0), t(q), grad(q), centered(q);
    detail::CompensatedSum q_sum, r_sum;
    for (std::size_t i = 1; i <= n; ++i) {
      const auto zeta = samples.subspan((i - 1) * dim_, dim_);
      for (std::size_t k = 0; k < q; ++k) {
        g_at[k] = form_->integrands[k](zeta);
        centered[k] = g_at[k] - base_integrals_[k];
      }
      auto increment = [&](double s) {
        const double base_weight = 1.0 + (1.0 - static_cast<double>(i) - s) / nd;
        for (std::size_t k = 0; k < q; ++k) t[k] = base_weight * base_integrals_[k] + prefix[k] / nd + (s / nd) * g_at[k];
        form_->gradient(t, grad);
        double g = 0.0;
        for (std::size_t k = 0; k < q; ++k) g += grad[k] * centered[k];
        return g;
      };
      const double g0 = increment(0.0);
      q_sum.add(g0);
      if (increments) (*increments)[i - 1] = g0 / std::sqrt(nd);
      double r = 0.0;
      for (std::size_t k = 0; k < rule_.nodes.size(); ++k) r += rule_.weights[k] * (increment(rule_.nodes[k]) - g0);
      r_sum.add(r);
      for (std::size_t k = 0; k < q; ++k) prefix[k] += g_at[k];
    }
    for (std::size_t k = 0; k < q; ++k) t[k] = prefix[k] / nd;
    return finish(form_->outer(t) - base_value_, q_sum.value(), r_sum.value(), n);
  }

  DecompositionRecord run_generic(std::span<const double> samples, std::size_t n, std::vector<double>* increments) const {
    const DiscreteMeasure& base = *base_;
    const std::size_t b = base.size();
    const double nd = static_cast<double>(n);
    std::vector<double> coords(base.coordinates().begin(), base.coordinates().end());
    coords.insert(coords.end(), samples.begin(), samples.end());
    detail::CompensatedSum q_sum, r_sum;
    for (std::size_t i = 1; i <= n; ++i) {
      const auto zeta = samples.subspan((i - 1) * dim_, dim_);
      const std::size_t atoms = b + i;
      auto increment = [&](double s) {
        const double base_weight = 1.0 + (1.0 - static_cast<double>(i) - s) / nd;
        if (base_weight < -1e-15) throw std::logic_error("negative interpolation weight");
        std::vector<double> w(atoms);
        for (std::size_t a = 0; a < b; ++a) w[a] = std::max(base_weight, 0.0) * base.weight(a);
        for (std::size_t j = 0; j + 1 < i; ++j) w[b + j] = 1.0 / nd;
        w[b + i - 1] = s / nd;
        const DiscreteMeasure m(dim_, std::vector<double>(coords.begin(), coords.begin() + static_cast<std::ptrdiff_t>(atoms * dim_)),
                                std::move(w));
        const auto f = u_.bind(1, m);
        return f(zeta) - base.integrate(f);
      };
      const double g0 = increment(0.0);
      q_sum.add(g0);
      if (increments) (*increments)[i - 1] = g0 / std::sqrt(nd);
      double r = 0.0;
      for (std::size_t k = 0; k < rule_.nodes.size(); ++k) r += rule_.weights[k] * (increment(rule_.nodes[k]) - g0);
      r_sum.add(r);
    }
    const double delta_u = u_.value(empirical_from_samples(dim_, {samples.begin(), samples.end()})) - base_value_;
    return finish(delta_u, q_sum.value(), r_sum.value(), n);
  }

  Functional u_;
  std::size_t dim_;
  QuadratureNodes rule_;
  std::optional<MomentForm> form_;
  std::vector<double> base_integrals_;
  std::optional<DiscreteMeasure> base_;
  double base_value_ = 0.0;
};

inline DecompositionRecord martingale_decomposition(const Functional& u, const SamplerSpec& law,
                                                    std::span<const double> samples,
                                                    const DecompositionOptions& options = {}) {
  return Decomposer(u, law, options).run(samples);
}

// Decompositions for replications r = 0..R-1; replication r uses the samples of run_clt_experiment.
inline std::vector<DecompositionRecord> decompose_replications(const Functional& u, const SamplerSpec& law, std::size_t n,
                                                               std::size_t replications, std::uint64_t seed,
                                                               const DecompositionOptions& options = {},
                                                               unsigned workers = 0,
                                                               StreamTag tag = StreamTag::kCltReplication,
                                                               std::uint32_t block = 0) {
  const Decomposer decomposer(u, law, options);
  std::vector<DecompositionRecord> out(replications);
  parallel_for(replications, workers, [&](std::size_t r) {
    RandomStream rng(seed, tag, static_cast<std::uint32_t>(r), block);
    out[r] = decomposer.run(law.sample_many(rng, n));
  });
  return out;
}

struct ScalingReport {
  std::vector<std::size_t> n_grid;
  std::vector<MeanEstimate> values;
  double slope = 0.0;
  double r2 = 0.0;
  bool vanishing = false;
};

namespace detail {

inline void check_grid(const std::vector<std::size_t>& grid, std::size_t min_points, bool decade) {
  if (grid.size() < min_points) throw std::invalid_argument("N grid needs at least " + std::to_string(min_points) + " values");
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (grid[k] == 0) throw std::invalid_argument("N grid values must be positive");
    if (k > 0 && grid[k] <= grid[k - 1]) throw std::invalid_argument("N grid must be strictly increasing");
  }
  if (decade && static_cast<double>(grid.back()) < 10.0 * static_cast<double>(grid.front()) * (1.0 - 1e-12)) {
    throw std::invalid_argument("N grid must span at least one decade");
  }
}

inline ScalingReport fit_scaling(std::vector<std::size_t> grid, std::vector<MeanEstimate> values) {
  ScalingReport out;
  out.n_grid = std::move(grid);
  out.values = std::move(values);
  const bool all_zero =
      std::all_of(out.values.begin(), out.values.end(), [](const MeanEstimate& v) { return v.mean == 0.0; });
  if (all_zero) {
    out.vanishing = true;
    out.slope = -std::numeric_limits<double>::infinity();
    out.r2 = 1.0;
    return out;
  }
  std::vector<double> xs, ys;
  for (std::size_t k = 0; k < out.n_grid.size(); ++k) {
    if (out.values[k].mean <= 0.0) throw NumericError("scaling statistic vanished at some but not all sample sizes");
    xs.push_back(static_cast<double>(out.n_grid[k]));
    ys.push_back(out.values[k].mean);
  }
  const auto fit = loglog_slope(xs, ys);
  out.slope = fit.slope;
  out.r2 = fit.r2;
  return out;
}

// Mean of stat(sample of size N) over replications, for each N in the grid.
template <class Statistic>
std::vector<MeanEstimate> grid_means(const SamplerSpec& law, const std::vector<std::size_t>& grid, std::size_t replications,
                                     std::uint64_t seed, unsigned workers, Statistic&& stat) {
  std::vector<MeanEstimate> out;
  for (std::size_t n : grid) {
    std::vector<double> values(replications);
    parallel_for(replications, workers, [&](std::size_t r) {
      RandomStream rng(seed, StreamTag::kScaling, static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(n));
      values[r] = stat(n, law.sample_many(rng, n));
    });
    out.push_back(mean_with_error(values));
  }
  return out;
}

}  // namespace detail

// E|R_N| on each grid point and the least-squares slope of log E|R_N| against log N.
inline ScalingReport remainder_scaling(const Functional& u, const SamplerSpec& law, const std::vector<std::size_t>& n_grid,
                                       std::size_t replications, std::uint64_t seed,
                                       const DecompositionOptions& options = {}, unsigned workers = 0) {
  detail::check_grid(n_grid, 4, true);
  const Decomposer decomposer(u, law, options);
  auto values = detail::grid_means(law, n_grid, replications, seed, workers, [&](std::size_t, const std::vector<double>& x) {
    return std::abs(decomposer.run(x).r_n);
  });
  return detail::fit_scaling(n_grid, std::move(values));
}

struct BoundednessReport {
  std::vector<std::size_t> n_grid;
  std::vector<MeanEstimate> values;
  double max_min_ratio = 0.0;
};

namespace detail {

inline BoundednessReport boundedness(std::vector<std::size_t> grid, std::vector<MeanEstimate> values) {
  BoundednessReport out{std::move(grid), std::move(values), 0.0};
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& v : out.values) {
    lo = std::min(lo, v.mean);
    hi = std::max(hi, v.mean);
  }
  out.max_min_ratio = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  return out;
}

}  // namespace detail

// sqrt(N) E|U(m^N) - U(m0)| along the grid.
inline BoundednessReport sqrtn_l1_check(const Functional& u, const SamplerSpec& law, const std::vector<std::size_t>& n_grid,
                                        std::size_t replications, std::uint64_t seed, const CltOptions& options = {}) {
  detail::check_grid(n_grid, 2, false);
  const double ref = reference_value(u, law, options).value;
  auto values = detail::grid_means(law, n_grid, replications, seed, options.workers,
                                   [&](std::size_t n, const std::vector<double>& x) {
                                     return std::sqrt(static_cast<double>(n)) *
                                            std::abs(u.value(empirical_from_samples(law.dim(), x)) - ref);
                                   });
  return detail::boundedness(n_grid, std::move(values));
}

// N^2 E|U(m^N) - U(m0)|^4 along the grid.
inline BoundednessReport fourth_moment_scaled(const Functional& u, const SamplerSpec& law,
                                              const std::vector<std::size_t>& n_grid, std::size_t replications,
                                              std::uint64_t seed, const CltOptions& options = {}) {
  detail::check_grid(n_grid, 2, false);
  const double ref = reference_value(u, law, options).value;
  auto values = detail::grid_means(law, n_grid, replications, seed, options.workers,
                                   [&](std::size_t n, const std::vector<double>& x) {
                                     const double d = u.value(empirical_from_samples(law.dim(), x)) - ref;
                                     const double nd = static_cast<double>(n);
                                     return nd * nd * d * d * d * d;
                                   });
  return detail::boundedness(n_grid, std::move(values));
}

// Regresses X_{N,i} on (1, running mean of the first coordinate of zeta_1..zeta_{i-1}, zeta_{i-1})
// at a few positions i per replication; under the martingale property every coefficient is zero.
inline WaldResult martingale_increment_test(const Functional& u, const SamplerSpec& law, std::size_t n,
                                            std::size_t replications, std::uint64_t seed,
                                            const DecompositionOptions& options = {}, unsigned workers = 0) {
  if (n < 8) throw std::invalid_argument("martingale test needs N >= 8");
  const Decomposer decomposer(u, law, options);
  const std::vector<std::size_t> positions = {2, n / 4, n / 2, 3 * n / 4, n};
  const std::size_t p = positions.size(), d = law.dim();
  Matrix features(replications * p, 3);
  std::vector<double> response(replications * p);
  parallel_for(replications, workers, [&](std::size_t r) {
    RandomStream rng(seed, StreamTag::kCltReplication, static_cast<std::uint32_t>(r), 1);
    const auto x = law.sample_many(rng, n);
    std::vector<double> inc;
    decomposer.run(x, &inc);
    for (std::size_t k = 0; k < p; ++k) {
      const std::size_t i = positions[k];
      double mean = 0.0;
      for (std::size_t j = 0; j + 1 < i; ++j) mean += x[j * d];
      mean /= static_cast<double>(i - 1);
      const std::size_t row = r * p + k;
      features(row, 0) = 1.0;
      features(row, 1) = mean;
      features(row, 2) = x[(i - 2) * d];
      response[row] = inc[i - 1];
    }
  });
  return wald_zero_test(features, response);
}

}  // namespace mfclt
