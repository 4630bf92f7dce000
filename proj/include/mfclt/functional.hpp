#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "measure.hpp"
#include "quadrature.hpp"
#include "rng.hpp"

namespace mfclt {

// Scalar function of one point in R^d, or of several points stored back to back.
using PointFunction = std::function<double(std::span<const double>)>;
// A derivative of order j frozen at a measure; takes y_1..y_j back to back.
using BoundDerivative = std::function<double(std::span<const double>)>;
// Integrand that also depends on the measure, with its derivative in the measure.
using MeasureIntegrand = std::function<double(std::span<const double>, const DiscreteMeasure&)>;
using MeasureIntegrandDerivative =
    std::function<double(std::span<const double>, const DiscreteMeasure&, std::span<const double>)>;

// F : R^q -> R with derivatives. Univariate functions may carry F', F'', F''', ...
struct OuterFunction {
  std::size_t arity = 1;
  std::function<double(std::span<const double>)> value;
  std::function<void(std::span<const double>, std::span<double>)> gradient;
  std::function<void(std::span<const double>, std::span<double>)> hessian;
  std::vector<std::function<double(double)>> derivatives;

  static OuterFunction univariate(std::function<double(double)> f, std::vector<std::function<double(double)>> derivs) {
    if (derivs.empty()) throw std::invalid_argument("outer function needs at least its first derivative");
    OuterFunction out;
    out.arity = 1;
    out.value = [f](std::span<const double> t) { return f(t[0]); };
    out.gradient = [d1 = derivs[0]](std::span<const double> t, std::span<double> g) { g[0] = d1(t[0]); };
    if (derivs.size() >= 2) {
      out.hessian = [d2 = derivs[1]](std::span<const double> t, std::span<double> h) { h[0] = d2(t[0]); };
    }
    out.derivatives = std::move(derivs);
    return out;
  }

  static OuterFunction multivariate(std::size_t arity, std::function<double(std::span<const double>)> value,
                                    std::function<void(std::span<const double>, std::span<double>)> gradient,
                                    std::function<void(std::span<const double>, std::span<double>)> hessian = {}) {
    if (arity == 0) throw std::invalid_argument("outer function arity must be positive");
    OuterFunction out;
    out.arity = arity;
    out.value = std::move(value);
    out.gradient = std::move(gradient);
    out.hessian = std::move(hessian);
    return out;
  }

  int max_order() const {
    if (arity == 1 && !derivatives.empty()) return static_cast<int>(derivatives.size());
    return hessian ? 2 : 1;
  }
};

// U(mu) = H(int G_1 dmu, ..., int G_q dmu): value and first derivative depend on mu only
// through q integrals. Lets engines update the integrals incrementally.
struct MomentForm {
  std::vector<PointFunction> integrands;
  std::function<double(std::span<const double>)> outer;
  std::function<void(std::span<const double>, std::span<double>)> gradient;
};

// Quantile node data: level, density and (optionally) the CDF of the reference law.
struct QuantileSpec {
  double level = 0.5;
  std::function<double(double)> density;
  std::function<double(double)> cdf;
};

inline constexpr int kUnboundedOrder = 64;

class FunctionalNode {
 public:
  virtual ~FunctionalNode() = default;
  virtual std::size_t dim() const = 0;
  virtual double value(const DiscreteMeasure& mu) const = 0;
  virtual int max_order() const = 0;
  virtual BoundDerivative bind(int order, const DiscreteMeasure& mu) const = 0;
  virtual std::string describe() const = 0;
  virtual std::optional<MomentForm> moment_form() const { return std::nullopt; }
  // Exponent of the evaluation cost in the number of atoms.
  virtual int evaluation_degree() const { return 1; }
  virtual const QuantileSpec* quantile_spec() const { return nullptr; }
};

namespace detail {

inline void check_dim(std::size_t expected, const DiscreteMeasure& mu) {
  if (mu.dim() != expected) {
    throw std::invalid_argument("dimension mismatch: functional on R^" + std::to_string(expected) + ", measure on R^" +
                                std::to_string(mu.dim()));
  }
}

inline void check_order(int order, int max_order) {
  if (order < 1 || order > max_order) {
    throw std::invalid_argument("unsupported derivative order " + std::to_string(order) + " (node supports up to " +
                                std::to_string(max_order) + ")");
  }
}

// Visits every n-tuple of atoms with its product weight; buffer holds the points back to back.
template <class Visit>
void for_each_tuple(const DiscreteMeasure& mu, std::size_t n, std::vector<double>& buffer, std::size_t offset,
                    Visit&& visit) {
  const std::size_t d = mu.dim();
  if (n == 0) {
    visit(1.0);
    return;
  }
  std::vector<std::size_t> idx(n, 0);
  const std::size_t atoms = mu.size();
  for (;;) {
    double w = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      w *= mu.weight(idx[k]);
      const auto p = mu.point(idx[k]);
      std::copy(p.begin(), p.end(), buffer.begin() + static_cast<std::ptrdiff_t>(offset + k * d));
    }
    visit(w);
    std::size_t k = n;
    while (k > 0) {
      --k;
      if (++idx[k] < atoms) break;
      idx[k] = 0;
      if (k == 0) return;
    }
  }
}

inline double falling_factorial(std::size_t n, std::size_t j) {
  double f = 1.0;
  for (std::size_t k = 0; k < j; ++k) f *= static_cast<double>(n - k);
  return f;
}

class LinearNode final : public FunctionalNode {
 public:
  LinearNode(std::size_t dim, PointFunction phi, std::string name)
      : dim_(dim), phi_(std::move(phi)), name_(std::move(name)) {}
  std::size_t dim() const override { return dim_; }
  double value(const DiscreteMeasure& mu) const override {
    check_dim(dim_, mu);
    return mu.integrate(phi_);
  }
  int max_order() const override { return kUnboundedOrder; }
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    check_order(order, max_order());
    check_dim(dim_, mu);
    if (order > 1) return [](std::span<const double>) { return 0.0; };
    const double at_origin = phi_(std::vector<double>(dim_, 0.0));
    return [phi = phi_, at_origin](std::span<const double> y) { return phi(y) - at_origin; };
  }
  std::string describe() const override { return name_; }
  std::optional<MomentForm> moment_form() const override {
    return MomentForm{{phi_},
                      [](std::span<const double> t) { return t[0]; },
                      [](std::span<const double>, std::span<double> g) { g[0] = 1.0; }};
  }

 private:
  std::size_t dim_;
  PointFunction phi_;
  std::string name_;
};

class SmoothOfLinearNode final : public FunctionalNode {
 public:
  SmoothOfLinearNode(std::size_t dim, OuterFunction outer, std::vector<PointFunction> inner, std::string name)
      : dim_(dim), outer_(std::move(outer)), inner_(std::move(inner)), name_(std::move(name)) {
    if (inner_.size() != outer_.arity) throw std::invalid_argument("number of inner integrands must equal outer arity");
    const std::vector<double> origin(dim_, 0.0);
    for (const auto& g : inner_) inner_at_origin_.push_back(g(origin));
  }
  std::size_t dim() const override { return dim_; }
  double value(const DiscreteMeasure& mu) const override {
    check_dim(dim_, mu);
    const auto t = integrals(mu);
    return outer_.value(t);
  }
  int max_order() const override { return outer_.max_order(); }
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    check_order(order, max_order());
    check_dim(dim_, mu);
    const std::size_t q = inner_.size();
    const auto t = integrals(mu);
    auto increments = [inner = inner_, g0 = inner_at_origin_](std::span<const double> y, std::vector<double>& out) {
      for (std::size_t k = 0; k < inner.size(); ++k) out[k] = inner[k](y) - g0[k];
    };
    if (order == 1) {
      std::vector<double> grad(q);
      outer_.gradient(t, grad);
      return [grad, increments, q](std::span<const double> y) {
        std::vector<double> dg(q);
        increments(y, dg);
        double s = 0.0;
        for (std::size_t k = 0; k < q; ++k) s += grad[k] * dg[k];
        return s;
      };
    }
    if (order == 2 && !(q == 1 && outer_.derivatives.size() >= 2)) {
      std::vector<double> hess(q * q);
      outer_.hessian(t, hess);
      const std::size_t d = dim_;
      return [hess, increments, q, d](std::span<const double> ys) {
        std::vector<double> a(q), b(q);
        increments(ys.subspan(0, d), a);
        increments(ys.subspan(d, d), b);
        double s = 0.0;
        for (std::size_t k = 0; k < q; ++k)
          for (std::size_t l = 0; l < q; ++l) s += hess[k * q + l] * a[k] * b[l];
        return s;
      };
    }
    // Univariate outer function: F^{(j)}(t) prod_i (G(y_i) - G(0)).
    const double coefficient = outer_.derivatives[static_cast<std::size_t>(order - 1)](t[0]);
    const std::size_t d = dim_;
    return [coefficient, g = inner_[0], g0 = inner_at_origin_[0], order, d](std::span<const double> ys) {
      double s = coefficient;
      for (int i = 0; i < order; ++i) s *= g(ys.subspan(static_cast<std::size_t>(i) * d, d)) - g0;
      return s;
    };
  }
  std::string describe() const override { return name_; }
  std::optional<MomentForm> moment_form() const override {
    return MomentForm{inner_, outer_.value, outer_.gradient};
  }

 private:
  std::vector<double> integrals(const DiscreteMeasure& mu) const {
    std::vector<double> t(inner_.size(), 0.0);
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const auto p = mu.point(i);
      for (std::size_t k = 0; k < inner_.size(); ++k) t[k] += mu.weight(i) * inner_[k](p);
    }
    return t;
  }

  std::size_t dim_;
  OuterFunction outer_;
  std::vector<PointFunction> inner_;
  std::vector<double> inner_at_origin_;
  std::string name_;
};

// V-statistic form: sum over all n-tuples with replacement.
class UStatisticNode final : public FunctionalNode {
 public:
  UStatisticNode(std::size_t dim, std::size_t n, PointFunction phi, std::string name)
      : dim_(dim), n_(n), phi_(std::move(phi)), name_(std::move(name)) {
    if (n_ == 0) throw std::invalid_argument("U-statistic order must be positive");
  }
  std::size_t dim() const override { return dim_; }
  double value(const DiscreteMeasure& mu) const override {
    check_dim(dim_, mu);
    std::vector<double> buffer(n_ * dim_);
    double s = 0.0;
    for_each_tuple(mu, n_, buffer, 0, [&](double w) { s += w * phi_(buffer); });
    return s;
  }
  int max_order() const override { return kUnboundedOrder; }
  int evaluation_degree() const override { return static_cast<int>(n_); }

  // (n!/(n-j)!) int d_j phi(y_1..y_j, x_{j+1}..x_n) dmu^{n-j}, where d_j phi is the
  // alternating sum over subsets J of {1..j} with the y's outside J set to the origin.
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    check_order(order, max_order());
    check_dim(dim_, mu);
    const auto j = static_cast<std::size_t>(order);
    if (j > n_) return [](std::span<const double>) { return 0.0; };
    const double factor = falling_factorial(n_, j);
    const std::size_t d = dim_;
    const std::size_t n = n_;
    // The subset J = {} contributes a constant; fold it in once.
    std::vector<double> buffer(n * d, 0.0);
    double empty_term = 0.0;
    for_each_tuple(mu, n - j, buffer, j * d, [&](double w) { empty_term += w * phi_(buffer); });
    if (j % 2 == 1) empty_term = -empty_term;
    return [mu, phi = phi_, factor, j, d, n, empty_term](std::span<const double> ys) {
      std::vector<double> buf(n * d, 0.0);
      double total = empty_term;
      for (std::size_t subset = 1; subset < (std::size_t{1} << j); ++subset) {
        std::size_t members = 0;
        for (std::size_t i = 0; i < j; ++i) {
          const bool in = (subset >> i) & 1u;
          members += in;
          for (std::size_t k = 0; k < d; ++k) buf[i * d + k] = in ? ys[i * d + k] : 0.0;
        }
        const double sign = ((j - members) % 2 == 0) ? 1.0 : -1.0;
        double s = 0.0;
        for_each_tuple(mu, n - j, buf, j * d, [&](double w) { s += w * phi(buf); });
        total += sign * s;
      }
      return factor * total;
    };
  }
  std::string describe() const override { return name_; }

 private:
  std::size_t dim_;
  std::size_t n_;
  PointFunction phi_;
  std::string name_;
};

}  // namespace detail

// inf{x : mu((-inf, x]) >= v} for a one-dimensional measure.
inline double quantile(const DiscreteMeasure& mu, double v) {
  if (mu.dim() != 1) throw std::invalid_argument("quantile needs a one-dimensional measure");
  if (!(v > 0.0 && v < 1.0)) throw std::invalid_argument("quantile level must lie in (0,1)");
  std::vector<std::pair<double, double>> atoms(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) atoms[i] = {mu.point(i)[0], mu.weight(i)};
  std::sort(atoms.begin(), atoms.end());
  // Cumulative sums carry rounding error; accept a deficit of a few ulps of one.
  const double target = v - 1e-13;
  double cumulative = 0.0;
  for (const auto& [x, w] : atoms) {
    cumulative += w;
    if (cumulative >= target) return x;
  }
  return atoms.back().first;
}

// Generalized inverse of a continuous CDF by bisection.
inline double quantile_from_cdf(const std::function<double(double)>& cdf, double v, double tolerance = 1e-12) {
  if (!(v > 0.0 && v < 1.0)) throw std::invalid_argument("quantile level must lie in (0,1)");
  double lo = -1.0, hi = 1.0;
  while (cdf(lo) >= v) lo *= 2.0;
  while (cdf(hi) < v) hi *= 2.0;
  while (hi - lo > tolerance * std::max(1.0, std::abs(lo))) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (cdf(mid) >= v ? hi : lo) = mid;
  }
  return hi;
}

// -(1{y <= q} - 1{0 <= q}) / p0(q): the closed form shifted to vanish at the origin.
inline BoundDerivative quantile_derivative_at(const QuantileSpec& spec, double q) {
  const double inv_density = 1.0 / spec.density(q);
  const double at_origin = 0.0 <= q ? 1.0 : 0.0;
  return [q, inv_density, at_origin](std::span<const double> y) {
    return -((y[0] <= q ? 1.0 : 0.0) - at_origin) * inv_density;
  };
}

namespace detail {

class QuantileNode final : public FunctionalNode {
 public:
  explicit QuantileNode(QuantileSpec spec, std::string name) : spec_(std::move(spec)), name_(std::move(name)) {
    if (!(spec_.level > 0.0 && spec_.level < 1.0)) throw std::invalid_argument("quantile level must lie in (0,1)");
  }
  std::size_t dim() const override { return 1; }
  double value(const DiscreteMeasure& mu) const override { return quantile(mu, spec_.level); }
  int max_order() const override { return 1; }
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    check_order(order, max_order());
    if (!spec_.density) throw std::invalid_argument("quantile derivative needs a density callback");
    return quantile_derivative_at(spec_, quantile(mu, spec_.level));
  }
  std::string describe() const override { return name_; }
  const QuantileSpec* quantile_spec() const override { return &spec_; }

 private:
  QuantileSpec spec_;
  std::string name_;
};

// U(m) = int phi(x_1..x_n, m) m(dx_1)...m(dx_n).
class NestedIntegrandNode final : public FunctionalNode {
 public:
  NestedIntegrandNode(std::size_t dim, std::size_t n, MeasureIntegrand phi, MeasureIntegrandDerivative dphi,
                      std::string name)
      : dim_(dim), n_(n), phi_(std::move(phi)), dphi_(std::move(dphi)), name_(std::move(name)) {
    if (n_ == 0) throw std::invalid_argument("nested integrand needs at least one integration variable");
  }
  std::size_t dim() const override { return dim_; }
  double value(const DiscreteMeasure& mu) const override {
    check_dim(dim_, mu);
    std::vector<double> buffer(n_ * dim_);
    double s = 0.0;
    for_each_tuple(mu, n_, buffer, 0, [&](double w) { s += w * phi_(buffer, mu); });
    return s;
  }
  int max_order() const override { return 1; }
  int evaluation_degree() const override { return static_cast<int>(n_) + 1; }
  // int [dphi(x, mu, y) + n (phi(y, x_2..x_n, mu) - phi(0, x_2..x_n, mu))] mu^{n}(dx).
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    check_order(order, max_order());
    check_dim(dim_, mu);
    return [mu, phi = phi_, dphi = dphi_, n = n_, d = dim_](std::span<const double> y) {
      const std::vector<double> origin(d, 0.0);
      std::vector<double> buffer(n * d);
      double s = 0.0;
      for_each_tuple(mu, n, buffer, 0, [&](double w) { s += w * (dphi(buffer, mu, y) - dphi(buffer, mu, origin)); });
      double t = 0.0;
      for_each_tuple(mu, n - 1, buffer, d, [&](double w) {
        std::copy(y.begin(), y.end(), buffer.begin());
        const double at_y = phi(buffer, mu);
        std::fill_n(buffer.begin(), d, 0.0);
        t += w * (at_y - phi(buffer, mu));
      });
      return s + static_cast<double>(n) * t;
    };
  }
  std::string describe() const override { return name_; }

 private:
  std::size_t dim_;
  std::size_t n_;
  MeasureIntegrand phi_;
  MeasureIntegrandDerivative dphi_;
  std::string name_;
};

}  // namespace detail

// Nonnegative weights on points; not necessarily a probability measure.
struct QuadratureRule {
  std::size_t dim = 1;
  std::vector<double> points;
  std::vector<double> weights;

  static QuadratureRule from_measure(const DiscreteMeasure& mu) {
    return {mu.dim(), {mu.coordinates().begin(), mu.coordinates().end()}, {mu.weights().begin(), mu.weights().end()}};
  }
  std::span<const double> point(std::size_t i) const { return {points.data() + i * dim, dim}; }
};

namespace detail {

// U(m) = int phi(x, m) lambda(dx) for a fixed lambda.
class ExternalIntegralNode final : public FunctionalNode {
 public:
  ExternalIntegralNode(MeasureIntegrand phi, MeasureIntegrandDerivative dphi, QuadratureRule lambda, std::string name)
      : phi_(std::move(phi)), dphi_(std::move(dphi)), lambda_(std::move(lambda)), name_(std::move(name)) {
    if (lambda_.points.size() != lambda_.weights.size() * lambda_.dim) throw std::invalid_argument("bad quadrature rule");
  }
  std::size_t dim() const override { return lambda_.dim; }
  double value(const DiscreteMeasure& mu) const override {
    check_dim(lambda_.dim, mu);
    double s = 0.0;
    for (std::size_t k = 0; k < lambda_.weights.size(); ++k) s += lambda_.weights[k] * phi_(lambda_.point(k), mu);
    return s;
  }
  int max_order() const override { return 1; }
  int evaluation_degree() const override { return 2; }
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    check_order(order, max_order());
    check_dim(lambda_.dim, mu);
    return [mu, dphi = dphi_, lambda = lambda_](std::span<const double> y) {
      const std::vector<double> origin(lambda.dim, 0.0);
      double s = 0.0;
      for (std::size_t k = 0; k < lambda.weights.size(); ++k) {
        s += lambda.weights[k] * (dphi(lambda.point(k), mu, y) - dphi(lambda.point(k), mu, origin));
      }
      return s;
    };
  }
  std::string describe() const override { return name_; }

 private:
  MeasureIntegrand phi_;
  MeasureIntegrandDerivative dphi_;
  QuadratureRule lambda_;
  std::string name_;
};

}  // namespace detail

class DerivativeField;

// Immutable handle to a functional expression.
class Functional {
 public:
  explicit Functional(std::shared_ptr<const FunctionalNode> node) : node_(std::move(node)) {
    if (!node_) throw std::invalid_argument("null functional node");
  }

  static Functional linear(std::size_t dim, PointFunction phi, std::string name = "linear") {
    return Functional(std::make_shared<detail::LinearNode>(dim, std::move(phi), std::move(name)));
  }
  static Functional smooth_of_linear(std::size_t dim, OuterFunction outer, std::vector<PointFunction> inner,
                                     std::string name = "smooth-of-linear") {
    return Functional(
        std::make_shared<detail::SmoothOfLinearNode>(dim, std::move(outer), std::move(inner), std::move(name)));
  }
  // With symmetrize set, phi is replaced by its average over argument permutations.
  static Functional ustatistic(std::size_t dim, std::size_t n, PointFunction phi, std::string name = "ustatistic",
                               bool symmetrize = false) {
    if (symmetrize) phi = symmetrized(dim, n, std::move(phi));
    return Functional(std::make_shared<detail::UStatisticNode>(dim, n, std::move(phi), std::move(name)));
  }
  static Functional quantile(QuantileSpec spec, std::string name = "quantile") {
    return Functional(std::make_shared<detail::QuantileNode>(std::move(spec), std::move(name)));
  }
  static Functional nested(std::size_t dim, std::size_t n, MeasureIntegrand phi, MeasureIntegrandDerivative dphi,
                           std::string name = "nested") {
    return Functional(
        std::make_shared<detail::NestedIntegrandNode>(dim, n, std::move(phi), std::move(dphi), std::move(name)));
  }
  static Functional external(MeasureIntegrand phi, MeasureIntegrandDerivative dphi, QuadratureRule lambda,
                             std::string name = "external") {
    return Functional(
        std::make_shared<detail::ExternalIntegralNode>(std::move(phi), std::move(dphi), std::move(lambda), std::move(name)));
  }

  std::size_t dim() const { return node_->dim(); }
  double value(const DiscreteMeasure& mu) const { return node_->value(mu); }
  double operator()(const DiscreteMeasure& mu) const { return value(mu); }
  int max_order() const { return node_->max_order(); }
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const { return node_->bind(order, mu); }
  std::string describe() const { return node_->describe(); }
  std::optional<MomentForm> moment_form() const { return node_->moment_form(); }
  int evaluation_degree() const { return node_->evaluation_degree(); }
  const QuantileSpec* quantile_spec() const { return node_->quantile_spec(); }
  const FunctionalNode& node() const { return *node_; }
  DerivativeField derivative(int order) const;

 private:
  static PointFunction symmetrized(std::size_t dim, std::size_t n, PointFunction phi) {
    std::vector<std::vector<std::size_t>> perms;
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    do perms.push_back(p);
    while (std::next_permutation(p.begin(), p.end()));
    return [phi = std::move(phi), perms, dim, n](std::span<const double> xs) {
      std::vector<double> buf(n * dim);
      double s = 0.0;
      for (const auto& perm : perms) {
        for (std::size_t i = 0; i < n; ++i)
          std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>(perm[i] * dim), dim,
                      buf.begin() + static_cast<std::ptrdiff_t>(i * dim));
        s += phi(buf);
      }
      return s / static_cast<double>(perms.size());
    };
  }

  std::shared_ptr<const FunctionalNode> node_;
};

namespace detail {

inline std::string join_names(const Functional& a, const char* op, const Functional& b) {
  return "(" + a.describe() + " " + op + " " + b.describe() + ")";
}

class SumNode final : public FunctionalNode {
 public:
  SumNode(Functional a, Functional b) : a_(std::move(a)), b_(std::move(b)) {
    if (a_.dim() != b_.dim()) throw std::invalid_argument("dimension mismatch in sum");
  }
  std::size_t dim() const override { return a_.dim(); }
  double value(const DiscreteMeasure& mu) const override { return a_.value(mu) + b_.value(mu); }
  int max_order() const override { return std::min(a_.max_order(), b_.max_order()); }
  int evaluation_degree() const override { return std::max(a_.evaluation_degree(), b_.evaluation_degree()); }
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    check_order(order, max_order());
    return [fa = a_.bind(order, mu), fb = b_.bind(order, mu)](std::span<const double> ys) { return fa(ys) + fb(ys); };
  }
  std::string describe() const override { return join_names(a_, "+", b_); }
  std::optional<MomentForm> moment_form() const override {
    auto fa = a_.moment_form();
    auto fb = b_.moment_form();
    if (!fa || !fb) return std::nullopt;
    const std::size_t qa = fa->integrands.size();
    MomentForm out;
    out.integrands = fa->integrands;
    out.integrands.insert(out.integrands.end(), fb->integrands.begin(), fb->integrands.end());
    out.outer = [ha = fa->outer, hb = fb->outer, qa](std::span<const double> t) {
      return ha(t.first(qa)) + hb(t.subspan(qa));
    };
    out.gradient = [ga = fa->gradient, gb = fb->gradient, qa](std::span<const double> t, std::span<double> g) {
      ga(t.first(qa), g.first(qa));
      gb(t.subspan(qa), g.subspan(qa));
    };
    return out;
  }

 private:
  Functional a_, b_;
};

class ScaleNode final : public FunctionalNode {
 public:
  ScaleNode(double c, Functional a) : c_(c), a_(std::move(a)) {}
  std::size_t dim() const override { return a_.dim(); }
  double value(const DiscreteMeasure& mu) const override { return c_ * a_.value(mu); }
  int max_order() const override { return a_.max_order(); }
  int evaluation_degree() const override { return a_.evaluation_degree(); }
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    return [c = c_, f = a_.bind(order, mu)](std::span<const double> ys) { return c * f(ys); };
  }
  std::string describe() const override { return detail::format_double(c_) + "*" + a_.describe(); }
  std::optional<MomentForm> moment_form() const override {
    auto fa = a_.moment_form();
    if (!fa) return std::nullopt;
    const std::size_t q = fa->integrands.size();
    fa->outer = [c = c_, h = fa->outer](std::span<const double> t) { return c * h(t); };
    fa->gradient = [c = c_, g = fa->gradient, q](std::span<const double> t, std::span<double> out) {
      g(t, out);
      for (std::size_t k = 0; k < q; ++k) out[k] *= c;
    };
    return fa;
  }

 private:
  double c_;
  Functional a_;
};

class ProductNode final : public FunctionalNode {
 public:
  ProductNode(Functional a, Functional b) : a_(std::move(a)), b_(std::move(b)) {
    if (a_.dim() != b_.dim()) throw std::invalid_argument("dimension mismatch in product");
  }
  std::size_t dim() const override { return a_.dim(); }
  double value(const DiscreteMeasure& mu) const override { return a_.value(mu) * b_.value(mu); }
  int max_order() const override { return std::min({2, a_.max_order(), b_.max_order()}); }
  int evaluation_degree() const override { return std::max(a_.evaluation_degree(), b_.evaluation_degree()); }
  BoundDerivative bind(int order, const DiscreteMeasure& mu) const override {
    check_order(order, max_order());
    const double va = a_.value(mu), vb = b_.value(mu);
    auto da = a_.bind(1, mu);
    auto db = b_.bind(1, mu);
    if (order == 1) {
      return [va, vb, da, db](std::span<const double> y) { return va * db(y) + vb * da(y); };
    }
    const std::size_t d = dim();
    return [va, vb, da, db, da2 = a_.bind(2, mu), db2 = b_.bind(2, mu), d](std::span<const double> ys) {
      const auto y1 = ys.subspan(0, d), y2 = ys.subspan(d, d);
      return va * db2(ys) + vb * da2(ys) + da(y1) * db(y2) + da(y2) * db(y1);
    };
  }
  std::string describe() const override { return join_names(a_, "*", b_); }
  std::optional<MomentForm> moment_form() const override {
    auto fa = a_.moment_form();
    auto fb = b_.moment_form();
    if (!fa || !fb) return std::nullopt;
    const std::size_t qa = fa->integrands.size(), qb = fb->integrands.size();
    MomentForm out;
    out.integrands = fa->integrands;
    out.integrands.insert(out.integrands.end(), fb->integrands.begin(), fb->integrands.end());
    out.outer = [ha = fa->outer, hb = fb->outer, qa](std::span<const double> t) {
      return ha(t.first(qa)) * hb(t.subspan(qa));
    };
    out.gradient = [ha = fa->outer, hb = fb->outer, ga = fa->gradient, gb = fb->gradient, qa, qb](
                       std::span<const double> t, std::span<double> g) {
      const double va = ha(t.first(qa)), vb = hb(t.subspan(qa));
      ga(t.first(qa), g.first(qa));
      gb(t.subspan(qa), g.subspan(qa));
      for (std::size_t k = 0; k < qa; ++k) g[k] *= vb;
      for (std::size_t k = 0; k < qb; ++k) g[qa + k] *= va;
    };
    return out;
  }

 private:
  Functional a_, b_;
};

}  // namespace detail

inline Functional operator+(const Functional& a, const Functional& b) {
  return Functional(std::make_shared<detail::SumNode>(a, b));
}
inline Functional operator*(double c, const Functional& a) { return Functional(std::make_shared<detail::ScaleNode>(c, a)); }
inline Functional operator*(const Functional& a, const Functional& b) {
  return Functional(std::make_shared<detail::ProductNode>(a, b));
}
inline Functional operator-(const Functional& a, const Functional& b) { return a + (-1.0) * b; }

// j-th linear functional derivative, normalized to vanish when any argument is the origin.
class DerivativeField {
 public:
  DerivativeField(Functional u, int order) : u_(std::move(u)), order_(order) {
    detail::check_order(order_, u_.max_order());
  }
  int order() const { return order_; }
  BoundDerivative bind(const DiscreteMeasure& mu) const { return u_.bind(order_, mu); }
  // ys holds y_1..y_order back to back.
  double eval(const DiscreteMeasure& mu, std::span<const double> ys) const {
    if (ys.size() != static_cast<std::size_t>(order_) * u_.dim()) throw std::invalid_argument("wrong number of coordinates");
    return bind(mu)(ys);
  }
  double operator()(const DiscreteMeasure& mu, std::span<const double> y) const { return eval(mu, y); }
  double operator()(const DiscreteMeasure& mu, std::span<const double> y1, std::span<const double> y2) const {
    std::vector<double> ys(y1.begin(), y1.end());
    ys.insert(ys.end(), y2.begin(), y2.end());
    return eval(mu, ys);
  }

 private:
  Functional u_;
  int order_;
};

inline DerivativeField Functional::derivative(int order) const { return DerivativeField(*this, order); }

inline double evaluate(const Functional& u, const DiscreteMeasure& mu) { return u.value(mu); }
inline DerivativeField lfd(const Functional& u, int order = 1) { return u.derivative(order); }

// int f(y) (nu - mu)(dy) for a bound first derivative f.
inline double integrate_difference(const BoundDerivative& f, const DiscreteMeasure& nu, const DiscreteMeasure& mu) {
  return nu.integrate(f) - mu.integrate(f);
}

// int dU/dm(mu, y) (nu - mu)(dy).
inline double symbolic_directional(const Functional& u, const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  return integrate_difference(u.bind(1, mu), nu, mu);
}

namespace detail {

// Richardson table over step sizes eps, eps/2, ..., eps/2^levels for a first-order error expansion.
template <class Slope>
double richardson(Slope&& slope, double epsilon, int levels) {
  std::vector<double> table;
  for (int k = 0; k <= levels; ++k) table.push_back(slope(epsilon / std::pow(2.0, k)));
  for (int m = 1; m <= levels; ++m) {
    const double factor = std::pow(2.0, m);
    for (std::size_t k = 0; k + 1 < table.size(); ++k) {
      table[k] = (factor * table[k + 1] - table[k]) / (factor - 1.0);
    }
    table.pop_back();
  }
  return table.front();
}

}  // namespace detail

// One-sided slope (U(mu + eps (nu - mu)) - U(mu)) / eps, optionally Richardson-extrapolated.
inline double gateaux_numeric(const Functional& u, const DiscreteMeasure& mu, const DiscreteMeasure& nu,
                              double epsilon = 1e-3, int richardson_levels = 0) {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw std::invalid_argument("Gateaux step must lie in (0,1]");
  const double base = u.value(mu);
  auto slope = [&](double e) { return (u.value(interpolate(mu, nu, e)) - base) / e; };
  return detail::richardson(slope, epsilon, richardson_levels);
}

// Gateaux slope of the quantile at the continuous reference law in direction nu, solving
// (1-e) F0(x) + e F_nu(x) = v by bisection to adjacent doubles.
inline double quantile_gateaux_numeric(const QuantileSpec& spec, const DiscreteMeasure& nu, double epsilon = 1e-3,
                                       int richardson_levels = 0) {
  if (!spec.cdf) throw std::invalid_argument("quantile Gateaux slope needs the reference CDF");
  auto nu_cdf = [&nu](double x) {
    double c = 0.0;
    for (std::size_t i = 0; i < nu.size(); ++i)
      if (nu.point(i)[0] <= x) c += nu.weight(i);
    return c;
  };
  const double q = quantile_from_cdf(spec.cdf, spec.level, 1e-15);
  auto root = [&](double e) {
    return quantile_from_cdf([&](double x) { return (1.0 - e) * spec.cdf(x) + e * nu_cdf(x); }, spec.level, 1e-15);
  };
  auto slope = [&](double e) { return (root(e) - q) / e; };
  return detail::richardson(slope, epsilon, richardson_levels);
}

// int dU/dm(m0, y) (nu - m0)(dy) for the quantile at its continuous reference law.
inline double quantile_symbolic_directional(const QuantileSpec& spec, const DiscreteMeasure& nu) {
  if (!spec.cdf || !spec.density) throw std::invalid_argument("quantile derivative needs density and CDF callbacks");
  const double q = quantile_from_cdf(spec.cdf, spec.level, 1e-15);
  double below = 0.0;
  for (std::size_t i = 0; i < nu.size(); ++i)
    if (nu.point(i)[0] <= q) below += nu.weight(i);
  return -(below - spec.level) / spec.density(q);
}

// |U(m') - U(m) - int_0^1 int dU/dm(m_s, y)(m' - m)(dy) ds| with Gauss-Legendre in s.
inline double finite_difference_identity_check(const Functional& u, const DiscreteMeasure& m, const DiscreteMeasure& m2,
                                               std::size_t quad_points) {
  const auto rule = gauss_legendre_unit(quad_points);
  double integral = 0.0;
  for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
    const auto ms = interpolate(m, m2, rule.nodes[k]);
    integral += rule.weights[k] * integrate_difference(u.bind(1, ms), m2, m);
  }
  return std::abs(u.value(m2) - u.value(m) - integral);
}

// Largest |d^i U/dm^i(mu, x_1..x_i)| / (1 + sum |x_i|^k + moment(mu, l)^{k/l}) over probes and i = 1..j.
// Tuples are consecutive runs of the probe points, taken cyclically.
inline double growth_class_check(const Functional& u, int j, double k, double ell,
                                 const std::vector<DiscreteMeasure>& probe_measures,
                                 const std::vector<std::vector<double>>& probe_points) {
  if (probe_points.empty() || probe_measures.empty()) throw std::invalid_argument("growth check needs probes");
  const std::size_t d = u.dim();
  double sup = 0.0;
  for (const auto& mu : probe_measures) {
    const double moment_term = std::pow(moment(mu, ell), k / ell);
    for (int order = 1; order <= j; ++order) {
      const auto f = u.bind(order, mu);
      for (std::size_t start = 0; start < probe_points.size(); ++start) {
        std::vector<double> ys;
        double denominator = 1.0 + moment_term;
        for (int i = 0; i < order; ++i) {
          const auto& p = probe_points[(start + static_cast<std::size_t>(i)) % probe_points.size()];
          if (p.size() != d) throw std::invalid_argument("probe point dimension mismatch");
          ys.insert(ys.end(), p.begin(), p.end());
          denominator += std::pow(detail::norm(p), k);
        }
        sup = std::max(sup, std::abs(f(ys)) / denominator);
      }
    }
  }
  return sup;
}

struct CrossCheckReport {
  std::size_t probes = 0;
  // max |symbolic - numeric| / (1 + |symbolic|)
  double max_relative_gap = 0.0;
};

// Symbolic directional derivative against the Richardson-extrapolated Gateaux slope on random
// pairs (mu, nu) with 1-5 atoms in [-2, 2]^d. Quantile functionals are probed at their
// continuous reference law, where the derivative exists; their nu atoms keep a distance of
// 10 eps from the quantile so that the perturbed root does not cross a jump of nu's CDF.
inline CrossCheckReport derivative_crosscheck(const Functional& u, std::size_t probes, std::uint64_t seed,
                                              double epsilon = 1e-3, int richardson_levels = 2) {
  RandomStream rng(seed, StreamTag::kProbe);
  const std::size_t d = u.dim();
  const QuantileSpec* spec = u.quantile_spec();
  if (spec && !spec->cdf) throw std::invalid_argument("quantile cross-check needs the reference CDF");
  const double q = spec ? quantile_from_cdf(spec->cdf, spec->level, 1e-15) : 0.0;
  auto random_measure = [&] {
    const std::size_t atoms = 1 + rng.below(5);
    std::vector<double> x(atoms * d), w(atoms);
    for (double& v : x) {
      do v = rng.uniform(-2.0, 2.0);
      while (spec && std::abs(v - q) < 10.0 * epsilon);
    }
    for (double& v : w) v = rng.uniform() + 0.05;
    return DiscreteMeasure::normalized(d, std::move(x), std::move(w));
  };
  CrossCheckReport report;
  for (std::size_t p = 0; p < probes; ++p) {
    const auto mu = random_measure();
    const auto nu = random_measure();
    double symbolic = 0.0, numeric = 0.0;
    if (spec) {
      symbolic = quantile_symbolic_directional(*spec, nu);
      numeric = quantile_gateaux_numeric(*spec, nu, epsilon, richardson_levels);
    } else {
      symbolic = symbolic_directional(u, mu, nu);
      numeric = gateaux_numeric(u, mu, nu, epsilon, richardson_levels);
    }
    report.max_relative_gap = std::max(report.max_relative_gap, std::abs(symbolic - numeric) / (1.0 + std::abs(symbolic)));
    ++report.probes;
  }
  return report;
}

}  // namespace mfclt
