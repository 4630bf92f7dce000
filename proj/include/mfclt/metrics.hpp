#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "measure.hpp"
#include "rng.hpp"
#include "transport.hpp"

namespace mfclt {

struct MetricKind {
  enum class Tag { WassersteinL, TotalVariation, BoundedWasserstein, WeightedTV };
  Tag tag = Tag::WassersteinL;
  double ell = 1.0;

  static MetricKind wasserstein(double ell) {
    if (!(ell > 0.0)) throw std::invalid_argument("Wasserstein order must be positive");
    return {Tag::WassersteinL, ell};
  }
  static MetricKind total_variation() { return {Tag::TotalVariation, 0.0}; }
  static MetricKind bounded_wasserstein() { return {Tag::BoundedWasserstein, 1.0}; }
  static MetricKind weighted_tv(double ell) {
    if (!(ell >= 0.0)) throw std::invalid_argument("weighted total variation order must be nonnegative");
    return {Tag::WeightedTV, ell};
  }

  // "W:<ell>", "TV", "BW", "WTV:<ell>".
  static MetricKind parse(const std::string& text) {
    if (text == "TV") return total_variation();
    if (text == "BW") return bounded_wasserstein();
    if (text.rfind("W:", 0) == 0) return wasserstein(std::stod(text.substr(2)));
    if (text.rfind("WTV:", 0) == 0) return weighted_tv(std::stod(text.substr(4)));
    throw std::invalid_argument("unknown metric kind '" + text + "' (expected W:<l>, TV, BW or WTV:<l>)");
  }

  std::string describe() const {
    switch (tag) {
      case Tag::WassersteinL: return "W:" + detail::format_double(ell);
      case Tag::TotalVariation: return "TV";
      case Tag::BoundedWasserstein: return "BW";
      case Tag::WeightedTV: return "WTV:" + detail::format_double(ell);
    }
    return "?";
  }
};

struct TransportOptions {
  std::size_t support_cap = 512;
};

namespace detail {

// Signed mass difference mu - nu on the merged union of atoms.
struct SignedAtoms {
  std::vector<double> coords;
  std::vector<double> mass;
};

inline SignedAtoms signed_difference(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  const std::size_t d = mu.dim();
  std::vector<double> coords(mu.coordinates().begin(), mu.coordinates().end());
  coords.insert(coords.end(), nu.coordinates().begin(), nu.coordinates().end());
  std::vector<double> mass(mu.weights().begin(), mu.weights().end());
  for (double w : nu.weights()) mass.push_back(-w);
  std::vector<std::size_t> order(mass.size());
  std::iota(order.begin(), order.end(), 0);
  auto pt = [&](std::size_t i) { return coords.begin() + static_cast<std::ptrdiff_t>(i * d); };
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return std::lexicographical_compare(pt(a), pt(a) + d, pt(b), pt(b) + d); });
  SignedAtoms out;
  for (std::size_t idx : order) {
    if (!out.mass.empty() && std::equal(pt(idx), pt(idx) + d, out.coords.end() - static_cast<std::ptrdiff_t>(d))) {
      out.mass.back() += mass[idx];
    } else {
      out.coords.insert(out.coords.end(), pt(idx), pt(idx) + d);
      out.mass.push_back(mass[idx]);
    }
  }
  return out;
}

// Integral of |F_mu^{-1} - F_nu^{-1}|^ell over (0,1); atoms in one dimension.
inline double quantile_coupling_cost(const DiscreteMeasure& mu, const DiscreteMeasure& nu, double ell) {
  auto sorted = [](const DiscreteMeasure& m) {
    std::vector<std::pair<double, double>> atoms(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) atoms[i] = {m.point(i)[0], m.weight(i)};
    std::sort(atoms.begin(), atoms.end());
    return atoms;
  };
  const auto a = sorted(mu);
  const auto b = sorted(nu);
  std::size_t i = 0, j = 0;
  double left_a = a[0].second, left_b = b[0].second;
  double total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double piece = std::min(left_a, left_b);
    total += piece * std::pow(std::abs(a[i].first - b[j].first), ell);
    left_a -= piece;
    left_b -= piece;
    if (left_a <= 0.0) {
      if (++i < a.size()) left_a = a[i].second;
    }
    if (left_b <= 0.0) {
      if (++j < b.size()) left_b = b[j].second;
    }
    if (i == a.size() || j == b.size()) break;
  }
  return total;
}

template <class Cost>
double transport_cost(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const TransportOptions& options, Cost&& cost) {
  const DiscreteMeasure a = mu.merged();
  const DiscreteMeasure b = nu.merged();
  if (a.size() > options.support_cap || b.size() > options.support_cap) {
    throw std::invalid_argument("support cap exceeded for exact transport: " + std::to_string(a.size()) + " x " +
                                std::to_string(b.size()) + " atoms, cap " + std::to_string(options.support_cap));
  }
  std::vector<double> c(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) c[i * b.size() + j] = cost(detail::distance(a.point(i), b.point(j)));
  }
  std::vector<double> supply(a.weights().begin(), a.weights().end());
  std::vector<double> demand(b.weights().begin(), b.weights().end());
  return std::max(0.0, solve_transport(supply, demand, c).cost);
}

}  // namespace detail

inline double distance(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const MetricKind& kind,
                       const TransportOptions& options = {}) {
  if (mu.dim() != nu.dim()) throw std::invalid_argument("dimension mismatch");
  switch (kind.tag) {
    case MetricKind::Tag::WassersteinL: {
      const double ell = kind.ell;
      if (!(ell > 0.0)) throw std::invalid_argument("Wasserstein order must be positive");
      double cost = 0.0;
      if (mu.dim() == 1 && ell >= 1.0) {
        cost = detail::quantile_coupling_cost(mu, nu, ell);
      } else {
        cost = detail::transport_cost(mu, nu, options, [ell](double r) { return std::pow(r, ell); });
      }
      return ell >= 1.0 ? std::pow(cost, 1.0 / ell) : cost;
    }
    case MetricKind::Tag::TotalVariation: {
      const auto diff = detail::signed_difference(mu, nu);
      double s = 0.0;
      for (double m : diff.mass) s += std::abs(m);
      return 0.5 * s;
    }
    case MetricKind::Tag::BoundedWasserstein:
      return detail::transport_cost(mu, nu, options, [](double r) { return std::min(r, 1.0); });
    case MetricKind::Tag::WeightedTV: {
      const auto diff = detail::signed_difference(mu, nu);
      const std::size_t d = mu.dim();
      double s = 0.0;
      for (std::size_t i = 0; i < diff.mass.size(); ++i) {
        const double r = detail::norm({diff.coords.data() + i * d, d});
        s += (1.0 + (kind.ell == 0.0 ? 1.0 : std::pow(r, kind.ell))) * std::abs(diff.mass[i]);
      }
      return s;
    }
  }
  throw std::logic_error("unhandled metric kind");
}

struct AxiomReport {
  std::size_t triples = 0;
  std::size_t symmetry_violations = 0;
  std::size_t identity_violations = 0;
  std::size_t triangle_violations = 0;
  std::size_t passed() const { return 3 * triples - failed(); }
  std::size_t failed() const { return symmetry_violations + identity_violations + triangle_violations; }
};

namespace detail {

// Small 1-d measure; atoms often land on a coarse grid so that coincidences occur.
inline DiscreteMeasure random_small_measure(RandomStream& rng, std::size_t max_atoms, std::size_t dim = 1) {
  const std::size_t atoms = 1 + rng.below(max_atoms);
  const bool on_grid = rng.uniform() < 0.5;
  std::vector<double> coords(atoms * dim);
  for (double& x : coords) x = on_grid ? static_cast<double>(static_cast<int>(rng.below(5)) - 2) : rng.uniform(-3.0, 3.0);
  std::vector<double> weights(atoms);
  for (double& w : weights) w = 0.05 + rng.uniform();
  return DiscreteMeasure::normalized(dim, std::move(coords), std::move(weights));
}

}  // namespace detail

// Symmetry, identity of indiscernibles and triangle inequality on random triples.
inline AxiomReport metric_axiom_suite(const MetricKind& kind, RandomStream& rng, std::size_t triples = 200,
                                      double tolerance = 1e-10) {
  if (kind.tag != MetricKind::Tag::WassersteinL || !(kind.ell > 0.0 && kind.ell < 1.0)) {
    throw std::invalid_argument("axiom suite expects a Wasserstein order in (0,1)");
  }
  AxiomReport report;
  for (std::size_t t = 0; t < triples; ++t) {
    const auto mu = detail::random_small_measure(rng, 5);
    // Reuse mu now and then so that the zero-distance branch is exercised.
    const auto nu = rng.uniform() < 0.15 ? mu : detail::random_small_measure(rng, 5);
    const auto rho = detail::random_small_measure(rng, 5);
    ++report.triples;
    const double d_mn = distance(mu, nu, kind);
    const double d_nm = distance(nu, mu, kind);
    const double d_nr = distance(nu, rho, kind);
    const double d_mr = distance(mu, rho, kind);
    if (std::abs(d_mn - d_nm) > tolerance) ++report.symmetry_violations;
    const bool zero = d_mn <= tolerance;
    if (zero != same_measure(mu, nu, 1e-12)) ++report.identity_violations;
    if (d_mr > d_mn + d_nr + tolerance) ++report.triangle_violations;
  }
  return report;
}

// W_l^{l v 1}(mu,nu) <= 2^{(l-1) v 0} int |y|^l |mu-nu|(dy) + 1e-10.
inline bool tv_wasserstein_inequality_check(const DiscreteMeasure& mu, const DiscreteMeasure& nu, double ell) {
  const double w = distance(mu, nu, MetricKind::wasserstein(ell));
  const double lhs = ell >= 1.0 ? std::pow(w, ell) : w;
  const auto diff = detail::signed_difference(mu, nu);
  const std::size_t d = mu.dim();
  double weighted = 0.0;
  for (std::size_t i = 0; i < diff.mass.size(); ++i) {
    weighted += std::pow(detail::norm({diff.coords.data() + i * d, d}), ell) * std::abs(diff.mass[i]);
  }
  return lhs <= std::pow(2.0, std::max(ell - 1.0, 0.0)) * weighted + 1e-10;
}

}  // namespace mfclt
