#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mfclt {

namespace detail {

// Neumaier compensated sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      carry_ += (sum_ - t) + x;
    } else {
      carry_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

inline double norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

inline double distance(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) s += (x[k] - y[k]) * (x[k] - y[k]);
  return std::sqrt(s);
}

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace detail

inline constexpr double kWeightSumTolerance = 1e-12;
inline constexpr double kPruneThreshold = 1e-15;

// Probability measure with finitely many weighted atoms in R^d. Immutable.
class DiscreteMeasure {
 public:
  DiscreteMeasure(std::size_t dim, std::vector<double> coords, std::vector<double> weights)
      : dim_(dim), coords_(std::move(coords)), weights_(std::move(weights)) {
    if (dim_ == 0) throw std::invalid_argument("measure dimension must be positive");
    if (weights_.empty()) throw std::invalid_argument("measure needs at least one atom");
    if (coords_.size() != weights_.size() * dim_) throw std::invalid_argument("coordinate count does not match dim * atoms");
    detail::CompensatedSum total;
    for (double w : weights_) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("weights must be finite and nonnegative");
      total.add(w);
    }
    if (std::abs(total.value() - 1.0) > kWeightSumTolerance) {
      throw std::invalid_argument("weights must sum to 1, got " + detail::format_double(total.value()));
    }
    for (double x : coords_) {
      if (!std::isfinite(x)) throw std::invalid_argument("atom coordinates must be finite");
    }
  }

  // Drops weights below the prune threshold, then rescales to total mass one.
  static DiscreteMeasure normalized(std::size_t dim, std::vector<double> coords, std::vector<double> weights) {
    if (dim == 0) throw std::invalid_argument("measure dimension must be positive");
    if (coords.size() != weights.size() * dim) throw std::invalid_argument("coordinate count does not match dim * atoms");
    std::size_t kept = 0;
    detail::CompensatedSum total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] < 0.0) throw std::invalid_argument("negative weight");
      if (weights[i] < kPruneThreshold) continue;
      if (kept != i) {
        weights[kept] = weights[i];
        std::copy_n(coords.begin() + static_cast<std::ptrdiff_t>(i * dim), dim,
                    coords.begin() + static_cast<std::ptrdiff_t>(kept * dim));
      }
      total.add(weights[kept]);
      ++kept;
    }
    if (kept == 0) throw std::invalid_argument("measure has no mass left after pruning");
    weights.resize(kept);
    coords.resize(kept * dim);
    const double mass = total.value();
    if (mass != 1.0) {
      for (double& w : weights) w /= mass;
    }
    return DiscreteMeasure(dim, std::move(coords), std::move(weights));
  }

  static DiscreteMeasure dirac(std::span<const double> x) {
    return DiscreteMeasure(x.size(), std::vector<double>(x.begin(), x.end()), {1.0});
  }

  static DiscreteMeasure dirac(double x) { return DiscreteMeasure(1, {x}, {1.0}); }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return weights_.size(); }

  std::span<const double> point(std::size_t i) const { return {coords_.data() + i * dim_, dim_}; }
  double weight(std::size_t i) const { return weights_[i]; }
  std::span<const double> weights() const { return weights_; }
  std::span<const double> coordinates() const { return coords_; }

  // Sum of w_i f(x_i).
  template <class F>
  double integrate(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) s += weights_[i] * f(point(i));
    return s;
  }

  // Atoms with identical coordinates combined; atoms sorted lexicographically.
  DiscreteMeasure merged() const {
    std::vector<std::size_t> order(size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::lexicographical_compare(point(a).begin(), point(a).end(), point(b).begin(), point(b).end());
    });
    std::vector<double> coords;
    std::vector<double> weights;
    for (std::size_t idx : order) {
      const auto p = point(idx);
      if (!weights.empty() && std::equal(p.begin(), p.end(), coords.end() - static_cast<std::ptrdiff_t>(dim_))) {
        weights.back() += weights_[idx];
      } else {
        coords.insert(coords.end(), p.begin(), p.end());
        weights.push_back(weights_[idx]);
      }
    }
    return DiscreteMeasure(dim_, std::move(coords), std::move(weights));
  }

 private:
  std::size_t dim_;
  std::vector<double> coords_;
  std::vector<double> weights_;
};

// Uniform weights on the given points; flat row-major storage.
inline DiscreteMeasure empirical_from_samples(std::size_t dim, std::vector<double> flat) {
  if (flat.empty()) throw std::invalid_argument("empty sample set");
  if (dim == 0 || flat.size() % dim != 0) throw std::invalid_argument("samples do not share a common dimension");
  const std::size_t n = flat.size() / dim;
  return DiscreteMeasure(dim, std::move(flat), std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

inline DiscreteMeasure empirical_from_samples(const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) throw std::invalid_argument("empty sample set");
  const std::size_t dim = samples.front().size();
  std::vector<double> flat;
  flat.reserve(samples.size() * dim);
  for (const auto& s : samples) {
    if (s.size() != dim || dim == 0) throw std::invalid_argument("samples do not share a common dimension");
    flat.insert(flat.end(), s.begin(), s.end());
  }
  return empirical_from_samples(dim, std::move(flat));
}

inline double moment(const DiscreteMeasure& mu, double ell) {
  if (ell < 0.0) throw std::invalid_argument("moment order must be nonnegative");
  return mu.integrate([ell](std::span<const double> x) { return ell == 0.0 ? 1.0 : std::pow(detail::norm(x), ell); });
}

// (1-s) mu + s nu on the union of atoms.
inline DiscreteMeasure interpolate(const DiscreteMeasure& mu, const DiscreteMeasure& nu, double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("interpolation parameter must lie in [0,1]");
  if (mu.dim() != nu.dim()) throw std::invalid_argument("dimension mismatch");
  std::vector<double> coords(mu.coordinates().begin(), mu.coordinates().end());
  coords.insert(coords.end(), nu.coordinates().begin(), nu.coordinates().end());
  std::vector<double> weights;
  weights.reserve(mu.size() + nu.size());
  for (double w : mu.weights()) weights.push_back((1.0 - s) * w);
  for (double w : nu.weights()) weights.push_back(s * w);
  return DiscreteMeasure::normalized(mu.dim(), std::move(coords), std::move(weights));
}

// Same atoms and weights after merging.
inline bool same_measure(const DiscreteMeasure& a, const DiscreteMeasure& b, double weight_tol = 0.0) {
  if (a.dim() != b.dim()) return false;
  const auto ma = a.merged();
  const auto mb = b.merged();
  if (ma.size() != mb.size()) return false;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const auto pa = ma.point(i);
    const auto pb = mb.point(i);
    if (!std::equal(pa.begin(), pa.end(), pb.begin())) return false;
    if (std::abs(ma.weight(i) - mb.weight(i)) > weight_tol) return false;
  }
  return true;
}

inline std::string to_text(const DiscreteMeasure& mu) {
  std::string out = "dim=" + std::to_string(mu.dim()) + " atoms=" + std::to_string(mu.size()) + "\n";
  for (std::size_t i = 0; i < mu.size(); ++i) {
    out += detail::format_double(mu.weight(i));
    for (double x : mu.point(i)) {
      out += ' ';
      out += detail::format_double(x);
    }
    out += '\n';
  }
  return out;
}

inline DiscreteMeasure from_text(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string header;
  if (!std::getline(in, header)) throw std::invalid_argument("measure text is empty");
  std::size_t dim = 0;
  std::size_t atoms = 0;
  if (std::sscanf(header.c_str(), "dim=%zu atoms=%zu", &dim, &atoms) != 2) {
    throw std::invalid_argument("bad measure header: " + header);
  }
  std::vector<double> coords;
  std::vector<double> weights;
  coords.reserve(dim * atoms);
  weights.reserve(atoms);
  std::string line;
  while (weights.size() < atoms && std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream row(line);
    double w = 0.0;
    if (!(row >> w)) throw std::invalid_argument("bad atom line: " + line);
    weights.push_back(w);
    for (std::size_t k = 0; k < dim; ++k) {
      double x = 0.0;
      if (!(row >> x)) throw std::invalid_argument("atom line has fewer than dim coordinates: " + line);
      coords.push_back(x);
    }
  }
  if (weights.size() != atoms) throw std::invalid_argument("measure text ends before all atoms were read");
  return DiscreteMeasure(dim, std::move(coords), std::move(weights));
}

inline DiscreteMeasure read_measure(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open measure file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

inline void write_measure(const std::string& path, const DiscreteMeasure& mu) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write measure file " + path);
  out << to_text(mu);
}

}  // namespace mfclt
