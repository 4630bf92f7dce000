#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "measure.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace mfclt {

namespace detail {

inline double radical_inverse(std::size_t index, unsigned base) {
  double inv = 1.0 / base, f = inv, r = 0.0;
  while (index > 0) {
    r += f * static_cast<double>(index % base);
    index /= base;
    f *= inv;
  }
  return r;
}

inline unsigned nth_prime(std::size_t k) {
  static constexpr unsigned primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};
  if (k >= std::size(primes)) throw std::invalid_argument("quasi-random proxy supports at most 16 dimensions");
  return primes[k];
}

// Low-discrepancy points in (0,1)^d: midpoints in one dimension, shifted Halton otherwise.
inline std::vector<double> quasi_uniform(std::size_t count, std::size_t dim) {
  std::vector<double> u(count * dim);
  for (std::size_t i = 0; i < count; ++i) {
    if (dim == 1) {
      u[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(count);
    } else {
      for (std::size_t k = 0; k < dim; ++k) u[i * dim + k] = radical_inverse(i + 1, nth_prime(k));
    }
  }
  return u;
}

}  // namespace detail

// Reference law m0 for sampling, plus a deterministic discrete proxy for reference integrals.
class SamplerSpec {
 public:
  enum class Kind { Normal, Uniform, DiscreteAtoms, UserCallback };
  using Sampler = std::function<void(RandomStream&, std::span<double>)>;

  static SamplerSpec normal(double mean, double sd, std::size_t dim = 1) {
    if (!(sd > 0.0)) throw std::invalid_argument("normal law needs a positive standard deviation");
    SamplerSpec s(Kind::Normal, dim);
    s.a_ = mean;
    s.b_ = sd;
    return s;
  }

  static SamplerSpec uniform(double lo, double hi, std::size_t dim = 1) {
    if (!(hi > lo)) throw std::invalid_argument("uniform law needs lo < hi");
    SamplerSpec s(Kind::Uniform, dim);
    s.a_ = lo;
    s.b_ = hi;
    return s;
  }

  static SamplerSpec discrete(DiscreteMeasure atoms) {
    SamplerSpec s(Kind::DiscreteAtoms, atoms.dim());
    s.cumulative_.reserve(atoms.size());
    double c = 0.0;
    for (double w : atoms.weights()) s.cumulative_.push_back(c += w);
    s.atoms_ = std::move(atoms);
    return s;
  }

  static SamplerSpec user(std::size_t dim, Sampler sampler, double moment_order = 2.0) {
    SamplerSpec s(Kind::UserCallback, dim);
    s.sampler_ = std::move(sampler);
    s.moment_order_ = moment_order;
    return s;
  }

  // "normal:MEAN,SD", "uniform:LO,HI", "dirac:X", "atoms:PATH"; optional "@d" suffix sets the dimension.
  static SamplerSpec parse(const std::string& text) {
    std::string body = text;
    std::size_t dim = 1;
    if (const auto at = body.rfind('@'); at != std::string::npos) {
      dim = std::stoul(body.substr(at + 1));
      body = body.substr(0, at);
    }
    const auto colon = body.find(':');
    const std::string kind = body.substr(0, colon);
    const std::string args = colon == std::string::npos ? "" : body.substr(colon + 1);
    auto numbers = [&](std::size_t expected) {
      std::vector<double> out;
      std::size_t pos = 0;
      while (pos <= args.size() && !args.empty()) {
        const auto comma = args.find(',', pos);
        out.push_back(std::stod(args.substr(pos, comma - pos)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
      if (out.size() != expected) throw std::invalid_argument("law '" + text + "' expects " + std::to_string(expected) + " parameters");
      return out;
    };
    if (kind == "normal") {
      const auto p = numbers(2);
      return normal(p[0], p[1], dim);
    }
    if (kind == "uniform") {
      const auto p = numbers(2);
      return uniform(p[0], p[1], dim);
    }
    if (kind == "dirac") {
      const auto p = numbers(1);
      return discrete(DiscreteMeasure::dirac(std::vector<double>(dim, p[0])));
    }
    if (kind == "atoms") return discrete(read_measure(args));
    throw std::invalid_argument("unknown law '" + text + "' (expected normal:M,S, uniform:A,B, dirac:X or atoms:PATH)");
  }

  Kind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  bool is_discrete() const { return kind_ == Kind::DiscreteAtoms; }
  bool is_dirac() const { return is_discrete() && atoms_->merged().size() == 1; }
  // (mean, sd) for normal laws, (lo, hi) for uniform laws.
  std::array<double, 2> parameters() const { return {a_, b_}; }
  bool has_density() const { return dim_ == 1 && (kind_ == Kind::Normal || kind_ == Kind::Uniform); }

  // Largest moment order known to be finite; normal and bounded laws have all moments.
  double moment_order() const {
    return kind_ == Kind::UserCallback ? moment_order_ : std::numeric_limits<double>::infinity();
  }

  const DiscreteMeasure& atoms() const {
    if (!atoms_) throw std::logic_error("law has no atom representation");
    return *atoms_;
  }

  double pdf(double x) const {
    require_density();
    if (kind_ == Kind::Normal) return normal_pdf((x - a_) / b_) / b_;
    return (x >= a_ && x <= b_) ? 1.0 / (b_ - a_) : 0.0;
  }

  double cdf(double x) const {
    require_density();
    if (kind_ == Kind::Normal) return normal_cdf((x - a_) / b_);
    return std::clamp((x - a_) / (b_ - a_), 0.0, 1.0);
  }

  void sample(RandomStream& rng, std::span<double> out) const {
    switch (kind_) {
      case Kind::Normal:
        for (double& x : out) x = a_ + b_ * rng.normal();
        return;
      case Kind::Uniform:
        for (double& x : out) x = rng.uniform(a_, b_);
        return;
      case Kind::DiscreteAtoms: {
        const double u = rng.uniform();
        auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
        std::size_t idx = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
        while (atoms_->weight(idx) == 0.0 && idx > 0) --idx;
        const auto p = atoms_->point(idx);
        std::copy(p.begin(), p.end(), out.begin());
        return;
      }
      case Kind::UserCallback:
        sampler_(rng, out);
        return;
    }
  }

  std::vector<double> sample_many(RandomStream& rng, std::size_t count) const {
    std::vector<double> flat(count * dim_);
    for (std::size_t i = 0; i < count; ++i) sample(rng, {flat.data() + i * dim_, dim_});
    return flat;
  }

  // Deterministic discrete stand-in for the law. Atom laws return themselves; normal and
  // uniform laws use quasi-random points (symmetric about the mean in one dimension); user
  // laws fall back to seeded draws.
  DiscreteMeasure proxy(std::size_t count) const {
    if (kind_ == Kind::DiscreteAtoms) return *atoms_;
    if (count == 0) throw std::invalid_argument("proxy size must be positive");
    std::vector<double> coords;
    if (kind_ == Kind::UserCallback) {
      RandomStream rng(0, StreamTag::kProxy);
      coords = sample_many(rng, count);
    } else {
      coords = detail::quasi_uniform(count, dim_);
      for (double& u : coords) u = kind_ == Kind::Normal ? normal_quantile(u) : a_ + (b_ - a_) * u;
      if (dim_ == 1) {
        // Mirror the lower half so that odd moments of the proxy vanish about the centre.
        for (std::size_t i = 0; i < count / 2; ++i) coords[count - 1 - i] = -coords[i];
        if (count % 2 == 1) coords[count / 2] = 0.0;
        if (kind_ == Kind::Uniform) {
          for (std::size_t i = 0; i < count / 2; ++i) coords[count - 1 - i] = a_ + b_ - coords[i];
          if (count % 2 == 1) coords[count / 2] = 0.5 * (a_ + b_);
        }
      }
      if (kind_ == Kind::Normal) {
        for (double& x : coords) x = a_ + b_ * x;
      }
    }
    return DiscreteMeasure(dim_, std::move(coords), std::vector<double>(count, 1.0 / static_cast<double>(count)));
  }

  std::string describe() const {
    switch (kind_) {
      case Kind::Normal: return "normal:" + detail::format_double(a_) + "," + detail::format_double(b_) + suffix();
      case Kind::Uniform: return "uniform:" + detail::format_double(a_) + "," + detail::format_double(b_) + suffix();
      case Kind::DiscreteAtoms: return "atoms(" + std::to_string(atoms_->size()) + ")" + suffix();
      case Kind::UserCallback: return "user" + suffix();
    }
    return "?";
  }

 private:
  SamplerSpec(Kind kind, std::size_t dim) : kind_(kind), dim_(dim) {
    if (dim == 0) throw std::invalid_argument("law dimension must be positive");
  }

  std::string suffix() const { return dim_ == 1 ? "" : "@" + std::to_string(dim_); }

  void require_density() const {
    if (!has_density()) throw std::invalid_argument("law has no one-dimensional density");
  }

  Kind kind_;
  std::size_t dim_;
  double a_ = 0.0;
  double b_ = 1.0;
  double moment_order_ = 2.0;
  std::optional<DiscreteMeasure> atoms_;
  std::vector<double> cumulative_;
  Sampler sampler_;
};

}  // namespace mfclt
