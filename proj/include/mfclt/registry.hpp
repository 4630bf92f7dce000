#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "functional.hpp"
#include "law.hpp"
#include "mean_field.hpp"

namespace mfclt {

struct FunctionalEntry {
  std::string name;
  std::string summary;
  // Derivatives are polynomial in the interpolation parameter, so Gauss-Legendre in s is exact.
  bool polynomial_in_s;
};

inline const std::vector<FunctionalEntry>& functional_registry() {
  static const std::vector<FunctionalEntry> entries = {
      {"linear-x", "integral of the first coordinate", true},
      {"linear-square", "integral of |x|^2", true},
      {"mean-square", "square of the integral of the first coordinate", true},
      {"cube-of-second-moment", "cube of the integral of |x|^2", true},
      {"sin-five-halves", "|integral of sin(x_1)|^(5/2)", false},
      {"ustat-product", "double integral of x.y (V-statistic of order two)", true},
      {"quantile:<v>", "v-quantile of a one-dimensional law; derivative uses the law's density", false},
  };
  return entries;
}

inline std::string functional_registry_listing() {
  std::string out;
  for (const auto& e : functional_registry()) out += (out.empty() ? "" : ", ") + e.name;
  return out;
}

namespace registry_detail {

inline double first_coordinate(std::span<const double> x) { return x[0]; }

inline double squared_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

inline double sign(double t) { return t < 0.0 ? -1.0 : 1.0; }

}  // namespace registry_detail

// Builds a registry functional on the law's dimension. Quantile functionals take their
// density and CDF from the law when it has them.
inline Functional make_functional(const std::string& name, const SamplerSpec& law) {
  using namespace registry_detail;
  const std::size_t d = law.dim();
  if (name == "linear-x") return Functional::linear(d, first_coordinate, name);
  if (name == "linear-square") return Functional::linear(d, squared_norm, name);
  if (name == "mean-square") {
    return Functional::smooth_of_linear(
        d,
        OuterFunction::univariate([](double t) { return t * t; },
                                  {[](double t) { return 2.0 * t; }, [](double) { return 2.0; }}),
        {first_coordinate}, name);
  }
  if (name == "cube-of-second-moment") {
    return Functional::smooth_of_linear(
        d,
        OuterFunction::univariate([](double t) { return t * t * t; },
                                  {[](double t) { return 3.0 * t * t; }, [](double t) { return 6.0 * t; },
                                   [](double) { return 6.0; }}),
        {squared_norm}, name);
  }
  if (name == "sin-five-halves") {
    return Functional::smooth_of_linear(
        d,
        OuterFunction::univariate([](double t) { return std::pow(std::abs(t), 2.5); },
                                  {[](double t) { return 2.5 * std::pow(std::abs(t), 1.5) * sign(t); },
                                   [](double t) { return 3.75 * std::sqrt(std::abs(t)); }}),
        {[](std::span<const double> x) { return std::sin(x[0]); }}, name);
  }
  if (name == "ustat-product") {
    return Functional::ustatistic(
        d, 2,
        [d](std::span<const double> x) {
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += x[k] * x[d + k];
          return s;
        },
        name);
  }
  if (name.rfind("quantile:", 0) == 0) {
    double level = 0.0;
    try {
      std::size_t used = 0;
      level = std::stod(name.substr(9), &used);
      if (used != name.size() - 9) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw std::invalid_argument("bad quantile level in '" + name + "'");
    }
    if (d != 1) throw std::invalid_argument("quantile functional needs a one-dimensional law");
    QuantileSpec spec{level, {}, {}};
    if (law.has_density()) {
      spec.density = [law](double x) { return law.pdf(x); };
      spec.cdf = [law](double x) { return law.cdf(x); };
    }
    return Functional::quantile(std::move(spec), name);
  }
  throw std::invalid_argument("unknown functional '" + name + "' (registry: " + functional_registry_listing() + ")");
}

struct ModelEntry {
  std::string name;
  std::string summary;
  std::vector<std::string> parameters;
};

inline const std::vector<ModelEntry>& model_registry() {
  static const std::vector<ModelEntry> entries = {
      {"ou", "b(x) = -x, sigma = 1; unbounded drift, needs force for the limit covariance", {}},
      {"mean-revert", "b(x, mu) = kappa (mean(mu) - x), sigma constant", {"kappa", "sigma"}},
      {"bounded-sine", "b(x, mu) = sin(x) + integral of sin dmu, sigma = 1; bounded coefficients", {}},
  };
  return entries;
}

inline std::string model_registry_listing() {
  std::string out;
  for (const auto& e : model_registry()) out += (out.empty() ? "" : ", ") + e.name;
  return out;
}

// Builds a registry model with initial law `law`. Unknown parameters are rejected.
inline MkvModel make_model(const std::string& name, const SamplerSpec& law,
                           const std::map<std::string, double>& parameters = {}) {
  const auto entry = std::find_if(model_registry().begin(), model_registry().end(),
                                  [&](const ModelEntry& e) { return e.name == name; });
  if (entry == model_registry().end()) {
    throw std::invalid_argument("unknown model '" + name + "' (registry: " + model_registry_listing() + ")");
  }
  for (const auto& [key, value] : parameters) {
    if (std::find(entry->parameters.begin(), entry->parameters.end(), key) == entry->parameters.end()) {
      throw std::invalid_argument("model '" + name + "' has no parameter '" + key + "'");
    }
  }
  auto get = [&](const char* key, double fallback) {
    const auto it = parameters.find(key);
    return it == parameters.end() ? fallback : it->second;
  };
  if (name == "ou") return ou_model(law);
  if (name == "mean-revert") return mean_revert_model(law, get("kappa", 1.0), get("sigma", 1.0));
  return bounded_sine_model(law);
}

}  // namespace mfclt
