#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "errors.hpp"
#include "functional.hpp"
#include "law.hpp"
#include "measure.hpp"
#include "parallel.hpp"
#include "quadrature.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace mfclt {

// Drift and diffusion with the measure argument frozen at one time step.
struct CoefficientField {
  std::function<void(std::span<const double> x, std::span<double> drift)> drift;
  // Row-major d x d' matrix.
  std::function<void(std::span<const double> x, std::span<double> diffusion)> diffusion;
};

struct ModelFlags {
  bool is_dirac_initial = false;
  bool claims_bounded_coeffs = false;
};

// McKean-Vlasov model. Lipschitz coefficients are a contract of the constructor;
// spot_check_model probes it.
struct MkvModel {
  std::string name;
  std::size_t dim = 1;
  std::size_t noise_dim = 1;
  std::function<CoefficientField(const DiscreteMeasure&)> freeze;
  SamplerSpec initial;
  ModelFlags flags;
};

using PointwiseDrift = std::function<void(std::span<const double>, const DiscreteMeasure&, std::span<double>)>;
using PointwiseDiffusion = std::function<void(std::span<const double>, const DiscreteMeasure&, std::span<double>)>;

// Model from coefficients evaluated directly against the measure. Each call sees the whole
// measure, so cost is per particle times the measure's own cost.
inline MkvModel pointwise_model(std::string name, std::size_t dim, std::size_t noise_dim, PointwiseDrift drift,
                                PointwiseDiffusion diffusion, SamplerSpec initial, bool claims_bounded_coeffs = false) {
  if (initial.dim() != dim) throw std::invalid_argument("initial law dimension does not match the model");
  auto freeze = [drift = std::move(drift), diffusion = std::move(diffusion)](const DiscreteMeasure& mu) {
    auto frozen = std::make_shared<const DiscreteMeasure>(mu);
    return CoefficientField{[drift, frozen](std::span<const double> x, std::span<double> out) { drift(x, *frozen, out); },
                            [diffusion, frozen](std::span<const double> x, std::span<double> out) {
                              diffusion(x, *frozen, out);
                            }};
  };
  const bool dirac = initial.is_discrete() && initial.is_dirac();
  return MkvModel{std::move(name), dim, noise_dim, std::move(freeze), std::move(initial), {dirac, claims_bounded_coeffs}};
}

namespace detail {

inline void identity_diffusion(std::size_t d, double scale, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t j = 0; j < d; ++j) out[j * d + j] = scale;
}

inline std::vector<double> coordinate_means(const DiscreteMeasure& mu) {
  std::vector<double> m(mu.dim(), 0.0);
  for (std::size_t i = 0; i < mu.size(); ++i)
    for (std::size_t j = 0; j < mu.dim(); ++j) m[j] += mu.weight(i) * mu.point(i)[j];
  return m;
}

}  // namespace detail

// b(x) = -x, sigma = identity.
inline MkvModel ou_model(SamplerSpec initial) {
  const std::size_t d = initial.dim();
  auto freeze = [d](const DiscreteMeasure&) {
    return CoefficientField{[](std::span<const double> x, std::span<double> out) {
                              for (std::size_t j = 0; j < x.size(); ++j) out[j] = -x[j];
                            },
                            [d](std::span<const double>, std::span<double> out) { detail::identity_diffusion(d, 1.0, out); }};
  };
  const bool dirac = initial.is_discrete() && initial.is_dirac();
  return MkvModel{"ou", d, d, std::move(freeze), std::move(initial), {dirac, false}};
}

// b(x, mu) = kappa (mean(mu) - x), sigma = constant times identity.
inline MkvModel mean_revert_model(SamplerSpec initial, double kappa = 1.0, double sigma = 1.0) {
  if (!(kappa >= 0.0) || !(sigma >= 0.0)) throw std::invalid_argument("mean-revert needs kappa >= 0 and sigma >= 0");
  const std::size_t d = initial.dim();
  auto freeze = [d, kappa, sigma](const DiscreteMeasure& mu) {
    auto mean = detail::coordinate_means(mu);
    return CoefficientField{[mean, kappa](std::span<const double> x, std::span<double> out) {
                              for (std::size_t j = 0; j < x.size(); ++j) out[j] = kappa * (mean[j] - x[j]);
                            },
                            [d, sigma](std::span<const double>, std::span<double> out) {
                              detail::identity_diffusion(d, sigma, out);
                            }};
  };
  const bool dirac = initial.is_discrete() && initial.is_dirac();
  return MkvModel{"mean-revert", d, d, std::move(freeze), std::move(initial), {dirac, false}};
}

// b(x, mu) = sin(x) + integral of sin against mu, componentwise; sigma = identity.
inline MkvModel bounded_sine_model(SamplerSpec initial) {
  const std::size_t d = initial.dim();
  auto freeze = [d](const DiscreteMeasure& mu) {
    std::vector<double> avg(d, 0.0);
    for (std::size_t i = 0; i < mu.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) avg[j] += mu.weight(i) * std::sin(mu.point(i)[j]);
    return CoefficientField{[avg](std::span<const double> x, std::span<double> out) {
                              for (std::size_t j = 0; j < x.size(); ++j) out[j] = std::sin(x[j]) + avg[j];
                            },
                            [d](std::span<const double>, std::span<double> out) { detail::identity_diffusion(d, 1.0, out); }};
  };
  const bool dirac = initial.is_discrete() && initial.is_dirac();
  return MkvModel{"bounded-sine", d, d, std::move(freeze), std::move(initial), {dirac, true}};
}

// Weighted particles with a noise assignment: particle p uses the stream block noise_block[p]
// multiplied by noise_sign[p], so antithetic partners share a block with opposite signs.
struct ParticleCloud {
  std::size_t dim = 1;
  std::vector<double> coords;
  std::vector<double> weights;
  std::vector<std::uint32_t> noise_block;
  std::vector<double> noise_sign;

  std::size_t size() const { return weights.size(); }
  DiscreteMeasure measure() const { return DiscreteMeasure(dim, coords, weights); }
};

inline constexpr std::uint32_t kExtraAtomBlock = 0x80000000u;

namespace detail {

inline std::size_t grid_steps(double t, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (!(t >= 0.0)) throw std::invalid_argument("time must be nonnegative");
  const double k = std::round(t / dt);
  if (std::abs(k * dt - t) > 1e-9 * std::max(1.0, t)) {
    throw std::invalid_argument("time " + detail::format_double(t) + " is not on the dt grid");
  }
  return static_cast<std::size_t>(k);
}

// Pairs j with count-1-j; the middle element of an odd count is unpaired.
inline void antithetic_layout(std::size_t count, std::uint32_t offset, std::vector<std::uint32_t>& blocks,
                              std::vector<double>& signs) {
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t partner = count - 1 - j;
    blocks.push_back(offset + static_cast<std::uint32_t>(std::min(j, partner)));
    signs.push_back(j <= partner ? 1.0 : -1.0);
  }
}

inline void independent_layout(std::size_t count, std::uint32_t offset, std::vector<std::uint32_t>& blocks,
                               std::vector<double>& signs) {
  for (std::size_t j = 0; j < count; ++j) {
    blocks.push_back(offset + static_cast<std::uint32_t>(j));
    signs.push_back(1.0);
  }
}

}  // namespace detail

// Cloud of `particles` points standing in for mu. Small supports are replicated (r copies per
// atom, copies paired antithetically); a support of exactly `particles` atoms is kept and
// mirror-paired; otherwise atoms are resampled systematically to equal weights.
inline ParticleCloud cloud_from_measure(const DiscreteMeasure& mu, std::size_t particles, bool antithetic = true) {
  if (particles == 0) throw std::invalid_argument("cloud needs at least one particle");
  const std::size_t k = mu.size();
  const std::size_t d = mu.dim();
  ParticleCloud cloud;
  cloud.dim = d;
  auto layout = antithetic ? detail::antithetic_layout : detail::independent_layout;
  const std::size_t copies = particles / k;
  if (copies >= 2) {
    cloud.coords.reserve(k * copies * d);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t c = 0; c < copies; ++c) {
        cloud.coords.insert(cloud.coords.end(), mu.point(i).begin(), mu.point(i).end());
        cloud.weights.push_back(mu.weight(i) / static_cast<double>(copies));
      }
      layout(copies, static_cast<std::uint32_t>(i * copies), cloud.noise_block, cloud.noise_sign);
    }
    return cloud;
  }
  if (k == particles) {
    cloud.coords.assign(mu.coordinates().begin(), mu.coordinates().end());
    cloud.weights.assign(mu.weights().begin(), mu.weights().end());
  } else {
    // The upper half is selected from the back so that mirror-symmetric supports stay symmetric.
    const double m = static_cast<double>(particles);
    std::vector<std::size_t> chosen(particles);
    double front = mu.weight(0), back = mu.weight(k - 1);
    std::size_t lo = 0, hi = k - 1;
    for (std::size_t p = 0; p < (particles + 1) / 2; ++p) {
      const double u = (static_cast<double>(p) + 0.5) / m;
      while (u > front && lo + 1 < k) front += mu.weight(++lo);
      chosen[p] = lo;
      if (p != particles - 1 - p) {
        while (u > back && hi > 0) back += mu.weight(--hi);
        chosen[particles - 1 - p] = hi;
      }
    }
    for (std::size_t atom : chosen) {
      cloud.coords.insert(cloud.coords.end(), mu.point(atom).begin(), mu.point(atom).end());
      cloud.weights.push_back(1.0 / m);
    }
  }
  layout(particles, 0, cloud.noise_block, cloud.noise_sign);
  return cloud;
}

// Cloud for a law: atoms for discrete laws, the deterministic proxy (mirror-symmetric in one
// dimension) otherwise.
inline ParticleCloud cloud_from_law(const SamplerSpec& law, std::size_t particles, bool antithetic = true) {
  if (law.is_discrete()) return cloud_from_measure(law.atoms(), particles, antithetic);
  return cloud_from_measure(law.proxy(particles), particles, antithetic);
}

// Euler-Maruyama over a weighted cloud. observe(k, mu_k) sees the measure at every step
// k = 0..steps before it is advanced. Noise index for step k and noise coordinate l is
// k * d' + l within the particle's stream block.
template <class Observer>
void integrate_cloud(const MkvModel& model, ParticleCloud& cloud, double dt, std::size_t steps, const StreamKey& noise,
                     Observer&& observe) {
  const std::size_t d = model.dim;
  const std::size_t dn = model.noise_dim;
  const std::size_t n = cloud.size();
  if (cloud.dim != d) throw std::invalid_argument("cloud dimension does not match the model");
  const double root_dt = std::sqrt(dt);
  std::vector<double> drift(d), diffusion(d * dn), z(dn);
  std::vector<std::uint64_t> cached_pair(n, std::numeric_limits<std::uint64_t>::max());
  std::vector<std::array<double, 2>> cache(n);
  for (std::size_t k = 0;; ++k) {
    DiscreteMeasure mu(d, cloud.coords, cloud.weights);
    observe(k, mu);
    if (k == steps) return;
    const CoefficientField field = model.freeze(mu);
    for (std::size_t p = 0; p < n; ++p) {
      std::span<double> x(cloud.coords.data() + p * d, d);
      field.drift(x, drift);
      field.diffusion(x, diffusion);
      const StreamKey key{noise.seed, noise.tag, noise.replication, cloud.noise_block[p]};
      for (std::size_t l = 0; l < dn; ++l) {
        const std::uint64_t index = k * dn + l;
        if (cached_pair[p] != index / 2) {
          cache[p] = normal_pair_at(key, index / 2);
          cached_pair[p] = index / 2;
        }
        z[l] = cloud.noise_sign[p] * cache[p][index % 2];
      }
      for (std::size_t j = 0; j < d; ++j) {
        double shock = 0.0;
        for (std::size_t l = 0; l < dn; ++l) shock += diffusion[j * dn + l] * z[l];
        x[j] += drift[j] * dt + root_dt * shock;
        if (!std::isfinite(x[j])) {
          throw NumericError("non-finite particle state at step " + std::to_string(k + 1) + " (particle " +
                             std::to_string(p) + ")");
        }
      }
    }
  }
}

// Particle tensor of shape (steps+1) x N x d.
struct Trajectory {
  std::size_t steps = 0;
  std::size_t particles = 0;
  std::size_t dim = 1;
  double dt = 0.0;
  std::vector<double> data;

  double at(std::size_t k, std::size_t i, std::size_t j) const { return data[(k * particles + i) * dim + j]; }
  std::span<const double> state(std::size_t k) const { return {data.data() + k * particles * dim, particles * dim}; }
  DiscreteMeasure empirical(std::size_t k) const {
    return empirical_from_samples(dim, std::vector<double>(state(k).begin(), state(k).end()));
  }
};

struct ParticleOptions {
  std::uint32_t replication = 0;
  // Overrides the i.i.d. initial draws; N x d values.
  std::vector<double> initial_positions;
};

namespace detail {

inline ParticleCloud particle_system_cloud(const MkvModel& model, std::size_t n, std::uint64_t seed,
                                           const ParticleOptions& options) {
  ParticleCloud cloud;
  cloud.dim = model.dim;
  if (!options.initial_positions.empty()) {
    if (options.initial_positions.size() != n * model.dim) {
      throw std::invalid_argument("initial positions must hold N x d values");
    }
    cloud.coords = options.initial_positions;
  } else {
    RandomStream rng(seed, StreamTag::kParticleInit, options.replication);
    cloud.coords = model.initial.sample_many(rng, n);
  }
  cloud.weights.assign(n, 1.0 / static_cast<double>(n));
  independent_layout(n, 0, cloud.noise_block, cloud.noise_sign);
  return cloud;
}

inline void check_particle_args(std::size_t n, double dt, double horizon) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (!(horizon >= dt)) throw std::invalid_argument("horizon must be at least dt");
  if (n < 2) throw std::invalid_argument("particle system needs N >= 2");
}

}  // namespace detail

// N-particle system with i.i.d. initial draws and independent Brownian motions.
inline Trajectory simulate_particles(const MkvModel& model, std::size_t n, double dt, double horizon, std::uint64_t seed,
                                     const ParticleOptions& options = {}) {
  detail::check_particle_args(n, dt, horizon);
  const std::size_t steps = detail::grid_steps(horizon, dt);
  ParticleCloud cloud = detail::particle_system_cloud(model, n, seed, options);
  Trajectory out{steps, n, model.dim, dt, {}};
  out.data.reserve((steps + 1) * n * model.dim);
  integrate_cloud(model, cloud, dt, steps, StreamKey{seed, StreamTag::kParticleNoise, options.replication, 0},
                  [&](std::size_t, const DiscreteMeasure& mu) {
                    out.data.insert(out.data.end(), mu.coordinates().begin(), mu.coordinates().end());
                  });
  return out;
}

// Frozen proxy for Law(X_t) on the dt grid.
struct ReferenceCloud {
  double dt = 0.0;
  std::vector<DiscreteMeasure> snapshots;
};

// Limit-law proxy: M particles started from the stratified law proxy with antithetic noise.
inline ReferenceCloud simulate_limit_reference(const MkvModel& model, std::size_t particles, double dt, double horizon,
                                               std::uint64_t seed, std::uint32_t replication = 0) {
  detail::check_particle_args(particles, dt, horizon);
  const std::size_t steps = detail::grid_steps(horizon, dt);
  ParticleCloud cloud = cloud_from_law(model.initial, particles);
  ReferenceCloud out{dt, {}};
  out.snapshots.reserve(steps + 1);
  integrate_cloud(model, cloud, dt, steps, StreamKey{seed, StreamTag::kReferenceNoise, replication, 0},
                  [&](std::size_t, const DiscreteMeasure& mu) { out.snapshots.push_back(mu); });
  return out;
}

// Nested Monte Carlo evaluator of V(t, mu) = Phi(Law(X_t)) for the flow started at mu.
struct MasterEvaluator {
  Functional phi;
  MkvModel model;
  std::size_t inner_particles = 1000;
  double dt = 0.01;
  double eps = 0.05;
  double h = 0.1;
  // The perturbing point mass is split over this many antithetically paired particles.
  std::size_t extra_copies = 16;
  bool richardson = false;
  bool crn = true;

  void validate() const {
    if (phi.dim() != model.dim) throw std::invalid_argument("functional and model dimensions differ");
    if (inner_particles < 2) throw std::invalid_argument("inner particle count must be at least 2");
    if (!(dt > 0.0) || !(eps > 0.0) || !(h > 0.0)) throw std::invalid_argument("dt, eps and h must be positive");
    if (!(eps < 0.25)) throw std::invalid_argument("eps must be below 0.25");
    if (extra_copies == 0) throw std::invalid_argument("extra_copies must be positive");
  }
};

namespace detail {

// Sum over terms of coefficient * V(perturbed cloud), one group of extra atoms per term.
struct DifferenceTerm {
  double coefficient;
  std::vector<std::vector<double>> extras;
};

inline std::uint64_t hash_points(const std::vector<std::vector<double>>& points, std::uint64_t salt) {
  std::uint64_t h = splitmix64(salt);
  for (const auto& p : points)
    for (double x : p) h = splitmix64(h ^ std::bit_cast<std::uint64_t>(x));
  return h;
}

inline std::vector<double> perturbed_values(const MasterEvaluator& ev, const ParticleCloud& base,
                                            const std::vector<std::vector<double>>& extras, double eps,
                                            std::span<const std::size_t> steps, const StreamKey& key) {
  ParticleCloud cloud = base;
  const double keep = 1.0 - eps * static_cast<double>(extras.size());
  for (double& w : cloud.weights) w *= keep;
  const std::size_t copies = ev.extra_copies;
  for (std::size_t slot = 0; slot < extras.size(); ++slot) {
    if (extras[slot].size() != cloud.dim) throw std::invalid_argument("perturbation point has wrong dimension");
    for (std::size_t c = 0; c < copies; ++c) {
      cloud.coords.insert(cloud.coords.end(), extras[slot].begin(), extras[slot].end());
      cloud.weights.push_back(eps / static_cast<double>(copies));
    }
    antithetic_layout(copies, kExtraAtomBlock + static_cast<std::uint32_t>(slot * copies), cloud.noise_block,
                      cloud.noise_sign);
  }
  const std::size_t horizon = steps.empty() ? 0 : *std::max_element(steps.begin(), steps.end());
  std::vector<double> out(steps.size(), 0.0);
  integrate_cloud(ev.model, cloud, ev.dt, horizon, key, [&](std::size_t k, const DiscreteMeasure& mu) {
    bool needed = false;
    for (std::size_t s : steps) needed = needed || s == k;
    if (!needed) return;
    const double v = ev.phi.value(mu);
    for (std::size_t i = 0; i < steps.size(); ++i)
      if (steps[i] == k) out[i] = v;
  });
  return out;
}

// Finite-difference combination divided by eps^order, Richardson-extrapolated in eps if enabled.
inline std::vector<double> measure_difference(const MasterEvaluator& ev, const ParticleCloud& base,
                                              const std::vector<DifferenceTerm>& terms, int order,
                                              std::span<const std::size_t> steps, StreamKey key) {
  auto at = [&](double eps) {
    std::vector<double> acc(steps.size(), 0.0);
    for (std::size_t t = 0; t < terms.size(); ++t) {
      StreamKey k = key;
      if (!ev.crn) k.seed = hash_points(terms[t].extras, key.seed ^ std::bit_cast<std::uint64_t>(eps));
      const auto v = perturbed_values(ev, base, terms[t].extras, eps, steps, k);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += terms[t].coefficient * v[i];
    }
    const double scale = std::pow(eps, order);
    for (double& a : acc) a /= scale;
    return acc;
  };
  auto coarse = at(ev.eps);
  if (!ev.richardson) return coarse;
  auto fine = at(0.5 * ev.eps);
  for (std::size_t i = 0; i < coarse.size(); ++i) coarse[i] = 2.0 * fine[i] - coarse[i];
  return coarse;
}

inline StreamKey inner_key(std::uint64_t seed, std::uint32_t replication) {
  return StreamKey{seed, StreamTag::kInnerNoise, replication, 0};
}

inline std::vector<double> shifted(std::span<const double> y, std::size_t j, double delta) {
  std::vector<double> out(y.begin(), y.end());
  out[j] += delta;
  return out;
}

// Linear functional derivative at y for every requested step.
inline std::vector<double> lfd_steps(const MasterEvaluator& ev, const ParticleCloud& base, std::span<const double> y,
                                     std::span<const std::size_t> steps, const StreamKey& key) {
  std::vector<DifferenceTerm> terms{{1.0, {std::vector<double>(y.begin(), y.end())}},
                                    {-1.0, {std::vector<double>(y.size(), 0.0)}}};
  return measure_difference(ev, base, terms, 1, steps, key);
}

// L-derivative at y for every requested step: result[step][j].
inline std::vector<std::vector<double>> lderiv_steps(const MasterEvaluator& ev, const ParticleCloud& base,
                                                     std::span<const double> y, std::span<const std::size_t> steps,
                                                     const StreamKey& key) {
  std::vector<std::vector<double>> out(steps.size(), std::vector<double>(y.size()));
  for (std::size_t j = 0; j < y.size(); ++j) {
    std::vector<DifferenceTerm> terms{{0.5 / ev.h, {shifted(y, j, ev.h)}}, {-0.5 / ev.h, {shifted(y, j, -ev.h)}}};
    const auto v = measure_difference(ev, base, terms, 1, steps, key);
    for (std::size_t i = 0; i < steps.size(); ++i) out[i][j] = v[i];
  }
  return out;
}

// Spatial Jacobian of the L-derivative at y (d x d).
inline Matrix lhessian_at(const MasterEvaluator& ev, const ParticleCloud& base, std::span<const double> y,
                          std::size_t step, const StreamKey& key) {
  const std::size_t d = y.size();
  const double h = ev.h;
  const std::size_t steps[] = {step};
  Matrix out(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<DifferenceTerm> terms{{1.0 / (h * h), {shifted(y, j, h)}},
                                      {-2.0 / (h * h), {std::vector<double>(y.begin(), y.end())}},
                                      {1.0 / (h * h), {shifted(y, j, -h)}}};
    out(j, j) = measure_difference(ev, base, terms, 1, steps, key)[0];
    for (std::size_t k = j + 1; k < d; ++k) {
      auto pp = shifted(shifted(y, j, h), k, h), pm = shifted(shifted(y, j, h), k, -h);
      auto mp = shifted(shifted(y, j, -h), k, h), mm = shifted(shifted(y, j, -h), k, -h);
      const double c = 1.0 / (4.0 * h * h);
      std::vector<DifferenceTerm> mixed{{c, {pp}}, {-c, {pm}}, {-c, {mp}}, {c, {mm}}};
      out(j, k) = out(k, j) = measure_difference(ev, base, mixed, 1, steps, key)[0];
    }
  }
  return out;
}

// Second-order L-derivative on the diagonal, d^2_mu V(y, y), from mixed differences of two
// perturbing atoms (d x d).
inline Matrix second_lderiv_at(const MasterEvaluator& ev, const ParticleCloud& base, std::span<const double> y,
                               std::size_t step, const StreamKey& key) {
  const std::size_t d = y.size();
  const double h = ev.h;
  const double c = 1.0 / (4.0 * h * h);
  const std::size_t steps[] = {step};
  Matrix out(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < d; ++k) {
      const auto jp = shifted(y, j, h), jm = shifted(y, j, -h);
      const auto kp = shifted(y, k, h), km = shifted(y, k, -h);
      std::vector<DifferenceTerm> terms{{c, {jp, kp}}, {-c, {jp, km}}, {-c, {jm, kp}}, {c, {jm, km}}};
      out(j, k) = measure_difference(ev, base, terms, 2, steps, key)[0];
    }
  }
  return out;
}

inline Matrix diffusion_matrix(const MkvModel& model, const CoefficientField& field, std::span<const double> x) {
  const std::size_t d = model.dim, dn = model.noise_dim;
  std::vector<double> sigma(d * dn);
  field.diffusion(x, sigma);
  Matrix a(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < dn; ++l) s += sigma[i * dn + l] * sigma[j * dn + l];
      a(i, j) = s;
    }
  return a;
}

}  // namespace detail

// V(t, mu); exactly Phi(mu) at t = 0.
inline double master_value(const MasterEvaluator& ev, double t, const DiscreteMeasure& mu, std::uint64_t seed,
                           std::uint32_t replication = 0) {
  ev.validate();
  const std::size_t step = detail::grid_steps(t, ev.dt);
  if (step == 0) return ev.phi.value(mu);
  const ParticleCloud base = cloud_from_measure(mu, ev.inner_particles);
  const std::size_t steps[] = {step};
  return detail::perturbed_values(ev, base, {}, 0.0, steps, detail::inner_key(seed, replication))[0];
}

// dV/dm(t, nu, y) normalized to vanish at y = 0.
inline double master_lfd(const MasterEvaluator& ev, double t, const DiscreteMeasure& nu, std::span<const double> y,
                         std::uint64_t seed, std::uint32_t replication = 0) {
  ev.validate();
  const std::size_t steps[] = {detail::grid_steps(t, ev.dt)};
  const ParticleCloud base = cloud_from_measure(nu, ev.inner_particles);
  return detail::lfd_steps(ev, base, y, steps, detail::inner_key(seed, replication))[0];
}

// d_mu V(t, nu)(y) by central differences of the linear derivative in y.
inline std::vector<double> master_lderiv(const MasterEvaluator& ev, double t, const DiscreteMeasure& nu,
                                         std::span<const double> y, std::uint64_t seed, std::uint32_t replication = 0) {
  ev.validate();
  const std::size_t steps[] = {detail::grid_steps(t, ev.dt)};
  const ParticleCloud base = cloud_from_measure(nu, ev.inner_particles);
  return detail::lderiv_steps(ev, base, y, steps, detail::inner_key(seed, replication))[0];
}

// d_v d_mu V(t, nu)(y) by second differences of the linear derivative in y.
inline Matrix master_lhessian(const MasterEvaluator& ev, double t, const DiscreteMeasure& nu, std::span<const double> y,
                              std::uint64_t seed, std::uint32_t replication = 0) {
  ev.validate();
  const ParticleCloud base = cloud_from_measure(nu, ev.inner_particles);
  return detail::lhessian_at(ev, base, y, detail::grid_steps(t, ev.dt), detail::inner_key(seed, replication));
}

// d^2_mu V(t, nu)(y, y).
inline Matrix master_second_lderiv(const MasterEvaluator& ev, double t, const DiscreteMeasure& nu,
                                   std::span<const double> y, std::uint64_t seed, std::uint32_t replication = 0) {
  ev.validate();
  const ParticleCloud base = cloud_from_measure(nu, ev.inner_particles);
  return detail::second_lderiv_at(ev, base, y, detail::grid_steps(t, ev.dt), detail::inner_key(seed, replication));
}

struct ThetaOptions {
  std::size_t time_stride = 10;
  std::size_t particle_samples = 8;
  unsigned workers = 0;
};

// Second-order correction of the fluctuation decomposition along one particle run:
// int_0^t 1/2 N^{-3/2} sum_i Tr(a(Y_s^i, mu_s^N) d^2_mu V(t-s, mu_s^N)(Y_s^i, Y_s^i)) ds,
// left-Riemann in s and a systematic subsample of particles.
inline double theta_term_estimate(const MasterEvaluator& ev, const Trajectory& particles, double t, std::uint64_t seed,
                                  const ThetaOptions& options = {}) {
  ev.validate();
  if (std::abs(particles.dt - ev.dt) > 1e-12) throw std::invalid_argument("trajectory dt differs from evaluator dt");
  if (options.time_stride == 0 || options.particle_samples == 0) throw std::invalid_argument("stride and samples must be positive");
  const std::size_t steps_t = detail::grid_steps(t, ev.dt);
  if (steps_t > particles.steps) throw std::invalid_argument("time beyond the trajectory");
  const std::size_t n = particles.particles;
  const std::size_t samples = std::min(options.particle_samples, n);
  std::vector<std::size_t> grid;
  for (std::size_t k = 0; k < steps_t; k += options.time_stride) grid.push_back(k);
  std::vector<double> contribution(grid.size(), 0.0);
  parallel_for(grid.size(), options.workers, [&](std::size_t g) {
    const std::size_t k = grid[g];
    const DiscreteMeasure mu = particles.empirical(k);
    const ParticleCloud base = cloud_from_measure(mu, ev.inner_particles);
    const CoefficientField field = ev.model.freeze(mu);
    const StreamKey key = detail::inner_key(seed, static_cast<std::uint32_t>(k));
    double sum = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t i = static_cast<std::size_t>((static_cast<double>(s) + 0.5) * static_cast<double>(n) /
                                                     static_cast<double>(samples));
      const auto y = mu.point(i);
      const Matrix second = detail::second_lderiv_at(ev, base, y, steps_t - k, key);
      const Matrix a = detail::diffusion_matrix(ev.model, field, y);
      for (std::size_t j = 0; j < a.rows(); ++j)
        for (std::size_t l = 0; l < a.cols(); ++l) sum += a(j, l) * second(l, j);
    }
    const double ds = static_cast<double>(std::min(options.time_stride, steps_t - k)) * ev.dt;
    contribution[g] = ds * 0.5 * std::pow(static_cast<double>(n), -1.5) * static_cast<double>(n) /
                      static_cast<double>(samples) * sum;
  });
  double total = 0.0;
  for (double c : contribution) total += c;
  return total;
}

struct ResidualOptions {
  std::size_t tau_steps = 5;
  std::size_t repeats = 8;
  double rel_tol = 0.05;
  double abs_tol = 1e-6;
  unsigned workers = 0;
};

// Error budget: a Student-t multiple of the standard error over repeats with the two-sided
// coverage of 3 sigma, a relative allowance for the eps, h and dt biases, and an absolute floor.
struct ResidualReport {
  double lhs = 0.0;
  double rhs = 0.0;
  double residual = 0.0;
  double std_error = 0.0;
  double budget = 0.0;
  bool within = false;
};

// Master equation check: d_t V(t, mu) against
// integral of [d_mu V(t, mu)(v) . b(v, mu) + 1/2 Tr(d_v d_mu V(t, mu)(v) a(v, mu))] dmu(v).
inline ResidualReport master_equation_residual(const MasterEvaluator& ev, double t, const DiscreteMeasure& mu,
                                               std::uint64_t seed, const ResidualOptions& options = {}) {
  ev.validate();
  if (options.tau_steps == 0 || options.repeats < 2) throw std::invalid_argument("need tau_steps >= 1 and repeats >= 2");
  const std::size_t step = detail::grid_steps(t, ev.dt);
  const std::size_t tau = options.tau_steps;
  const bool central = step >= tau;
  const std::size_t lo = central ? step - tau : step;
  const double span_t = static_cast<double>(step + tau - lo) * ev.dt;
  const ParticleCloud base = cloud_from_measure(mu, ev.inner_particles);
  const CoefficientField field = ev.model.freeze(mu);
  const std::size_t d = ev.model.dim;
  std::vector<double> lhs(options.repeats), rhs(options.repeats);
  parallel_for(options.repeats, options.workers, [&](std::size_t r) {
    const StreamKey key = detail::inner_key(seed, static_cast<std::uint32_t>(r));
    const std::size_t ends[] = {lo, step + tau};
    const auto v = detail::perturbed_values(ev, base, {}, 0.0, ends, key);
    lhs[r] = (v[1] - v[0]) / span_t;
    const std::size_t at[] = {step};
    double total = 0.0;
    std::vector<double> drift(d);
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const auto y = mu.point(i);
      const auto grad = detail::lderiv_steps(ev, base, y, at, key)[0];
      const Matrix hess = detail::lhessian_at(ev, base, y, step, key);
      const Matrix a = detail::diffusion_matrix(ev.model, field, y);
      field.drift(y, drift);
      double term = 0.0;
      for (std::size_t j = 0; j < d; ++j) term += grad[j] * drift[j];
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t l = 0; l < d; ++l) term += 0.5 * hess(j, l) * a(l, j);
      total += mu.weight(i) * term;
    }
    rhs[r] = total;
  });
  std::vector<double> diff(options.repeats);
  for (std::size_t r = 0; r < options.repeats; ++r) diff[r] = lhs[r] - rhs[r];
  ResidualReport out;
  out.lhs = mean_with_error(lhs).mean;
  out.rhs = mean_with_error(rhs).mean;
  const MeanEstimate gap = mean_with_error(diff);
  out.residual = std::abs(gap.mean);
  out.std_error = gap.std_error;
  const boost::math::students_t spread(static_cast<double>(options.repeats - 1));
  const double multiplier = boost::math::quantile(spread, normal_cdf(3.0));
  out.budget = multiplier * gap.std_error + options.rel_tol * std::max(std::abs(out.lhs), std::abs(out.rhs)) + options.abs_tol;
  out.within = out.residual <= out.budget;
  return out;
}

struct CovarianceConfig {
  std::size_t inner_particles = 1000;
  double dt = 0.01;
  double eps = 0.05;
  double h = 0.1;
  std::size_t extra_copies = 16;
  bool richardson = false;
  std::size_t reference_particles = 5000;
  std::size_t path_samples = 64;
  std::size_t quad_stride = 1;
  std::size_t outer_samples = 64;
  std::size_t quadrature_points = 24;
  // Runs even when the model declares neither a Dirac initial law nor bounded coefficients.
  bool force = false;
  unsigned workers = 0;
};

struct CovarianceReport {
  std::vector<double> times;
  Matrix initial_term;
  Matrix noise_term;
  Matrix value;
  Matrix std_error;
  std::string initial_method;
};

inline constexpr std::size_t kMaxTimePoints = 8;

namespace detail {

inline std::vector<std::size_t> check_times(std::span<const double> times, double dt, bool allow_zero) {
  if (times.empty()) throw std::invalid_argument("at least one time point is required");
  if (times.size() > kMaxTimePoints) throw std::invalid_argument("at most 8 time points are supported");
  std::vector<std::size_t> steps;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (i > 0 && !(times[i] > times[i - 1])) throw std::invalid_argument("times must be strictly increasing");
    if (!allow_zero && !(times[i] > 0.0)) throw std::invalid_argument("times must be positive");
    steps.push_back(grid_steps(times[i], dt));
  }
  return steps;
}

struct OuterRule {
  std::vector<std::vector<double>> points;
  std::vector<double> weights;
  std::string method;
};

inline OuterRule outer_rule(const SamplerSpec& law, const CovarianceConfig& config, std::uint64_t seed) {
  OuterRule rule;
  if (law.is_discrete()) {
    const DiscreteMeasure atoms = law.atoms().merged();
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      rule.points.emplace_back(atoms.point(i).begin(), atoms.point(i).end());
      rule.weights.push_back(atoms.weight(i));
    }
    rule.method = atoms.size() == 1 ? "dirac" : "atoms";
    return rule;
  }
  if (law.dim() == 1 && law.kind() == SamplerSpec::Kind::Normal) {
    const auto [mean, sd] = law.parameters();
    const auto gh = gauss_hermite_normal(config.quadrature_points);
    for (std::size_t i = 0; i < gh.nodes.size(); ++i) {
      rule.points.push_back({mean + sd * gh.nodes[i]});
      rule.weights.push_back(gh.weights[i]);
    }
    rule.method = "gauss-hermite";
    return rule;
  }
  if (law.dim() == 1 && law.kind() == SamplerSpec::Kind::Uniform) {
    const auto [lo, hi] = law.parameters();
    const auto gl = gauss_legendre_unit(config.quadrature_points);
    for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
      rule.points.push_back({lo + (hi - lo) * gl.nodes[i]});
      rule.weights.push_back(gl.weights[i]);
    }
    rule.method = "gauss-legendre";
    return rule;
  }
  if (config.outer_samples < 3) throw std::invalid_argument("outer_samples must be at least 3");
  RandomStream rng(seed, StreamTag::kOuterXi);
  std::vector<double> x(law.dim());
  for (std::size_t i = 0; i < config.outer_samples; ++i) {
    law.sample(rng, x);
    rule.points.push_back(x);
    rule.weights.push_back(1.0 / static_cast<double>(config.outer_samples));
  }
  rule.method = "monte-carlo";
  return rule;
}

}  // namespace detail

// Limit covariance of the fluctuation process at the given times: the covariance of the
// linear derivative of V over the initial law, plus the time integral of
// d_mu V(t_i - s, mu_s)(X_s)^T a(X_s, mu_s) d_mu V(t_j - s, mu_s)(X_s) along limit paths.
inline CovarianceReport theoretical_covariance(const Functional& phi, const MkvModel& model, std::span<const double> times,
                                               CovarianceConfig config, std::uint64_t seed) {
  if (!(model.flags.is_dirac_initial || model.flags.claims_bounded_coeffs || config.force)) {
    throw HypothesisError("model '" + model.name +
                          "' declares neither a Dirac initial law nor bounded coefficients; use force for diagnostics");
  }
  const MasterEvaluator ev{phi,   model,           config.inner_particles, config.dt, config.eps,
                           config.h, config.extra_copies, config.richardson,     true};
  ev.validate();
  if (config.path_samples == 0 || config.quad_stride == 0) throw std::invalid_argument("path_samples and quad_stride must be positive");
  const std::vector<std::size_t> steps = detail::check_times(times, ev.dt, false);
  const std::size_t k = times.size();
  const std::size_t last = steps.back();
  CovarianceReport out{std::vector<double>(times.begin(), times.end()), Matrix(k, k), Matrix(k, k), Matrix(k, k),
                       Matrix(k, k), ""};

  // Initial-law term.
  const detail::OuterRule rule = detail::outer_rule(model.initial, config, seed);
  out.initial_method = rule.method;
  Matrix initial_se(k, k);
  if (rule.points.size() > 1) {
    const ParticleCloud base = cloud_from_law(model.initial, ev.inner_particles);
    Matrix lfd(rule.points.size(), k);
    parallel_for(rule.points.size(), config.workers, [&](std::size_t q) {
      const auto v = detail::lfd_steps(ev, base, rule.points[q], steps, detail::inner_key(seed, 0x7FFFFFFFu));
      for (std::size_t i = 0; i < k; ++i) lfd(q, i) = v[i];
    });
    if (rule.method == "monte-carlo") {
      const CovarianceEstimate est = empirical_cov(lfd);
      out.initial_term = est.value;
      initial_se = est.std_error;
    } else {
      std::vector<double> mean(k, 0.0);
      for (std::size_t q = 0; q < rule.points.size(); ++q)
        for (std::size_t i = 0; i < k; ++i) mean[i] += rule.weights[q] * lfd(q, i);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          double s = 0.0;
          for (std::size_t q = 0; q < rule.points.size(); ++q)
            s += rule.weights[q] * (lfd(q, i) - mean[i]) * (lfd(q, j) - mean[j]);
          out.initial_term(i, j) = s;
        }
    }
  }

  // Noise term along limit paths.
  const ReferenceCloud reference =
      simulate_limit_reference(model, config.reference_particles, ev.dt, static_cast<double>(last) * ev.dt, seed);
  const std::size_t paths = std::min(config.path_samples, config.reference_particles);
  std::vector<std::size_t> path_index(paths);
  for (std::size_t p = 0; p < paths; ++p) {
    path_index[p] = static_cast<std::size_t>((static_cast<double>(p) + 0.5) *
                                             static_cast<double>(config.reference_particles) / static_cast<double>(paths));
  }
  std::vector<std::size_t> grid;
  for (std::size_t s = 0; s < last; s += config.quad_stride) grid.push_back(s);
  // contribution[g][p] is a k x k block.
  std::vector<std::vector<Matrix>> contribution(grid.size());
  parallel_for(grid.size(), config.workers, [&](std::size_t g) {
    const std::size_t s = grid[g];
    const DiscreteMeasure& mu = reference.snapshots[s];
    const ParticleCloud base = cloud_from_measure(mu, ev.inner_particles);
    const CoefficientField field = model.freeze(mu);
    const double ds = static_cast<double>(std::min(config.quad_stride, last - s)) * ev.dt;
    std::vector<std::size_t> live, horizons;
    for (std::size_t i = 0; i < k; ++i) {
      if (steps[i] > s) {
        live.push_back(i);
        horizons.push_back(steps[i] - s);
      }
    }
    const StreamKey key = detail::inner_key(seed, static_cast<std::uint32_t>(s));
    contribution[g].assign(paths, Matrix(k, k));
    for (std::size_t p = 0; p < paths; ++p) {
      const auto x = mu.point(path_index[p]);
      const auto grad = detail::lderiv_steps(ev, base, x, horizons, key);
      const Matrix a = detail::diffusion_matrix(model, field, x);
      for (std::size_t u = 0; u < live.size(); ++u)
        for (std::size_t v = 0; v < live.size(); ++v) {
          double q = 0.0;
          for (std::size_t j = 0; j < model.dim; ++j)
            for (std::size_t l = 0; l < model.dim; ++l) q += grad[u][j] * a(j, l) * grad[v][l];
          contribution[g][p](live[u], live[v]) = ds * q;
        }
    }
  });
  std::vector<Matrix> per_path(paths, Matrix(k, k));
  for (const auto& block : contribution)
    for (std::size_t p = 0; p < paths; ++p)
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) per_path[p](i, j) += block[p](i, j);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      std::vector<double> column(paths);
      for (std::size_t p = 0; p < paths; ++p) column[p] = per_path[p](i, j);
      const MeanEstimate m = mean_with_error(column);
      out.noise_term(i, j) = m.mean;
      const double se2 = paths > 1 ? m.std_error : 0.0;
      const double se1 = std::isfinite(initial_se(i, j)) ? initial_se(i, j) : 0.0;
      out.value(i, j) = out.initial_term(i, j) + m.mean;
      out.std_error(i, j) = std::sqrt(se1 * se1 + se2 * se2);
    }
  return out;
}

struct DirectionTest {
  std::vector<double> direction;
  double variance = 0.0;
  double statistic = 0.0;
  double p_value = 0.0;
  bool skipped = false;
};

// Coordinate axes, plus the normalized all-ones direction when there are at least two times.
inline std::vector<std::vector<double>> default_directions(std::size_t k) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> e(k, 0.0);
    e[i] = 1.0;
    out.push_back(std::move(e));
  }
  if (k >= 2) out.emplace_back(k, 1.0 / std::sqrt(static_cast<double>(k)));
  return out;
}

// KS test of each projection of the samples against N(0, theta^T Sigma theta). Directions
// with vanishing projected variance are skipped and flagged.
inline std::vector<DirectionTest> cramer_wold_normality(const Matrix& samples, const Matrix& sigma,
                                                        const std::vector<std::vector<double>>& directions) {
  const std::size_t k = samples.cols();
  if (sigma.rows() != k || sigma.cols() != k) throw std::invalid_argument("covariance shape does not match samples");
  if (k >= 2 && directions.size() < 3) throw std::invalid_argument("at least three directions are required");
  for (std::size_t i = 0; i < k; ++i) {
    const bool has_axis = std::any_of(directions.begin(), directions.end(), [&](const std::vector<double>& theta) {
      for (std::size_t j = 0; j < k; ++j)
        if (theta[j] != (i == j ? 1.0 : 0.0)) return false;
      return true;
    });
    if (!has_axis) throw std::invalid_argument("directions must include every coordinate axis");
  }
  std::vector<DirectionTest> out;
  for (const auto& theta : directions) {
    if (theta.size() != k) throw std::invalid_argument("direction has wrong length");
    DirectionTest test{theta, 0.0, 0.0, std::numeric_limits<double>::quiet_NaN(), false};
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) test.variance += theta[i] * sigma(i, j) * theta[j];
    if (!(test.variance > 1e-12)) {
      test.skipped = true;
      out.push_back(std::move(test));
      continue;
    }
    std::vector<double> projected(samples.rows(), 0.0);
    for (std::size_t r = 0; r < samples.rows(); ++r)
      for (std::size_t i = 0; i < k; ++i) projected[r] += theta[i] * samples(r, i);
    const KsResult ks = ks_test_normal(projected, 0.0, test.variance);
    test.statistic = ks.statistic;
    test.p_value = ks.p_value;
    out.push_back(std::move(test));
  }
  return out;
}

struct FluctuationOptions {
  double dt = 0.01;
  // Zero selects R N clamped to [5000, 4e6], so the centering error is comparable to the
  // standard error of the sample mean of F.
  std::size_t reference_particles = 0;
  unsigned workers = 0;
};

struct FluctuationReport {
  std::vector<double> times;
  Matrix f_samples;
  Matrix sigma_empirical;
  Matrix sigma_empirical_se;
  Matrix sigma_theory;
  Matrix sigma_theory_se;
  std::vector<DirectionTest> cramer_wold;
  std::vector<double> reference_phi;
  // |Phi| gap between two independent reference runs, and the same gap times sqrt(N).
  std::vector<double> reference_bias;
  std::vector<double> reference_bias_scaled;

  std::vector<double> cramer_wold_pvalues() const {
    std::vector<double> out;
    for (const auto& d : cramer_wold) out.push_back(d.p_value);
    return out;
  }
};

namespace detail {

inline std::vector<double> phi_along_run(const Functional& phi, const MkvModel& model, ParticleCloud cloud, double dt,
                                         std::span<const std::size_t> steps, const StreamKey& key) {
  std::vector<double> out(steps.size(), 0.0);
  integrate_cloud(model, cloud, dt, steps.back(), key, [&](std::size_t k, const DiscreteMeasure& mu) {
    for (std::size_t i = 0; i < steps.size(); ++i)
      if (steps[i] == k) out[i] = phi.value(mu);
  });
  return out;
}

}  // namespace detail

// Empirical part of the fluctuation experiment: R particle systems of size N, each giving
// F^N_t = sqrt(N) (Phi(mu^N_t) - Phi(mu_t)) against one frozen reference run.
inline FluctuationReport fluctuation_process(const Functional& phi, const MkvModel& model, std::size_t n,
                                             std::span<const double> times, std::size_t replications, std::uint64_t seed,
                                             const FluctuationOptions& options = {}) {
  if (phi.dim() != model.dim) throw std::invalid_argument("functional and model dimensions differ");
  if (n < 2) throw std::invalid_argument("particle system needs N >= 2");
  if (replications < 2) throw std::invalid_argument("at least two replications are required");
  const std::vector<std::size_t> steps = detail::check_times(times, options.dt, true);
  const std::size_t k = times.size();
  const std::size_t m_ref = options.reference_particles > 0 ? options.reference_particles
                                                              : std::clamp<std::size_t>(replications * n, 5000, 4000000);
  FluctuationReport out;
  out.times.assign(times.begin(), times.end());
  const ParticleCloud ref_cloud = cloud_from_law(model.initial, m_ref);
  out.reference_phi = detail::phi_along_run(phi, model, ref_cloud, options.dt, steps,
                                            StreamKey{seed, StreamTag::kReferenceNoise, 0, 0});
  const auto second = detail::phi_along_run(phi, model, ref_cloud, options.dt, steps,
                                            StreamKey{seed, StreamTag::kReferenceNoise, 1, 0});
  const double root_n = std::sqrt(static_cast<double>(n));
  for (std::size_t i = 0; i < k; ++i) {
    out.reference_bias.push_back(std::abs(out.reference_phi[i] - second[i]));
    out.reference_bias_scaled.push_back(root_n * out.reference_bias.back());
  }
  out.f_samples = Matrix(replications, k);
  parallel_for(replications, options.workers, [&](std::size_t r) {
    ParticleOptions popts;
    popts.replication = static_cast<std::uint32_t>(r);
    ParticleCloud cloud = detail::particle_system_cloud(model, n, seed, popts);
    const auto values = detail::phi_along_run(phi, model, std::move(cloud), options.dt, steps,
                                              StreamKey{seed, StreamTag::kParticleNoise, popts.replication, 0});
    for (std::size_t i = 0; i < k; ++i) {
      const double f = root_n * (values[i] - out.reference_phi[i]);
      if (!std::isfinite(f)) throw NumericError("non-finite fluctuation sample in replication " + std::to_string(r));
      out.f_samples(r, i) = f;
    }
  });
  const CovarianceEstimate cov = empirical_cov(out.f_samples);
  out.sigma_empirical = cov.value;
  out.sigma_empirical_se = cov.std_error;
  return out;
}

struct FourthMomentOptions {
  double dt = 0.01;
  // Inner clouds hold at least this many particles and at least two copies of each atom.
  std::size_t inner_particles = 1000;
  std::size_t reference_particles = 20000;
  unsigned workers = 0;
};

struct IncrementMomentReport {
  std::vector<std::size_t> n_grid;
  std::vector<MeanEstimate> values;
  double slope = 0.0;
  double r2 = 0.0;
};

// E|(V(t2, mu_0^N) - V(t2, nu)) - (V(t1, mu_0^N) - V(t1, nu))|^4 over an N grid, with V from
// inner clouds replicating the empirical initial atoms.
inline IncrementMomentReport time_increment_fourth_moment(const Functional& phi, const MkvModel& model, double t1,
                                                          double t2, const std::vector<std::size_t>& n_grid,
                                                          std::size_t replications, std::uint64_t seed,
                                                          const FourthMomentOptions& options = {}) {
  if (phi.dim() != model.dim) throw std::invalid_argument("functional and model dimensions differ");
  if (!(t2 > t1) || !(t1 >= 0.0)) throw std::invalid_argument("need 0 <= t1 < t2");
  if (n_grid.size() < 3) throw std::invalid_argument("N grid needs at least three points");
  for (std::size_t i = 1; i < n_grid.size(); ++i)
    if (n_grid[i] <= n_grid[i - 1]) throw std::invalid_argument("N grid must be strictly increasing");
  if (replications < 2) throw std::invalid_argument("at least two replications are required");
  const std::size_t steps[] = {detail::grid_steps(t1, options.dt), detail::grid_steps(t2, options.dt)};
  const auto limit = detail::phi_along_run(phi, model, cloud_from_law(model.initial, options.reference_particles),
                                           options.dt, steps, StreamKey{seed, StreamTag::kReferenceNoise, 2, 0});
  IncrementMomentReport out;
  out.n_grid = n_grid;
  std::vector<double> xs, ys;
  for (std::size_t n : n_grid) {
    const std::size_t copies = std::max<std::size_t>(2, (options.inner_particles + n - 1) / n);
    std::vector<double> stat(replications);
    parallel_for(replications, options.workers, [&](std::size_t r) {
      const StreamKey draw_key{seed, StreamTag::kMasterInitial, static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(n)};
      RandomStream rng(draw_key);
      const DiscreteMeasure initial = empirical_from_samples(model.dim, model.initial.sample_many(rng, n));
      const StreamKey noise{splitmix64(seed ^ n), StreamTag::kInnerNoise, static_cast<std::uint32_t>(r), 0};
      const auto v = detail::phi_along_run(phi, model, cloud_from_measure(initial, copies * n), options.dt, steps, noise);
      const double inc = (v[1] - limit[1]) - (v[0] - limit[0]);
      stat[r] = inc * inc * inc * inc;
    });
    out.values.push_back(mean_with_error(stat));
    xs.push_back(static_cast<double>(n));
    ys.push_back(out.values.back().mean);
  }
  const SlopeFit fit = loglog_slope(xs, ys);
  out.slope = fit.slope;
  out.r2 = fit.r2;
  return out;
}

struct ModelCheck {
  double lipschitz_estimate = 0.0;
  double min_quadratic_form = 0.0;
  double max_asymmetry = 0.0;
  bool positive_semidefinite = true;
};

// Probes the drift's spatial Lipschitz ratio and a = sigma sigma^T at random points under the
// initial law's proxy.
inline ModelCheck spot_check_model(const MkvModel& model, std::size_t probes, std::uint64_t seed) {
  const DiscreteMeasure mu = model.initial.is_discrete() ? model.initial.atoms() : model.initial.proxy(256);
  const CoefficientField field = model.freeze(mu);
  RandomStream rng(seed, StreamTag::kProbe);
  const std::size_t d = model.dim;
  std::vector<double> x(d), y(d), bx(d), by(d), v(d);
  ModelCheck out;
  out.min_quadratic_form = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < probes; ++p) {
    for (std::size_t j = 0; j < d; ++j) {
      x[j] = 3.0 * rng.normal();
      y[j] = x[j] + 0.1 * rng.normal();
      v[j] = rng.normal();
    }
    field.drift(x, bx);
    field.drift(y, by);
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      num += (bx[j] - by[j]) * (bx[j] - by[j]);
      den += (x[j] - y[j]) * (x[j] - y[j]);
    }
    if (den > 0.0) out.lipschitz_estimate = std::max(out.lipschitz_estimate, std::sqrt(num / den));
    const Matrix a = detail::diffusion_matrix(model, field, x);
    double q = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        q += v[i] * a(i, j) * v[j];
        out.max_asymmetry = std::max(out.max_asymmetry, std::abs(a(i, j) - a(j, i)));
      }
    out.min_quadratic_form = std::min(out.min_quadratic_form, q);
  }
  out.positive_semidefinite = out.min_quadratic_form >= -1e-12;
  return out;
}

}  // namespace mfclt
