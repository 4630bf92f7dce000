// Fluctuations of the particle mean for dX = -X dt + dW started from N(0,1), compared with
// the closed-form limit covariance exp(-(s+t)) (1 + (exp(2 min(s,t)) - 1) / 2).
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "mfclt/mean_field.hpp"
#include "mfclt/registry.hpp"

int main() {
  const auto law = mfclt::SamplerSpec::normal(0.0, 1.0);
  const auto model = mfclt::ou_model(law);
  const auto phi = mfclt::make_functional("linear-x", law);
  const std::vector<double> times{0.5, 1.0};

  const auto fluct = mfclt::fluctuation_process(phi, model, 200, times, 200, 7);

  mfclt::CovarianceConfig config;
  config.force = true;
  config.inner_particles = 400;
  config.reference_particles = 1000;
  config.path_samples = 8;
  config.quad_stride = 2;
  const auto theory = mfclt::theoretical_covariance(phi, model, times, config, 7);

  std::printf("  s     t     empirical          estimated          closed form\n");
  for (std::size_t i = 0; i < times.size(); ++i) {
    for (std::size_t j = i; j < times.size(); ++j) {
      const double s = times[i], t = times[j];
      const double closed = std::exp(-(s + t)) * (1.0 + (std::exp(2.0 * std::min(s, t)) - 1.0) / 2.0);
      std::printf("  %.2f  %.2f  %.4f +- %.4f   %.4f +- %.4f   %.4f\n", s, t, fluct.sigma_empirical(i, j),
                  fluct.sigma_empirical_se(i, j), theory.value(i, j), theory.std_error(i, j), closed);
    }
  }

  const auto tests = mfclt::cramer_wold_normality(fluct.f_samples, theory.value, mfclt::default_directions(times.size()));
  for (const auto& test : tests) {
    std::printf("direction (%+.3f, %+.3f): KS p = %.4f\n", test.direction[0], test.direction[1], test.p_value);
  }
  return 0;
}
