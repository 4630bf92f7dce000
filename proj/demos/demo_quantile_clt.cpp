// Median of N(0,1) samples: sqrt(N)(q_N - q) against the limit variance pi/2.
#include <cstdio>
#include <numbers>

#include "mfclt/clt.hpp"
#include "mfclt/registry.hpp"
#include "mfclt/stats.hpp"

int main() {
  const auto law = mfclt::SamplerSpec::normal(0.0, 1.0);
  const auto median = mfclt::make_functional("quantile:0.5", law);
  const auto report = mfclt::run_clt_experiment(median, law, 2000, 400, 42);

  std::printf("reference median      %.6f (%s)\n", report.reference.value, report.reference.method.c_str());
  std::printf("limit variance        %.6f (pi/2 = %.6f)\n", report.sigma2_theory, std::numbers::pi / 2.0);
  std::printf("empirical variance    %.6f +- %.6f\n", report.sigma2_empirical, report.sigma2_empirical_se);
  std::printf("KS statistic          %.4f, p = %.4f\n", report.ks_stat, report.ks_pvalue);

  std::printf("\nQQ points (theoretical, sample):\n");
  const auto qq = mfclt::qq_data(report.samples, 0.0, report.sigma2_theory);
  for (std::size_t i = 0; i < qq.size(); i += qq.size() / 8) {
    std::printf("  %+.3f  %+.3f\n", qq[i].theoretical_quantile, qq[i].sample_quantile);
  }
  return 0;
}
