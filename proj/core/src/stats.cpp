#include "cji/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cji {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

double ks_pvalue(double d, std::size_t n) {
  if (n == 0) return 1.0;
  const double en = std::sqrt(static_cast<double>(n));
  const double lam = (en + 0.12 + 0.11 / en) * d;
  if (lam <= 0.0) return 1.0;
  constexpr double pi = std::numbers::pi;
  if (lam < 1.18) {
    // theta-function form, converges fast for small lambda
    const double y = std::exp(-pi * pi / (8.0 * lam * lam));
    double sum = 0.0;
    for (int k = 1; k <= 50; ++k) {
      const double term = std::pow(y, (2 * k - 1) * (2 * k - 1));
      sum += term;
      if (term < 1e-17 * sum) break;
    }
    return std::clamp(1.0 - std::sqrt(2.0 * pi) / lam * sum, 0.0, 1.0);
  }
  double sum = 0.0, sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lam * lam);
    sum += sign * term;
    if (term < 1e-17) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

MeanStderr mean_stderr(const std::vector<double>& v) {
  MeanStderr out;
  if (v.empty()) return out;
  const double n = static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += x;
  out.mean = s / n;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.variance = ss / (n - 1.0);
    out.sem = std::sqrt(out.variance / n);
  }
  return out;
}

}  // namespace cji
