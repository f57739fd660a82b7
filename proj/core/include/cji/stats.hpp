#pragma once

#include <functional>
#include <vector>

namespace cji {

double normal_cdf(double x);

// sup |F_n - F| for the given samples (copied and sorted).
double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf);

// P(D_n >= d) under the null, asymptotic Kolmogorov law with Stephens'
// finite-n correction.
double ks_pvalue(double d, std::size_t n);

struct MeanStderr {
  double mean = 0.0;
  double sem = 0.0;  // standard error of the mean
  double variance = 0.0;  // unbiased
};

MeanStderr mean_stderr(const std::vector<double>& v);

}  // namespace cji
