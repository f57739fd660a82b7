#pragma once

#include <array>
#include <functional>

namespace cji {

struct QuadratureOptions {
  double abs_tol = 1e-5;
  double rel_tol = 1e-5;
  int max_depth = 48;
};

template <std::size_t N>
using QuadValue = std::array<double, N>;

// Adaptive Simpson on [a, b] for a vector-valued integrand; every component
// must meet max(abs_tol, rel_tol * |I|). Throws QuadratureError when the
// recursion bottoms out without meeting the tolerance.
template <std::size_t N>
QuadValue<N> integrate(const std::function<QuadValue<N>(double)>& f, double a, double b,
                       const QuadratureOptions& opts = {});

double integrate_scalar(const std::function<double(double)>& f, double a, double b,
                        const QuadratureOptions& opts = {});

}  // namespace cji
