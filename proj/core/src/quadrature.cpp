#include "cji/quadrature.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "cji/common.hpp"

namespace cji {

namespace {

template <std::size_t N>
struct Simpson {
  const std::function<QuadValue<N>(double)>& f;
  QuadratureOptions opts;
  QuadValue<N> total_estimate;
  double worst_error = 0.0;
  bool failed = false;

  static QuadValue<N> combine(const QuadValue<N>& fa, const QuadValue<N>& fm, const QuadValue<N>& fb, double h) {
    QuadValue<N> s;
    for (std::size_t i = 0; i < N; ++i) s[i] = h / 6.0 * (fa[i] + 4.0 * fm[i] + fb[i]);
    return s;
  }

  QuadValue<N> recurse(double a, double b, const QuadValue<N>& fa, const QuadValue<N>& fm, const QuadValue<N>& fb,
                       const QuadValue<N>& whole, double share, int depth) {
    const double m = 0.5 * (a + b);
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const QuadValue<N> flm = f(lm), frm = f(rm);
    const QuadValue<N> left = combine(fa, flm, fm, m - a);
    const QuadValue<N> right = combine(fm, frm, fb, b - m);
    bool ok = true;
    double err_here = 0.0;
    QuadValue<N> out;
    for (std::size_t i = 0; i < N; ++i) {
      const double refined = left[i] + right[i];
      const double delta = refined - whole[i];
      const double tol = std::max(opts.abs_tol, opts.rel_tol * std::abs(total_estimate[i])) * share;
      if (!(std::abs(delta) <= 15.0 * tol)) ok = false;
      err_here = std::max(err_here, std::abs(delta) / 15.0);
      out[i] = refined + delta / 15.0;
    }
    if (ok) return out;
    if (depth >= opts.max_depth || !(b - a > 0.0) || m == a || m == b) {
      failed = true;
      worst_error = std::max(worst_error, err_here);
      return out;
    }
    const QuadValue<N> l = recurse(a, m, fa, flm, fm, left, 0.5 * share, depth + 1);
    const QuadValue<N> r = recurse(m, b, fm, frm, fb, right, 0.5 * share, depth + 1);
    for (std::size_t i = 0; i < N; ++i) out[i] = l[i] + r[i];
    return out;
  }
};

}  // namespace

template <std::size_t N>
QuadValue<N> integrate(const std::function<QuadValue<N>(double)>& f, double a, double b,
                       const QuadratureOptions& opts) {
  QuadValue<N> zero{};
  if (a == b) return zero;
  if (b < a) {
    QuadValue<N> r = integrate<N>(f, b, a, opts);
    for (auto& v : r) v = -v;
    return r;
  }
  // seed the relative-tolerance scale with a coarse 8-panel composite estimate
  Simpson<N> s{f, opts, zero};
  const int panels = 8;
  const double h = (b - a) / panels;
  std::array<QuadValue<N>, 2 * panels + 1> fv;
  for (int i = 0; i <= 2 * panels; ++i) fv[i] = f(a + 0.5 * h * i);
  std::array<QuadValue<N>, panels> coarse;
  for (int p = 0; p < panels; ++p) {
    coarse[p] = Simpson<N>::combine(fv[2 * p], fv[2 * p + 1], fv[2 * p + 2], h);
    for (std::size_t i = 0; i < N; ++i) s.total_estimate[i] += coarse[p][i];
  }
  QuadValue<N> total{};
  for (int p = 0; p < panels; ++p) {
    const QuadValue<N> part = s.recurse(a + p * h, a + (p + 1) * h, fv[2 * p], fv[2 * p + 1], fv[2 * p + 2],
                                        coarse[p], 1.0 / panels, 0);
    for (std::size_t i = 0; i < N; ++i) total[i] += part[i];
  }
  for (std::size_t i = 0; i < N; ++i) {
    if (!std::isfinite(total[i])) {
      throw QuadratureError("quadrature produced a non-finite value", std::numeric_limits<double>::infinity());
    }
  }
  if (s.failed) {
    std::ostringstream msg;
    msg << "adaptive Simpson did not converge on [" << a << ", " << b << "]: achieved error ~" << s.worst_error
        << " (abs_tol=" << opts.abs_tol << ", rel_tol=" << opts.rel_tol << ")";
    throw QuadratureError(msg.str(), s.worst_error);
  }
  return total;
}

template QuadValue<1> integrate<1>(const std::function<QuadValue<1>(double)>&, double, double, const QuadratureOptions&);
template QuadValue<2> integrate<2>(const std::function<QuadValue<2>(double)>&, double, double, const QuadratureOptions&);
template QuadValue<5> integrate<5>(const std::function<QuadValue<5>(double)>&, double, double, const QuadratureOptions&);
template QuadValue<6> integrate<6>(const std::function<QuadValue<6>(double)>&, double, double, const QuadratureOptions&);

double integrate_scalar(const std::function<double(double)>& f, double a, double b, const QuadratureOptions& opts) {
  const std::function<QuadValue<1>(double)> g = [&](double t) { return QuadValue<1>{f(t)}; };
  return integrate<1>(g, a, b, opts)[0];
}

}  // namespace cji
