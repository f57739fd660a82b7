#include "cji/conjugate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

namespace cji {

namespace {

constexpr double kExpLimit = 700.0;

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("bad number in table: '" + s + "'");
  return v;
}

double checked_exp(double e, const char* what) {
  if (e > kExpLimit) {
    std::ostringstream msg;
    msg << what << ": exponent " << e << " exceeds " << kExpLimit << " (lambda or w too large)";
    throw ConfigError(msg.str());
  }
  return std::exp(e);
}

}  // namespace

ConjugateTransform::ConjugateTransform(ProcessKind process, const GuidanceConfig& cfg, const DiffusionSchedule& sched,
                                       const ConjugateOptions& opts)
    : process_(process), cfg_(cfg), sched_(sched), opts_(opts) {
  if (!(cfg.w >= 0.0)) throw ConfigError("guidance weight w must be >= 0");
  if (!(cfg.sigma_y >= 0.0)) throw ConfigError("sigma_y must be >= 0");
  if (cfg.w > 0.0 && cfg.schedule != WeightSchedule::AdaptivePaper)
    throw ConfigError(std::string("conjugate transform needs schedule_kind=adaptive_paper, got ") +
                      to_string(cfg.schedule));
  if (!(opts.t_floor > 0.0) || !(opts.flow_margin > 0.0 && opts.flow_margin < 1.0))
    throw ConfigError("t_floor and flow_margin must be positive");
  const double t_max = process == ProcessKind::Diffusion ? sched.t_max() : 1.0;
  const double bound = std::abs(cfg.lambda) * t_max + (process == ProcessKind::Diffusion ? 0.5 * sched.beta_integral(t_max) : 0.0);
  if (bound > kExpLimit) {
    std::ostringstream msg;
    msg << "|lambda| T + int beta/2 = " << bound << " exceeds " << kExpLimit << "; exp(kappa1) would overflow";
    throw ConfigError(msg.str());
  }
}

void ConjugateTransform::check_time(double t) const {
  const double t_max = process_ == ProcessKind::Diffusion ? sched_.t_max() : 1.0;
  if (!(t >= 0.0 && t <= t_max)) {
    std::ostringstream msg;
    msg << "time " << t << " outside [0, " << t_max << "]";
    throw DomainError(msg.str());
  }
}

double ConjugateTransform::origin() const { return process_ == ProcessKind::Diffusion ? opts_.t_floor : 0.0; }

double ConjugateTransform::kappa1(double t) const {
  check_time(t);
  if (process_ == ProcessKind::Diffusion) return cfg_.lambda * t + 0.5 * sched_.beta_integral(t);
  return cfg_.lambda * t;
}

double ConjugateTransform::kappa2(double t) const {
  check_time(t);
  if (process_ == ProcessKind::Diffusion) return -0.5 * cfg_.w * sched_.beta_integral(t);
  return 0.5 * cfg_.w * (t * t / 2.0 - t * t * t / 3.0);
}

double ConjugateTransform::kappa3(double t) const {
  check_time(t);
  if (cfg_.sigma_y == 0.0 || cfg_.w == 0.0) return 0.0;
  const double k12 = kappa1(t) + kappa2(t);
  const double factor = opts_.kappa3_form == Kappa3Form::FirstOrder ? std::exp(k12) : std::expm1(k12);
  const double scale = 0.5 * cfg_.w * cfg_.sigma_y * cfg_.sigma_y;
  if (process_ == ProcessKind::Diffusion) {
    // int beta / r^2 = int beta e^B / (e^B - 1) = log(e^B - 1)
    const double lower = opts_.kappa3_floor < 0.0 ? opts_.t_floor : opts_.kappa3_floor;
    if (t <= lower) return 0.0;
    const double integral = std::log(std::expm1(sched_.beta_integral(t)) / std::expm1(sched_.beta_integral(lower)));
    return scale * integral * factor;
  }
  // int s (1 - s) / r^2 ds with u = 1 - s: integrand 1/u - 3 + 4u - 2u^2
  const double lower = opts_.kappa3_floor < 0.0 ? 0.0 : opts_.kappa3_floor;
  const double upper = std::min(t, 1.0 - opts_.flow_margin);
  if (upper <= lower) return 0.0;
  auto g = [](double u) { return std::log(u) - 3.0 * u + 2.0 * u * u - 2.0 / 3.0 * u * u * u; };
  const double integral = g(1.0 - lower) - g(1.0 - upper);
  return -scale * integral * factor;
}

Kappas ConjugateTransform::kappas(double t) const { return {kappa1(t), kappa2(t), kappa3(t)}; }

double ConjugateTransform::residual_proj_rate(double t) const {
  if (process_ == ProcessKind::Diffusion) return 0.0;
  return 0.5 * cfg_.w * t * (1.0 - t);
}

Vec ConjugateTransform::apply(const LinearDegradation& op, const Kappas& k, const Vec& x) {
  const Vec px = op.proj_apply(x);
  const double e1 = checked_exp(k.k1, "A_t");
  const double e12 = checked_exp(k.k1 + k.k2, "A_t");
  return e1 * (x - px) + e12 * px;
}

Vec ConjugateTransform::inverse_apply(const LinearDegradation& op, const Kappas& k, const Vec& x) {
  const Vec px = op.proj_apply(x);
  const double e1 = checked_exp(-k.k1, "A_t^-1");
  const double e12 = checked_exp(-(k.k1 + k.k2), "A_t^-1");
  return e1 * (x - px) + e12 * px;
}

Vec ConjugateTransform::noisy_apply(const LinearDegradation& op, const Kappas& k, const Vec& x) {
  Vec out = apply(op, k, x);
  if (k.k3 != 0.0) out += k.k3 * op.pinv_outer_apply(x);
  return out;
}

Vec ConjugateTransform::noisy_inverse_apply(const LinearDegradation& op, const Kappas& k, const Vec& x) {
  Vec out = inverse_apply(op, k, x);
  if (k.k3 != 0.0) {
    // A^-1 E A^-1 = exp(-2 (k1 + k2)) E since E = H^+ H^+T lives in range(P)
    const double e = checked_exp(-2.0 * (k.k1 + k.k2), "noisy A_t^-1");
    out -= k.k3 * e * op.pinv_outer_apply(x);
  }
  return out;
}

Vec ConjugateTransform::apply(const LinearDegradation& op, double t, const Vec& x) const {
  return apply(op, Kappas{kappa1(t), kappa2(t), 0.0}, x);
}

Vec ConjugateTransform::inverse_apply(const LinearDegradation& op, double t, const Vec& x) const {
  return inverse_apply(op, Kappas{kappa1(t), kappa2(t), 0.0}, x);
}

Vec ConjugateTransform::noisy_apply(const LinearDegradation& op, double t, const Vec& x) const {
  return noisy_apply(op, kappas(t), x);
}

Vec ConjugateTransform::noisy_inverse_apply(const LinearDegradation& op, double t, const Vec& x) const {
  return noisy_inverse_apply(op, kappas(t), x);
}

std::array<double, 5> ConjugateTransform::integrand(double s) const {
  const double w = cfg_.w;
  const double k1 = kappa1(s), k2 = kappa2(s);
  const double e1 = std::exp(k1), e12 = std::exp(k1 + k2), em = std::expm1(k2);
  if (process_ == ProcessKind::Diffusion) {
    const DiffusionPoint p = sched_.eval(s);
    const double a = p.beta / (2.0 * p.sigma);
    const double inner = opts_.phi_form == PhiForm::Simplified ? e12 : e12 * e12;
    const double j = 0.5 * w * p.beta * p.mu * p.sigma;
    return {-0.5 * w * p.beta * p.mu * e12, a * e1, a * e1 * em - 0.5 * w * p.beta * p.sigma * inner, j * e1, j * e1 * em};
  }
  const double g = w * s * (1.0 - s);
  const double gj = g * (1.0 - s);
  return {g * e12, e1, e1 * em - gj * e12, gj * e1, gj * e1 * em};
}

namespace {
PhiCoefficients to_phi(const std::array<double, 5>& v) {
  return PhiCoefficients{v[0], ScalarPair{v[1], v[2]}, ScalarPair{v[3], v[4]}};
}
}  // namespace

PhiCoefficients ConjugateTransform::phi(double a, double b) const {
  check_time(a);
  check_time(b);
  const double lo = std::max(a, origin()), hi = std::max(b, origin());
  if (lo == hi) return {};
  const std::function<std::array<double, 5>(double)> f = [this](double s) { return integrand(s); };
  return to_phi(integrate<5>(f, lo, hi, opts_.quad));
}

StepCoefficients ConjugateTransform::step_coefficients(double a, double b) const {
  check_time(a);
  check_time(b);
  const double lo = std::max(a, origin()), hi = std::max(b, origin());
  if (lo == hi) return {};
  const double kb1 = kappa1(hi), kb12 = kb1 + kappa2(hi);
  const double w = cfg_.w;
  const std::function<std::array<double, 5>(double)> f = [&](double s) -> std::array<double, 5> {
    const double k1 = kappa1(s), k12 = k1 + kappa2(s);
    const double r1 = std::exp(k1 - kb1), r12 = std::exp(k12 - kb12);
    if (process_ == ProcessKind::Diffusion) {
      const DiffusionPoint p = sched_.eval(s);
      const double a_s = p.beta / (2.0 * p.sigma);
      const double inner = opts_.phi_form == PhiForm::Simplified ? r12 : std::exp(k12) * r12;
      const double j = 0.5 * w * p.beta * p.mu * p.sigma;
      return {-0.5 * w * p.beta * p.mu * r12, a_s * r1, a_s * r12 - 0.5 * w * p.beta * p.sigma * inner, j * r1, j * r12};
    }
    const double g = w * s * (1.0 - s);
    const double gj = g * (1.0 - s);
    return {g * r12, r1, r12 - gj * r12, gj * r1, gj * r12};
  };
  const auto v = integrate<5>(f, lo, hi, opts_.quad);
  return StepCoefficients{v[0], v[1], v[2], v[3], v[4]};
}

PhiCoefficients ConjugateTransform::phi(double t) const { return phi(origin(), t); }

CoefficientTable ConjugateTransform::precompute(const std::vector<double>& grid) const {
  for (double t : grid) check_time(t);
  std::vector<double> times(grid);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  std::map<double, PhiCoefficients> cumulative;
  PhiCoefficients acc;
  double prev = origin();
  for (double t : times) {
    if (t <= origin()) {
      cumulative[t] = PhiCoefficients{};
      continue;
    }
    const PhiCoefficients inc = phi(prev, t);
    acc.phi_y += inc.phi_y;
    acc.main.id += inc.main.id;
    acc.main.proj += inc.main.proj;
    acc.j.id += inc.j.id;
    acc.j.proj += inc.j.proj;
    cumulative[t] = acc;
    prev = t;
  }

  CoefficientTable table;
  table.process = process_;
  table.entries.reserve(grid.size());
  for (double t : grid) table.entries.push_back(CoefficientEntry{t, kappas(t), cumulative.at(t)});
  return table;
}

std::string CoefficientTable::to_csv() const {
  std::ostringstream out;
  out << "t,kappa1,kappa2,kappa3,phi_y,phi_main_id,phi_main_p,phi_j_id,phi_j_p\n";
  for (const auto& e : entries) {
    out << shortest(e.t) << ',' << shortest(e.kappa.k1) << ',' << shortest(e.kappa.k2) << ',' << shortest(e.kappa.k3)
        << ',' << shortest(e.phi.phi_y) << ',' << shortest(e.phi.main.id) << ',' << shortest(e.phi.main.proj) << ','
        << shortest(e.phi.j.id) << ',' << shortest(e.phi.j.proj) << '\n';
  }
  return out.str();
}

CoefficientTable CoefficientTable::from_csv(const std::string& text, ProcessKind process) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "t,kappa1,kappa2,kappa3,phi_y,phi_main_id,phi_main_p,phi_j_id,phi_j_p")
    throw ConfigError("coefficient table: unexpected header");
  CoefficientTable table;
  table.process = process;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) v.push_back(parse_double(cell));
    if (v.size() != 9) throw ConfigError("coefficient table: expected 9 columns in '" + line + "'");
    table.entries.push_back(
        CoefficientEntry{v[0], Kappas{v[1], v[2], v[3]}, PhiCoefficients{v[4], ScalarPair{v[5], v[6]}, ScalarPair{v[7], v[8]}}});
  }
  return table;
}

}  // namespace cji
