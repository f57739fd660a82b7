#include "cji/samplers.hpp"

#include <cmath>
#include <sstream>

namespace cji {

Method parse_method(const std::string& name) {
  if (name == "cpigdm") return Method::CPiGDM;
  if (name == "cpigfm") return Method::CPiGFM;
  if (name == "pigdm") return Method::PiGDM;
  if (name == "pigfm") return Method::PiGFM;
  throw ConfigError("unknown method '" + name + "' (expected cpigdm, cpigfm, pigdm, pigfm)");
}

const char* to_string(Method m) {
  switch (m) {
    case Method::CPiGDM: return "cpigdm";
    case Method::CPiGFM: return "cpigfm";
    case Method::PiGDM: return "pigdm";
    case Method::PiGFM: return "pigfm";
  }
  return "?";
}

ProcessKind process_of(Method m) {
  return (m == Method::CPiGDM || m == Method::PiGDM) ? ProcessKind::Diffusion : ProcessKind::Flow;
}

bool is_conjugate(Method m) { return m == Method::CPiGDM || m == Method::CPiGFM; }

std::vector<double> default_grid(Method method, const GuidanceConfig& cfg, const ConjugateOptions& opts,
                                 const DiffusionSchedule& sched) {
  if (cfg.nfe < 1) throw ConfigError("nfe must be >= 1");
  if (process_of(method) == ProcessKind::Diffusion) {
    if (!(cfg.tau > opts.t_floor && cfg.tau <= sched.t_max())) {
      std::ostringstream msg;
      msg << "diffusion tau must lie in (t_floor=" << opts.t_floor << ", " << sched.t_max() << "], got " << cfg.tau;
      throw ConfigError(msg.str());
    }
    return timestep_grid(cfg.tau, opts.t_floor, cfg.nfe);
  }
  const double end = 1.0 - opts.flow_margin;
  if (!(cfg.tau >= 0.0 && cfg.tau < end)) {
    std::ostringstream msg;
    msg << "flow tau must lie in [0, " << end << "), got " << cfg.tau;
    throw ConfigError(msg.str());
  }
  return timestep_grid(cfg.tau, end, cfg.nfe);
}

namespace {

SamplerSpec normalized(SamplerSpec spec, const DiffusionSchedule& sched) {
  const GuidanceConfig& g = spec.guidance;
  if (!(g.w >= 0.0) || !std::isfinite(g.w)) throw ConfigError("w must be finite and >= 0");
  if (!std::isfinite(g.lambda)) throw ConfigError("lambda must be finite");
  if (!(g.sigma_y >= 0.0)) throw ConfigError("sigma_y must be >= 0");
  if (spec.grid.empty()) spec.grid = default_grid(spec.method, g, spec.options, sched);
  const auto& grid = spec.grid;
  if (grid.size() < 2) throw ConfigError("sampling grid needs at least two times");
  const bool diffusion = process_of(spec.method) == ProcessKind::Diffusion;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double t = grid[i];
    const bool in_range = diffusion ? (t >= spec.options.t_floor && t <= sched.t_max())
                                    : (t >= 0.0 && t <= 1.0 - spec.options.flow_margin);
    if (!in_range) {
      std::ostringstream msg;
      msg << "grid time " << t << " outside the sampling range";
      throw ConfigError(msg.str());
    }
    if (i > 0 && (diffusion ? grid[i] > grid[i - 1] : grid[i] < grid[i - 1]))
      throw ConfigError(diffusion ? "diffusion grid must be non-increasing" : "flow grid must be non-decreasing");
  }
  spec.guidance.tau = grid.front();
  spec.guidance.nfe = static_cast<int>(grid.size() - 1);
  if (is_conjugate(spec.method) && spec.guidance.w > 0.0 && g.schedule != WeightSchedule::AdaptivePaper)
    throw ConfigError(std::string(to_string(spec.method)) + " requires schedule_kind=adaptive_paper");
  return spec;
}

GuidanceConfig transform_config(const SamplerSpec& spec) {
  GuidanceConfig g = spec.guidance;
  if (!is_conjugate(spec.method)) {
    // baselines: scalar A_t = exp(kappa1), guidance applied as explicit drift
    g.w = 0.0;
    g.sigma_y = 0.0;
  }
  return g;
}

}  // namespace

Sampler::Sampler(SamplerSpec spec, LinearDegradation op, DiffusionSchedule sched)
    : spec_(normalized(std::move(spec), sched)),
      op_(std::move(op)),
      sched_(sched),
      transform_(process_of(spec_.method), transform_config(spec_), sched_, spec_.options),
      table_(transform_.precompute(spec_.grid)) {
  steps_.reserve(spec_.grid.size() - 1);
  for (std::size_t i = 0; i + 1 < spec_.grid.size(); ++i)
    steps_.push_back(transform_.step_coefficients(spec_.grid[i], spec_.grid[i + 1]));
  for (const auto& e : table_.entries) {
    const double worst = std::max({std::abs(e.kappa.k1), std::abs(e.kappa.k1 + e.kappa.k2),
                                   noisy() ? 2.0 * std::abs(e.kappa.k1 + e.kappa.k2) : 0.0});
    if (worst > 700.0) {
      std::ostringstream msg;
      msg << "A_t at t=" << e.t << " is not representable (kappa1=" << e.kappa.k1 << ", kappa2=" << e.kappa.k2
          << "); reduce w or lambda";
      throw ConfigError(msg.str());
    }
  }
}

Vec Sampler::to_x(const Kappas& k, const Vec& xbar) const {
  if (!is_conjugate(spec_.method)) return xbar * std::exp(-k.k1);
  return noisy() ? ConjugateTransform::noisy_inverse_apply(op_, k, xbar) : ConjugateTransform::inverse_apply(op_, k, xbar);
}

Vec Sampler::to_xbar(const Kappas& k, const Vec& x) const {
  if (!is_conjugate(spec_.method)) return x * std::exp(k.k1);
  return noisy() ? ConjugateTransform::noisy_apply(op_, k, x) : ConjugateTransform::apply(op_, k, x);
}

SamplerState Sampler::init_state(const Vec& y, const Vec& z) const {
  if (static_cast<std::size_t>(y.size()) != op_.out_dim()) throw DimensionError("observation length does not match H");
  if (static_cast<std::size_t>(z.size()) != op_.in_dim()) throw DimensionError("noise length does not match d");
  const double tau = table_[0].t;
  double a, b;
  if (process_of(spec_.method) == ProcessKind::Diffusion) {
    const DiffusionPoint p = sched_.eval(tau);
    a = p.mu;
    b = p.sigma;
  } else {
    const FlowPoint p = FlowSchedule::eval(tau);
    a = p.alpha;
    b = p.gamma;
  }
  Vec x = a * op_.pinv_apply(y) + b * z;
  Vec xbar = to_xbar(table_[0].kappa, x);
  return SamplerState{std::move(xbar), 0, std::move(x)};
}

Vec Sampler::current_x(const SamplerState& state) const { return state.x; }

Vec Sampler::finish(const SamplerState& state) const { return current_x(state); }

void Sampler::step(SamplerState& state, const Vec& y, const ScoreOracle& oracle, SampleReport* report) const {
  const std::size_t n = state.step_index;
  if (n + 1 >= table_.size()) throw ConfigError("step past the end of the grid");
  if (report) {
    const Vec x = current_x(state);
    report->steps.push_back(StepRecord{table_[n].t, x.norm(), state.xbar.norm()});
    if (spec_.record_trajectory) report->trajectory.push_back(x);
  }
  switch (spec_.method) {
    case Method::CPiGDM: step_conjugate_diffusion(state, y, oracle); break;
    case Method::CPiGFM: step_conjugate_flow(state, y, oracle); break;
    case Method::PiGDM: step_baseline_diffusion(state, y, oracle); break;
    case Method::PiGFM: step_baseline_flow(state, y, oracle); break;
  }
  if (report) {
    report->nfe += 1;
    report->jvp_evals += 1;
  }
  if (!state.x.allFinite()) {
    const auto& k = table_[n].kappa;
    std::ostringstream msg;
    msg << to_string(spec_.method) << " diverged at step " << n << " (t=" << table_[n].t << ", kappa1=" << k.k1
        << ", kappa2=" << k.k2 << ", w=" << spec_.guidance.w << ", lambda=" << spec_.guidance.lambda << ")";
    throw DivergenceError(msg.str(), n, table_[n].t, k.k1, k.k2);
  }
  state.step_index = n + 1;
}

namespace {
double linear_factor(double lambda, double h, bool exact) { return exact ? std::expm1(lambda * h) : lambda * h; }
}  // namespace

void Sampler::advance(SamplerState& s, double lin, double resid, const Vec& free, const Vec& range) const {
  const Kappas& k0 = table_[s.step_index].kappa;
  const Kappas& k1 = table_[s.step_index + 1].kappa;
  const double rho_free = (1.0 + lin) * std::exp(k0.k1 - k1.k1);
  const double rho_range = (1.0 + lin - resid) * std::exp((k0.k1 + k0.k2) - (k1.k1 + k1.k2));
  // kappa3 relative to the range eigenvalue; zero unless the noisy transform is in use
  const bool corr = noisy() && is_conjugate(spec_.method);
  const double q0 = corr ? k0.k3 * std::exp(-(k0.k1 + k0.k2)) : 0.0;
  const double q1 = corr ? k1.k3 * std::exp(-(k1.k1 + k1.k2)) : 0.0;
  const Vec& x = s.x;
  const Vec ex = q0 != 0.0 ? Vec(op_.pinv_outer_apply(x)) : Vec();
  Vec range_in = (rho_range - rho_free) * x + range - free;
  if (q0 != 0.0) range_in += rho_range * q0 * ex;
  Vec next = rho_free * x + free + op_.proj_apply(range_in);
  // E = H^+ H^+T satisfies E P = E, so E sees only the range part
  if (q1 != 0.0) {
    Vec in_range = rho_range * x + range;
    if (q0 != 0.0) in_range += rho_range * q0 * ex;
    next -= q1 * op_.pinv_outer_apply(in_range);
  }
  s.x = std::move(next);
  s.xbar = to_xbar(k1, s.x);
}

void Sampler::step_conjugate_diffusion(SamplerState& s, const Vec& y, const ScoreOracle& o) const {
  const double t = table_[s.step_index].t, h = table_[s.step_index + 1].t - t;
  const Vec& x = s.x;
  const Vec eps = o.evaluate(x, t);
  const DiffusionPoint p = sched_.eval(t);
  const Vec x0 = (x - p.sigma * eps) / p.mu;
  const double c = noisy() ? spec_.guidance.sigma_y * spec_.guidance.sigma_y / p.r_sq : 0.0;
  const Vec hy = op_.regularized_pinv_apply(y, c);
  const Vec dir = hy - op_.regularized_proj_apply(x0, c);
  const Vec jv = o.jvp(x, t, dir);
  const StepCoefficients& d = steps_[s.step_index];
  const double lin = linear_factor(spec_.guidance.lambda, h, spec_.exact_linear);
  advance(s, lin, 0.0, d.main_free * eps + d.j_free * jv, d.phi_y * hy + d.main_range * eps + d.j_range * jv);
}

void Sampler::step_conjugate_flow(SamplerState& s, const Vec& y, const ScoreOracle& o) const {
  const double t = table_[s.step_index].t, h = table_[s.step_index + 1].t - t;
  const Vec& x = s.x;
  const Vec b = o.evaluate(x, t);
  const FlowPoint p = FlowSchedule::eval(t);
  const Vec x1 = tweedie_flow(x, t, b);
  const double c = noisy() ? spec_.guidance.sigma_y * spec_.guidance.sigma_y / p.r_sq : 0.0;
  const Vec hy = op_.regularized_pinv_apply(y, c);
  const Vec dir = hy - op_.regularized_proj_apply(x1, c);
  const Vec jv = o.jvp(x, t, dir);
  const StepCoefficients& d = steps_[s.step_index];
  const double lin = linear_factor(spec_.guidance.lambda, h, spec_.exact_linear);
  advance(s, lin, h * transform_.residual_proj_rate(t), d.main_free * b + d.j_free * jv,
          d.phi_y * hy + d.main_range * b + d.j_range * jv);
}

void Sampler::step_baseline_diffusion(SamplerState& s, const Vec& y, const ScoreOracle& o) const {
  const auto& e0 = table_[s.step_index];
  const auto& e1 = table_[s.step_index + 1];
  const double t = e0.t, h = e1.t - t;
  const Vec& x = s.x;
  const Vec eps = o.evaluate(x, t);
  const DiffusionPoint p = sched_.eval(t);
  const Vec x0 = (x - p.sigma * eps) / p.mu;
  const double c = noisy() ? spec_.guidance.sigma_y * spec_.guidance.sigma_y / p.r_sq : 0.0;
  const Vec dir = op_.regularized_pinv_apply(y, c) - op_.regularized_proj_apply(x0, c);
  const Vec jv = o.jvp(x, t, dir);
  // (dx0/dx)^T dir, Jacobian of eps taken as symmetric
  const Vec g = (dir - p.sigma * jv) / p.mu;
  const double wt = guidance_weight(spec_.guidance, sched_, t);
  const double coef = -0.5 * wt * p.beta / p.r_sq;
  const StepCoefficients& d = steps_[s.step_index];
  const double lin = linear_factor(spec_.guidance.lambda, h, spec_.exact_linear);
  // explicit drift h e^{k1(t_n)} coef g, scaled by e^{-k1(t_{n+1})}
  const Vec inc = d.main_free * eps + (h * std::exp(e0.kappa.k1 - e1.kappa.k1) * coef) * g;
  advance(s, lin, 0.0, inc, inc);
}

void Sampler::step_baseline_flow(SamplerState& s, const Vec& y, const ScoreOracle& o) const {
  const auto& e0 = table_[s.step_index];
  const auto& e1 = table_[s.step_index + 1];
  const double t = e0.t, h = e1.t - t;
  const Vec& x = s.x;
  const Vec b = o.evaluate(x, t);
  const FlowPoint p = FlowSchedule::eval(t);
  const double cc = p.gamma * p.alpha_dot - p.gamma_dot * p.alpha;
  const Vec x1 = tweedie_flow(x, t, b);
  const double c = noisy() ? spec_.guidance.sigma_y * spec_.guidance.sigma_y / p.r_sq : 0.0;
  const Vec dir = op_.regularized_pinv_apply(y, c) - op_.regularized_proj_apply(x1, c);
  const Vec jv = o.jvp(x, t, dir);
  const Vec g = (-p.gamma_dot * dir + p.gamma * jv) / cc;
  const double wt = guidance_weight(spec_.guidance, FlowSchedule{}, t);
  const double coef = wt * (p.gamma / p.alpha) * cc / p.r_sq;
  const StepCoefficients& d = steps_[s.step_index];
  const double lin = linear_factor(spec_.guidance.lambda, h, spec_.exact_linear);
  const Vec inc = d.main_free * b + (h * std::exp(e0.kappa.k1 - e1.kappa.k1) * coef) * g;
  advance(s, lin, 0.0, inc, inc);
}

SampleResult Sampler::sample(const Vec& y, const ScoreOracle& oracle, const Vec& z) const {
  if (oracle.process() != process_of(spec_.method))
    throw ConfigError(std::string(to_string(spec_.method)) + " needs a " + to_string(process_of(spec_.method)) + " oracle");
  if (oracle.dim() != op_.in_dim()) throw DimensionError("oracle dimension does not match the operator");
  SampleResult out;
  SamplerState state = init_state(y, z);
  for (std::size_t n = 0; n + 1 < table_.size(); ++n) step(state, y, oracle, &out.report);
  out.x = finish(state);
  out.report.steps.push_back(StepRecord{table_.entries.back().t, out.x.norm(), state.xbar.norm()});
  if (spec_.record_trajectory) out.report.trajectory.push_back(out.x);
  return out;
}

namespace {
SampleResult run_checked(Method expected, const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                         const ScoreOracle& oracle, const DiffusionSchedule& sched, const Vec& z) {
  if (spec.method != expected)
    throw ConfigError(std::string("spec.method is ") + to_string(spec.method) + ", expected " + to_string(expected));
  return Sampler(spec, op, sched).sample(y, oracle, z);
}
}  // namespace

SampleResult cpigdm_sample(const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                           const ScoreOracle& oracle, const DiffusionSchedule& sched, const Vec& z) {
  return run_checked(Method::CPiGDM, spec, y, op, oracle, sched, z);
}

SampleResult cpigfm_sample(const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                           const ScoreOracle& oracle, const Vec& z) {
  return run_checked(Method::CPiGFM, spec, y, op, oracle, DiffusionSchedule{}, z);
}

SampleResult pigdm_baseline_sample(const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                                   const ScoreOracle& oracle, const DiffusionSchedule& sched, const Vec& z) {
  return run_checked(Method::PiGDM, spec, y, op, oracle, sched, z);
}

SampleResult pigfm_baseline_sample(const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                                   const ScoreOracle& oracle, const Vec& z) {
  return run_checked(Method::PiGFM, spec, y, op, oracle, DiffusionSchedule{}, z);
}

}  // namespace cji
