#include "cji/schedules.hpp"

#include <cmath>
#include <sstream>

namespace cji {

const char* to_string(ProcessKind kind) {
  return kind == ProcessKind::Diffusion ? "diffusion" : "flow";
}

DiffusionSchedule::DiffusionSchedule(double beta_min, double beta_max, double t_max)
    : beta_min_(beta_min), beta_max_(beta_max), t_max_(t_max) {
  if (!(beta_min > 0.0) || !(beta_max >= beta_min) || !(t_max > 0.0)) {
    std::ostringstream msg;
    msg << "invalid diffusion schedule: beta_min=" << beta_min << " beta_max=" << beta_max
        << " T=" << t_max;
    throw ConfigError(msg.str());
  }
}

void DiffusionSchedule::check(double t) const {
  if (!(t >= 0.0 && t <= t_max_)) {
    std::ostringstream msg;
    msg << "diffusion time " << t << " outside [0, " << t_max_ << "]";
    throw DomainError(msg.str());
  }
}

double DiffusionSchedule::beta(double t) const {
  check(t);
  return beta_min_ + t * (beta_max_ - beta_min_);
}

double DiffusionSchedule::beta_integral(double t) const {
  check(t);
  return beta_min_ * t + 0.5 * (beta_max_ - beta_min_) * t * t;
}

double DiffusionSchedule::mu(double t) const { return std::exp(-0.5 * beta_integral(t)); }

double DiffusionSchedule::sigma(double t) const {
  return std::sqrt(-std::expm1(-beta_integral(t)));
}

DiffusionPoint DiffusionSchedule::eval(double t) const {
  const double b = beta_integral(t);
  DiffusionPoint p;
  p.beta = beta(t);
  p.mu = std::exp(-0.5 * b);
  const double var = -std::expm1(-b);
  p.sigma = std::sqrt(var);
  p.r_sq = var / (p.mu * p.mu + var);
  return p;
}

FlowPoint FlowSchedule::eval(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    std::ostringstream msg;
    msg << "flow time " << t << " outside [0, 1]";
    throw DomainError(msg.str());
  }
  FlowPoint p;
  p.alpha = t;
  p.gamma = 1.0 - t;
  p.alpha_dot = 1.0;
  p.gamma_dot = -1.0;
  p.r_sq = p.gamma * p.gamma / (p.alpha * p.alpha + p.gamma * p.gamma);
  return p;
}

WeightSchedule parse_weight_schedule(const std::string& name) {
  if (name == "adaptive_paper") return WeightSchedule::AdaptivePaper;
  if (name == "constant_r2") return WeightSchedule::ConstantR2;
  if (name == "constant") return WeightSchedule::Constant;
  throw ConfigError("unknown schedule_kind '" + name + "'");
}

const char* to_string(WeightSchedule kind) {
  switch (kind) {
    case WeightSchedule::AdaptivePaper: return "adaptive_paper";
    case WeightSchedule::ConstantR2: return "constant_r2";
    case WeightSchedule::Constant: return "constant";
  }
  return "?";
}

void GuidanceConfig::validate(double t_max) const {
  std::ostringstream msg;
  if (nfe < 1) msg << "nfe must be >= 1 (got " << nfe << "); ";
  if (!(tau > 0.0 && tau <= t_max)) msg << "tau must lie in (0, " << t_max << "] (got " << tau << "); ";
  if (!(sigma_y >= 0.0)) msg << "sigma_y must be >= 0 (got " << sigma_y << "); ";
  if (!(w >= 0.0)) msg << "w must be >= 0 (got " << w << "); ";
  if (!std::isfinite(lambda)) msg << "lambda must be finite; ";
  if (!msg.str().empty()) throw ConfigError(msg.str());
}

double guidance_weight(const GuidanceConfig& cfg, const DiffusionSchedule& sched, double t) {
  const DiffusionPoint p = sched.eval(t);
  switch (cfg.schedule) {
    case WeightSchedule::AdaptivePaper: return cfg.w * p.mu * p.mu * p.r_sq;
    case WeightSchedule::ConstantR2: return cfg.w * p.r_sq;
    case WeightSchedule::Constant: return cfg.w;
  }
  return 0.0;
}

double guidance_weight(const GuidanceConfig& cfg, const FlowSchedule&, double t) {
  const FlowPoint p = FlowSchedule::eval(t);
  switch (cfg.schedule) {
    case WeightSchedule::AdaptivePaper: return cfg.w * p.alpha * p.alpha * p.r_sq;
    case WeightSchedule::ConstantR2: return cfg.w * p.r_sq;
    case WeightSchedule::Constant: return cfg.w;
  }
  return 0.0;
}

std::vector<double> timestep_grid(double tau_start, double tau_end, int n) {
  if (n < 1) throw DomainError("timestep_grid needs n >= 1");
  if (tau_start == tau_end) throw DomainError("timestep_grid needs distinct endpoints");
  std::vector<double> grid(static_cast<std::size_t>(n) + 1);
  const double h = (tau_end - tau_start) / n;
  for (int i = 0; i <= n; ++i) grid[i] = tau_start + i * h;
  grid.back() = tau_end;
  return grid;
}

}  // namespace cji
