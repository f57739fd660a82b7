#pragma once

#include <string>
#include <vector>

#include "cji/common.hpp"

namespace cji {

struct DiffusionPoint {
  double beta;
  double mu;
  double sigma;
  double r_sq;
};

// VP-SDE with linear beta(t) = beta_min + t (beta_max - beta_min).
class DiffusionSchedule {
 public:
  explicit DiffusionSchedule(double beta_min = 0.1, double beta_max = 20.0, double t_max = 1.0);

  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }
  double t_max() const { return t_max_; }

  double beta(double t) const;
  // int_0^t beta_s ds
  double beta_integral(double t) const;
  double mu(double t) const;
  double sigma(double t) const;
  DiffusionPoint eval(double t) const;

 private:
  void check(double t) const;
  double beta_min_, beta_max_, t_max_;
};

struct FlowPoint {
  double alpha;
  double gamma;
  double alpha_dot;
  double gamma_dot;
  double r_sq;
};

// OT interpolant x_t = t x_1 + (1 - t) z.
struct FlowSchedule {
  static FlowPoint eval(double t);
};

enum class WeightSchedule { AdaptivePaper, ConstantR2, Constant };

WeightSchedule parse_weight_schedule(const std::string& name);
const char* to_string(WeightSchedule kind);

struct GuidanceConfig {
  double w = 1.0;
  double lambda = 0.0;
  double tau = 0.6;
  int nfe = 20;
  double sigma_y = 0.0;
  WeightSchedule schedule = WeightSchedule::AdaptivePaper;

  void validate(double t_max = 1.0) const;
};

double guidance_weight(const GuidanceConfig& cfg, const DiffusionSchedule& sched, double t);
double guidance_weight(const GuidanceConfig& cfg, const FlowSchedule& sched, double t);

std::vector<double> timestep_grid(double tau_start, double tau_end, int n);

}  // namespace cji
