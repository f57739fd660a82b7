#pragma once

#include <string>
#include <vector>

#include "cji/conjugate.hpp"
#include "cji/operators.hpp"
#include "cji/oracles.hpp"
#include "cji/schedules.hpp"

namespace cji {

enum class Method { CPiGDM, CPiGFM, PiGDM, PiGFM };

Method parse_method(const std::string& name);
const char* to_string(Method m);
ProcessKind process_of(Method m);
bool is_conjugate(Method m);

struct SamplerSpec {
  Method method = Method::CPiGDM;
  GuidanceConfig guidance;
  // Empty: uniform grid from tau to t_floor (diffusion) or 1 - flow_margin (flow).
  std::vector<double> grid;
  bool record_trajectory = false;
  ConjugateOptions options;
  // (exp(lambda h) - 1) xbar instead of h lambda xbar for the linear drift.
  bool exact_linear = false;
};

// x is what the update propagates; xbar = A_t x is kept alongside for
// inspection (the two agree to rounding).
struct SamplerState {
  Vec xbar;
  std::size_t step_index = 0;
  Vec x;
};

struct StepRecord {
  double t;
  double x_norm;
  double xbar_norm;
};

struct SampleReport {
  std::size_t nfe = 0;
  std::size_t jvp_evals = 0;
  std::vector<StepRecord> steps;
  std::vector<Vec> trajectory;  // x at every grid time when recording
};

struct SampleResult {
  Vec x;
  SampleReport report;
};

std::vector<double> default_grid(Method method, const GuidanceConfig& cfg, const ConjugateOptions& opts,
                                 const DiffusionSchedule& sched = DiffusionSchedule());

// Holds the precomputed coefficient table; sample() is const and may be called
// from many threads with the same instance.
class Sampler {
 public:
  Sampler(SamplerSpec spec, LinearDegradation op, DiffusionSchedule sched = DiffusionSchedule());

  const SamplerSpec& spec() const { return spec_; }
  const CoefficientTable& table() const { return table_; }
  const ConjugateTransform& transform() const { return transform_; }
  const LinearDegradation& op() const { return op_; }
  std::size_t steps() const { return table_.size() - 1; }

  SamplerState init_state(const Vec& y, const Vec& z) const;
  void step(SamplerState& state, const Vec& y, const ScoreOracle& oracle, SampleReport* report = nullptr) const;
  Vec finish(const SamplerState& state) const;
  // x in the original space for the state's current grid time.
  Vec current_x(const SamplerState& state) const;

  SampleResult sample(const Vec& y, const ScoreOracle& oracle, const Vec& z) const;

 private:
  void step_conjugate_diffusion(SamplerState& s, const Vec& y, const ScoreOracle& o) const;
  void step_conjugate_flow(SamplerState& s, const Vec& y, const ScoreOracle& o) const;
  void step_baseline_diffusion(SamplerState& s, const Vec& y, const ScoreOracle& o) const;
  void step_baseline_flow(SamplerState& s, const Vec& y, const ScoreOracle& o) const;
  // x_{n+1} = A_{n+1}^{-1} [(1 + lin) A_n x_n - resid P A_n x_n + A_{n+1} increments], evaluated on the
  // two invariant subspaces separately so that no exp(-k2) ever multiplies a rounding error.
  void advance(SamplerState& s, double lin, double resid, const Vec& free, const Vec& range) const;
  Vec to_x(const Kappas& k, const Vec& xbar) const;
  Vec to_xbar(const Kappas& k, const Vec& x) const;
  bool noisy() const { return spec_.guidance.sigma_y > 0.0; }

  SamplerSpec spec_;
  LinearDegradation op_;
  DiffusionSchedule sched_;
  ConjugateTransform transform_;
  CoefficientTable table_;
  std::vector<StepCoefficients> steps_;
};

SampleResult cpigdm_sample(const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                           const ScoreOracle& oracle, const DiffusionSchedule& sched, const Vec& z);
SampleResult cpigfm_sample(const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                           const ScoreOracle& oracle, const Vec& z);
SampleResult pigdm_baseline_sample(const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                                   const ScoreOracle& oracle, const DiffusionSchedule& sched, const Vec& z);
SampleResult pigfm_baseline_sample(const SamplerSpec& spec, const Vec& y, const LinearDegradation& op,
                                   const ScoreOracle& oracle, const Vec& z);

}  // namespace cji
