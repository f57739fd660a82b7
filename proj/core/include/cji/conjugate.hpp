#pragma once

#include <string>
#include <vector>

#include "cji/common.hpp"
#include "cji/operators.hpp"
#include "cji/quadrature.hpp"
#include "cji/schedules.hpp"

namespace cji {

// Which Phi_s closed form to integrate. Literal keeps an extra A_t factor on
// the guidance term inside the integrand; Simplified drops it.
enum class PhiForm { Simplified, Literal };

// FirstOrder: kappa3 carries exp(k1 + k2) (consistent first-order expansion of
// the noisy exponent). Literal: an [exp(k1 + k2) - 1] factor.
enum class Kappa3Form { FirstOrder, Literal };

struct ConjugateOptions {
  double t_floor = 1e-4;      // diffusion integration / sampling floor
  double flow_margin = 1e-4;  // flow sampling stops at 1 - flow_margin
  double kappa3_floor = -1.0; // lower limit of the kappa3 integral (< 0: use t_floor)
  QuadratureOptions quad;
  PhiForm phi_form = PhiForm::Simplified;
  Kappa3Form kappa3_form = Kappa3Form::FirstOrder;
};

struct Kappas {
  double k1 = 0.0;
  double k2 = 0.0;
  double k3 = 0.0;
};

// a I + b P
struct ScalarPair {
  double id = 0.0;
  double proj = 0.0;

  Vec apply(const LinearDegradation& op, const Vec& v) const { return id * v + proj * op.proj_apply(v); }
  ScalarPair operator-(const ScalarPair& o) const { return {id - o.id, proj - o.proj}; }
  bool operator==(const ScalarPair&) const = default;
};

struct PhiCoefficients {
  double phi_y = 0.0;  // coefficient on H^+
  ScalarPair main;     // Phi_s (diffusion) or Phi_b (flow)
  ScalarPair j;

  PhiCoefficients operator-(const PhiCoefficients& o) const { return {phi_y - o.phi_y, main - o.main, j - o.j}; }
  bool operator==(const PhiCoefficients&) const = default;
};

// Increments of the Phi integrals over one step [a, b], split over the two
// invariant subspaces of A and divided by the eigenvalue of A_b there
// (exp(k1(b)) off range(P), exp(k1(b) + k2(b)) on it). The scaling keeps every
// number O(1) even when k2 is very negative.
struct StepCoefficients {
  double phi_y = 0.0;  // on range(P)
  double main_free = 0.0, main_range = 0.0;
  double j_free = 0.0, j_range = 0.0;
};

struct CoefficientEntry {
  double t = 0.0;
  Kappas kappa;
  PhiCoefficients phi;
};

struct CoefficientTable {
  ProcessKind process = ProcessKind::Diffusion;
  std::vector<CoefficientEntry> entries;

  std::size_t size() const { return entries.size(); }
  const CoefficientEntry& operator[](std::size_t i) const { return entries[i]; }

  // t,kappa1,kappa2,kappa3,phi_y,phi_main_id,phi_main_p,phi_j_id,phi_j_p
  std::string to_csv() const;
  static CoefficientTable from_csv(const std::string& text, ProcessKind process);
};

// A_t = exp(k1) [I + (exp(k2) - 1) P] and friends, for the adaptive guidance
// schedule (w_t = w mu^2 r^2 or w alpha^2 r^2), which is what makes the
// kappa2 integral closed-form.
class ConjugateTransform {
 public:
  ConjugateTransform(ProcessKind process, const GuidanceConfig& cfg, const DiffusionSchedule& sched = DiffusionSchedule(),
                     const ConjugateOptions& opts = {});

  ProcessKind process() const { return process_; }
  const GuidanceConfig& guidance() const { return cfg_; }
  const DiffusionSchedule& schedule() const { return sched_; }
  const ConjugateOptions& options() const { return opts_; }

  double kappa1(double t) const;
  double kappa2(double t) const;
  double kappa3(double t) const;
  Kappas kappas(double t) const;
  // Part of the linear drift left to the explicit Euler step: the flow
  // exponent only absorbs half of w t (1 - t) P.
  double residual_proj_rate(double t) const;

  Vec apply(const LinearDegradation& op, double t, const Vec& x) const;
  Vec inverse_apply(const LinearDegradation& op, double t, const Vec& x) const;
  Vec noisy_apply(const LinearDegradation& op, double t, const Vec& x) const;
  Vec noisy_inverse_apply(const LinearDegradation& op, double t, const Vec& x) const;

  static Vec apply(const LinearDegradation& op, const Kappas& k, const Vec& x);
  static Vec inverse_apply(const LinearDegradation& op, const Kappas& k, const Vec& x);
  static Vec noisy_apply(const LinearDegradation& op, const Kappas& k, const Vec& x);
  static Vec noisy_inverse_apply(const LinearDegradation& op, const Kappas& k, const Vec& x);

  // Integrals from the origin (t_floor for diffusion, 0 for flow) to t.
  PhiCoefficients phi(double t) const;
  PhiCoefficients phi(double a, double b) const;  // increment over [a, b]
  CoefficientTable precompute(const std::vector<double>& grid) const;
  StepCoefficients step_coefficients(double a, double b) const;

  double origin() const;

 private:
  void check_time(double t) const;
  std::array<double, 5> integrand(double s) const;

  ProcessKind process_;
  GuidanceConfig cfg_;
  DiffusionSchedule sched_;
  ConjugateOptions opts_;
};

}  // namespace cji
