#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cji/common.hpp"
#include "cji/operators.hpp"
#include "cji/schedules.hpp"

namespace cji {

// Diagonal-covariance Gaussian.
struct GaussianModel {
  Vec mean;
  Vec var;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
  void validate() const;
  static GaussianModel standard(std::size_t d);
};

struct MixtureModel {
  std::vector<double> weights;
  std::vector<GaussianModel> components;

  std::size_t dim() const { return components.empty() ? 0 : components.front().dim(); }
  void validate() const;
};

enum class OracleKind { GaussianDiffusion, MixtureDiffusion, GaussianFlow, MixtureFlow, External };

// Remote: the endpoint answers "jvp" requests itself (External only).
enum class JvpMode { Analytic, FiniteDifference, Remote };

const char* to_string(OracleKind kind);
const char* to_string(JvpMode mode);
JvpMode parse_jvp_mode(const std::string& name);

// eps(x, t) for diffusion kinds, b(x, t) for flow kinds, plus J v.
class ScoreOracle {
 public:
  virtual ~ScoreOracle() = default;

  OracleKind kind() const { return kind_; }
  ProcessKind process() const { return process_; }
  std::size_t dim() const { return dim_; }
  JvpMode jvp_mode() const { return jvp_mode_; }

  Vec evaluate(const Vec& x, double t) const;
  Vec jvp(const Vec& x, double t, const Vec& v) const;

 protected:
  ScoreOracle(OracleKind kind, ProcessKind process, std::size_t dim, JvpMode mode, double t_floor);
  virtual Vec evaluate_impl(const Vec& x, double t) const = 0;
  virtual Vec jvp_impl(const Vec& x, double t, const Vec& v) const = 0;
  void check_time(double t) const;

  OracleKind kind_;
  ProcessKind process_;
  std::size_t dim_;
  JvpMode jvp_mode_;
  double t_floor_;
};

Vec eps_eval(const ScoreOracle& oracle, const Vec& x, double t);
Vec velocity_eval(const ScoreOracle& oracle, const Vec& x, double t);
Vec eps_jvp(const ScoreOracle& oracle, const Vec& x, double t, const Vec& v);
Vec velocity_jvp(const ScoreOracle& oracle, const Vec& x, double t, const Vec& v);

// Central difference (f(x + h v) - f(x - h v)) / 2h, h = 1e-4 (1 + |x|_inf) / max(|v|_inf, 1e-12).
Vec finite_difference_jvp(const std::function<Vec(const Vec&)>& f, const Vec& x, const Vec& v);

// Mixture pushed through x = a x0 + b z: components N(a m_k, a^2 v_k + b^2).
double mixture_log_density(const MixtureModel& model, double a, double b, const Vec& x);
Vec mixture_score(const MixtureModel& model, double a, double b, const Vec& x);
Vec mixture_score_hvp(const MixtureModel& model, double a, double b, const Vec& x, const Vec& v);
Vec mixture_responsibilities(const MixtureModel& model, double a, double b, const Vec& x);

class DiffusionModelOracle final : public ScoreOracle {
 public:
  DiffusionModelOracle(GaussianModel model, DiffusionSchedule sched = DiffusionSchedule(), JvpMode mode = JvpMode::Analytic,
                       double t_floor = 1e-4);
  DiffusionModelOracle(MixtureModel model, DiffusionSchedule sched = DiffusionSchedule(), JvpMode mode = JvpMode::Analytic,
                       double t_floor = 1e-4);

  Vec score(const Vec& x, double t) const;
  double log_density(const Vec& x, double t) const;

 protected:
  Vec evaluate_impl(const Vec& x, double t) const override;
  Vec jvp_impl(const Vec& x, double t, const Vec& v) const override;

 private:
  std::optional<GaussianModel> gaussian_;
  MixtureModel mixture_;
  DiffusionSchedule sched_;
};

class FlowModelOracle final : public ScoreOracle {
 public:
  explicit FlowModelOracle(GaussianModel model, JvpMode mode = JvpMode::Analytic);
  explicit FlowModelOracle(MixtureModel model, JvpMode mode = JvpMode::Analytic);

  Vec score(const Vec& x, double t) const;
  double log_density(const Vec& x, double t) const;

 protected:
  Vec evaluate_impl(const Vec& x, double t) const override;
  Vec jvp_impl(const Vec& x, double t, const Vec& v) const override;

 private:
  std::optional<GaussianModel> gaussian_;
  MixtureModel mixture_;
};

// x0_hat = (x - sigma eps) / mu
Vec tweedie_diffusion(const Vec& x, double t, const Vec& eps, const DiffusionSchedule& sched);
// x1_hat = (-gamma_dot x + gamma b) / (gamma alpha_dot - gamma_dot alpha)
Vec tweedie_flow(const Vec& x, double t, const Vec& b);

struct GaussianPosterior {
  Vec mean;
  Vec variance;            // marginal variances
  std::optional<Mat> cov;  // full covariance when the operator is not a mask
};

// Exact p(x0 | y) for y = H x0 + sigma_y n under a diagonal Gaussian prior.
GaussianPosterior exact_posterior(const GaussianModel& prior, const LinearDegradation& op, const Vec& y,
                                  double sigma_y, std::size_t max_dim = 4096);
// Mixture priors are not conjugate in closed form for exact_posterior; this throws.
GaussianPosterior exact_posterior(const MixtureModel& prior, const LinearDegradation& op, const Vec& y,
                                  double sigma_y, std::size_t max_dim = 4096);
// Posterior mean under a mixture prior: component-wise conditioning, reweighted by evidence.
Vec mixture_posterior_mean(const MixtureModel& prior, const LinearDegradation& op, const Vec& y, double sigma_y,
                           std::size_t max_dim = 4096);

}  // namespace cji
