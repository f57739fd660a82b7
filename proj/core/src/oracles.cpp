#include "cji/oracles.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cji {

void GaussianModel::validate() const {
  if (mean.size() == 0 || mean.size() != var.size()) throw ConfigError("gaussian model: mean/var size mismatch");
  if (!mean.allFinite() || !(var.array() > 0.0).all() || !var.allFinite())
    throw ConfigError("gaussian model: variances must be finite and > 0");
}

GaussianModel GaussianModel::standard(std::size_t d) {
  return GaussianModel{Vec::Zero(static_cast<Eigen::Index>(d)), Vec::Ones(static_cast<Eigen::Index>(d))};
}

void MixtureModel::validate() const {
  if (components.empty() || weights.size() != components.size())
    throw ConfigError("mixture model: need one weight per component");
  double total = 0.0;
  for (std::size_t k = 0; k < components.size(); ++k) {
    components[k].validate();
    if (components[k].dim() != components[0].dim()) throw ConfigError("mixture model: component dims differ");
    if (!(weights[k] > 0.0)) throw ConfigError("mixture model: weights must be > 0");
    total += weights[k];
  }
  if (std::abs(total - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg << "mixture model: weights sum to " << total << ", expected 1";
    throw ConfigError(msg.str());
  }
}

const char* to_string(OracleKind kind) {
  switch (kind) {
    case OracleKind::GaussianDiffusion: return "gaussian_diffusion";
    case OracleKind::MixtureDiffusion: return "mixture_diffusion";
    case OracleKind::GaussianFlow: return "gaussian_flow";
    case OracleKind::MixtureFlow: return "mixture_flow";
    case OracleKind::External: return "external";
  }
  return "?";
}

const char* to_string(JvpMode mode) {
  switch (mode) {
    case JvpMode::Analytic: return "analytic";
    case JvpMode::FiniteDifference: return "finite_difference";
    case JvpMode::Remote: return "remote";
  }
  return "?";
}

JvpMode parse_jvp_mode(const std::string& name) {
  if (name == "analytic") return JvpMode::Analytic;
  if (name == "finite_difference") return JvpMode::FiniteDifference;
  if (name == "remote") return JvpMode::Remote;
  throw ConfigError("unknown jvp_mode '" + name + "'");
}

ScoreOracle::ScoreOracle(OracleKind kind, ProcessKind process, std::size_t dim, JvpMode mode, double t_floor)
    : kind_(kind), process_(process), dim_(dim), jvp_mode_(mode), t_floor_(t_floor) {
  const bool external = kind == OracleKind::External;
  if (mode == JvpMode::Analytic && external) throw ConfigError("analytic jvp_mode needs a closed-form oracle");
  if (mode == JvpMode::Remote && !external) throw ConfigError("remote jvp_mode is only valid for external oracles");
}

void ScoreOracle::check_time(double t) const {
  const double t_max = process_ == ProcessKind::Flow ? 1.0 : std::numeric_limits<double>::infinity();
  if (!(t > t_floor_ && t <= t_max)) {
    std::ostringstream msg;
    msg << to_string(kind_) << " oracle: time " << t << " must lie in (" << t_floor_ << ", "
        << (process_ == ProcessKind::Flow ? "1" : "T") << "]";
    throw DomainError(msg.str());
  }
}

Vec ScoreOracle::evaluate(const Vec& x, double t) const {
  if (static_cast<std::size_t>(x.size()) != dim_) throw DimensionError("oracle input has the wrong length");
  check_time(t);
  return evaluate_impl(x, t);
}

Vec ScoreOracle::jvp(const Vec& x, double t, const Vec& v) const {
  if (static_cast<std::size_t>(x.size()) != dim_ || static_cast<std::size_t>(v.size()) != dim_)
    throw DimensionError("oracle jvp input has the wrong length");
  check_time(t);
  if (jvp_mode_ == JvpMode::FiniteDifference)
    return finite_difference_jvp([&](const Vec& p) { return evaluate_impl(p, t); }, x, v);
  return jvp_impl(x, t, v);
}

namespace {
void expect_process(const ScoreOracle& o, ProcessKind p, const char* what) {
  if (o.process() != p) throw ConfigError(std::string(what) + " called on a " + to_string(o.process()) + " oracle");
}
}  // namespace

Vec eps_eval(const ScoreOracle& oracle, const Vec& x, double t) {
  expect_process(oracle, ProcessKind::Diffusion, "eps_eval");
  return oracle.evaluate(x, t);
}

Vec velocity_eval(const ScoreOracle& oracle, const Vec& x, double t) {
  expect_process(oracle, ProcessKind::Flow, "velocity_eval");
  return oracle.evaluate(x, t);
}

Vec eps_jvp(const ScoreOracle& oracle, const Vec& x, double t, const Vec& v) {
  expect_process(oracle, ProcessKind::Diffusion, "eps_jvp");
  return oracle.jvp(x, t, v);
}

Vec velocity_jvp(const ScoreOracle& oracle, const Vec& x, double t, const Vec& v) {
  expect_process(oracle, ProcessKind::Flow, "velocity_jvp");
  return oracle.jvp(x, t, v);
}

Vec finite_difference_jvp(const std::function<Vec(const Vec&)>& f, const Vec& x, const Vec& v) {
  const double vmax = v.size() ? v.cwiseAbs().maxCoeff() : 0.0;
  if (vmax == 0.0) return Vec::Zero(x.size());
  const double xmax = x.size() ? x.cwiseAbs().maxCoeff() : 0.0;
  const double h = 1e-4 * (1.0 + xmax) / std::max(vmax, 1e-12);
  return (f(x + h * v) - f(x - h * v)) / (2.0 * h);
}

// ---------------------------------------------------------------------------
// mixture algebra

namespace {

struct ComponentTerms {
  Vec log_w;               // log weight + log N_k(x)
  std::vector<Vec> inv_s;  // 1 / S_k
  std::vector<Vec> score;  // s_k
};

ComponentTerms component_terms(const MixtureModel& model, double a, double b, const Vec& x) {
  const std::size_t K = model.components.size();
  ComponentTerms out{Vec(K), {}, {}};
  out.inv_s.reserve(K);
  out.score.reserve(K);
  constexpr double log2pi = 1.8378770664093454836;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& c = model.components[k];
    const Vec s_var = (a * a) * c.var.array() + b * b;
    const Vec inv = s_var.cwiseInverse();
    const Vec diff = x - a * c.mean;
    out.log_w[k] = std::log(model.weights[k]) -
                   0.5 * (diff.array().square() * inv.array() + s_var.array().log() + log2pi).sum();
    out.score.push_back(-diff.cwiseProduct(inv));
    out.inv_s.push_back(inv);
  }
  return out;
}

Vec softmax(const Vec& logits) {
  const double m = logits.maxCoeff();
  Vec e = (logits.array() - m).exp();
  return e / e.sum();
}

}  // namespace

double mixture_log_density(const MixtureModel& model, double a, double b, const Vec& x) {
  const ComponentTerms c = component_terms(model, a, b, x);
  const double m = c.log_w.maxCoeff();
  return m + std::log((c.log_w.array() - m).exp().sum());
}

Vec mixture_responsibilities(const MixtureModel& model, double a, double b, const Vec& x) {
  return softmax(component_terms(model, a, b, x).log_w);
}

Vec mixture_score(const MixtureModel& model, double a, double b, const Vec& x) {
  const ComponentTerms c = component_terms(model, a, b, x);
  const Vec g = softmax(c.log_w);
  Vec s = Vec::Zero(x.size());
  for (Eigen::Index k = 0; k < g.size(); ++k) s += g[k] * c.score[k];
  return s;
}

Vec mixture_score_hvp(const MixtureModel& model, double a, double b, const Vec& x, const Vec& v) {
  // sum_k g_k (-diag(1/S_k) + s_k s_k^T) - s s^T
  const ComponentTerms c = component_terms(model, a, b, x);
  const Vec g = softmax(c.log_w);
  Vec s = Vec::Zero(x.size());
  Vec out = Vec::Zero(x.size());
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    s += g[k] * c.score[k];
    out += g[k] * (-v.cwiseProduct(c.inv_s[k]) + c.score[k] * c.score[k].dot(v));
  }
  return out - s * s.dot(v);
}

// ---------------------------------------------------------------------------
// diffusion

namespace {
MixtureModel as_mixture(const GaussianModel& g) { return MixtureModel{{1.0}, {g}}; }
}  // namespace

DiffusionModelOracle::DiffusionModelOracle(GaussianModel model, DiffusionSchedule sched, JvpMode mode, double t_floor)
    : ScoreOracle(OracleKind::GaussianDiffusion, ProcessKind::Diffusion, model.dim(), mode, t_floor),
      gaussian_(std::move(model)), sched_(sched) {
  gaussian_->validate();
  mixture_ = as_mixture(*gaussian_);
}

DiffusionModelOracle::DiffusionModelOracle(MixtureModel model, DiffusionSchedule sched, JvpMode mode, double t_floor)
    : ScoreOracle(OracleKind::MixtureDiffusion, ProcessKind::Diffusion, model.dim(), mode, t_floor),
      mixture_(std::move(model)), sched_(sched) {
  mixture_.validate();
}

Vec DiffusionModelOracle::score(const Vec& x, double t) const {
  const double mu = sched_.mu(t), sigma = sched_.sigma(t);
  if (gaussian_) {
    const Vec s_var = (mu * mu) * gaussian_->var.array() + sigma * sigma;
    return -(x - mu * gaussian_->mean).cwiseQuotient(s_var);
  }
  return mixture_score(mixture_, mu, sigma, x);
}

double DiffusionModelOracle::log_density(const Vec& x, double t) const {
  return mixture_log_density(mixture_, sched_.mu(t), sched_.sigma(t), x);
}

Vec DiffusionModelOracle::evaluate_impl(const Vec& x, double t) const { return -sched_.sigma(t) * score(x, t); }

Vec DiffusionModelOracle::jvp_impl(const Vec& x, double t, const Vec& v) const {
  const double mu = sched_.mu(t), sigma = sched_.sigma(t);
  if (gaussian_) {
    const Vec s_var = (mu * mu) * gaussian_->var.array() + sigma * sigma;
    return sigma * v.cwiseQuotient(s_var);
  }
  return -sigma * mixture_score_hvp(mixture_, mu, sigma, x, v);
}

// ---------------------------------------------------------------------------
// flow

FlowModelOracle::FlowModelOracle(GaussianModel model, JvpMode mode)
    : ScoreOracle(OracleKind::GaussianFlow, ProcessKind::Flow, model.dim(), mode, 0.0), gaussian_(std::move(model)) {
  gaussian_->validate();
  mixture_ = as_mixture(*gaussian_);
}

FlowModelOracle::FlowModelOracle(MixtureModel model, JvpMode mode)
    : ScoreOracle(OracleKind::MixtureFlow, ProcessKind::Flow, model.dim(), mode, 0.0), mixture_(std::move(model)) {
  mixture_.validate();
}

Vec FlowModelOracle::score(const Vec& x, double t) const {
  const FlowPoint p = FlowSchedule::eval(t);
  if (gaussian_) {
    const Vec s_var = (p.alpha * p.alpha) * gaussian_->var.array() + p.gamma * p.gamma;
    return -(x - p.alpha * gaussian_->mean).cwiseQuotient(s_var);
  }
  return mixture_score(mixture_, p.alpha, p.gamma, x);
}

double FlowModelOracle::log_density(const Vec& x, double t) const {
  const FlowPoint p = FlowSchedule::eval(t);
  return mixture_log_density(mixture_, p.alpha, p.gamma, x);
}

Vec FlowModelOracle::evaluate_impl(const Vec& x, double t) const {
  // b = (alpha_dot / alpha) x + (gamma / alpha) c s
  const FlowPoint p = FlowSchedule::eval(t);
  const double c = p.gamma * p.alpha_dot - p.gamma_dot * p.alpha;
  return (p.alpha_dot / p.alpha) * x + (p.gamma / p.alpha) * c * score(x, t);
}

Vec FlowModelOracle::jvp_impl(const Vec& x, double t, const Vec& v) const {
  const FlowPoint p = FlowSchedule::eval(t);
  const double c = p.gamma * p.alpha_dot - p.gamma_dot * p.alpha;
  Vec hv;
  if (gaussian_) {
    const Vec s_var = (p.alpha * p.alpha) * gaussian_->var.array() + p.gamma * p.gamma;
    hv = -v.cwiseQuotient(s_var);
  } else {
    hv = mixture_score_hvp(mixture_, p.alpha, p.gamma, x, v);
  }
  return (p.alpha_dot / p.alpha) * v + (p.gamma / p.alpha) * c * hv;
}

// ---------------------------------------------------------------------------

Vec tweedie_diffusion(const Vec& x, double t, const Vec& eps, const DiffusionSchedule& sched) {
  const DiffusionPoint p = sched.eval(t);
  return (x - p.sigma * eps) / p.mu;
}

Vec tweedie_flow(const Vec& x, double t, const Vec& b) {
  const FlowPoint p = FlowSchedule::eval(t);
  const double c = p.gamma * p.alpha_dot - p.gamma_dot * p.alpha;
  return (-p.gamma_dot * x + p.gamma * b) / c;
}

// ---------------------------------------------------------------------------
// posteriors

namespace {

void check_observation(const LinearDegradation& op, const Vec& y, std::size_t d, double sigma_y) {
  if (op.in_dim() != d) throw DimensionError("prior dimension does not match the operator");
  if (static_cast<std::size_t>(y.size()) != op.out_dim()) throw DimensionError("observation length does not match H");
  if (!(sigma_y >= 0.0)) throw DomainError("sigma_y must be >= 0");
}

struct Conditioned {
  Vec mean;
  Mat cov;
  double log_evidence;
};

Conditioned condition_dense(const Mat& h, const Vec& m, const Vec& v, const Vec& y, double sigma_y) {
  const Mat vht = v.asDiagonal() * h.transpose();
  Mat s = h * vht;
  s.diagonal().array() += sigma_y * sigma_y;
  const Eigen::LDLT<Mat> ldlt(s);
  if (ldlt.info() != Eigen::Success) throw DomainError("posterior: singular observation covariance");
  const Vec resid = y - h * m;
  const Vec alpha = ldlt.solve(resid);
  Conditioned out;
  out.mean = m + vht * alpha;
  Mat cov = -vht * ldlt.solve(vht.transpose());
  cov.diagonal() += v;
  out.cov = 0.5 * (cov + cov.transpose());
  constexpr double log2pi = 1.8378770664093454836;
  const double logdet = ldlt.vectorD().array().log().sum();
  out.log_evidence = -0.5 * (resid.dot(alpha) + logdet + static_cast<double>(y.size()) * log2pi);
  return out;
}

}  // namespace

GaussianPosterior exact_posterior(const GaussianModel& prior, const LinearDegradation& op, const Vec& y,
                                  double sigma_y, std::size_t max_dim) {
  prior.validate();
  check_observation(op, y, prior.dim(), sigma_y);
  GaussianPosterior post{prior.mean, prior.var, std::nullopt};
  if (op.kind() == OperatorKind::Mask) {
    const auto& idx = op.mask_indices();
    const double n2 = sigma_y * sigma_y;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto i = static_cast<Eigen::Index>(idx[j]);
      const double v = prior.var[i], m = prior.mean[i];
      post.mean[i] = m + v / (v + n2) * (y[static_cast<Eigen::Index>(j)] - m);
      post.variance[i] = v * n2 / (v + n2);
    }
    return post;
  }
  const DenseOperator dense = dense_materialize(op, max_dim);
  Conditioned c = condition_dense(dense.h, prior.mean, prior.var, y, sigma_y);
  post.mean = c.mean;
  post.variance = c.cov.diagonal().cwiseMax(0.0);
  post.cov = std::move(c.cov);
  return post;
}

GaussianPosterior exact_posterior(const MixtureModel&, const LinearDegradation&, const Vec&, double, std::size_t) {
  throw ConfigError("exact_posterior supports Gaussian priors only; use mixture_posterior_mean for mixtures");
}

Vec mixture_posterior_mean(const MixtureModel& prior, const LinearDegradation& op, const Vec& y, double sigma_y,
                           std::size_t max_dim) {
  prior.validate();
  check_observation(op, y, prior.dim(), sigma_y);
  const DenseOperator dense = dense_materialize(op, max_dim);
  const std::size_t K = prior.components.size();
  Vec logits(static_cast<Eigen::Index>(K));
  std::vector<Vec> means;
  for (std::size_t k = 0; k < K; ++k) {
    const Conditioned c = condition_dense(dense.h, prior.components[k].mean, prior.components[k].var, y, sigma_y);
    logits[static_cast<Eigen::Index>(k)] = std::log(prior.weights[k]) + c.log_evidence;
    means.push_back(c.mean);
  }
  const Vec g = softmax(logits);
  Vec out = Vec::Zero(static_cast<Eigen::Index>(prior.dim()));
  for (std::size_t k = 0; k < K; ++k) out += g[static_cast<Eigen::Index>(k)] * means[k];
  return out;
}

}  // namespace cji
