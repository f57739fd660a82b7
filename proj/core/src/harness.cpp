#include "cji/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "cji/stats.hpp"
#include "cji/tensor_io.hpp"

namespace cji {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

[[noreturn]] void schema_error(const std::string& where, const std::string& what) {
  throw ConfigError("config " + where + ": " + what);
}

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) schema_error(where, "expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }) == allowed.end())
      schema_error(where, "unknown key '" + it.key() + "'");
  }
}

template <class T>
T get_or(const json& obj, const char* key, const std::string& where, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    schema_error(where + "." + key, e.what());
  }
}

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return path.is_absolute() ? p : (fs::path(base) / path).lexically_normal().string();
}

Vec broadcast(const json& v, std::size_t d, const std::string& where) {
  if (v.is_number()) return Vec::Constant(static_cast<Eigen::Index>(d), v.get<double>());
  if (v.is_array()) {
    if (v.size() != d) {
      std::ostringstream msg;
      msg << "expected " << d << " values, got " << v.size();
      schema_error(where, msg.str());
    }
    Vec out(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < d; ++i) {
      if (!v[i].is_number()) schema_error(where, "non-numeric entry");
      out[static_cast<Eigen::Index>(i)] = v[i].get<double>();
    }
    return out;
  }
  schema_error(where, "expected a number or an array");
}

void apply_override(json& root, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + spec + "' is not key=value");
  const std::string key = spec.substr(0, eq), raw = spec.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + spec + "' has an empty path segment");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

OperatorConfig parse_operator(const json& j, const std::string& base) {
  const std::string where = "problem.operator";
  check_keys(j, where,
             {"kind", "dim", "indices", "bitmap", "observed_fraction", "seed", "factor", "height", "width", "kernel",
              "kernel_size", "kernel_sigma", "threshold", "matrix", "rows", "cols"});
  OperatorConfig c;
  c.kind = get_or<std::string>(j, "kind", where, "mask");
  c.dim = get_or<std::size_t>(j, "dim", where, 0);
  c.indices = get_or<std::vector<std::size_t>>(j, "indices", where, {});
  c.bitmap_path = resolve(base, get_or<std::string>(j, "bitmap", where, ""));
  c.observed_fraction = get_or<double>(j, "observed_fraction", where, -1.0);
  c.seed = get_or<std::uint64_t>(j, "seed", where, 0);
  c.factor = get_or<std::size_t>(j, "factor", where, 0);
  c.height = get_or<std::size_t>(j, "height", where, 0);
  c.width = get_or<std::size_t>(j, "width", where, 0);
  c.kernel_path = resolve(base, get_or<std::string>(j, "kernel", where, ""));
  c.kernel_size = get_or<std::size_t>(j, "kernel_size", where, 0);
  c.kernel_sigma = get_or<double>(j, "kernel_sigma", where, 0.0);
  c.threshold = get_or<double>(j, "threshold", where, 1e-8);
  c.matrix_path = resolve(base, get_or<std::string>(j, "matrix", where, ""));
  c.rows = get_or<std::size_t>(j, "rows", where, 0);
  c.cols = get_or<std::size_t>(j, "cols", where, 0);
  if (c.kind != "mask" && c.kind != "block_average" && c.kind != "circulant_blur" && c.kind != "dense")
    schema_error(where + ".kind", "unknown operator kind '" + c.kind + "'");
  return c;
}

GaussianModel parse_gaussian(const json& j, std::size_t d, const std::string& where) {
  const json mean = j.contains("mean") ? j["mean"] : json(0.0);
  const json var = j.contains("var") ? j["var"] : json(1.0);
  return GaussianModel{broadcast(mean, d, where + ".mean"), broadcast(var, d, where + ".var")};
}

ModelConfig parse_model(const json& j, std::size_t d, const std::string& base) {
  const std::string where = "model";
  check_keys(j, where, {"kind", "mean", "var", "components", "command", "timeout_s", "jvp_mode"});
  ModelConfig m;
  m.kind = get_or<std::string>(j, "kind", where, "gaussian");
  if (m.kind == "gaussian") {
    m.mixture = MixtureModel{{1.0}, {parse_gaussian(j, d, where)}};
    m.jvp_mode = parse_jvp_mode(get_or<std::string>(j, "jvp_mode", where, "analytic"));
  } else if (m.kind == "mixture") {
    if (!j.contains("components") || !j["components"].is_array() || j["components"].empty())
      schema_error(where + ".components", "expected a non-empty array");
    std::size_t k = 0;
    for (const auto& c : j["components"]) {
      const std::string w = where + ".components[" + std::to_string(k++) + "]";
      check_keys(c, w, {"weight", "mean", "var"});
      m.mixture.weights.push_back(get_or<double>(c, "weight", w, 0.0));
      m.mixture.components.push_back(parse_gaussian(c, d, w));
    }
    m.jvp_mode = parse_jvp_mode(get_or<std::string>(j, "jvp_mode", where, "analytic"));
  } else if (m.kind == "external") {
    m.endpoint.command = get_or<std::vector<std::string>>(j, "command", where, {});
    if (m.endpoint.command.empty()) schema_error(where + ".command", "expected a non-empty argv array");
    // a relative executable path is taken relative to the config file
    if (m.endpoint.command[0].find('/') != std::string::npos)
      m.endpoint.command[0] = resolve(base, m.endpoint.command[0]);
    m.endpoint.timeout_s = get_or<double>(j, "timeout_s", where, 30.0);
    m.jvp_mode = parse_jvp_mode(get_or<std::string>(j, "jvp_mode", where, "remote"));
  } else {
    schema_error(where + ".kind", "unknown model kind '" + m.kind + "'");
  }
  if (m.kind != "external") m.mixture.validate();
  return m;
}

std::size_t operator_in_dim(const OperatorConfig& c) {
  if (c.kind == "mask") {
    if (!c.bitmap_path.empty()) return read_tensor_file(c.bitmap_path).numel();
    return c.dim;
  }
  if (c.kind == "block_average") return c.factor * c.height * c.factor * c.width;
  if (c.kind == "circulant_blur") return c.height * c.width;
  if (!c.matrix_path.empty()) {
    const Tensor t = read_tensor_file(c.matrix_path);
    if (t.shape.size() != 2) throw ConfigError("dense matrix file must be 2-D");
    return t.shape[1];
  }
  return c.cols;
}

template <class T>
std::vector<T> sweep_list(const json& j, const char* key) {
  if (!j.contains(key)) return {};
  const json& v = j[key];
  try {
    if (v.is_array()) return v.get<std::vector<T>>();
    return {v.get<T>()};
  } catch (const json::exception& e) {
    schema_error(std::string("sweep.") + key, e.what());
  }
}

}  // namespace

SweepConfig default_sweep(Method method) {
  SweepConfig s;
  s.w = {1, 2, 3, 4, 5};
  s.tau = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  if (is_conjugate(method)) s.lambda = {-1.0, -0.5, 0.0, 0.5, 1.0};
  return s;
}

RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides,
                       const std::string& base_dir) {
  json root;
  try {
    root = json::parse(json_text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be an object");
  for (const auto& o : overrides) apply_override(root, o);
  check_keys(root, "root",
             {"schedule", "problem", "model", "sampler", "sweep", "seeds", "output_dir", "metrics", "max_runs",
              "save_reconstructions", "threads"});

  RunConfig cfg;
  if (root.contains("schedule")) {
    const json& s = root["schedule"];
    check_keys(s, "schedule", {"beta_min", "beta_max", "T"});
    cfg.schedule = DiffusionSchedule(get_or<double>(s, "beta_min", "schedule", 0.1),
                                     get_or<double>(s, "beta_max", "schedule", 20.0),
                                     get_or<double>(s, "T", "schedule", 1.0));
  }

  if (!root.contains("problem")) schema_error("root", "missing 'problem'");
  const json& p = root["problem"];
  check_keys(p, "problem", {"operator", "data", "observation", "sigma_y", "noise_seed", "reference"});
  if (!p.contains("operator")) schema_error("problem", "missing 'operator'");
  cfg.problem.op = parse_operator(p["operator"], base_dir);
  if (p.contains("data")) {
    const json& d = p["data"];
    check_keys(d, "problem.data", {"source", "path", "seed"});
    cfg.problem.data_source = get_or<std::string>(d, "source", "problem.data", "prior");
    cfg.problem.data_path = resolve(base_dir, get_or<std::string>(d, "path", "problem.data", ""));
    cfg.problem.data_seed = get_or<std::uint64_t>(d, "seed", "problem.data", 0);
    if (cfg.problem.data_source != "prior" && cfg.problem.data_source != "file")
      schema_error("problem.data.source", "expected 'prior' or 'file'");
    if (cfg.problem.data_source == "file" && cfg.problem.data_path.empty())
      schema_error("problem.data.path", "required for source=file");
  }
  cfg.problem.observation_path = resolve(base_dir, get_or<std::string>(p, "observation", "problem", ""));
  cfg.problem.sigma_y = get_or<double>(p, "sigma_y", "problem", 0.0);
  cfg.problem.noise_seed = get_or<std::uint64_t>(p, "noise_seed", "problem", 1);
  cfg.problem.reference = get_or<std::string>(p, "reference", "problem", "ground_truth");
  if (cfg.problem.reference != "ground_truth" && cfg.problem.reference != "posterior_mean")
    schema_error("problem.reference", "expected 'ground_truth' or 'posterior_mean'");
  if (!(cfg.problem.sigma_y >= 0.0)) schema_error("problem.sigma_y", "must be >= 0");

  const std::size_t d = operator_in_dim(cfg.problem.op);
  if (d == 0) schema_error("problem.operator", "cannot infer the signal dimension");
  cfg.model = parse_model(root.contains("model") ? root["model"] : json::object(), d, base_dir);
  if (cfg.problem.data_source == "prior" && cfg.model.kind == "external")
    schema_error("problem.data", "source=prior needs an analytic model");

  const json smp = root.contains("sampler") ? root["sampler"] : json::object();
  check_keys(smp, "sampler",
             {"method", "w", "lambda", "tau", "nfe", "schedule_kind", "t_floor", "flow_margin", "quad_tol", "phi_form",
              "kappa3_form", "exact_linear", "chains"});
  cfg.method = parse_method(get_or<std::string>(smp, "method", "sampler", "cpigdm"));
  const bool conj = is_conjugate(cfg.method);
  const bool diffusion = process_of(cfg.method) == ProcessKind::Diffusion;
  cfg.guidance.w = get_or<double>(smp, "w", "sampler", conj ? 3.0 : 1.0);
  cfg.guidance.lambda = get_or<double>(smp, "lambda", "sampler", 0.0);
  cfg.guidance.tau = get_or<double>(smp, "tau", "sampler", diffusion ? 0.6 : 0.2);
  cfg.guidance.nfe = get_or<int>(smp, "nfe", "sampler", 20);
  cfg.guidance.sigma_y = cfg.problem.sigma_y;
  cfg.guidance.schedule =
      parse_weight_schedule(get_or<std::string>(smp, "schedule_kind", "sampler", conj ? "adaptive_paper" : "constant_r2"));
  if (conj && cfg.guidance.schedule != WeightSchedule::AdaptivePaper)
    schema_error("sampler.schedule_kind", "conjugate methods need 'adaptive_paper'");
  cfg.conjugate.t_floor = get_or<double>(smp, "t_floor", "sampler", 1e-4);
  cfg.conjugate.flow_margin = get_or<double>(smp, "flow_margin", "sampler", 1e-4);
  const double qt = get_or<double>(smp, "quad_tol", "sampler", 1e-5);
  cfg.conjugate.quad.abs_tol = cfg.conjugate.quad.rel_tol = qt;
  const std::string pf = get_or<std::string>(smp, "phi_form", "sampler", "simplified");
  if (pf != "simplified" && pf != "literal") schema_error("sampler.phi_form", "expected 'simplified' or 'literal'");
  cfg.conjugate.phi_form = pf == "literal" ? PhiForm::Literal : PhiForm::Simplified;
  const std::string kf = get_or<std::string>(smp, "kappa3_form", "sampler", "first_order");
  if (kf != "first_order" && kf != "literal") schema_error("sampler.kappa3_form", "expected 'first_order' or 'literal'");
  cfg.conjugate.kappa3_form = kf == "literal" ? Kappa3Form::Literal : Kappa3Form::FirstOrder;
  cfg.exact_linear = get_or<bool>(smp, "exact_linear", "sampler", false);
  cfg.chains = get_or<std::size_t>(smp, "chains", "sampler", 1);
  if (cfg.chains == 0) schema_error("sampler.chains", "must be >= 1");
  if (cfg.guidance.nfe < 1) schema_error("sampler.nfe", "must be >= 1");

  if (root.contains("sweep")) {
    const json& s = root["sweep"];
    if (s.is_string()) {
      if (s.get<std::string>() != "default") schema_error("sweep", "expected an object or \"default\"");
      cfg.sweep = default_sweep(cfg.method);
    } else {
      check_keys(s, "sweep", {"w", "lambda", "tau", "nfe"});
      cfg.sweep.w = sweep_list<double>(s, "w");
      cfg.sweep.lambda = sweep_list<double>(s, "lambda");
      cfg.sweep.tau = sweep_list<double>(s, "tau");
      cfg.sweep.nfe = sweep_list<int>(s, "nfe");
    }
  }
  if (root.contains("seeds")) {
    const json& s = root["seeds"];
    if (s.is_number_unsigned()) {
      // "seeds": n means 0..n-1
      cfg.seeds.clear();
      for (std::uint64_t i = 0; i < s.get<std::uint64_t>(); ++i) cfg.seeds.push_back(i);
    } else {
      cfg.seeds = get_or<std::vector<std::uint64_t>>(root, "seeds", "root", {});
    }
    if (cfg.seeds.empty()) schema_error("seeds", "need at least one seed");
  }
  cfg.output_dir = resolve(base_dir, get_or<std::string>(root, "output_dir", "root", "cji_out"));
  if (root.contains("metrics")) {
    check_keys(root["metrics"], "metrics", {"peak"});
    cfg.peak = get_or<double>(root["metrics"], "peak", "metrics", 1.0);
    if (!(cfg.peak > 0.0)) schema_error("metrics.peak", "must be > 0");
  }
  cfg.max_runs = get_or<std::size_t>(root, "max_runs", "root", 10000);
  cfg.save_reconstructions = get_or<bool>(root, "save_reconstructions", "root", true);
  cfg.threads = get_or<unsigned>(root, "threads", "root", 1);
  return cfg;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const fs::path parent = fs::path(path).parent_path();
  return parse_config(ss.str(), overrides, parent.empty() ? "." : parent.string());
}

// ---------------------------------------------------------------------------

Vec standard_normal(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec v(static_cast<Eigen::Index>(n));
  for (auto& e : v) e = nd(rng);
  return v;
}

LinearDegradation build_operator(const OperatorConfig& c) {
  if (c.kind == "mask") {
    if (!c.bitmap_path.empty()) {
      const Tensor t = read_tensor_file(c.bitmap_path);
      std::vector<std::size_t> idx;
      for (Eigen::Index i = 0; i < t.data.size(); ++i)
        if (t.data[i] != 0.0) idx.push_back(static_cast<std::size_t>(i));
      return LinearDegradation::mask(idx, t.numel());
    }
    if (c.dim == 0) throw ConfigError("mask operator needs 'dim' (or a bitmap)");
    if (c.observed_fraction >= 0.0) {
      if (c.observed_fraction > 1.0) throw ConfigError("observed_fraction must be in [0, 1]");
      std::vector<std::size_t> all(c.dim);
      for (std::size_t i = 0; i < c.dim; ++i) all[i] = i;
      std::mt19937_64 rng(c.seed);
      std::shuffle(all.begin(), all.end(), rng);
      const auto m = static_cast<std::size_t>(std::llround(c.observed_fraction * static_cast<double>(c.dim)));
      std::vector<std::size_t> idx(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(m));
      std::sort(idx.begin(), idx.end());
      return LinearDegradation::mask(idx, c.dim);
    }
    return LinearDegradation::mask(c.indices, c.dim);
  }
  if (c.kind == "block_average") return LinearDegradation::block_average(c.factor, c.height, c.width);
  if (c.kind == "circulant_blur") {
    Mat kernel;
    if (!c.kernel_path.empty()) {
      const Tensor t = read_tensor_file(c.kernel_path);
      if (t.shape.size() != 2) throw ConfigError("blur kernel file must be 2-D");
      kernel = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
    } else {
      kernel = gaussian_kernel(c.kernel_size, c.kernel_sigma);
    }
    return LinearDegradation::circulant_blur(kernel, c.height, c.width, c.threshold);
  }
  Mat h;
  if (!c.matrix_path.empty()) {
    const Tensor t = read_tensor_file(c.matrix_path);
    if (t.shape.size() != 2) throw ConfigError("dense matrix file must be 2-D");
    h = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  } else {
    if (c.rows == 0 || c.cols == 0) throw ConfigError("dense operator needs 'matrix' or rows/cols");
    const Vec v = standard_normal(c.rows * c.cols, c.seed) / std::sqrt(static_cast<double>(c.cols));
    h = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        v.data(), static_cast<Eigen::Index>(c.rows), static_cast<Eigen::Index>(c.cols));
  }
  return LinearDegradation::dense(h, c.threshold);
}

std::shared_ptr<const ScoreOracle> build_oracle(const RunConfig& cfg) {
  const ProcessKind proc = process_of(cfg.method);
  const ModelConfig& m = cfg.model;
  if (m.kind == "external") {
    return std::make_shared<ExternalOracle>(m.endpoint, proc, m.jvp_mode,
                                            proc == ProcessKind::Diffusion ? cfg.conjugate.t_floor : 0.0);
  }
  const bool single = m.kind == "gaussian";
  if (proc == ProcessKind::Diffusion) {
    if (single)
      return std::make_shared<DiffusionModelOracle>(m.mixture.components[0], cfg.schedule, m.jvp_mode,
                                                    cfg.conjugate.t_floor);
    return std::make_shared<DiffusionModelOracle>(m.mixture, cfg.schedule, m.jvp_mode, cfg.conjugate.t_floor);
  }
  if (single) return std::make_shared<FlowModelOracle>(m.mixture.components[0], m.jvp_mode);
  return std::make_shared<FlowModelOracle>(m.mixture, m.jvp_mode);
}

Vec degrade(const Vec& x0, const LinearDegradation& op, double sigma_y, std::uint64_t seed) {
  if (static_cast<std::size_t>(x0.size()) != op.in_dim()) {
    std::ostringstream msg;
    msg << "degrade: signal has " << x0.size() << " values, operator expects " << op.in_dim();
    throw DimensionError(msg.str());
  }
  if (!(sigma_y >= 0.0)) throw DomainError("sigma_y must be >= 0");
  Vec y = op.apply(x0);
  if (sigma_y > 0.0) y += sigma_y * standard_normal(op.out_dim(), seed);
  return y;
}

namespace {

Vec draw_from_mixture(const MixtureModel& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(m.weights.begin(), m.weights.end());
  const GaussianModel& c = m.components[pick(rng)];
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec x(c.mean.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = c.mean[i] + std::sqrt(c.var[i]) * nd(rng);
  return x;
}

}  // namespace

Problem build_problem(const RunConfig& cfg) {
  LinearDegradation op = build_operator(cfg.problem.op);
  Vec x0;
  if (cfg.problem.data_source == "file") {
    x0 = read_tensor_file(cfg.problem.data_path).data;
  } else {
    x0 = draw_from_mixture(cfg.model.mixture, cfg.problem.data_seed);
  }
  if (static_cast<std::size_t>(x0.size()) != op.in_dim()) {
    std::ostringstream msg;
    msg << "data has " << x0.size() << " values, operator expects " << op.in_dim();
    throw ConfigError(msg.str());
  }
  Vec y;
  if (!cfg.problem.observation_path.empty()) {
    y = read_tensor_file(cfg.problem.observation_path).data;
    if (static_cast<std::size_t>(y.size()) != op.out_dim()) throw ConfigError("observation length does not match H");
  } else {
    y = degrade(x0, op, cfg.problem.sigma_y, cfg.problem.noise_seed);
  }
  Vec ref = x0;
  if (cfg.problem.reference == "posterior_mean") {
    if (cfg.model.kind == "external") throw ConfigError("reference=posterior_mean needs an analytic model");
    if (cfg.model.kind == "gaussian")
      ref = exact_posterior(cfg.model.mixture.components[0], op, y, cfg.problem.sigma_y).mean;
    else
      ref = mixture_posterior_mean(cfg.model.mixture, op, y, cfg.problem.sigma_y);
  }
  return Problem{std::move(op), std::move(x0), std::move(y), std::move(ref)};
}

double psnr_from_mse(double mse, double peak) { return 10.0 * std::log10(peak * peak / mse); }

// ---------------------------------------------------------------------------

namespace {

struct SweepPoint {
  double w, lambda, tau;
  int nfe;
};

std::vector<SweepPoint> expand(const RunConfig& cfg) {
  const auto pick = [](const std::vector<double>& v, double base) { return v.empty() ? std::vector<double>{base} : v; };
  const auto ws = pick(cfg.sweep.w, cfg.guidance.w);
  const auto ls = pick(cfg.sweep.lambda, cfg.guidance.lambda);
  const auto ts = pick(cfg.sweep.tau, cfg.guidance.tau);
  const auto ns = cfg.sweep.nfe.empty() ? std::vector<int>{cfg.guidance.nfe} : cfg.sweep.nfe;
  std::vector<SweepPoint> pts;
  for (int n : ns)
    for (double t : ts)
      for (double l : ls)
        for (double w : ws) pts.push_back({w, l, t, n});
  return pts;
}

std::uint64_t chain_seed(std::uint64_t seed, std::size_t chain) {
  if (chain == 0) return seed;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(chain)};
  std::uint64_t out[1];
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  out[0] = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out[0];
}

}  // namespace

RunReport run(const RunConfig& cfg) {
  const Problem prob = build_problem(cfg);
  const std::vector<SweepPoint> points = expand(cfg);
  const std::size_t total = points.size() * cfg.seeds.size();
  if (total > cfg.max_runs) {
    std::ostringstream msg;
    msg << "sweep has " << total << " runs, above the guard of " << cfg.max_runs << " (raise max_runs)";
    throw ConfigError(msg.str());
  }

  // one sampler (and coefficient table) per sweep point
  std::vector<std::unique_ptr<Sampler>> samplers(points.size());
  std::vector<std::string> point_errors(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    SamplerSpec spec;
    spec.method = cfg.method;
    spec.guidance = cfg.guidance;
    spec.guidance.w = points[i].w;
    spec.guidance.lambda = points[i].lambda;
    spec.guidance.tau = points[i].tau;
    spec.guidance.nfe = points[i].nfe;
    spec.options = cfg.conjugate;
    spec.exact_linear = cfg.exact_linear;
    try {
      samplers[i] = std::make_unique<Sampler>(spec, prob.op, cfg.schedule);
    } catch (const ConfigError& e) {
      // e.g. A_t overflow for this (w, lambda): recorded, not fatal
      point_errors[i] = e.what();
    }
  }

  RunReport report;
  report.records.resize(total);
  report.errors.resize(total);
  report.reconstructions.resize(total);

  const bool external = cfg.model.kind == "external";
  std::shared_ptr<const ScoreOracle> shared_oracle;
  if (!external) shared_oracle = build_oracle(cfg);

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr fatal;
  const std::size_t d = prob.op.in_dim();

  auto worker = [&]() {
    std::shared_ptr<const ScoreOracle> oracle = shared_oracle;
    try {
      if (!oracle) oracle = build_oracle(cfg);
      for (;;) {
        const std::size_t r = next.fetch_add(1);
        if (r >= total) break;
        const std::size_t pi = r / cfg.seeds.size();
        const std::uint64_t seed = cfg.seeds[r % cfg.seeds.size()];
        const SweepPoint& pt = points[pi];
        RunRecord rec{to_string(cfg.method), pt.w, pt.lambda, pt.tau, pt.nfe, seed, 0, 0, 0, 0};
        const auto start = std::chrono::steady_clock::now();
        std::string err = point_errors[pi];
        Vec xhat;
        if (err.empty()) {
          try {
            xhat = Vec::Zero(static_cast<Eigen::Index>(d));
            for (std::size_t c = 0; c < cfg.chains; ++c)
              xhat += samplers[pi]->sample(prob.y, *oracle, standard_normal(d, chain_seed(seed, c))).x;
            xhat /= static_cast<double>(cfg.chains);
          } catch (const DivergenceError& e) {
            err = e.what();
          }
        }
        rec.wall_time_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        if (err.empty()) {
          rec.mse = (xhat - prob.reference).squaredNorm() / static_cast<double>(d);
          rec.psnr = psnr_from_mse(rec.mse, cfg.peak);
          rec.observed_residual = (prob.op.apply(xhat) - prob.y).cwiseAbs().maxCoeff();
          if (cfg.save_reconstructions) report.reconstructions[r] = std::move(xhat);
        } else {
          rec.mse = rec.psnr = rec.observed_residual = std::numeric_limits<double>::quiet_NaN();
          report.errors[r] = err;
        }
        report.records[r] = rec;
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mu);
      if (!fatal) fatal = std::current_exception();
      next.store(total);
    }
  };

  unsigned n_threads = cfg.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : cfg.threads;
  n_threads = static_cast<unsigned>(std::min<std::size_t>(n_threads, std::max<std::size_t>(total, 1)));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);
  return report;
}

std::size_t RunReport::diverged() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const RunRecord& r) { return r.diverged(); }));
}

std::vector<AggregateRecord> RunReport::aggregate() const {
  std::map<std::tuple<std::string, double, double, double, int>, std::vector<const RunRecord*>> groups;
  std::vector<std::tuple<std::string, double, double, double, int>> order;
  for (const auto& r : records) {
    const auto key = std::make_tuple(r.method, r.w, r.lambda, r.tau, r.nfe);
    auto [it, fresh] = groups.try_emplace(key);
    if (fresh) order.push_back(key);
    it->second.push_back(&r);
  }
  std::vector<AggregateRecord> out;
  for (const auto& key : order) {
    const auto& rs = groups[key];
    AggregateRecord a;
    std::tie(a.method, a.w, a.lambda, a.tau, a.nfe) = key;
    a.runs = rs.size();
    std::vector<double> mse, psnr, resid;
    for (const RunRecord* r : rs) {
      if (r->diverged()) {
        ++a.diverged;
        continue;
      }
      mse.push_back(r->mse);
      psnr.push_back(r->psnr);
      resid.push_back(r->observed_residual);
    }
    if (mse.empty()) {
      a.mse_mean = a.mse_sem = a.psnr_mean = a.psnr_sem = a.residual_mean = std::numeric_limits<double>::quiet_NaN();
    } else {
      const MeanStderr m = mean_stderr(mse), p = mean_stderr(psnr), q = mean_stderr(resid);
      a.mse_mean = m.mean;
      a.mse_sem = m.sem;
      a.psnr_mean = p.mean;
      a.psnr_sem = p.sem;
      a.residual_mean = q.mean;
    }
    out.push_back(a);
  }
  return out;
}

std::string RunReport::to_csv() const {
  std::ostringstream out;
  out << "method,w,lambda,tau,nfe,seed,mse,psnr,observed_residual,wall_time_ms\n";
  for (const auto& r : records) {
    out << r.method << ',' << shortest(r.w) << ',' << shortest(r.lambda) << ',' << shortest(r.tau) << ',' << r.nfe
        << ',' << r.seed << ',' << shortest(r.mse) << ',' << shortest(r.psnr) << ',' << shortest(r.observed_residual)
        << ',' << shortest(r.wall_time_ms) << '\n';
  }
  return out.str();
}

namespace {
template <class T>
T parse_cell(const std::string& s) {
  T v{};
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) throw ConfigError("report csv: bad cell '" + s + "'");
  return v;
}
}  // namespace

RunReport RunReport::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "method,w,lambda,tau,nfe,seed,mse,psnr,observed_residual,wall_time_ms")
    throw ConfigError("report csv: unexpected header");
  RunReport rep;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    std::string c;
    while (std::getline(row, c, ',')) cells.push_back(c);
    if (cells.size() != 10) throw ConfigError("report csv: expected 10 columns in '" + line + "'");
    RunRecord r;
    r.method = cells[0];
    r.w = parse_cell<double>(cells[1]);
    r.lambda = parse_cell<double>(cells[2]);
    r.tau = parse_cell<double>(cells[3]);
    r.nfe = parse_cell<int>(cells[4]);
    r.seed = parse_cell<std::uint64_t>(cells[5]);
    r.mse = parse_cell<double>(cells[6]);
    r.psnr = parse_cell<double>(cells[7]);
    r.observed_residual = parse_cell<double>(cells[8]);
    r.wall_time_ms = parse_cell<double>(cells[9]);
    rep.records.push_back(r);
  }
  rep.errors.resize(rep.records.size());
  rep.reconstructions.resize(rep.records.size());
  return rep;
}

std::string RunReport::summary_json() const {
  const auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json out;
  out["runs"] = records.size();
  out["diverged"] = diverged();
  json aggs = json::array();
  const AggregateRecord* best = nullptr;
  const auto all = aggregate();
  for (const auto& a : all) {
    aggs.push_back({{"method", a.method}, {"w", a.w}, {"lambda", a.lambda}, {"tau", a.tau}, {"nfe", a.nfe},
                    {"runs", a.runs}, {"diverged", a.diverged}, {"mse_mean", num(a.mse_mean)},
                    {"mse_stderr", num(a.mse_sem)}, {"psnr_mean", num(a.psnr_mean)}, {"psnr_stderr", num(a.psnr_sem)},
                    {"observed_residual_mean", num(a.residual_mean)}});
    if (std::isfinite(a.mse_mean) && (!best || a.mse_mean < best->mse_mean)) best = &a;
  }
  out["aggregates"] = aggs;
  if (best) out["best"] = {{"w", best->w}, {"lambda", best->lambda}, {"tau", best->tau}, {"nfe", best->nfe}, {"mse_mean", best->mse_mean}};
  json errs = json::array();
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) errs.push_back({{"record", i}, {"message", errors[i]}});
  out["errors"] = errs;
  return out.dump(2) + "\n";
}

void write_report(const RunReport& report, const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  const auto write_text = [](const fs::path& p, const std::string& s) {
    std::ofstream f(p);
    if (!f) throw ConfigError("cannot write '" + p.string() + "'");
    f << s;
  };
  write_text(fs::path(cfg.output_dir) / "report.csv", report.to_csv());
  write_text(fs::path(cfg.output_dir) / "summary.json", report.summary_json());
  if (cfg.save_reconstructions) {
    for (std::size_t i = 0; i < report.reconstructions.size(); ++i) {
      if (report.reconstructions[i].size() == 0) continue;
      std::ostringstream name;
      name << "recon_" << std::setw(5) << std::setfill('0') << i << ".cji";
      write_tensor_file((fs::path(cfg.output_dir) / name.str()).string(), Tensor::vector(report.reconstructions[i]));
    }
  }
}

// ---------------------------------------------------------------------------

double PosteriorStats::fraction_ks_pass(double alpha) const {
  if (ks_pvalue.empty()) return 1.0;
  const auto pass = std::count_if(ks_pvalue.begin(), ks_pvalue.end(), [&](double p) { return p > alpha; });
  return static_cast<double>(pass) / static_cast<double>(ks_pvalue.size());
}

PosteriorStats posterior_stats(const std::vector<Vec>& samples, const LinearDegradation& op, const Vec& y,
                               const GaussianModel& prior, double sigma_y) {
  if (samples.empty()) throw DomainError("posterior_stats needs at least one sample");
  const std::size_t d = op.in_dim();
  const GaussianPosterior exact = exact_posterior(prior, op, y, sigma_y);
  PosteriorStats st;
  st.samples = samples.size();
  st.few_samples = samples.size() < 30;
  st.exact_mean = exact.mean;
  st.exact_variance = exact.variance;
  st.mean = Vec::Zero(static_cast<Eigen::Index>(d));
  st.variance = Vec::Zero(static_cast<Eigen::Index>(d));
  for (const Vec& s : samples) {
    if (static_cast<std::size_t>(s.size()) != d) throw DimensionError("sample has the wrong length");
    st.mean += s;
    st.max_observed_residual = std::max(st.max_observed_residual, (op.apply(s) - y).cwiseAbs().maxCoeff());
  }
  const double n = static_cast<double>(samples.size());
  st.mean /= n;
  if (samples.size() > 1) {
    // shifted by the first sample so identical draws give exactly zero
    Vec s1 = Vec::Zero(static_cast<Eigen::Index>(d)), s2 = s1;
    for (const Vec& s : samples) {
      const Vec dv = s - samples.front();
      s1 += dv;
      s2 += dv.array().square().matrix();
    }
    st.variance = ((s2.array() - s1.array().square() / n) / (n - 1.0)).max(0.0).matrix();
  }
  const double var_scale = exact.variance.size() ? exact.variance.maxCoeff() : 1.0;
  for (std::size_t i = 0; i < d; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    if (st.variance[ii] == 0.0) st.zero_variance_coords.push_back(i);
    if (!(exact.variance[ii] > 1e-12 * var_scale)) continue;
    st.free_coords.push_back(i);
    std::vector<double> col(samples.size());
    for (std::size_t k = 0; k < samples.size(); ++k) col[k] = samples[k][ii];
    const double m = exact.mean[ii], sd = std::sqrt(exact.variance[ii]);
    const double dstat = ks_statistic(std::move(col), [&](double x) { return normal_cdf((x - m) / sd); });
    st.ks_stat.push_back(dstat);
    st.ks_pvalue.push_back(ks_pvalue(dstat, samples.size()));
  }
  return st;
}

}  // namespace cji
