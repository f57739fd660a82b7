// cji: command line front-end for the conjugate integrator library.
#include <CLI11.hpp>

#include <cji/harness.hpp>
#include <cji/tensor_io.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitDiverged = 2;

struct CommonFlags {
  std::string config;
  std::string output_dir;
  std::string seeds;
  std::optional<unsigned> threads;
  std::vector<std::string> overrides;
};

// "0,1,2" or "0..9" (inclusive)
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  const auto range = text.find("..");
  try {
    if (range != std::string::npos) {
      const std::uint64_t lo = std::stoull(text.substr(0, range));
      const std::uint64_t hi = std::stoull(text.substr(range + 2));
      if (hi < lo) throw cji::ConfigError("--seeds: empty range '" + text + "'");
      for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
      return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  } catch (const std::logic_error&) {
    throw cji::ConfigError("--seeds: cannot parse '" + text + "'");
  }
  if (out.empty()) throw cji::ConfigError("--seeds: no seeds given");
  return out;
}

cji::RunConfig load(const CommonFlags& f) {
  cji::RunConfig cfg = cji::load_config(f.config, f.overrides);
  if (!f.output_dir.empty()) cfg.output_dir = f.output_dir;
  if (!f.seeds.empty()) cfg.seeds = parse_seeds(f.seeds);
  if (f.threads) cfg.threads = *f.threads;
  return cfg;
}

void write_problem(const cji::Problem& p, const std::string& dir) {
  std::filesystem::create_directories(dir);
  cji::write_tensor_file((std::filesystem::path(dir) / "x0.cji").string(), cji::Tensor::vector(p.x0));
  cji::write_tensor_file((std::filesystem::path(dir) / "y.cji").string(), cji::Tensor::vector(p.y));
}

int cmd_run(const CommonFlags& f) {
  const cji::RunConfig cfg = load(f);
  const cji::Problem prob = cji::build_problem(cfg);
  const cji::RunReport report = cji::run(cfg);
  write_problem(prob, cfg.output_dir);
  cji::write_report(report, cfg);
  const std::size_t div = report.diverged();
  std::cerr << "cji: " << report.records.size() << " runs, " << div << " diverged -> " << cfg.output_dir << "\n";
  for (std::size_t i = 0; i < report.errors.size(); ++i)
    if (!report.errors[i].empty()) std::cerr << "  run " << i << ": " << report.errors[i] << "\n";
  return div ? kExitDiverged : kExitOk;
}

int cmd_degrade(const CommonFlags& f) {
  const cji::RunConfig cfg = load(f);
  const cji::Problem prob = cji::build_problem(cfg);
  write_problem(prob, cfg.output_dir);
  std::cerr << "cji: wrote x0.cji and y.cji to " << cfg.output_dir << "\n";
  return kExitOk;
}

int cmd_coeff_dump(const CommonFlags& f) {
  const cji::RunConfig cfg = load(f);
  const cji::LinearDegradation op = cji::build_operator(cfg.problem.op);
  cji::SamplerSpec spec;
  spec.method = cfg.method;
  spec.guidance = cfg.guidance;
  spec.options = cfg.conjugate;
  spec.exact_linear = cfg.exact_linear;
  const cji::Sampler sampler(spec, op, cfg.schedule);
  std::cout << sampler.table().to_csv();
  return kExitOk;
}

// Quick end-to-end sanity checks on a small Gaussian mask problem.
int cmd_selftest() {
  using namespace cji;
  int failures = 0;
  const auto check = [&](bool ok, const std::string& name) {
    std::cout << (ok ? "ok   " : "FAIL ") << name << "\n";
    if (!ok) ++failures;
  };
  const std::size_t d = 8;
  const LinearDegradation op = LinearDegradation::mask({0, 2, 4, 6}, d);
  const Vec x = standard_normal(d, 7);

  GuidanceConfig g;
  g.w = 3.0;
  g.lambda = 0.5;
  const ConjugateTransform tr(ProcessKind::Diffusion, g);
  const Vec back = tr.inverse_apply(op, 0.4, tr.apply(op, 0.4, x));
  check((back - x).norm() <= 1e-12 * x.norm(), "A_t inverse round trip");

  const Vec px = op.proj_apply(x);
  check((op.proj_apply(px) - px).norm() <= 1e-12, "projector is idempotent");
  check((op.apply(op.pinv_apply(op.apply(x))) - op.apply(x)).norm() <= 1e-12, "H pinv(H x) = H x");

  const GaussianModel prior = GaussianModel::standard(d);
  const DiffusionModelOracle oracle(prior);
  const Vec y = op.apply(x);
  SamplerSpec spec;
  // The observed error settles near y / (w - 1), so a strong weight is needed to pin.
  spec.guidance.w = 200.0;
  spec.guidance.tau = 0.7;
  spec.guidance.nfe = 200;
  const Sampler sampler(spec, op);
  const SampleResult res = sampler.sample(y, oracle, standard_normal(d, 1));
  check(res.x.allFinite(), "C-PiGDM sample is finite");
  check((op.apply(res.x) - y).cwiseAbs().maxCoeff() < 0.1, "C-PiGDM sample matches observations");

  std::cout << (failures ? "selftest FAILED\n" : "selftest passed\n");
  return failures ? kExitConfig : kExitOk;
}

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("config", f.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  sub->add_option("--output-dir", f.output_dir, "Directory for reports and tensors");
  sub->add_option("--seeds", f.seeds, "Seeds as a list (0,1,2) or inclusive range (0..9)");
  sub->add_option("--threads", f.threads, "Worker threads (0 = all cores)");
  sub->add_option("--override", f.overrides, "Set a config value, e.g. sampler.w=3 (repeatable)")
      ->take_all()
      ->allow_extra_args(false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional conjugate integrators for linear inverse problems"};
  app.require_subcommand(1);
  CommonFlags run_f, degrade_f, coeff_f;
  CLI::App* run = app.add_subcommand("run", "Run a sampler sweep and write report.csv / summary.json");
  add_common(run, run_f);
  CLI::App* degrade = app.add_subcommand("degrade", "Write x0.cji and y = H x0 + sigma_y n");
  add_common(degrade, degrade_f);
  CLI::App* coeff = app.add_subcommand("coeff-dump", "Print the precomputed coefficient table as CSV");
  add_common(coeff, coeff_f);
  CLI::App* selftest = app.add_subcommand("selftest", "Run built-in sanity checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_f);
    if (*degrade) return cmd_degrade(degrade_f);
    if (*coeff) return cmd_coeff_dump(coeff_f);
    if (*selftest) return cmd_selftest();
  } catch (const cji::DivergenceError& e) {
    std::cerr << "cji: diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "cji: error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
