#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cji/conjugate.hpp"
#include "cji/external_oracle.hpp"
#include "cji/operators.hpp"
#include "cji/oracles.hpp"
#include "cji/samplers.hpp"
#include "cji/schedules.hpp"

namespace cji {

struct OperatorConfig {
  std::string kind = "mask";  // mask | block_average | circulant_blur | dense
  std::size_t dim = 0;        // mask
  std::vector<std::size_t> indices;
  std::string bitmap_path;        // mask: tensor of 0/1 values
  double observed_fraction = -1;  // mask: random subset
  std::uint64_t seed = 0;         // random mask / random dense matrix
  std::size_t factor = 0;         // block_average
  std::size_t height = 0, width = 0;  // output size (block) or image size (blur)
  std::string kernel_path;            // circulant_blur taps
  std::size_t kernel_size = 0;        // ... or a gaussian of this size
  double kernel_sigma = 0.0;
  double threshold = 1e-8;
  std::string matrix_path;         // dense
  std::size_t rows = 0, cols = 0;  // dense random N(0, 1/cols) when no file
};

struct ModelConfig {
  std::string kind = "gaussian";  // gaussian | mixture | external
  MixtureModel mixture;           // gaussian: single component
  ExternalEndpoint endpoint;
  JvpMode jvp_mode = JvpMode::Analytic;
};

struct ProblemConfig {
  OperatorConfig op;
  std::string data_source = "prior";  // prior | file
  std::string data_path;
  std::uint64_t data_seed = 0;
  std::uint64_t noise_seed = 1;
  std::string observation_path;  // optional: use this y instead of degrading
  double sigma_y = 0.0;
  std::string reference = "ground_truth";  // ground_truth | posterior_mean
};

struct SweepConfig {
  std::vector<double> w, lambda, tau;
  std::vector<int> nfe;
  bool empty() const { return w.empty() && lambda.empty() && tau.empty() && nfe.empty(); }
};

struct RunConfig {
  DiffusionSchedule schedule;
  ProblemConfig problem;
  ModelConfig model;
  Method method = Method::CPiGDM;
  GuidanceConfig guidance;
  ConjugateOptions conjugate;
  bool exact_linear = false;
  std::size_t chains = 1;  // reconstruction = mean over this many chains
  SweepConfig sweep;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "cji_out";
  double peak = 1.0;
  std::size_t max_runs = 10000;
  bool save_reconstructions = true;
  unsigned threads = 1;
};

// JSON text with optional dotted-path overrides ("sampler.w=3").
RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides = {},
                       const std::string& base_dir = ".");
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

// Default grids searched when "sweep": "default".
SweepConfig default_sweep(Method method);

LinearDegradation build_operator(const OperatorConfig& cfg);
std::shared_ptr<const ScoreOracle> build_oracle(const RunConfig& cfg);

struct Problem {
  LinearDegradation op;
  Vec x0;
  Vec y;
  Vec reference;
};

Problem build_problem(const RunConfig& cfg);

// y = H x0 + sigma_y n, n ~ N(0, I) from `seed`.
Vec degrade(const Vec& x0, const LinearDegradation& op, double sigma_y, std::uint64_t seed);

Vec standard_normal(std::size_t n, std::uint64_t seed);

struct RunRecord {
  std::string method;
  double w = 0, lambda = 0, tau = 0;
  int nfe = 0;
  std::uint64_t seed = 0;
  double mse = 0, psnr = 0, observed_residual = 0, wall_time_ms = 0;

  bool diverged() const { return !std::isfinite(mse); }
  bool operator==(const RunRecord&) const = default;
};

struct AggregateRecord {
  std::string method;
  double w = 0, lambda = 0, tau = 0;
  int nfe = 0;
  std::size_t runs = 0, diverged = 0;
  double mse_mean = 0, mse_sem = 0, psnr_mean = 0, psnr_sem = 0, residual_mean = 0;
};

struct RunReport {
  std::vector<RunRecord> records;
  std::vector<std::string> errors;      // one message per diverged / failed run
  std::vector<Vec> reconstructions;     // parallel to records (empty Vec when diverged)

  std::vector<AggregateRecord> aggregate() const;
  std::size_t diverged() const;
  std::string to_csv() const;
  static RunReport from_csv(const std::string& text);
  std::string summary_json() const;
};

double psnr_from_mse(double mse, double peak);

RunReport run(const RunConfig& cfg);
void write_report(const RunReport& report, const RunConfig& cfg);

struct PosteriorStats {
  std::size_t samples = 0;
  bool few_samples = false;  // fewer than 30
  Vec mean, variance;        // per coordinate
  Vec exact_mean, exact_variance;
  std::vector<std::size_t> free_coords;  // coordinates with positive posterior variance
  std::vector<std::size_t> zero_variance_coords;
  std::vector<double> ks_stat, ks_pvalue;  // per free coordinate
  double max_observed_residual = 0.0;
  double fraction_ks_pass(double alpha = 0.01) const;
};

PosteriorStats posterior_stats(const std::vector<Vec>& samples, const LinearDegradation& op, const Vec& y,
                               const GaussianModel& prior, double sigma_y = 0.0);

}  // namespace cji
