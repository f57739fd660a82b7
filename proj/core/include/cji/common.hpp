#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace cji {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class ProcessKind { Diffusion, Flow };

// Out-of-range time or argument.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid or unsupported configuration (bad schedule kind, overflowing kappa...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class QuadratureError : public std::runtime_error {
 public:
  QuadratureError(const std::string& what, double achieved)
      : std::runtime_error(what), achieved_(achieved) {}
  double achieved_tolerance() const { return achieved_; }

 private:
  double achieved_;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step, double t, double kappa1, double kappa2)
      : std::runtime_error(what), step_(step), t_(t), kappa1_(kappa1), kappa2_(kappa2) {}
  std::size_t step() const { return step_; }
  double time() const { return t_; }
  double kappa1() const { return kappa1_; }
  double kappa2() const { return kappa2_; }

 private:
  std::size_t step_;
  double t_, kappa1_, kappa2_;
};

const char* to_string(ProcessKind kind);

}  // namespace cji
