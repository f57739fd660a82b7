#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "cji/oracles.hpp"

namespace cji {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class OracleTimeoutError : public OracleError {
 public:
  using OracleError::OracleError;
};
class OracleMalformedResponse : public OracleError {
 public:
  using OracleError::OracleError;
};
class OracleDimensionMismatch : public OracleError {
 public:
  using OracleError::OracleError;
};
// Framing violations: bad handshake, wrong response id, dead endpoint.
class OracleProtocolError : public OracleError {
 public:
  using OracleError::OracleError;
};
// The endpoint answered with {"id":..,"error":..}.
class OracleRemoteError : public OracleError {
 public:
  using OracleError::OracleError;
};

struct ExternalEndpoint {
  std::vector<std::string> command;  // argv; command[0] resolved through PATH
  double timeout_s = 30.0;
};

// Child process speaking line-delimited JSON over stdin/stdout:
//   <- {"protocol":"score-oracle/1","d":N}
//   -> {"id":k,"op":"eps"|"vel"|"jvp","t":..,"x":[..],"v":[..]}
//   <- {"id":k,"y":[..]} | {"id":k,"error":"..."}
// One request in flight at a time; calls from several threads serialize.
class ExternalOracle final : public ScoreOracle {
 public:
  ExternalOracle(const ExternalEndpoint& endpoint, ProcessKind process, JvpMode mode = JvpMode::Remote,
                 double t_floor = -1.0);
  ~ExternalOracle() override;
  ExternalOracle(const ExternalOracle&) = delete;
  ExternalOracle& operator=(const ExternalOracle&) = delete;

  struct Process;

  // Raw request, no time-domain checks.
  Vec request(const std::string& op, double t, const Vec& x, const Vec* v = nullptr) const;

 protected:
  Vec evaluate_impl(const Vec& x, double t) const override;
  Vec jvp_impl(const Vec& x, double t, const Vec& v) const override;

 private:
  ExternalOracle(std::unique_ptr<Process> proc, ProcessKind process, JvpMode mode, double t_floor);
  std::unique_ptr<Process> proc_;
  mutable std::mutex mu_;
};

}  // namespace cji
