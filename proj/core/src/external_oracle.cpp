#include "cji/external_oracle.hpp"

#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

extern char** environ;

namespace cji {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

struct ExternalOracle::Process {
  pid_t pid = -1;
  int fd = -1;
  double timeout_s = 30.0;
  std::string buffer;
  std::uint64_t next_id = 1;
  std::size_t dim = 0;
  bool broken = false;
  std::string label;

  ~Process() {
    if (fd >= 0) ::shutdown(fd, SHUT_WR);
    if (pid > 0) {
      int status = 0;
      const auto until = Clock::now() + std::chrono::milliseconds(500);
      while (::waitpid(pid, &status, WNOHANG) == 0) {
        if (Clock::now() > until) {
          ::kill(pid, SIGKILL);
          ::waitpid(pid, &status, 0);
          break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
    }
    if (fd >= 0) ::close(fd);
  }

  std::string read_line(Clock::time_point deadline) {
    for (;;) {
      const auto nl = buffer.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer.substr(0, nl);
        buffer.erase(0, nl + 1);
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      if (left <= 0) {
        broken = true;
        std::ostringstream msg;
        msg << label << ": no response within " << timeout_s << " s";
        throw OracleTimeoutError(msg.str());
      }
      pollfd p{fd, POLLIN, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1 << 30)));
      if (rc < 0) {
        if (errno == EINTR) continue;
        broken = true;
        throw OracleProtocolError(label + ": poll failed: " + std::strerror(errno));
      }
      if (rc == 0) continue;
      char chunk[65536];
      const ssize_t n = ::read(fd, chunk, sizeof(chunk));
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        broken = true;
        throw OracleProtocolError(label + ": read failed: " + std::strerror(errno));
      }
      if (n == 0) {
        broken = true;
        throw OracleProtocolError(label + ": endpoint closed its output");
      }
      buffer.append(chunk, static_cast<std::size_t>(n));
    }
  }

  void write_line(const std::string& line) {
    std::size_t off = 0;
    while (off < line.size()) {
      const ssize_t n = ::send(fd, line.data() + off, line.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        broken = true;
        throw OracleProtocolError(label + ": write failed: " + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }
};

namespace {

std::unique_ptr<ExternalOracle::Process> spawn(const ExternalEndpoint& ep);

}  // namespace

ExternalOracle::ExternalOracle(const ExternalEndpoint& endpoint, ProcessKind process, JvpMode mode, double t_floor)
    : ExternalOracle(spawn(endpoint), process, mode, t_floor) {}

ExternalOracle::ExternalOracle(std::unique_ptr<Process> proc, ProcessKind process, JvpMode mode, double t_floor)
    : ScoreOracle(OracleKind::External, process, proc->dim, mode,
                  t_floor >= 0.0 ? t_floor : (process == ProcessKind::Diffusion ? 1e-4 : 0.0)),
      proc_(std::move(proc)) {}

ExternalOracle::~ExternalOracle() = default;

namespace {

std::unique_ptr<ExternalOracle::Process> spawn(const ExternalEndpoint& ep) {
  if (ep.command.empty()) throw ConfigError("external oracle: empty command");
  if (!(ep.timeout_s > 0.0)) throw ConfigError("external oracle: timeout must be > 0");
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
    throw OracleProtocolError(std::string("external oracle: socketpair failed: ") + std::strerror(errno));

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_adddup2(&fa, sv[1], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&fa, sv[1], STDOUT_FILENO);
  std::vector<char*> argv;
  for (const auto& a : ep.command) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  pid_t pid = -1;
  const int rc = ::posix_spawnp(&pid, argv[0], &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  ::close(sv[1]);
  if (rc != 0) {
    ::close(sv[0]);
    throw ConfigError("external oracle: cannot start '" + ep.command[0] + "': " + std::strerror(rc));
  }

  auto proc = std::make_unique<ExternalOracle::Process>();
  proc->pid = pid;
  proc->fd = sv[0];
  proc->timeout_s = ep.timeout_s;
  proc->label = "external oracle '" + ep.command[0] + "'";

  const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(ep.timeout_s));
  const std::string line = proc->read_line(deadline);
  json hello;
  try {
    hello = json::parse(line);
  } catch (const json::exception&) {
    throw OracleProtocolError(proc->label + ": handshake is not JSON: " + line);
  }
  if (!hello.is_object() || hello.value("protocol", std::string()) != "score-oracle/1" || !hello.contains("d") ||
      !hello["d"].is_number_unsigned() || hello["d"].get<std::uint64_t>() == 0)
    throw OracleProtocolError(proc->label + ": bad handshake: " + line);
  proc->dim = hello["d"].get<std::size_t>();
  return proc;
}

}  // namespace

Vec ExternalOracle::request(const std::string& op, double t, const Vec& x, const Vec* v) const {
  std::lock_guard<std::mutex> lock(mu_);
  Process& p = *proc_;
  if (p.broken) throw OracleProtocolError(p.label + ": endpoint unusable after an earlier failure");
  const std::uint64_t id = p.next_id++;
  json req;
  req["id"] = id;
  req["op"] = op;
  req["t"] = t;
  req["x"] = std::vector<double>(x.data(), x.data() + x.size());
  if (v) req["v"] = std::vector<double>(v->data(), v->data() + v->size());
  p.write_line(req.dump() + "\n");

  const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(p.timeout_s));
  const std::string line = p.read_line(deadline);
  json resp;
  try {
    resp = json::parse(line);
  } catch (const json::exception&) {
    throw OracleMalformedResponse(p.label + ": response is not JSON: " + line.substr(0, 200));
  }
  if (!resp.is_object() || !resp.contains("id") || !resp["id"].is_number_unsigned())
    throw OracleMalformedResponse(p.label + ": response lacks an integer id");
  if (resp["id"].get<std::uint64_t>() != id) {
    p.broken = true;
    std::ostringstream msg;
    msg << p.label << ": response id " << resp["id"].get<std::uint64_t>() << " does not match request id " << id;
    throw OracleProtocolError(msg.str());
  }
  if (resp.contains("error")) {
    throw OracleRemoteError(p.label + ": " + (resp["error"].is_string() ? resp["error"].get<std::string>() : resp["error"].dump()));
  }
  if (!resp.contains("y") || !resp["y"].is_array()) throw OracleMalformedResponse(p.label + ": response lacks a y array");
  const json& y = resp["y"];
  for (const auto& e : y)
    if (!e.is_number()) throw OracleMalformedResponse(p.label + ": y contains a non-number");
  if (y.size() != p.dim) {
    std::ostringstream msg;
    msg << p.label << ": response has " << y.size() << " values, expected " << p.dim;
    throw OracleDimensionMismatch(msg.str());
  }
  Vec out(static_cast<Eigen::Index>(p.dim));
  for (std::size_t i = 0; i < p.dim; ++i) out[static_cast<Eigen::Index>(i)] = y[i].get<double>();
  return out;
}

Vec ExternalOracle::evaluate_impl(const Vec& x, double t) const {
  return request(process_ == ProcessKind::Diffusion ? "eps" : "vel", t, x);
}

Vec ExternalOracle::jvp_impl(const Vec& x, double t, const Vec& v) const { return request("jvp", t, x, &v); }

}  // namespace cji
