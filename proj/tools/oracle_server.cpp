// Reference child process for the external score-oracle protocol.
//
//   cji_oracle_server <mode> <diffusion|flow> <d>
//
// modes: gaussian   standard normal prior, exact eps / velocity / jvp
//        echo       returns x unchanged
//        bad-id     answers with the wrong request id
//        garbage    answers with a line that is not JSON
//        sleep      never answers
//        wrong-dim  answers with d + 1 values
//        error      answers with an error message
//        bad-hello  sends a handshake with an unknown protocol name
//        overflow   answers with values near the largest double
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>
#include <thread>
#include <vector>

using json = nlohmann::json;

namespace {

struct Coeffs {
  double a;  // response = a * x
};

// VP schedule with beta linear in t from 0.1 to 20.
Coeffs diffusion_coeffs(double t) {
  const double b = 0.1 * t + 0.5 * (20.0 - 0.1) * t * t;
  const double mu2 = std::exp(-b);
  const double sig = std::sqrt(-std::expm1(-b));
  // x_t ~ N(0, mu^2 + sigma^2), E[eps | x_t] = sigma x_t / (mu^2 + sigma^2)
  return {sig / (mu2 + sig * sig)};
}

// x_t = t x1 + (1 - t) z; velocity = E[x1 - z | x_t]
Coeffs flow_coeffs(double t) {
  const double a = t, g = 1.0 - t;
  return {(a - g) / (a * a + g * g)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 4) {
    std::cerr << "usage: cji_oracle_server <mode> <diffusion|flow> <d>\n";
    return 2;
  }
  const std::string mode = argv[1];
  const bool flow = std::string(argv[2]) == "flow";
  const std::size_t d = std::stoul(argv[3]);

  std::cout << json{{"protocol", mode == "bad-hello" ? "something-else/9" : "score-oracle/1"}, {"d", d}}.dump()
            << std::endl;

  std::string line;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    json req;
    try {
      req = json::parse(line);
    } catch (const json::exception&) {
      continue;
    }
    if (req.value("op", std::string()) == "shutdown") break;
    const std::uint64_t id = req.value("id", std::uint64_t{0});
    const auto x = req.value("x", std::vector<double>{});
    const double t = req.value("t", 0.0);

    if (mode == "sleep") {
      std::this_thread::sleep_for(std::chrono::hours(1));
      continue;
    }
    if (mode == "garbage") {
      std::cout << "this is not json" << std::endl;
      continue;
    }
    if (mode == "error") {
      std::cout << json{{"id", id}, {"error", "model exploded"}}.dump() << std::endl;
      continue;
    }

    std::vector<double> y;
    if (mode == "echo") {
      y = x;
    } else if (mode == "overflow") {
      y.assign(x.size(), 1e308);
    } else {
      const Coeffs c = flow ? flow_coeffs(t) : diffusion_coeffs(t);
      const std::string op = req.value("op", std::string());
      // the response is linear in x, so the jvp is the same map applied to v
      const auto& src = op == "jvp" ? req.value("v", std::vector<double>{}) : x;
      for (double e : src) y.push_back(c.a * e);
    }
    if (mode == "wrong-dim") y.push_back(0.0);
    std::cout << json{{"id", mode == "bad-id" ? id + 1000 : id}, {"y", y}}.dump() << std::endl;
  }
  return 0;
}
