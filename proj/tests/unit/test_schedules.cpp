#include <doctest.h>

#include <cmath>

#include <cji/quadrature.hpp>
#include <cji/schedules.hpp>

#include "support/generators.hpp"

using namespace cji;
using cji::testing::Gen;

TEST_CASE("diffusion schedule endpoints and closed form") {
  const DiffusionSchedule s;
  const DiffusionPoint p0 = s.eval(0.0);
  CHECK(p0.beta == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(p0.mu == 1.0);
  CHECK(p0.sigma == 0.0);
  CHECK(p0.r_sq == 0.0);
  CHECK(s.beta_integral(1.0) == doctest::Approx(10.05).epsilon(1e-14));
  CHECK(s.mu(1.0) == doctest::Approx(std::exp(-5.025)).epsilon(1e-14));
}

TEST_CASE("diffusion schedule properties over random times") {
  const DiffusionSchedule s;
  Gen g(1);
  for (int i = 0; i < 100; ++i) {
    const double t = g.uniform(0.0, 1.0);
    const DiffusionPoint p = s.eval(t);
    CHECK(std::abs(p.mu * p.mu + p.sigma * p.sigma - 1.0) <= 1e-12);
    CHECK(p.r_sq == doctest::Approx(p.sigma * p.sigma).epsilon(1e-12));
    CHECK(p.r_sq >= 0.0);
    CHECK(p.r_sq <= 1.0);
    CHECK(p.beta > 0.0);
    const double u = std::min(1.0, t + g.uniform(1e-6, 0.1));
    if (u > t) {
      CHECK(s.mu(u) < p.mu);
      CHECK(s.sigma(u) > p.sigma);
      CHECK(s.eval(u).r_sq > p.r_sq);
    }
    const double q = integrate_scalar([&](double x) { return s.beta(x); }, 0.0, t, QuadratureOptions{1e-13, 1e-13, 60});
    CHECK(s.beta_integral(t) == doctest::Approx(q).epsilon(1e-12));
  }
}

TEST_CASE("diffusion schedule rejects out-of-range times and bad parameters") {
  const DiffusionSchedule s;
  CHECK_THROWS_AS(s.eval(-0.1), DomainError);
  CHECK_THROWS_AS(s.eval(1.5), DomainError);
  CHECK_THROWS_AS(s.eval(std::nan("")), DomainError);
  CHECK_THROWS_AS(DiffusionSchedule(-1.0, 20.0), ConfigError);
  CHECK_THROWS_AS(DiffusionSchedule(0.1, 20.0, 0.0), ConfigError);
}

TEST_CASE("flow schedule") {
  const FlowPoint a = FlowSchedule::eval(0.0);
  CHECK(a.alpha == 0.0);
  CHECK(a.gamma == 1.0);
  CHECK(a.r_sq == 1.0);
  const FlowPoint b = FlowSchedule::eval(1.0);
  CHECK(b.alpha == 1.0);
  CHECK(b.gamma == 0.0);
  CHECK(b.r_sq == 0.0);
  CHECK(FlowSchedule::eval(0.5).r_sq == doctest::Approx(0.5).epsilon(1e-15));
  Gen g(2);
  double prev = 1.0;
  for (int i = 1; i <= 100; ++i) {
    const FlowPoint p = FlowSchedule::eval(i / 100.0);
    CHECK(p.alpha_dot == 1.0);
    CHECK(p.gamma_dot == -1.0);
    CHECK(p.gamma * p.alpha_dot - p.gamma_dot * p.alpha == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(p.r_sq <= prev);
    prev = p.r_sq;
  }
  CHECK_THROWS_AS(FlowSchedule::eval(1.01), DomainError);
  CHECK_THROWS_AS(FlowSchedule::eval(-0.01), DomainError);
}

TEST_CASE("guidance weight examples") {
  const DiffusionSchedule s;
  GuidanceConfig c;
  c.w = 10.0;
  c.schedule = WeightSchedule::AdaptivePaper;
  CHECK(guidance_weight(c, s, 0.0) == 0.0);

  c.w = 1.0;
  c.schedule = WeightSchedule::ConstantR2;
  CHECK(guidance_weight(c, FlowSchedule{}, 0.5) == doctest::Approx(0.5).epsilon(1e-15));

  c.w = 2.0;
  c.schedule = WeightSchedule::AdaptivePaper;
  CHECK(guidance_weight(c, FlowSchedule{}, 0.5) == doctest::Approx(0.25).epsilon(1e-15));

  c.schedule = WeightSchedule::Constant;
  CHECK(guidance_weight(c, s, 0.3) == 2.0);
  CHECK(guidance_weight(c, FlowSchedule{}, 0.3) == 2.0);
}

TEST_CASE("adaptive weight vanishes at the clean and noise ends") {
  const DiffusionSchedule s;
  GuidanceConfig c;
  c.w = 4.0;
  CHECK(guidance_weight(c, s, 1e-8) < 1e-6);
  CHECK(guidance_weight(c, FlowSchedule{}, 1e-8) < 1e-6);
  CHECK(guidance_weight(c, FlowSchedule{}, 1.0 - 1e-8) < 1e-6);
  CHECK(guidance_weight(c, FlowSchedule{}, 0.5) > 0.1);
}

TEST_CASE("guidance config validation") {
  GuidanceConfig c;
  CHECK_NOTHROW(c.validate());
  c.nfe = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = GuidanceConfig{};
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = GuidanceConfig{};
  c.tau = 1.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = GuidanceConfig{};
  c.sigma_y = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_weight_schedule("sometimes"), ConfigError);
  CHECK(parse_weight_schedule("constant_r2") == WeightSchedule::ConstantR2);
  CHECK(std::string(to_string(WeightSchedule::AdaptivePaper)) == "adaptive_paper");
}

TEST_CASE("timestep grid") {
  CHECK(timestep_grid(1.0, 0.0, 2) == std::vector<double>{1.0, 0.5, 0.0});
  const auto up = timestep_grid(0.2, 1.0, 4);
  REQUIRE(up.size() == 5);
  const double want[] = {0.2, 0.4, 0.6, 0.8, 1.0};
  for (std::size_t i = 0; i < 5; ++i) CHECK(up[i] == doctest::Approx(want[i]).epsilon(1e-15));
  CHECK(up.front() == 0.2);
  CHECK(up.back() == 1.0);
  CHECK(timestep_grid(0.6, 0.0, 1) == std::vector<double>{0.6, 0.0});
  CHECK_THROWS_AS(timestep_grid(1.0, 0.0, 0), DomainError);
}
