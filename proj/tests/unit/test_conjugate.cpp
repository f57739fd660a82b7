#include <doctest.h>

#include <cmath>

#include <unsupported/Eigen/MatrixFunctions>

#include <cji/conjugate.hpp>
#include <cji/samplers.hpp>

#include "support/generators.hpp"

using namespace cji;
using cji::testing::Gen;
using cji::testing::materialize;
using cji::testing::rel_err;

namespace {

GuidanceConfig guidance(double w, double lambda, double sigma_y = 0.0) {
  GuidanceConfig g;
  g.w = w;
  g.lambda = lambda;
  g.sigma_y = sigma_y;
  return g;
}

ConjugateOptions tight() {
  ConjugateOptions o;
  o.quad = QuadratureOptions{1e-11, 1e-11, 60};
  return o;
}

}  // namespace

TEST_CASE("kappa closed forms") {
  const ConjugateTransform d0(ProcessKind::Diffusion, guidance(1.0, 0.0));
  CHECK(d0.kappa1(0.0) == 0.0);
  CHECK(d0.kappa1(1.0) == doctest::Approx(5.025).epsilon(1e-14));
  CHECK(d0.kappa2(1.0) == doctest::Approx(-5.025).epsilon(1e-14));

  const ConjugateTransform f(ProcessKind::Flow, guidance(2.0, -0.2));
  CHECK(f.kappa1(0.5) == doctest::Approx(-0.1).epsilon(1e-15));
  CHECK(f.kappa2(1.0) == doctest::Approx(1.0 / 6.0).epsilon(1e-14));

  Gen g(21);
  for (int i = 0; i < 50; ++i) {
    const double t = g.uniform(0.0, 1.0);
    CHECK(ConjugateTransform(ProcessKind::Diffusion, guidance(0.0, 0.3)).kappa2(t) == 0.0);
    CHECK(ConjugateTransform(ProcessKind::Flow, guidance(0.0, 0.3)).kappa2(t) == 0.0);
    const double w = g.uniform(0.0, 10.0);
    CHECK(ConjugateTransform(ProcessKind::Diffusion, guidance(w, 0.0)).kappa2(t) <= 0.0);
    CHECK(ConjugateTransform(ProcessKind::Flow, guidance(w, 0.0)).kappa2(t) >= 0.0);
  }
}

TEST_CASE("kappa3") {
  const DiffusionSchedule s;
  CHECK(ConjugateTransform(ProcessKind::Diffusion, guidance(3.0, 0.1)).kappa3(0.5) == 0.0);
  CHECK(ConjugateTransform(ProcessKind::Diffusion, guidance(0.0, 0.1, 0.1)).kappa3(0.5) == 0.0);
  Gen g(22);
  for (ProcessKind pk : {ProcessKind::Diffusion, ProcessKind::Flow}) {
    for (int i = 0; i < 20; ++i) {
      const double t = g.uniform(0.05, 0.95), w = g.uniform(0.5, 5.0), sy = g.uniform(0.01, 0.3);
      const double a = ConjugateTransform(pk, guidance(w, 0.2, sy)).kappa3(t);
      const double b = ConjugateTransform(pk, guidance(w, 0.2, sy / 2)).kappa3(t);
      CHECK(b == doctest::Approx(a / 4.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(ConjugateTransform(ProcessKind::Diffusion, guidance(1.0, 0.0, -0.1)), ConfigError);
}

TEST_CASE("transform rejects non-adaptive schedules and overflowing exponents") {
  GuidanceConfig g = guidance(1.0, 0.0);
  g.schedule = WeightSchedule::ConstantR2;
  CHECK_THROWS_AS(ConjugateTransform(ProcessKind::Diffusion, g), ConfigError);
  CHECK_THROWS_AS(ConjugateTransform(ProcessKind::Diffusion, guidance(1.0, 800.0)), ConfigError);
  CHECK_THROWS_AS(ConjugateTransform(ProcessKind::Flow, guidance(1.0, -800.0)), ConfigError);
  CHECK_THROWS_AS(ConjugateTransform(ProcessKind::Diffusion, guidance(-1.0, 0.0)), ConfigError);
}

TEST_CASE("A_t trivial cases") {
  Gen g(23);
  const LinearDegradation op = g.mask(8);
  const Vec x = g.normal_vec(8);
  for (ProcessKind pk : {ProcessKind::Diffusion, ProcessKind::Flow}) {
    const ConjugateTransform tr(pk, guidance(4.0, 0.5));
    CHECK((tr.apply(op, 0.0, x) - x).norm() <= 1e-15);
    CHECK((tr.inverse_apply(op, 0.0, x) - x).norm() <= 1e-15);
    const ConjugateTransform free(pk, guidance(0.0, 0.5));
    const double e = std::exp(free.kappa1(0.7));
    CHECK(rel_err(free.apply(op, 0.7, x), Vec(e * x)) <= 1e-15);
    CHECK(rel_err(free.inverse_apply(op, 0.7, x), Vec(x / e)) <= 1e-15);
  }
}

TEST_CASE("A_t equals the dense matrix exponential and splits over the two subspaces") {
  Gen g(24);
  for (int c = 0; c < 40; ++c) {
    const std::size_t d = g.index(2, 16);
    const LinearDegradation op = g.mask(d);
    const ProcessKind pk = c % 2 ? ProcessKind::Flow : ProcessKind::Diffusion;
    const ConjugateTransform tr(pk, guidance(g.uniform(0.0, 20.0), g.uniform(-1.0, 1.0)));
    const double t = g.uniform(1e-3, 1.0);
    const Kappas k = tr.kappas(t);
    const Mat p = dense_materialize(op).proj;
    const Mat ref = (k.k1 * Mat::Identity(p.rows(), p.cols()) + k.k2 * p).exp();
    const Vec x = g.normal_vec(d);
    CHECK(rel_err(tr.apply(op, t, x), Vec(ref * x)) <= 1e-10);
    const Vec px = op.proj_apply(x);
    const Vec split = std::exp(k.k1) * (x - px) + std::exp(k.k1 + k.k2) * px;
    CHECK(rel_err(tr.apply(op, t, x), split) <= 1e-14);
  }
}

TEST_CASE("A_t round trip for every operator kind") {
  Gen g(25);
  Mat box(1, 2);
  box << 0.5, 0.5;
  const std::vector<LinearDegradation> ops = {g.mask(12), LinearDegradation::block_average(2, 2, 2),
                                              LinearDegradation::circulant_blur(box, 4, 4),
                                              LinearDegradation::dense(g.normal_mat(3, 9))};
  for (const LinearDegradation& op : ops) {
    for (int c = 0; c < 50; ++c) {
      // moderate |k2| keeps exp(-k2) * eps |x| well under the tolerance for
      // operators whose projector is only exact to rounding
      const ProcessKind pk = c % 2 ? ProcessKind::Flow : ProcessKind::Diffusion;
      const ConjugateTransform tr(pk, guidance(g.uniform(0.0, 0.5), g.uniform(-1.0, 1.0)));
      const double t = g.uniform(1e-3, 1.0);
      const Vec x = g.normal_vec(op.in_dim());
      CHECK((tr.inverse_apply(op, t, tr.apply(op, t, x)) - x).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("strong guidance projects onto the null space") {
  Gen g(26);
  const LinearDegradation op = g.mask(10);
  const ConjugateTransform tr(ProcessKind::Diffusion, guidance(1000.0, 0.0));
  const double t = 0.5;
  const Kappas k = tr.kappas(t);
  const Vec x = g.normal_vec(10);
  const Vec px = op.proj_apply(x);
  const Vec lim = std::exp(-k.k1) * tr.apply(op, t, x);
  CHECK((lim - (x - px)).norm() <= std::exp(k.k2) * px.norm() * (1 + 1e-12) + 1e-15);
}

TEST_CASE("noisy transform") {
  Gen g(27);
  const LinearDegradation op = g.mask(8);
  const Vec x = g.normal_vec(8);
  const ConjugateTransform clean(ProcessKind::Diffusion, guidance(2.0, 0.1));
  CHECK(clean.noisy_apply(op, 0.4, x) == clean.apply(op, 0.4, x));
  CHECK(clean.noisy_inverse_apply(op, 0.4, x) == clean.inverse_apply(op, 0.4, x));

  const ConjugateTransform noisy(ProcessKind::Diffusion, guidance(2.0, 0.1, 0.1));
  const Kappas k = noisy.kappas(0.4);
  REQUIRE(k.k3 != 0.0);
  // mask: H^+ (H^+)^T = P
  CHECK(rel_err(Vec(noisy.noisy_apply(op, 0.4, x) - noisy.apply(op, 0.4, x)), Vec(k.k3 * op.proj_apply(x))) <=
        1e-13);
  // first-order inverse
  const Vec back = noisy.noisy_inverse_apply(op, 0.4, noisy.noisy_apply(op, 0.4, x));
  CHECK(rel_err(back, x) <= 10 * std::pow(k.k3 * std::exp(-(k.k1 + k.k2)), 2));
}

TEST_CASE("noisy transform error is fourth order in sigma_y") {
  const std::size_t d = 8;
  const LinearDegradation op = LinearDegradation::mask({1, 2, 5}, d);
  const Mat p = dense_materialize(op).proj;
  const DiffusionSchedule s;
  const double t = 0.5, s0 = 0.25;
  std::vector<double> errs;
  for (double sy : {0.2, 0.1, 0.05}) {
    ConjugateOptions o;
    o.kappa3_floor = s0;
    const ConjugateTransform tr(ProcessKind::Diffusion, guidance(3.0, 0.0, sy), s, o);
    const Kappas k = tr.kappas(t);
    const double extra = integrate_scalar(
        [&](double u) {
          const double q = sy * sy / s.eval(u).r_sq;
          return 1.5 * s.beta(u) * q / (1.0 + q);
        },
        s0, t, QuadratureOptions{1e-14, 1e-13, 60});
    const Mat exact = (k.k1 * Mat::Identity(d, d) + (k.k2 + extra) * p).exp();
    const Mat approx = materialize(d, [&](const Vec& e) { return tr.noisy_apply(op, t, e); });
    errs.push_back((approx - exact).norm() / exact.norm());
  }
  for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
    CHECK(errs[i] / errs[i + 1] >= 8.0);
    CHECK(errs[i] / errs[i + 1] <= 32.0);
  }
}

TEST_CASE("phi examples") {
  const ConjugateTransform d0(ProcessKind::Diffusion, guidance(0.0, 0.3));
  CHECK(d0.phi(d0.origin()) == PhiCoefficients{});
  const PhiCoefficients pd = d0.phi(0.6);
  CHECK(pd.phi_y == 0.0);
  CHECK(pd.j == ScalarPair{});
  CHECK(pd.main.proj == doctest::Approx(0.0).epsilon(1e-12));

  const ConjugateTransform f0(ProcessKind::Flow, guidance(0.0, 0.0), DiffusionSchedule(), tight());
  CHECK(f0.phi(0.0) == PhiCoefficients{});
  const PhiCoefficients pf = f0.phi(0.7);
  CHECK(pf.main.id == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(pf.main.proj == doctest::Approx(0.0).epsilon(1e-12));

  const ConjugateTransform f3(ProcessKind::Flow, guidance(3.0, 0.0), DiffusionSchedule(), tight());
  CHECK(f3.phi(1.0).j.id == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("phi tolerance refinement") {
  Gen g(28);
  for (ProcessKind pk : {ProcessKind::Diffusion, ProcessKind::Flow}) {
    for (int c = 0; c < 10; ++c) {
      const GuidanceConfig cfg = guidance(g.uniform(0.0, 5.0), g.uniform(-1.0, 1.0));
      ConjugateOptions loose, fine;
      loose.quad = QuadratureOptions{1e-5, 1e-5, 48};
      fine.quad = QuadratureOptions{1e-9, 1e-9, 60};
      const double t = g.uniform(0.05, 0.99);
      const PhiCoefficients a = ConjugateTransform(pk, cfg, DiffusionSchedule(), loose).phi(t);
      const PhiCoefficients b = ConjugateTransform(pk, cfg, DiffusionSchedule(), fine).phi(t);
      for (auto [x, y] : {std::pair{a.phi_y, b.phi_y}, {a.main.id, b.main.id}, {a.main.proj, b.main.proj},
                          {a.j.id, b.j.id}, {a.j.proj, b.j.proj}})
        CHECK(std::abs(x - y) <= 1e-5 * std::max(1.0, std::abs(y)));
    }
  }
}

TEST_CASE("quadrature failure is reported with the achieved tolerance") {
  ConjugateOptions o;
  o.quad = QuadratureOptions{1e-15, 0.0, 3};
  const ConjugateTransform tr(ProcessKind::Diffusion, guidance(2.0, 0.0), DiffusionSchedule(), o);
  try {
    (void)tr.phi(0.9);
    FAIL("expected QuadratureError");
  } catch (const QuadratureError& e) {
    CHECK(e.achieved_tolerance() > 0.0);
  }
}

TEST_CASE("precomputed table") {
  Gen g(29);
  for (ProcessKind pk : {ProcessKind::Diffusion, ProcessKind::Flow}) {
    const GuidanceConfig cfg = guidance(2.5, 0.4);
    const Method m = pk == ProcessKind::Diffusion ? Method::CPiGDM : Method::CPiGFM;
    ConjugateOptions o;
    o.quad = QuadratureOptions{1e-14, 1e-14, 60};
    std::vector<double> grid = default_grid(m, cfg, o);
    const ConjugateTransform tr(pk, cfg, DiffusionSchedule(), o);
    // integration origin first
    grid.insert(pk == ProcessKind::Diffusion ? grid.end() : grid.begin(), tr.origin());
    if (pk == ProcessKind::Diffusion) std::reverse(grid.begin(), grid.end());
    const CoefficientTable table = tr.precompute(grid);
    REQUIRE(table.size() == grid.size());
    CHECK(table[0].phi == PhiCoefficients{});
    for (std::size_t i = 0; i < table.size(); ++i) {
      const PhiCoefficients direct = tr.phi(grid[i]);
      CHECK(std::abs(table[i].phi.main.id - direct.main.id) <= 1e-12 * std::max(1.0, std::abs(direct.main.id)));
      CHECK(std::abs(table[i].phi.j.proj - direct.j.proj) <= 1e-12 * std::max(1.0, std::abs(direct.j.proj)));
      CHECK(table[i].kappa.k1 == tr.kappa1(grid[i]));
    }
    CHECK(tr.precompute(grid).to_csv() == table.to_csv());
    const CoefficientTable back = CoefficientTable::from_csv(table.to_csv(), pk);
    REQUIRE(back.size() == table.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
      CHECK(back[i].t == table[i].t);
      CHECK(back[i].phi == table[i].phi);
      CHECK(back[i].kappa.k2 == table[i].kappa.k2);
    }
  }
  CHECK_THROWS_AS(CoefficientTable::from_csv("t,nope\n", ProcessKind::Flow), ConfigError);
}

TEST_CASE("scaled step coefficients agree with increments of phi") {
  Gen g(30);
  for (ProcessKind pk : {ProcessKind::Diffusion, ProcessKind::Flow}) {
    for (int c = 0; c < 20; ++c) {
      const ConjugateTransform tr(pk, guidance(g.uniform(0.0, 6.0), g.uniform(-1.0, 1.0)), DiffusionSchedule(),
                                  tight());
      double a = g.uniform(0.05, 0.9), b = a + g.uniform(0.01, 0.09);
      if (pk == ProcessKind::Diffusion) std::swap(a, b);
      const StepCoefficients sc = tr.step_coefficients(a, b);
      const PhiCoefficients inc = tr.phi(a, b);
      const Kappas kb = tr.kappas(b);
      const double e1 = std::exp(kb.k1), e12 = std::exp(kb.k1 + kb.k2);
      const auto near = [](double x, double y) { return std::abs(x - y) <= 1e-7 * std::max(1e-3, std::abs(y)); };
      CHECK(near(sc.main_free * e1, inc.main.id));
      CHECK(near(sc.main_range * e12, inc.main.id + inc.main.proj));
      CHECK(near(sc.j_free * e1, inc.j.id));
      CHECK(near(sc.j_range * e12, inc.j.id + inc.j.proj));
      CHECK(near(sc.phi_y * e12, inc.phi_y));
    }
  }
}

TEST_CASE("literal phi form changes only the range coefficients") {
  ConjugateOptions lit = tight();
  lit.phi_form = PhiForm::Literal;
  const GuidanceConfig cfg = guidance(2.0, 0.0);
  const ConjugateTransform a(ProcessKind::Diffusion, cfg, DiffusionSchedule(), tight());
  const ConjugateTransform b(ProcessKind::Diffusion, cfg, DiffusionSchedule(), lit);
  const PhiCoefficients pa = a.phi(0.5), pb = b.phi(0.5);
  CHECK(pa.main.id == doctest::Approx(pb.main.id).epsilon(1e-12));
  CHECK(pa.j == pb.j);
  CHECK(pa.main.proj != doctest::Approx(pb.main.proj).epsilon(1e-6));
}
