#include <benchmark/benchmark.h>

#include <cji/samplers.hpp>

#include <cmath>

namespace {

cji::GuidanceConfig guidance(int nfe) {
  cji::GuidanceConfig g;
  g.w = 3.0;
  g.lambda = 0.5;
  g.tau = 0.6;
  g.nfe = nfe;
  return g;
}

// full table build for a diffusion grid; range(1) is -log10 of the quadrature tolerance
void BM_PrecomputeDiffusion(benchmark::State& st) {
  const cji::GuidanceConfig g = guidance(static_cast<int>(st.range(0)));
  cji::ConjugateOptions o;
  o.quad.abs_tol = o.quad.rel_tol = std::pow(10.0, -static_cast<double>(st.range(1)));
  const cji::ConjugateTransform tr(cji::ProcessKind::Diffusion, g, cji::DiffusionSchedule(), o);
  const auto grid = cji::default_grid(cji::Method::CPiGDM, g, o);
  for (auto _ : st) benchmark::DoNotOptimize(tr.precompute(grid));
}
BENCHMARK(BM_PrecomputeDiffusion)->Args({5, 5})->Args({20, 5})->Args({200, 5})->Args({20, 10});

void BM_PrecomputeFlow(benchmark::State& st) {
  cji::GuidanceConfig g = guidance(static_cast<int>(st.range(0)));
  g.tau = 0.2;
  cji::ConjugateOptions o;
  const cji::ConjugateTransform tr(cji::ProcessKind::Flow, g, cji::DiffusionSchedule(), o);
  const auto grid = cji::default_grid(cji::Method::CPiGFM, g, o);
  for (auto _ : st) benchmark::DoNotOptimize(tr.precompute(grid));
}
BENCHMARK(BM_PrecomputeFlow)->Arg(5)->Arg(20)->Arg(200);

void BM_PhiSingleTime(benchmark::State& st) {
  const cji::ConjugateTransform tr(cji::ProcessKind::Diffusion, guidance(20));
  double t = 0.1;
  for (auto _ : st) {
    benchmark::DoNotOptimize(tr.phi(t));
    t = t < 0.9 ? t + 1e-3 : 0.1;
  }
}
BENCHMARK(BM_PhiSingleTime);

}  // namespace

BENCHMARK_MAIN();
