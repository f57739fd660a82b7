#include <benchmark/benchmark.h>

#include <cji/harness.hpp>

namespace {

struct Setup {
  cji::LinearDegradation op;
  cji::Vec y, z;
};

Setup half_mask(std::size_t d) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < d; i += 2) idx.push_back(i);
  auto op = cji::LinearDegradation::mask(idx, d);
  cji::Vec y = op.apply(cji::standard_normal(d, 1));
  return {std::move(op), std::move(y), cji::standard_normal(d, 2)};
}

cji::SamplerSpec spec_for(cji::Method m, int nfe) {
  cji::SamplerSpec s;
  s.method = m;
  s.guidance.nfe = nfe;
  s.guidance.w = 3.0;
  s.guidance.lambda = cji::is_conjugate(m) ? 0.5 : 0.0;
  s.guidance.tau = cji::process_of(m) == cji::ProcessKind::Diffusion ? 0.6 : 0.2;
  s.guidance.schedule = cji::is_conjugate(m) ? cji::WeightSchedule::AdaptivePaper : cji::WeightSchedule::ConstantR2;
  return s;
}

// one chain of nfe = range(1) steps on a d = range(0) masked Gaussian problem
template <cji::Method M>
void BM_Sample(benchmark::State& st) {
  const std::size_t d = static_cast<std::size_t>(st.range(0));
  const int nfe = static_cast<int>(st.range(1));
  const Setup s = half_mask(d);
  const cji::GaussianModel prior = cji::GaussianModel::standard(d);
  const cji::DiffusionModelOracle dif(prior);
  const cji::FlowModelOracle flow(prior);
  const cji::ScoreOracle& o =
      cji::process_of(M) == cji::ProcessKind::Diffusion ? static_cast<const cji::ScoreOracle&>(dif) : flow;
  const cji::Sampler sampler(spec_for(M, nfe), s.op);
  for (auto _ : st) benchmark::DoNotOptimize(sampler.sample(s.y, o, s.z));
  st.SetItemsProcessed(st.iterations() * nfe);
}
BENCHMARK_TEMPLATE(BM_Sample, cji::Method::CPiGDM)->Args({4096, 20})->Args({65536, 20});
BENCHMARK_TEMPLATE(BM_Sample, cji::Method::PiGDM)->Args({4096, 20})->Args({65536, 20});
BENCHMARK_TEMPLATE(BM_Sample, cji::Method::CPiGFM)->Args({4096, 20})->Args({65536, 20});
BENCHMARK_TEMPLATE(BM_Sample, cji::Method::PiGFM)->Args({4096, 20})->Args({65536, 20});

// sampler construction is dominated by the coefficient table
void BM_SamplerConstruct(benchmark::State& st) {
  const Setup s = half_mask(4096);
  const cji::SamplerSpec spec = spec_for(cji::Method::CPiGDM, static_cast<int>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(cji::Sampler(spec, s.op));
}
BENCHMARK(BM_SamplerConstruct)->Arg(5)->Arg(20)->Arg(200);

}  // namespace

BENCHMARK_MAIN();
