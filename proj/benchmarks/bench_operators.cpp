#include <benchmark/benchmark.h>

#include <cji/operators.hpp>

#include <random>

namespace {

cji::Vec random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  cji::Vec v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = nd(rng);
  return v;
}

cji::LinearDegradation half_mask(std::size_t d) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < d; i += 2) idx.push_back(i);
  return cji::LinearDegradation::mask(idx, d);
}

// side length of a square image; pixel count is side^2
void BM_MaskProj(benchmark::State& st) {
  const std::size_t d = static_cast<std::size_t>(st.range(0) * st.range(0));
  const auto op = half_mask(d);
  const cji::Vec x = random_vec(d, 1);
  for (auto _ : st) benchmark::DoNotOptimize(op.proj_apply(x));
  st.SetItemsProcessed(st.iterations() * static_cast<int64_t>(d));
}
BENCHMARK(BM_MaskProj)->Arg(64)->Arg(256);

void BM_BlockAveragePinv(benchmark::State& st) {
  const std::size_t side = static_cast<std::size_t>(st.range(0));
  const auto op = cji::LinearDegradation::block_average(4, side / 4, side / 4);
  const cji::Vec y = random_vec(op.out_dim(), 2);
  for (auto _ : st) benchmark::DoNotOptimize(op.pinv_apply(y));
  st.SetItemsProcessed(st.iterations() * static_cast<int64_t>(op.in_dim()));
}
BENCHMARK(BM_BlockAveragePinv)->Arg(64)->Arg(256);

void BM_BlurApply(benchmark::State& st) {
  const std::size_t side = static_cast<std::size_t>(st.range(0));
  const auto op = cji::LinearDegradation::circulant_blur(cji::gaussian_kernel(9, 2.0), side, side);
  const cji::Vec x = random_vec(op.in_dim(), 3);
  for (auto _ : st) benchmark::DoNotOptimize(op.apply(x));
  st.SetItemsProcessed(st.iterations() * static_cast<int64_t>(op.in_dim()));
}
BENCHMARK(BM_BlurApply)->Arg(64)->Arg(256);

void BM_BlurRegularizedProj(benchmark::State& st) {
  const std::size_t side = static_cast<std::size_t>(st.range(0));
  const auto op = cji::LinearDegradation::circulant_blur(cji::gaussian_kernel(9, 2.0), side, side);
  const cji::Vec x = random_vec(op.in_dim(), 4);
  for (auto _ : st) benchmark::DoNotOptimize(op.regularized_proj_apply(x, 0.01));
  st.SetItemsProcessed(st.iterations() * static_cast<int64_t>(op.in_dim()));
}
BENCHMARK(BM_BlurRegularizedProj)->Arg(64)->Arg(256);

void BM_DenseProj(benchmark::State& st) {
  const auto d = st.range(0);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  cji::Mat h(d / 2, d);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = nd(rng);
  const auto op = cji::LinearDegradation::dense(h);
  const cji::Vec x = random_vec(static_cast<std::size_t>(d), 6);
  for (auto _ : st) benchmark::DoNotOptimize(op.proj_apply(x));
}
BENCHMARK(BM_DenseProj)->Arg(64)->Arg(256);

void BM_DenseConstruct(benchmark::State& st) {
  const auto d = st.range(0);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  cji::Mat h(d / 2, d);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = nd(rng);
  for (auto _ : st) benchmark::DoNotOptimize(cji::LinearDegradation::dense(h));
}
BENCHMARK(BM_DenseConstruct)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
