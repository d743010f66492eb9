#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "watk/calib.hpp"
#include "watk/kernels.hpp"
#include "watk/model.hpp"

namespace {

namespace k = watk::kernels;

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

using Gemm = void (*)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);

template <Gemm fn>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_buffer(n * n, 1), b = random_buffer(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    fn(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

BENCHMARK(BM_Gemm<k::serial::gemm_nt>)->Name("gemm_nt/serial")->Arg(64)->Arg(172)->Arg(256);
BENCHMARK(BM_Gemm<k::parallel::gemm_nt>)->Name("gemm_nt/omp")->Arg(64)->Arg(172)->Arg(256);
BENCHMARK(BM_Gemm<k::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(172)->Arg(256);
BENCHMARK(BM_Gemm<k::parallel::gemm_nn>)->Name("gemm_nn/omp")->Arg(64)->Arg(172)->Arg(256);
BENCHMARK(BM_Gemm<k::serial::gemm_tn>)->Name("gemm_tn/serial")->Arg(64)->Arg(172)->Arg(256);
BENCHMARK(BM_Gemm<k::parallel::gemm_tn>)->Name("gemm_tn/omp")->Arg(64)->Arg(172)->Arg(256);

using Wanda = void (*)(const double*, const double*, double*, std::size_t, std::size_t);

template <Wanda fn>
void BM_Wanda(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = rows;
  const auto w = random_buffer(rows * cols, 3), norms = random_buffer(cols, 4);
  std::vector<double> s(rows * cols);
  for (auto _ : state) {
    fn(w.data(), norms.data(), s.data(), rows, cols);
    benchmark::DoNotOptimize(s.data());
  }
}

BENCHMARK(BM_Wanda<k::serial::wanda>)->Name("wanda/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Wanda<k::parallel::wanda>)->Name("wanda/omp")->Arg(64)->Arg(256);

using RowNorms = void (*)(const double*, double*, std::size_t, std::size_t);

template <RowNorms fn>
void BM_RowNorms(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = std::size_t{4096};
  const auto x = random_buffer(rows * cols, 5);
  std::vector<double> norms(rows);
  for (auto _ : state) {
    fn(x.data(), norms.data(), rows, cols);
    benchmark::DoNotOptimize(norms.data());
  }
}

BENCHMARK(BM_RowNorms<k::serial::row_norms>)->Name("row_norms/serial")->Arg(64)->Arg(172);
BENCHMARK(BM_RowNorms<k::parallel::row_norms>)->Name("row_norms/omp")->Arg(64)->Arg(172);

// Full forward pass of the default model on 128 tokens, per backend.
void BM_Forward(benchmark::State& state) {
  k::set_backend(state.range(0) ? k::Backend::kParallel : k::Backend::kSerial);
  const watk::ModelCheckpoint m = watk::ModelCheckpoint::random(watk::ModelConfig{}, 7);
  const watk::TokenSeq tokens = watk::byte_tokenize(std::string(127, 'a'));
  for (auto _ : state) benchmark::DoNotOptimize(watk::forward(m, tokens).logits.data());
  k::set_backend(k::Backend::kParallel);
}

BENCHMARK(BM_Forward)->ArgName("omp")->Arg(0)->Arg(1);

}  // namespace

BENCHMARK_MAIN();
