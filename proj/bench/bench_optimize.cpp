#include <benchmark/benchmark.h>
#include <omp.h>

#include "cliqueflow/mbo.hpp"
#include "cliqueflow/model.hpp"

using namespace cliqueflow;

namespace {

const CliqueFlowModel& desk_model() {
  static const CliqueFlowModel m(ModelConfig::desk(), 1);
  return m;
}

std::vector<LatentVector> starts(std::size_t n, std::size_t dim) {
  Rng rng(7);
  std::vector<LatentVector> z(n, LatentVector(dim));
  for (auto& v : z) rng.fill_normal(v);
  return z;
}

ESConfig short_run() {
  ESConfig c;
  c.steps = 10;
  return c;
}

template <bool Parallel>
void BM_OptimizePredictor(benchmark::State& state) {
  const auto& model = desk_model();
  const Surrogate f = predictor_surrogate(model);
  const auto z = starts(static_cast<std::size_t>(state.range(0)), f.dim);
  const ESConfig cfg = short_run();
  for (auto _ : state) {
    auto res = Parallel ? optimize(z, f, cfg, Rng(3)) : optimize_serial(z, f, cfg, Rng(3));
    benchmark::DoNotOptimize(res.latents.data());
  }
  state.counters["threads"] = Parallel ? omp_get_max_threads() : 1;
  state.SetItemsProcessed(state.iterations() * state.range(0) * static_cast<std::int64_t>(cfg.steps));
}

template <bool Parallel>
void BM_OptimizeQuadratic(benchmark::State& state) {
  const Surrogate f = pointwise(121, [](std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += (v - 0.5) * (v - 0.5);
    return s;
  });
  const auto z = starts(static_cast<std::size_t>(state.range(0)), f.dim);
  ESConfig cfg;
  cfg.steps = 200;
  for (auto _ : state) {
    auto res = Parallel ? optimize(z, f, cfg, Rng(3)) : optimize_serial(z, f, cfg, Rng(3));
    benchmark::DoNotOptimize(res.latents.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0) * static_cast<std::int64_t>(cfg.steps));
}

}  // namespace

BENCHMARK(BM_OptimizePredictor<false>)->Name("optimize_serial/predictor")->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OptimizePredictor<true>)->Name("optimize/predictor")->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OptimizeQuadratic<false>)->Name("optimize_serial/quadratic")->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OptimizeQuadratic<true>)->Name("optimize/quadratic")->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
