#include <benchmark/benchmark.h>

#include <numeric>
#include <vector>

#include <advscale/attacks.hpp>
#include <advscale/data.hpp>
#include <advscale/logit_stats.hpp>
#include <advscale/network.hpp>
#include <advscale/response.hpp>

using namespace advscale;

namespace {

Dataset blobs(std::size_t per_class) {
  SynthConfig cfg;
  cfg.n_classes = 10;
  cfg.dims = 784;
  cfg.per_class = per_class;
  cfg.separation = 60.0;
  cfg.cluster_std = 20.0;
  cfg.seed = 7;
  return synth_blobs(cfg);
}

const Network& mlp() {
  static const Network net = init_network(Architecture::mlp(784, {256, 256}, 10), 1);
  return net;
}

}  // namespace

static void BM_ForwardBatch(benchmark::State& state) {
  const Dataset data = blobs(static_cast<std::size_t>(state.range(0)) / 10);
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward_batch(mlp(), data.inputs));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(data.size()));
}
BENCHMARK(BM_ForwardBatch)->Arg(10)->Arg(100)->Arg(1000);

static void BM_GradInputBatch(benchmark::State& state) {
  const Dataset data = blobs(static_cast<std::size_t>(state.range(0)) / 10);
  for (auto _ : state) {
    benchmark::DoNotOptimize(grad_input_batch(mlp(), data.inputs, data.labels));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(data.size()));
}
BENCHMARK(BM_GradInputBatch)->Arg(10)->Arg(100)->Arg(1000);

static void BM_Jacobian(benchmark::State& state) {
  const Tensor x = blobs(1).input(0);
  for (auto _ : state) benchmark::DoNotOptimize(jacobian(mlp(), x));
}
BENCHMARK(BM_Jacobian);

static void BM_EpsilonHatTrue(benchmark::State& state) {
  const Dataset data = blobs(1);
  const Tensor x = data.input(0);
  const std::size_t y = predict_batch(mlp(), data.inputs)[0];
  const Tensor d = l2_attack_direction(mlp(), x, y);
  for (auto _ : state) benchmark::DoNotOptimize(epsilon_hat_true(mlp(), x, y, d));
}
BENCHMARK(BM_EpsilonHatTrue);

static void BM_OracleSample(benchmark::State& state) {
  OracleConfig cfg;
  cfg.n_samples = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(oracle_sample(cfg));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_OracleSample)->Arg(100'000)->Arg(1'000'000)->Unit(benchmark::kMillisecond);

static void BM_AdvErrorCurve(benchmark::State& state) {
  const Dataset data = blobs(20);
  AttackSpec spec;
  spec.family = static_cast<AttackFamily>(state.range(0));
  spec.pgd_steps = 20;
  spec.pgd_step_size = 0.25;
  const auto grid = log_grid(0.1, 8.0, 15);
  for (auto _ : state) benchmark::DoNotOptimize(adv_error_curve(mlp(), data, spec, grid));
  state.SetLabel(to_string(spec.family));
}
BENCHMARK(BM_AdvErrorCurve)
    ->Arg(static_cast<int>(AttackFamily::FgsmLinf))
    ->Arg(static_cast<int>(AttackFamily::Pgd))
    ->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
