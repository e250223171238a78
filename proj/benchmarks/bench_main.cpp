#include <benchmark/benchmark.h>

#include <random>

#include "emkd/assignment.hpp"
#include "emkd/model.hpp"
#include "emkd/pipeline.hpp"

namespace {

using namespace emkd;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

void BM_SolveLap(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = rows / 4;
  CostMatrix cost(rows, cols, random_values(rows * cols, 1));
  for (auto _ : state) benchmark::DoNotOptimize(solve_lap(cost));
}
BENCHMARK(BM_SolveLap)->Arg(64)->Arg(256)->Arg(576);

void BM_ManhattanCost(benchmark::State& state) {
  const auto v = static_cast<std::size_t>(state.range(0));
  Tensor t = Tensor::from({64, v}, random_values(64 * v, 2));
  Tensor s = Tensor::from({16, v}, random_values(16 * v, 3));
  for (auto _ : state) benchmark::DoNotOptimize(manhattan_cost(t, s));
}
BENCHMARK(BM_ManhattanCost)->Arg(64)->Arg(1024);

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = Tensor::from({n, n}, random_values(n * n, 4));
  Tensor b = Tensor::from({n, n}, random_values(n * n, 5));
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(96)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = Tensor::parameter({n, n}, random_values(n * n, 6));
  Tensor b = Tensor::parameter({n, n}, random_values(n * n, 7));
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(matmul(a, b)));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(32)->Arg(96);

void BM_Forward(benchmark::State& state) {
  const ModelConfig cfg = state.range(0) == 0 ? ModelConfig::teacher_default() : ModelConfig::student_default();
  const ModelParameters params = init_params(cfg, 1);
  const SyntheticExample ex = generate_example(DatasetConfig{}, Split::kTrain, 0);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(forward(params, ex));
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_DistillStep(benchmark::State& state) {
  const ModelParameters teacher = init_params(ModelConfig::teacher_default(), 1);
  ModelParameters student = init_params(ModelConfig::student_default(), 2);
  const SyntheticDataset data{DatasetConfig{}};
  const auto batch = make_batches(data, Split::kTrain, 8).batch(0);
  const DistillConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(distill_step(teacher, student, batch, cfg));
}
BENCHMARK(BM_DistillStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
