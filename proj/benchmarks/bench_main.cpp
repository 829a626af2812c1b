#include <benchmark/benchmark.h>

#include "metafo/kernels.hpp"
#include "metafo/model.hpp"
#include "metafo/random.hpp"
#include "metafo/training.hpp"

using namespace metafo;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({r, c}, 0.0);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(rng, -1.0, 1.0);
  return t;
}

model::ModelConfig config_for(std::int64_t d) {
  model::ModelConfig cfg;
  cfg.d_inp = static_cast<std::size_t>(d);
  cfg.hidden = 2 * cfg.d_inp;
  return cfg;
}

const dataset::Dataset& corpus() {
  static const dataset::Dataset ds = [] {
    const auto cells = lattice::enumerate_masks(lattice::parse_basis_set("0,2,6,9"));
    std::vector<materials::Material> mats;
    for (int i = 0; i < 10; ++i) mats.push_back(materials::sample_material(1, i));
    return dataset::normalize(dataset::build_dataset(cells, mats, materials::StrainGrid{}));
  }();
  return ds;
}

dataset::PromptInstance prompt(std::size_t k) {
  std::vector<int> p;
  for (std::size_t i = 0; i < k; ++i) p.push_back(static_cast<int>(i));
  const int q[] = {9};
  return dataset::assemble_prompt(corpus(), 5, p, q);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Softmax(benchmark::State& state) {
  const auto m = random_matrix(105, 105, 3);
  for (auto _ : state) benchmark::DoNotOptimize(softmax_rows(m));
}
BENCHMARK(BM_Softmax);

void BM_Forward(benchmark::State& state) {
  const auto params = model::init_params(config_for(state.range(0)), 0);
  const auto pr = prompt(static_cast<std::size_t>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(model::forward(params, pr));
}
BENCHMARK(BM_Forward)->Args({32, 5})->Args({64, 2})->Args({64, 5})->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  training::TrainConfig cfg;
  cfg.model = config_for(state.range(0));
  cfg.batch_size = 16;
  auto st = training::init_state(cfg);
  const auto split = dataset::split(corpus(), 0);
  const auto batch = training::sample_batch(st, corpus(), split, cfg);
  for (auto _ : state) benchmark::DoNotOptimize(training::train_step(st, batch, cfg));
}
BENCHMARK(BM_TrainStep)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
