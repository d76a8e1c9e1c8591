#include <benchmark/benchmark.h>

#include "advpnml/attacks.hpp"
#include "advpnml/pnml.hpp"
#include "advpnml/rng.hpp"

using namespace advpnml;

namespace {

Tensor<float> uniform(const Shape& shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  CounterRng rng(seed);
  Tensor<float> t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = uniform({n, 32, 14, 14}, 1);
  const auto k = uniform({64, 32, 5, 5}, 2, -0.05, 0.05);
  const Tensor<float> b({64});
  for (auto _ : state) {
    Tape<float> tape;
    const Var in = tape.leaf_ref(x, "x");
    const Var out = conv2d(tape, in, tape.leaf_ref(k, "k"), tape.leaf_ref(b, "b"), 2);
    benchmark::DoNotOptimize(tape.backward(sum(tape, out)));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(1)->Arg(50);

void BM_Linear(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = uniform({n, 3136}, 3);
  const auto w = uniform({1024, 3136}, 4, -0.02, 0.02);
  const Tensor<float> b({1024});
  for (auto _ : state) {
    Tape<float> tape;
    const Var out = linear(tape, tape.leaf_ref(x, "x"), tape.leaf_ref(w, "w"), tape.leaf_ref(b, "b"));
    benchmark::DoNotOptimize(tape.backward(sum(tape, out)));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Linear)->Arg(1)->Arg(50);

void BM_ConvNetInputGradient(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto params = init_params<float>(ModelSpec::mnist_convnet(), 5);
  const auto x = uniform({n, 1, 28, 28}, 6);
  const std::vector<int> labels(n, 3);
  const ModelSurface<float> surface(params);
  for (auto _ : state) benchmark::DoNotOptimize(surface.loss_gradient(x, labels));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_ConvNetInputGradient)->Arg(1)->Arg(50);

void BM_PnmlPredict(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto params = init_params<float>(ModelSpec::mnist_convnet(), 7);
  const auto x = uniform({n, 1, 28, 28}, 8);
  RefineConfig cfg;
  cfg.clamp = ValueRange::unit();
  for (auto _ : state) benchmark::DoNotOptimize(pnml_predict(params, x, cfg));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_PnmlPredict)->Arg(1)->Arg(10);

void BM_PnmlPredictMlp(benchmark::State& state) {
  const auto params = init_params<float>(ModelSpec::mlp({2, 64, 64, 64, 2}), 9);
  const auto x = uniform({1000, 2}, 10, -3.0, 3.0);
  RefineConfig cfg;
  cfg.strength = 0.6;
  for (auto _ : state) benchmark::DoNotOptimize(pnml_predict(params, x, cfg));
  state.SetItemsProcessed(state.iterations() * 1000);
}
BENCHMARK(BM_PnmlPredictMlp);

}  // namespace

BENCHMARK_MAIN();
