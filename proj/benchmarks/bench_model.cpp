#include <benchmark/benchmark.h>

#include "matir/attention.hpp"
#include "matir/irss.hpp"
#include "matir/model.hpp"

using namespace matir;

static void BM_ModelForward(benchmark::State& state) {
    const int64_t hw = state.range(0);
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    cfg.task = TaskHead::Denoise;
    cfg.scale = 1;
    const MatIrModel model = build(cfg);
    Rng rng(1);
    Tensor x = Tensor::randn({3, hw, hw}, rng, 0.3);
    for (auto _ : state) {
        Tensor y = model_forward(model, x);
        benchmark::DoNotOptimize(y);
    }
    state.SetItemsProcessed(state.iterations() * hw * hw);
}
BENCHMARK(BM_ModelForward)->Arg(32)->Arg(64)->Arg(128);

static void BM_IrssBlock(benchmark::State& state) {
    const int64_t hw = state.range(0);
    Rng rng(2);
    IrssBlock block = IrssBlock::init(16, 8, 2, rng);
    Tensor x = Tensor::randn({16, hw, hw}, rng, 0.3);
    for (auto _ : state) {
        Tensor y = irss_forward(block, x);
        benchmark::DoNotOptimize(y);
    }
    state.SetItemsProcessed(state.iterations() * hw * hw);
}
BENCHMARK(BM_IrssBlock)->Arg(32)->Arg(64);

static void BM_TransformerLayer(benchmark::State& state) {
    const int64_t hw = state.range(0);
    Rng rng(3);
    TransformerLayer layer = TransformerLayer::init(16, 4, 3, 16, 1, true, true, rng);
    Tensor x = Tensor::randn({16, hw, hw}, rng, 0.3);
    for (auto _ : state) {
        Tensor y = transformer_layer_forward(layer, x);
        benchmark::DoNotOptimize(y);
    }
    state.SetItemsProcessed(state.iterations() * hw * hw);
}
BENCHMARK(BM_TransformerLayer)->Arg(32)->Arg(64);

static void BM_TwlaGeometryBuild(benchmark::State& state) {
    const int64_t hw = state.range(0);
    for (auto _ : state) {
        auto wins = build_triangle_windows(hw, hw, 4, 3);
        benchmark::DoNotOptimize(wins);
    }
}
BENCHMARK(BM_TwlaGeometryBuild)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
