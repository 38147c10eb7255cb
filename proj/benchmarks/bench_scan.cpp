#include <benchmark/benchmark.h>

#include "matir/ssm.hpp"

using namespace matir;

// Selective scan cost versus sequence length; linear complexity shows as a
// flat ns/item column.
static void BM_SelectiveScan(benchmark::State& state) {
    const int64_t len = state.range(0);
    const int64_t e = 32, n = 8;
    Rng rng(1);
    ssm::SelectiveScanParams p = ssm::SelectiveScanParams::init(e, n, rng);
    Tensor x = Tensor::randn({len, e}, rng, 0.3);
    for (auto _ : state) {
        Tensor y = ssm::selective_scan(p, x);
        benchmark::DoNotOptimize(y);
    }
    state.SetItemsProcessed(state.iterations() * len);
    state.SetComplexityN(len);
}
BENCHMARK(BM_SelectiveScan)->RangeMultiplier(4)->Range(256, 16384)->Complexity(benchmark::oN);

static void BM_SelectiveScanBackward(benchmark::State& state) {
    const int64_t len = state.range(0);
    const int64_t e = 32, n = 8;
    Rng rng(1);
    ssm::SelectiveScanParams p = ssm::SelectiveScanParams::init(e, n, rng);
    Tensor x = Tensor::randn({len, e}, rng, 0.3);
    x.set_requires_grad(true);
    for (auto _ : state) {
        Tape tape;
        Tensor loss = ops::sum(ssm::selective_scan(p, x));
        tape.backward(loss);
        x.zero_grad();
        benchmark::DoNotOptimize(loss);
    }
    state.SetItemsProcessed(state.iterations() * len);
    state.SetComplexityN(len);
}
BENCHMARK(BM_SelectiveScanBackward)->RangeMultiplier(4)->Range(256, 4096)->Complexity(benchmark::oN);

// Recurrent versus kernel evaluation of the same time-invariant system.
static void BM_ScanRecurrent(benchmark::State& state) {
    const int64_t len = state.range(0);
    ssm::SsmParams params = ssm::SsmParams::stable_diagonal(8);
    ssm::DiscreteSsm d = ssm::discretize(params, 0.1);
    Rng rng(2);
    std::vector<double> x(static_cast<size_t>(len));
    for (double& v : x) v = rng.normal();
    for (auto _ : state) {
        auto y = ssm::scan_recurrent(d, x);
        benchmark::DoNotOptimize(y);
    }
    state.SetComplexityN(len);
}
BENCHMARK(BM_ScanRecurrent)->RangeMultiplier(4)->Range(256, 16384)->Complexity(benchmark::oN);

static void BM_ScanConvolutional(benchmark::State& state) {
    const int64_t len = state.range(0);
    ssm::SsmParams params = ssm::SsmParams::stable_diagonal(8);
    ssm::DiscreteSsm d = ssm::discretize(params, 0.1);
    Rng rng(2);
    std::vector<double> x(static_cast<size_t>(len));
    for (double& v : x) v = rng.normal();
    for (auto _ : state) {
        auto y = ssm::scan_convolutional(d, x);
        benchmark::DoNotOptimize(y);
    }
    state.SetComplexityN(len);
}
BENCHMARK(BM_ScanConvolutional)->RangeMultiplier(4)->Range(256, 4096)->Complexity(benchmark::oNSquared);

BENCHMARK_MAIN();
