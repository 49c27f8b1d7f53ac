// Parallel kernels against their serial references.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "midialign/features.hpp"
#include "midialign/kernels.hpp"

namespace {

using midialign::kernels::Transpose;
namespace k = midialign::kernels;

std::vector<float> random_vec(std::size_t n, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> u(-1.f, 1.f);
    std::vector<float> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto n = static_cast<std::size_t>(state.range(1));
    const auto kk = static_cast<std::size_t>(state.range(2));
    auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::gemm<float>(Transpose::no, Transpose::no, m, n, kk, 1.f, a.data(), kk, b.data(), n, 0.f, c.data(), n);
        else
            k::serial::gemm<float>(Transpose::no, Transpose::no, m, n, kk, 1.f, a.data(), kk, b.data(), n, 0.f, c.data(), n);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * kk / 1e9, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Gemm<true>)->Args({1000, 256, 704})->Args({8, 1024, 256})->Args({1000, 88, 512});
BENCHMARK(BM_Gemm<false>)->Args({200, 256, 704});

template <bool Parallel>
void BM_Conv(benchmark::State& state) {
    const std::size_t cin = static_cast<std::size_t>(state.range(0)), cout = static_cast<std::size_t>(state.range(1));
    const std::size_t h = 1000, w = static_cast<std::size_t>(state.range(2));
    auto in = random_vec(cin * h * w, 3), wt = random_vec(cout * cin * 9, 4), bias = random_vec(cout, 5);
    std::vector<float> out(cout * h * w);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::conv3x3_forward<float>(in.data(), cin, h, w, wt.data(), bias.data(), cout, out.data());
        else
            k::serial::conv3x3_forward<float>(in.data(), cin, h, w, wt.data(), bias.data(), cout, out.data());
        benchmark::DoNotOptimize(out.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * 9 * cin * cout * h * w / 1e9, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv<true>)->Args({16, 16, 88})->Args({16, 32, 44});
BENCHMARK(BM_Conv<false>)->Args({16, 16, 88});

template <bool Parallel>
void BM_ConvBackwardWeights(benchmark::State& state) {
    const std::size_t cin = 16, cout = 16, h = 1000, w = 88;
    auto in = random_vec(cin * h * w, 3), g = random_vec(cout * h * w, 4);
    std::vector<float> dw(cout * cin * 9), db(cout);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::conv3x3_backward_weights<float>(g.data(), cout, h, w, in.data(), cin, dw.data(), db.data());
        else
            k::serial::conv3x3_backward_weights<float>(g.data(), cout, h, w, in.data(), cin, dw.data(), db.data());
        benchmark::DoNotOptimize(dw.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * 9 * cin * cout * h * w / 1e9, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_ConvBackwardWeights<true>);
BENCHMARK(BM_ConvBackwardWeights<false>);

template <bool Parallel>
void BM_Cqt(benchmark::State& state) {
    midialign::AudioBuffer audio;
    audio.samples = random_vec(16000 * 2, 6);
    for (auto _ : state) {
        auto f = Parallel ? midialign::compute_cqt(audio) : midialign::serial::compute_cqt(audio);
        benchmark::DoNotOptimize(f.values.data());
    }
}
BENCHMARK(BM_Cqt<true>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Cqt<false>)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
