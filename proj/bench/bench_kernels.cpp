// Parallel kernels against the serial reference on U-net-sized layers.
//
//   build/bench/bench_kernels --benchmark_filter=conv3x3

#include <random>

#include <benchmark/benchmark.h>

#include "cmrssl/kernels.hpp"

using namespace cmrssl;

namespace {

struct Layer {
    Tensor<float> x, dy;
    std::vector<float> w, b, dw, db;
};

Layer make_layer(int n, int cin, int cout, int hw, int taps) {
    std::mt19937_64 rng(1);
    std::normal_distribution<float> d(0.0f, 1.0f);
    Layer l;
    l.x = Tensor<float>(n, cin, hw, hw);
    l.dy = Tensor<float>(n, cout, hw, hw);
    for (auto& v : l.x.data) v = d(rng);
    for (auto& v : l.dy.data) v = d(rng);
    l.w.resize(std::size_t(cout) * cin * taps);
    l.b.resize(cout);
    for (auto& v : l.w) v = 0.1f * d(rng);
    l.dw.resize(l.w.size());
    l.db.resize(l.b.size());
    return l;
}

// Args: batch, channels in, channels out, spatial size.
void shapes(benchmark::internal::Benchmark* b) {
    b->Args({8, 1, 16, 64})->Args({8, 16, 16, 64})->Args({8, 32, 32, 32})->Args({8, 64, 64, 16});
}

template <bool Fast>
void conv3x3_forward(benchmark::State& state) {
    auto l = make_layer(state.range(0), state.range(1), state.range(2), state.range(3), 9);
    Tensor<float> y;
    for (auto _ : state) {
        if constexpr (Fast)
            kernels::conv3x3_forward<float>(l.x, l.w, l.b, int(state.range(2)), y);
        else
            reference::conv3x3_forward<float>(l.x, l.w, l.b, int(state.range(2)), y);
        benchmark::DoNotOptimize(y.data.data());
    }
}

template <bool Fast>
void conv3x3_backward(benchmark::State& state) {
    auto l = make_layer(state.range(0), state.range(1), state.range(2), state.range(3), 9);
    Tensor<float> dx;
    for (auto _ : state) {
        if constexpr (Fast)
            kernels::conv3x3_backward<float>(l.x, l.w, l.dy, l.dw, l.db, &dx);
        else
            reference::conv3x3_backward<float>(l.x, l.w, l.dy, l.dw, l.db, &dx);
        benchmark::DoNotOptimize(dx.data.data());
    }
}

template <bool Fast>
void upconv2x2_forward(benchmark::State& state) {
    auto l = make_layer(state.range(0), state.range(1), state.range(2), state.range(3), 4);
    Tensor<float> y;
    for (auto _ : state) {
        if constexpr (Fast)
            kernels::upconv2x2_forward<float>(l.x, l.w, l.b, int(state.range(2)), y);
        else
            reference::upconv2x2_forward<float>(l.x, l.w, l.b, int(state.range(2)), y);
        benchmark::DoNotOptimize(y.data.data());
    }
}

template <bool Fast>
void softmax_cross_entropy(benchmark::State& state) {
    auto l = make_layer(state.range(0), state.range(2), state.range(2), state.range(3), 1);
    std::vector<std::uint8_t> labels(std::size_t(l.x.n) * l.x.h * l.x.w);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = std::uint8_t(i % l.x.c);
    Tensor<float> g;
    for (auto _ : state) {
        double loss;
        if constexpr (Fast)
            loss = kernels::softmax_cross_entropy<float>(l.x, labels, &g);
        else
            loss = reference::softmax_cross_entropy<float>(l.x, labels, &g);
        benchmark::DoNotOptimize(loss);
    }
}

} // namespace

BENCHMARK(conv3x3_forward<true>)->Name("conv3x3_forward/parallel")->Apply(shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(conv3x3_forward<false>)->Name("conv3x3_forward/reference")->Apply(shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(conv3x3_backward<true>)->Name("conv3x3_backward/parallel")->Apply(shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(conv3x3_backward<false>)->Name("conv3x3_backward/reference")->Apply(shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(upconv2x2_forward<true>)->Name("upconv2x2_forward/parallel")->Apply(shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(upconv2x2_forward<false>)->Name("upconv2x2_forward/reference")->Apply(shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(softmax_cross_entropy<true>)->Name("softmax_ce/parallel")->Args({8, 10, 10, 64})->Unit(benchmark::kMillisecond);
BENCHMARK(softmax_cross_entropy<false>)->Name("softmax_ce/reference")->Args({8, 10, 10, 64})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
