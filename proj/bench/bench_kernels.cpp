// SPDX-License-Identifier: Apache-2.0
// Serial reference kernels vs the OpenMP ones on model-sized shapes.
#include <benchmark/benchmark.h>

#include <vector>

#include "omni/kernels.hpp"
#include "omni/rng.hpp"

using namespace omni::kernels;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
    omni::Rng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

Conv2dGeom geom(const benchmark::State& st) {
    const int c = static_cast<int>(st.range(0)), hw = static_cast<int>(st.range(1));
    return Conv2dGeom::make(4, c, hw, hw, c, 3, 3, 1, 1);
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
    const auto g = geom(st);
    auto in = noise(static_cast<std::size_t>(g.batch) * g.cin * g.h * g.w, 1);
    auto k = noise(static_cast<std::size_t>(g.cout) * g.cin * 9, 2);
    std::vector<double> out(static_cast<std::size_t>(g.batch) * g.cout * g.oh * g.ow);
    for (auto _ : st) {
        if (Parallel)
            conv2d_forward(g, in.data(), k.data(), nullptr, out.data());
        else
            reference::conv2d_forward(g, in.data(), k.data(), nullptr, out.data());
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<long>(out.size()) * g.cin * 9);
}

template <bool Parallel>
void BM_ConvBackwardKernel(benchmark::State& st) {
    const auto g = geom(st);
    auto in = noise(static_cast<std::size_t>(g.batch) * g.cin * g.h * g.w, 1);
    auto dout = noise(static_cast<std::size_t>(g.batch) * g.cout * g.oh * g.ow, 3);
    std::vector<double> dk(static_cast<std::size_t>(g.cout) * g.cin * 9);
    for (auto _ : st) {
        if (Parallel)
            conv2d_backward_kernel(g, dout.data(), in.data(), dk.data());
        else
            reference::conv2d_backward_kernel(g, dout.data(), in.data(), dk.data());
        benchmark::DoNotOptimize(dk.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<long>(dout.size()) * g.cin * 9);
}

template <bool Parallel>
void BM_Matmul(benchmark::State& st) {
    const int n = static_cast<int>(st.range(0));
    auto a = noise(static_cast<std::size_t>(n) * n, 4), b = noise(static_cast<std::size_t>(n) * n, 5);
    std::vector<double> c(static_cast<std::size_t>(n) * n);
    for (auto _ : st) {
        if (Parallel)
            matmul_nn(n, n, n, a.data(), b.data(), c.data());
        else
            reference::matmul_nn(n, n, n, a.data(), b.data(), c.data());
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<long>(n) * n * n);
}

template <bool Parallel>
void BM_Attention(benchmark::State& st) {
    AttentionGeom g{4, 4, static_cast<int>(st.range(0)), 32, 32, 32};
    auto q = noise(static_cast<std::size_t>(g.batch) * g.lq * g.dim, 6);
    auto k = noise(static_cast<std::size_t>(g.batch) * g.lk * g.dim, 7);
    auto v = noise(static_cast<std::size_t>(g.batch) * g.lk * g.vdim, 8);
    std::vector<double> probs(static_cast<std::size_t>(g.batch) * g.heads * g.lq * g.lk);
    std::vector<double> out(static_cast<std::size_t>(g.batch) * g.lq * g.vdim);
    for (auto _ : st) {
        if (Parallel)
            attention_forward(g, q.data(), k.data(), v.data(), nullptr, probs.data(), out.data());
        else
            reference::attention_forward(g, q.data(), k.data(), v.data(), nullptr, out.data());
        benchmark::DoNotOptimize(out.data());
    }
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Args({16, 32})->Args({32, 16});
BENCHMARK(BM_ConvForward<true>)->Args({16, 32})->Args({32, 16});
BENCHMARK(BM_ConvBackwardKernel<false>)->Args({16, 32})->Args({32, 16});
BENCHMARK(BM_ConvBackwardKernel<true>)->Args({16, 32})->Args({32, 16});
BENCHMARK(BM_Matmul<false>)->Arg(64)->Arg(128);
BENCHMARK(BM_Matmul<true>)->Arg(64)->Arg(128);
BENCHMARK(BM_Attention<false>)->Arg(256);
BENCHMARK(BM_Attention<true>)->Arg(256);

BENCHMARK_MAIN();
