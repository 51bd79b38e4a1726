// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "omni/checkpoint.hpp"
#include "omni/gradcheck.hpp"
#include "omni/kernels.hpp"
#include "omni/nn.hpp"
#include "omni/optim.hpp"
#include "omni/tensor.hpp"

using namespace omni;

namespace {

// Straight quadruple loop, independent of the kernel code.
std::vector<double> naive_conv(const std::vector<double>& in, int cin, int h, int w, const std::vector<double>& k,
                               int cout, int kh, int kw, int stride, int pad, int& oh, int& ow) {
    oh = (h + 2 * pad - kh) / stride + 1;
    ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(cout) * oh * ow, 0.0);
    for (int co = 0; co < cout; ++co)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double s = 0;
                for (int ci = 0; ci < cin; ++ci)
                    for (int a = 0; a < kh; ++a)
                        for (int b = 0; b < kw; ++b) {
                            const int iy = y * stride + a - pad, ix = x * stride + b - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            s += in[(ci * h + iy) * w + ix] * k[((co * cin + ci) * kh + a) * kw + b];
                        }
                out[(co * oh + y) * ow + x] = s;
            }
    return out;
}

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("conv2d zero and identity kernels") {
    Rng rng(1);
    Tensor x = Tensor::randn({2, 3, 5, 4}, rng);
    Tensor z = conv2d(x, Tensor::zeros({6, 3, 1, 1}));
    CHECK(z.shape() == Shape{2, 6, 5, 4});
    for (double v : z.values()) CHECK(v == 0.0);
    Tensor one = Tensor::randn({1, 1, 4, 4}, rng);
    Tensor id = conv2d(one, Tensor::full({1, 1, 1, 1}, 1.0));
    CHECK(bitwise_equal(vec(id), vec(one)));
}

TEST_CASE("conv2d matches nested-loop oracle") {
    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[i] = i;
    std::vector<double> k(9);
    for (int i = 0; i < 9; ++i) k[i] = 0.1 * (i + 1) - 0.35;
    for (int pad : {0, 1})
        for (int stride : {1, 2}) {
            int oh = 0, ow = 0;
            auto want = naive_conv(ramp, 1, 4, 4, k, 1, 3, 3, stride, pad, oh, ow);
            Tensor out = conv2d(Tensor::from({1, 1, 4, 4}, ramp), Tensor::from({1, 1, 3, 3}, k), stride, pad);
            REQUIRE(out.shape() == Shape{1, 1, oh, ow});
            for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::fabs(out.at(i) - want[i]) < 1e-12);
        }
}

TEST_CASE("conv2d shape errors name both shapes") {
    Tensor x = Tensor::zeros({1, 3, 4, 4});
    Tensor k = Tensor::zeros({2, 2, 3, 3});
    try {
        conv2d(x, k);
        FAIL("expected shape error");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[1,3,4,4]") != std::string::npos);
        CHECK(msg.find("[2,2,3,3]") != std::string::npos);
    }
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 3, 7, 7})), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 3, 3, 3}), 0), ContractError);
}

TEST_CASE("conv_transpose2d cases") {
    Rng rng(2);
    Tensor x = Tensor::randn({1, 2, 3, 3}, rng);
    Tensor z = conv_transpose2d(x, Tensor::zeros({2, 4, 2, 2}), 2);
    CHECK(z.shape() == Shape{1, 4, 6, 6});
    for (double v : z.values()) CHECK(v == 0.0);
    Tensor y = Tensor::randn({1, 1, 3, 3}, rng);
    CHECK(bitwise_equal(vec(conv_transpose2d(y, Tensor::full({1, 1, 1, 1}, 1.0), 1)), vec(y)));

    // Scatter-add oracle: every input pixel stamps the kernel at stride offsets.
    std::vector<double> in = {1, 2, 3, 4}, k = {0.5, -1, 2, 0.25};
    std::vector<double> want(16, 0.0);
    for (int iy = 0; iy < 2; ++iy)
        for (int ix = 0; ix < 2; ++ix)
            for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) want[(iy * 2 + a) * 4 + ix * 2 + b] += in[iy * 2 + ix] * k[a * 2 + b];
    Tensor out = conv_transpose2d(Tensor::from({1, 1, 2, 2}, in), Tensor::from({1, 1, 2, 2}, k), 2);
    REQUIRE(out.shape() == Shape{1, 1, 4, 4});
    for (int i = 0; i < 16; ++i) CHECK(std::fabs(out.at(i) - want[i]) < 1e-12);
    CHECK_THROWS_AS(conv_transpose2d(x, Tensor::zeros({3, 1, 2, 2}), 2), ShapeError);
}

TEST_CASE("elementwise basics and domain errors") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);
    Tensor x = Tensor::from({3}, {1.0, 0.0, 2.0});
    try {
        log(x);
        FAIL("expected domain error");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("index 1") != std::string::npos);
    }
    CHECK_THROWS_AS(sqrt(Tensor::from({2}, {-1.0, 1.0})), DomainError);
    Tensor p = Tensor::scalar(1.0, true);
    Tape::current().backward(sigmoid(p));
    const double h = 1e-5;
    const double fd = (1 / (1 + std::exp(-(1 + h))) - 1 / (1 + std::exp(-(1 - h)))) / (2 * h);
    CHECK(std::fabs(p.grad()[0] - fd) < 1e-7);
    Tape::current().clear();
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("matmul, sum_sq, attention oracles") {
    CHECK(sum_sq(Tensor::zeros({3, 2})).item() == 0.0);
    Rng rng(3);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.mutable_values()[i * 4] = 1.0;
    CHECK(bitwise_equal(vec(matmul(eye, a)), vec(a)));
    CHECK_THROWS_AS(matmul(a, a), ShapeError);

    // One-hot keys equal to queries: weights follow softmax by hand.
    const double s = 8.0;
    std::vector<double> qk = {s, 0, 0, 0, s, 0, 0, 0, s};
    std::vector<double> v = {1, 2, 3, 4, 5, 6};
    Tensor out = attention(Tensor::from({1, 3, 3}, qk), Tensor::from({1, 3, 3}, qk), Tensor::from({1, 3, 2}, v));
    const double logit = s * s / std::sqrt(3.0);
    const double wmax = std::exp(logit) / (std::exp(logit) + 2.0);
    const double wmin = 1.0 / (std::exp(logit) + 2.0);
    for (int i = 0; i < 3; ++i)
        for (int c = 0; c < 2; ++c) {
            double want = 0;
            for (int j = 0; j < 3; ++j) want += (i == j ? wmax : wmin) * v[j * 2 + c];
            CHECK(std::fabs(out.at(i * 2 + c) - want) < 1e-12);
            CHECK(std::fabs(out.at(i * 2 + c) - v[i * 2 + c]) < 1e-5);
        }
    CHECK_THROWS_AS(concat({Tensor::zeros({2, 2}), Tensor::zeros({2, 2})}, 3), ShapeError);
}

TEST_CASE("grad_check examples") {
    Rng rng(4);
    CHECK(grad_check([](const std::vector<Tensor>& in) { return sum_sq(in[0]); }, {Tensor::randn({3, 3}, rng)}) < 1e-6);
    const double e = grad_check(
        [](const std::vector<Tensor>& in) { return sum(sigmoid(conv2d(in[0], in[1], 1, 1))); },
        {Tensor::randn({1, 2, 4, 4}, rng), Tensor::randn({3, 2, 3, 3}, rng, 0.3)});
    CHECK(e < 1e-5);
    CHECK(grad_check([](const std::vector<Tensor>&) { return Tensor::scalar(3.0); }, {Tensor::randn({2}, rng)}) == 0.0);
    CHECK_THROWS_AS(grad_check([](const std::vector<Tensor>& in) { return relu(in[0]); }, {Tensor::randn({2}, rng)}),
                    ContractError);
}

TEST_CASE("grad_check property over seeds for every primitive") {
    for (const GradCase& c : primitive_grad_cases())
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(1000 + seed);
            const double err = grad_check(c.f, c.make(rng));
            INFO(c.name << " seed " << seed);
            CHECK(err < 1e-5);
        }
}

TEST_CASE("tape ordering, staleness, and no-grad") {
    Tensor p = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor a = mul(p, p);
    Tensor b = sum(add(a, p));
    Tape::current().backward(b);
    CHECK(p.grad()[0] == doctest::Approx(3.0));
    CHECK(p.grad()[1] == doctest::Approx(5.0));
    const std::size_t n = Tape::current().size();
    CHECK(n == 3);
    Tape::current().clear();
    CHECK(Tape::current().size() == 0);
    CHECK_THROWS_AS(Tape::current().backward(b), ContractError);
    {
        NoGradGuard g;
        Tensor c = sum(mul(p, p));
        CHECK(!c.requires_grad());
        CHECK(Tape::current().size() == 0);
    }
    CHECK_THROWS_AS(Tape::current().backward(mul(p, p)), ContractError);
    Tape::current().clear();
}

TEST_CASE("zero-initialized conv contributes bitwise zero") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor x = Tensor::randn({1, 3, 4, 4}, rng, 10.0);
        Tensor y = Tensor::randn({1, 2, 4, 4}, rng);
        Tensor z = conv2d(x, Tensor::zeros({2, 3, 1, 1}), 1, 0, Tensor::zeros({2}));
        CHECK(bitwise_equal(vec(add(y, z)), vec(y)));
    }
}

TEST_CASE("forward passes are bitwise deterministic") {
    auto run = [] {
        Rng rng(7);
        Tensor x = Tensor::randn({2, 3, 8, 8}, rng);
        Tensor k = Tensor::randn({4, 3, 3, 3}, rng);
        Tensor q = to_tokens(conv2d(x, k, 1, 1));
        return vec(attention(q, q, q, 2));
    };
    CHECK(bitwise_equal(run(), run()));
}

TEST_CASE("optimizers") {
    ParamStore ps;
    Tensor p = ps.add("p", Tensor::scalar(1.0));
    Tensor f = ps.add("f", Tensor::scalar(5.0));
    ps.set_frozen("f", true);
    p.mutable_grad()[0] = 2.0;
    f.mutable_grad()[0] = 3.0;
    sgd_step(ps, 0.1);
    CHECK(p.item() == doctest::Approx(0.8));
    CHECK(f.item() == 5.0);

    ParamStore missing;
    missing.add("q", Tensor::scalar(1.0));
    CHECK_THROWS_AS(sgd_step(missing, 0.1), ContractError);

    // One AdamW step from zero moments, unrolled by hand.
    ParamStore as;
    Tensor w = as.add("w", Tensor::from({2}, {0.5, -1.5}));
    w.mutable_grad()[0] = 0.3;
    w.mutable_grad()[1] = -2.0;
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.1;
    AdamW opt(b1, b2, eps, wd);
    opt.step(as, lr);
    const double g[2] = {0.3, -2.0}, p0[2] = {0.5, -1.5};
    for (int i = 0; i < 2; ++i) {
        const double m = (1 - b1) * g[i] / (1 - b1), v = (1 - b2) * g[i] * g[i] / (1 - b2);
        CHECK(std::fabs(w.at(i) - (p0[i] - lr * (m / (std::sqrt(v) + eps) + wd * p0[i]))) < 1e-15);
    }
    CHECK(opt.steps_taken("w") == 1);

    CHECK(poly_decay(1e-3, 0, 100, 1e-4) == doctest::Approx(1e-3));
    CHECK(poly_decay(1e-3, 50, 100, 1e-4) == doctest::Approx(5.5e-4));
    CHECK(poly_decay(1e-3, 100, 100, 1e-4) == doctest::Approx(1e-4));
    CHECK(poly_decay(1e-3, 500, 100, 1e-4) == doctest::Approx(1e-4));
}

TEST_CASE("optimizer steps never touch frozen parameters") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        ParamStore ps;
        ps.add("a.x", Tensor::randn({4}, rng));
        ps.add("b.y", Tensor::randn({3}, rng));
        ps.freeze_prefix("a.");
        for (Parameter& q : ps.all())
            for (double& gv : q.tensor.mutable_grad()) gv = rng.normal();
        auto before = vec(ps.tensor("a.x"));
        Sgd(0.9).step(ps, 0.5);
        AdamW().step(ps, 0.5);
        CHECK(bitwise_equal(vec(ps.tensor("a.x")), before));
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(9);
    ParamStore ps;
    ps.add("m.conv.kernel", Tensor::randn({2, 3, 3, 3}, rng));
    ps.add("m.bias", Tensor::randn({7}, rng));
    const auto dir = std::filesystem::temp_directory_path() / "omni_ckpt_test";
    std::filesystem::remove_all(dir);
    save_checkpoint(ps, dir);
    ParamStore other;
    other.add("m.conv.kernel", Tensor::zeros({2, 3, 3, 3}));
    other.add("m.bias", Tensor::zeros({7}));
    load_checkpoint(other, dir);
    for (const Parameter& p : ps.all()) CHECK(bitwise_equal(vec(p.tensor), vec(other.tensor(p.name))));
    CHECK(params_digest(ps, false) == params_digest(other, false));
    ParamStore bad;
    bad.add("m.bias", Tensor::zeros({6}));
    CHECK_THROWS_AS(load_checkpoint(bad, dir, true), ShapeError);
    std::filesystem::remove_all(dir);
    CHECK(sha256_hex("abc", 3) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("parallel kernels agree with serial references") {
    Rng rng(11);
    auto rnd = [&](std::size_t n) {
        std::vector<double> v(n);
        for (double& x : v) x = rng.normal();
        return v;
    };
    for (int stride : {1, 2})
        for (int pad : {0, 1}) {
            const auto g = kernels::Conv2dGeom::make(2, 3, 9, 7, 4, 3, 3, stride, pad);
            auto in = rnd(2 * 3 * 9 * 7), k = rnd(4 * 3 * 9), bias = rnd(4), dout = rnd(2 * 4 * g.oh * g.ow);
            std::vector<double> a(dout.size()), b(dout.size());
            kernels::conv2d_forward(g, in.data(), k.data(), bias.data(), a.data());
            kernels::reference::conv2d_forward(g, in.data(), k.data(), bias.data(), b.data());
            for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-12);
            std::vector<double> di(in.size(), 0.0), dr(in.size(), 0.0);
            kernels::conv2d_backward_input(g, dout.data(), k.data(), di.data());
            kernels::reference::conv2d_backward_input(g, dout.data(), k.data(), dr.data());
            for (std::size_t i = 0; i < di.size(); ++i) CHECK(std::fabs(di[i] - dr[i]) < 1e-12);
            std::vector<double> ki(k.size(), 0.0), kr(k.size(), 0.0);
            kernels::conv2d_backward_kernel(g, dout.data(), in.data(), ki.data());
            kernels::reference::conv2d_backward_kernel(g, dout.data(), in.data(), kr.data());
            for (std::size_t i = 0; i < ki.size(); ++i) CHECK(std::fabs(ki[i] - kr[i]) < 1e-12);
        }
    auto a = rnd(5 * 7), b = rnd(7 * 6);
    std::vector<double> c1(30, 0.0), c2(30, 0.0);
    kernels::matmul_nn(5, 7, 6, a.data(), b.data(), c1.data());
    kernels::reference::matmul_nn(5, 7, 6, a.data(), b.data(), c2.data());
    for (int i = 0; i < 30; ++i) CHECK(std::fabs(c1[i] - c2[i]) < 1e-12);

    kernels::AttentionGeom ag{2, 2, 5, 6, 4, 6};
    auto q = rnd(2 * 5 * 4), kk = rnd(2 * 6 * 4), v = rnd(2 * 6 * 6);
    std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 0};
    std::vector<double> probs(2 * 2 * 5 * 6), o1(2 * 5 * 6), o2(2 * 5 * 6);
    kernels::attention_forward(ag, q.data(), kk.data(), v.data(), mask.data(), probs.data(), o1.data());
    kernels::reference::attention_forward(ag, q.data(), kk.data(), v.data(), mask.data(), o2.data());
    for (std::size_t i = 0; i < o1.size(); ++i) CHECK(std::fabs(o1[i] - o2[i]) < 1e-12);
}

TEST_CASE("kernel results do not depend on the worker count") {
    auto run = [] {
        Rng rng(12);
        Tensor x = Tensor::randn({2, 4, 12, 12}, rng, 1.0, true);
        Tensor k = Tensor::randn({6, 4, 3, 3}, rng, 1.0, true);
        Tensor t = to_tokens(conv2d(x, k, 1, 1));
        Tensor loss = sum_sq(attention(t, t, t, 2));
        Tape::current().backward(loss);
        std::vector<double> out = vec(loss);
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), k.grad().begin(), k.grad().end());
        Tape::current().clear();
        return out;
    };
    const int before = kernels::num_workers();
    kernels::set_num_workers(1);
    auto one = run();
    kernels::set_num_workers(3);
    auto three = run();
    kernels::set_num_workers(before);
    CHECK(bitwise_equal(one, three));
}
