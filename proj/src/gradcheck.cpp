// SPDX-License-Identifier: Apache-2.0
#include "omni/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace omni {

double grad_check(const TensorFn& f, const std::vector<Tensor>& inputs, double h) {
    std::vector<Tensor> probe;
    probe.reserve(inputs.size());
    for (const Tensor& t : inputs) probe.push_back(Tensor::from(t.shape(), {t.values().begin(), t.values().end()}, true));

    Tape& tape = Tape::current();
    Tensor out = f(probe);
    if (out.numel() != 1)
        throw ContractError("grad_check: function must be scalar-valued, got shape " + shape_str(out.shape()));
    tape.backward(out);
    std::vector<std::vector<double>> analytic;
    for (const Tensor& t : probe) {
        if (t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(t.numel(), 0.0);
    }
    tape.clear();

    NoGradGuard no_grad;
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        auto v = probe[i].mutable_values();
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double orig = v[j];
            v[j] = orig + h;
            const double plus = f(probe).item();
            v[j] = orig - h;
            const double minus = f(probe).item();
            v[j] = orig;
            const double numeric = (plus - minus) / (2.0 * h);
            const double err = std::fabs(analytic[i][j] - numeric) / std::max(1.0, std::fabs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

double grad_check_inplace(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h) {
    for (const Tensor& p : params) require(p.requires_grad(), "grad_check_inplace: every tensor must require a gradient");
    std::vector<Tensor> targets = params;
    for (Tensor& t : targets) t.zero_grad();
    Tape& tape = Tape::current();
    Tensor out = f();
    if (out.numel() != 1)
        throw ContractError("grad_check_inplace: function must be scalar-valued, got shape " + shape_str(out.shape()));
    tape.backward(out);
    std::vector<std::vector<double>> analytic;
    for (const Tensor& t : targets) {
        if (t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(t.numel(), 0.0);
    }
    tape.clear();
    for (Tensor& t : targets) t.zero_grad();

    NoGradGuard no_grad;
    double worst = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        auto v = targets[i].mutable_values();
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double orig = v[j];
            v[j] = orig + h;
            const double plus = f().item();
            v[j] = orig - h;
            const double minus = f().item();
            v[j] = orig;
            const double numeric = (plus - minus) / (2.0 * h);
            worst = std::max(worst, std::fabs(analytic[i][j] - numeric) / std::max(1.0, std::fabs(numeric)));
        }
    }
    return worst;
}

std::vector<GradCase> primitive_grad_cases() {
    using In = std::vector<Tensor>;
    auto pos = [](Shape s, Rng& r) {
        Tensor t = Tensor::randn(s, r);
        for (double& v : t.mutable_values()) v = 0.5 + std::fabs(v);
        return t;
    };
    return {
        {"add", [](Rng& r) { return In{Tensor::randn({3, 2}, r), Tensor::randn({3, 2}, r)}; },
         [](const In& x) { return sum_sq(add(x[0], x[1])); }},
        {"sub_scalar_broadcast", [](Rng& r) { return In{Tensor::randn({3, 2}, r), Tensor::randn({1}, r)}; },
         [](const In& x) { return sum_sq(sub(x[0], x[1])); }},
        {"mul", [](Rng& r) { return In{Tensor::randn({4}, r), Tensor::randn({4}, r)}; },
         [](const In& x) { return sum(mul(x[0], x[1])); }},
        {"sigmoid", [](Rng& r) { return In{Tensor::randn({5}, r)}; }, [](const In& x) { return sum_sq(sigmoid(x[0])); }},
        {"silu", [](Rng& r) { return In{Tensor::randn({5}, r)}; }, [](const In& x) { return sum_sq(silu(x[0])); }},
        {"relu", [](Rng& r) { return In{Tensor::randn({5}, r)}; }, [](const In& x) { return sum_sq(relu(x[0])); }},
        {"exp", [](Rng& r) { return In{Tensor::randn({5}, r, 0.5)}; }, [](const In& x) { return sum(exp(x[0])); }},
        {"log", [pos](Rng& r) { return In{pos({5}, r)}; }, [](const In& x) { return sum(log(x[0])); }},
        {"sqrt", [pos](Rng& r) { return In{pos({5}, r)}; }, [](const In& x) { return sum(sqrt(x[0])); }},
        {"scale", [](Rng& r) { return In{Tensor::randn({2, 3}, r)}; }, [](const In& x) { return sum_sq(scale(x[0], 0.5)); }},
        {"add_scalar", [](Rng& r) { return In{Tensor::randn({2, 3}, r)}; }, [](const In& x) { return sum_sq(add_scalar(x[0], 0.7)); }},
        {"abs", [pos](Rng& r) {
             Tensor t = pos({5}, r);
             t.mutable_values()[1] *= -1;
             t.mutable_values()[3] *= -1;
             return In{t};
         },
         [](const In& x) { return sum_sq(abs(x[0])); }},
        {"mean", [](Rng& r) { return In{Tensor::randn({2, 3}, r)}; }, [](const In& x) { return mul(mean(x[0]), mean(x[0])); }},
        {"sum", [](Rng& r) { return In{Tensor::randn({2, 3}, r)}; }, [](const In& x) { return mul(sum(x[0]), sum(x[0])); }},
        {"matmul", [](Rng& r) { return In{Tensor::randn({3, 4}, r), Tensor::randn({4, 2}, r)}; },
         [](const In& x) { return sum_sq(matmul(x[0], x[1])); }},
        {"transpose", [](Rng& r) { return In{Tensor::randn({3, 4}, r), Tensor::randn({3, 4}, r)}; },
         [](const In& x) { return sum_sq(matmul(transpose2d(x[0]), x[1])); }},
        {"linear", [](Rng& r) { return In{Tensor::randn({2, 3, 4}, r), Tensor::randn({4, 2}, r), Tensor::randn({2}, r)}; },
         [](const In& x) { return sum_sq(linear(x[0], x[1], x[2])); }},
        {"layer_norm",
         [](Rng& r) { return In{Tensor::randn({3, 5}, r), Tensor::randn({5}, r), Tensor::randn({5}, r), Tensor::randn({3, 5}, r)}; },
         [](const In& x) { return sum(mul(layer_norm(x[0], x[1], x[2]), x[3])); }},
        {"attention",
         [](Rng& r) { return In{Tensor::randn({2, 3, 4}, r), Tensor::randn({2, 5, 4}, r), Tensor::randn({2, 5, 6}, r)}; },
         [](const In& x) { return sum_sq(attention(x[0], x[1], x[2], 2, {1, 1, 1, 0, 1, 1, 0, 1, 1, 1})); }},
        {"concat", [](Rng& r) { return In{Tensor::randn({2, 3, 2}, r), Tensor::randn({2, 1, 2}, r)}; },
         [](const In& x) { return sum_sq(sigmoid(concat({x[0], x[1]}, 1))); }},
        {"slice", [](Rng& r) { return In{Tensor::randn({2, 5, 2}, r)}; },
         [](const In& x) { return sum_sq(slice(x[0], 1, 1, 3)); }},
        {"normalize_rows", [](Rng& r) { return In{Tensor::randn({3, 4}, r), Tensor::randn({3, 4}, r)}; },
         [](const In& x) { return sum(mul(normalize_rows(x[0]), x[1])); }},
        {"cross_entropy", [](Rng& r) { return In{Tensor::randn({4, 3}, r)}; },
         [](const In& x) { return cross_entropy_rows(x[0], {0, 2, 1, 1}); }},
        {"conv2d",
         [](Rng& r) { return In{Tensor::randn({2, 2, 5, 5}, r), Tensor::randn({3, 2, 3, 3}, r, 0.3), Tensor::randn({3}, r)}; },
         [](const In& x) { return sum_sq(conv2d(x[0], x[1], 2, 1, x[2])); }},
        {"conv_transpose2d",
         [](Rng& r) { return In{Tensor::randn({1, 2, 3, 3}, r), Tensor::randn({2, 3, 4, 4}, r, 0.3), Tensor::randn({3}, r)}; },
         [](const In& x) { return sum_sq(conv_transpose2d(x[0], x[1], 2, x[2], 1)); }},
        {"upsample", [](Rng& r) { return In{Tensor::randn({1, 2, 2, 3}, r), Tensor::randn({1, 2, 4, 6}, r)}; },
         [](const In& x) { return sum(mul(upsample_nearest(x[0], 2), x[1])); }},
        {"add_channel", [](Rng& r) { return In{Tensor::randn({2, 3, 2, 2}, r), Tensor::randn({2, 3}, r)}; },
         [](const In& x) { return sum_sq(add_channel(x[0], x[1])); }},
        {"channel_dot", [](Rng& r) { return In{Tensor::randn({2, 3, 2, 2}, r), Tensor::randn({2, 3}, r)}; },
         [](const In& x) { return sum_sq(channel_dot(x[0], x[1])); }},
        {"tokens", [](Rng& r) { return In{Tensor::randn({2, 3, 2, 2}, r), Tensor::randn({2, 4, 3}, r)}; },
         [](const In& x) { return sum_sq(from_tokens(add(to_tokens(x[0]), x[1]), 2, 2)); }},
        {"global_avg_pool", [](Rng& r) { return In{Tensor::randn({2, 3, 2, 2}, r)}; },
         [](const In& x) { return sum_sq(global_avg_pool(x[0])); }},
        {"bce", [](Rng& r) { return In{Tensor::randn({6}, r), Tensor::randn({6}, r)}; },
         [](const In& x) { return bce_mean(sigmoid(x[0]), sigmoid(x[1])); }},
        {"mse", [](Rng& r) { return In{Tensor::randn({6}, r), Tensor::randn({6}, r)}; },
         [](const In& x) { return mse(x[0], x[1]); }},
        {"l1", [](Rng& r) { return In{Tensor::randn({6}, r), Tensor::randn({6}, r)}; },
         [](const In& x) { return l1_mean(x[0], x[1]); }},
        {"reshape", [](Rng& r) { return In{Tensor::randn({2, 6}, r)}; },
         [](const In& x) { return sum_sq(sigmoid(x[0].reshape({3, 4}))); }},
    };
}

}  // namespace omni
