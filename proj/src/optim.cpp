// SPDX-License-Identifier: Apache-2.0
#include "omni/optim.hpp"

#include <algorithm>
#include <cmath>

namespace omni {

namespace {
std::span<const double> grad_of(const Parameter& p) {
    if (!p.tensor.has_grad()) throw ContractError("optimizer step: parameter " + p.name + " has no gradient");
    return p.tensor.grad();
}
}  // namespace

void Sgd::step(ParamStore& params, double lr) {
    for (Parameter& p : params.all()) {
        if (p.frozen) continue;
        const auto g = grad_of(p);
        auto v = p.tensor.mutable_values();
        if (momentum_ == 0.0) {
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (g[i] + weight_decay_ * v[i]);
            continue;
        }
        auto& buf = velocity_[p.name];
        if (buf.empty()) buf.assign(v.size(), 0.0);
        for (std::size_t i = 0; i < v.size(); ++i) {
            buf[i] = momentum_ * buf[i] + g[i] + weight_decay_ * v[i];
            v[i] -= lr * buf[i];
        }
    }
}

void sgd_step(ParamStore& params, double lr) { Sgd().step(params, lr); }

void AdamW::step(ParamStore& params, double lr) {
    for (Parameter& p : params.all()) {
        if (p.frozen) continue;
        const auto g = grad_of(p);
        auto v = p.tensor.mutable_values();
        Moments& s = state_[p.name];
        if (s.m.empty()) {
            s.m.assign(v.size(), 0.0);
            s.v.assign(v.size(), 0.0);
        }
        ++s.t;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(s.t));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(s.t));
        for (std::size_t i = 0; i < v.size(); ++i) {
            s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * g[i];
            s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * g[i] * g[i];
            const double mhat = s.m[i] / c1;
            const double vhat = s.v[i] / c2;
            v[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * v[i]);
        }
    }
}

long AdamW::steps_taken(const std::string& name) const {
    auto it = state_.find(name);
    return it == state_.end() ? 0 : it->second.t;
}

double poly_decay(double lr0, long step, long total, double floor_lr, double power) {
    if (total <= 0) return floor_lr;
    const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
    return (lr0 - floor_lr) * std::pow(1.0 - frac, power) + floor_lr;
}

}  // namespace omni
