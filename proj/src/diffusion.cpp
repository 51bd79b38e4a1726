// SPDX-License-Identifier: Apache-2.0
#include "omni/diffusion.hpp"

#include <cmath>

namespace omni {

NoiseSchedule::NoiseSchedule(int T, double beta_start, double beta_end) : T_(T) {
    require(T >= 1, "NoiseSchedule: T must be >= 1");
    beta_.assign(static_cast<std::size_t>(T) + 1, 0.0);
    abar_.assign(beta_.size(), 1.0);
    for (int t = 1; t <= T; ++t) {
        beta_[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        abar_[t] = abar_[t - 1] * (1.0 - beta_[t]);
    }
    for (double a : abar_) {
        sqrt_abar_.push_back(std::sqrt(a));
        sqrt_1m_abar_.push_back(std::sqrt(1.0 - a));
    }
}

std::size_t NoiseSchedule::check(int t) const {
    if (t < 0 || t > T_) throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T_) + "]");
    return static_cast<std::size_t>(t);
}

std::vector<int> NoiseSchedule::ddim_timesteps(int steps) const {
    if (steps < 1 || steps > T_)
        throw ContractError("ddim steps " + std::to_string(steps) + " must lie in [1, T=" + std::to_string(T_) + "]");
    std::vector<int> ts;
    for (int i = steps; i >= 1; --i) ts.push_back(static_cast<int>(std::lround(static_cast<double>(i) * T_ / steps)));
    return ts;
}

namespace {
void check_noise_t(int t, const NoiseSchedule& s) {
    if (t < 1 || t > s.T()) throw ContractError("add_noise: t=" + std::to_string(t) + " outside [1, " + std::to_string(s.T()) + "]");
}
}  // namespace

Tensor add_noise(const Tensor& z, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    check_noise_t(t, schedule);
    if (z.shape() != eps.shape()) throw ShapeError("add_noise: z " + shape_str(z.shape()) + " vs eps " + shape_str(eps.shape()));
    return add(scale(z, schedule.sqrt_alpha_bar(t)), scale(eps, schedule.sqrt_one_minus_alpha_bar(t)));
}

Tensor add_noise(const Tensor& z, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (z.shape() != eps.shape()) throw ShapeError("add_noise: z " + shape_str(z.shape()) + " vs eps " + shape_str(eps.shape()));
    if (static_cast<int>(t.size()) != z.dim(0)) throw ShapeError("add_noise: one timestep per batch item required");
    const std::size_t per = z.numel() / t.size();
    std::vector<double> a(z.numel()), b(z.numel());
    for (std::size_t i = 0; i < t.size(); ++i) {
        check_noise_t(t[i], schedule);
        std::fill(a.begin() + static_cast<std::ptrdiff_t>(i * per), a.begin() + static_cast<std::ptrdiff_t>((i + 1) * per),
                  schedule.sqrt_alpha_bar(t[i]));
        std::fill(b.begin() + static_cast<std::ptrdiff_t>(i * per), b.begin() + static_cast<std::ptrdiff_t>((i + 1) * per),
                  schedule.sqrt_one_minus_alpha_bar(t[i]));
    }
    return add(mul(z, Tensor::from(z.shape(), std::move(a))), mul(eps, Tensor::from(z.shape(), std::move(b))));
}

Tensor diffusion_loss(const Tensor& eps, const Tensor& eps_pred) {
    if (eps.shape() != eps_pred.shape())
        throw ShapeError("diffusion_loss: " + shape_str(eps.shape()) + " vs " + shape_str(eps_pred.shape()));
    return mse(eps_pred, eps);
}

std::vector<double> ddim_step(const std::vector<double>& z_t, const std::vector<double>& eps_pred, int t, int t_prev,
                              const NoiseSchedule& s) {
    require(z_t.size() == eps_pred.size(), "ddim_step: size mismatch");
    require(t_prev < t, "ddim_step: t_prev must be below t");
    const double sa = s.sqrt_alpha_bar(t), sb = s.sqrt_one_minus_alpha_bar(t);
    const double pa = s.sqrt_alpha_bar(t_prev), pb = s.sqrt_one_minus_alpha_bar(t_prev);
    std::vector<double> out(z_t.size());
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        const double z0 = (z_t[i] - sb * eps_pred[i]) / sa;
        out[i] = pa * z0 + pb * eps_pred[i];
    }
    return out;
}

}  // namespace omni
