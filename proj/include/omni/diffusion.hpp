// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "omni/tensor.hpp"

namespace omni {

/// Linear-beta forward-process tables, indexed by t in [1, T]; index 0 holds
/// the clean endpoint (alpha_bar = 1).
class NoiseSchedule {
public:
    explicit NoiseSchedule(int T = 1000, double beta_start = 1e-4, double beta_end = 2e-2);

    int T() const { return T_; }
    double beta(int t) const { return beta_[check(t)]; }
    double alpha_bar(int t) const { return abar_[check(t)]; }
    double sqrt_alpha_bar(int t) const { return sqrt_abar_[check(t)]; }
    double sqrt_one_minus_alpha_bar(int t) const { return sqrt_1m_abar_[check(t)]; }

    /// Evenly strided descending subsequence of `steps` timesteps ending at the
    /// first stride, e.g. T=1000, steps=50 -> 1000, 980, ..., 20.
    std::vector<int> ddim_timesteps(int steps) const;

private:
    std::size_t check(int t) const;

    int T_;
    std::vector<double> beta_, abar_, sqrt_abar_, sqrt_1m_abar_;
};

/// z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps; t must lie in [1, T].
Tensor add_noise(const Tensor& z, int t, const Tensor& eps, const NoiseSchedule& schedule);
/// Per-item timesteps: z and eps are [B,...] and t has B entries.
Tensor add_noise(const Tensor& z, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& schedule);

/// mean((eps - eps_pred)^2)
Tensor diffusion_loss(const Tensor& eps, const Tensor& eps_pred);

/// One deterministic (eta = 0) DDIM update from t to t_prev (t_prev = 0 gives
/// the clean estimate). Plain values, no graph.
std::vector<double> ddim_step(const std::vector<double>& z_t, const std::vector<double>& eps_pred, int t, int t_prev,
                              const NoiseSchedule& schedule);

}  // namespace omni
