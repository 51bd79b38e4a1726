// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "omni/nn.hpp"

namespace omni {

/// Plain or heavy-ball SGD. Frozen parameters are skipped; a trainable one
/// without a gradient buffer is a contract error.
class Sgd {
public:
    explicit Sgd(double momentum = 0.0, double weight_decay = 0.0)
        : momentum_(momentum), weight_decay_(weight_decay) {}
    void step(ParamStore& params, double lr);

private:
    double momentum_, weight_decay_;
    std::map<std::string, std::vector<double>> velocity_;
};

void sgd_step(ParamStore& params, double lr);

class AdamW {
public:
    explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
        : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}
    void step(ParamStore& params, double lr);
    long steps_taken(const std::string& name) const;

private:
    struct Moments {
        std::vector<double> m, v;
        long t = 0;
    };
    double b1_, b2_, eps_, wd_;
    std::map<std::string, Moments> state_;
};

/// lr0 decayed polynomially to floor_lr at step == total, constant after.
double poly_decay(double lr0, long step, long total, double floor_lr, double power = 1.0);

}  // namespace omni
