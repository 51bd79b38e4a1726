// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "omni/rng.hpp"
#include "omni/tensor.hpp"

namespace omni {

struct Parameter {
    std::string name;
    Tensor tensor;
    bool frozen = false;
};

/// Named parameters in insertion order.
class ParamStore {
public:
    /// Registers a trainable parameter. Names must be unique.
    Tensor add(const std::string& name, Tensor init);
    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    Tensor tensor(const std::string& name) const { return get(name).tensor; }

    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }

    void set_frozen(const std::string& name, bool frozen);
    /// Freezes (or thaws) every parameter whose name starts with prefix.
    void freeze_prefix(const std::string& prefix, bool frozen = true);

    std::size_t count_scalars(bool trainable_only = false) const;
    /// Sets every trainable gradient to zero, allocating as needed.
    void zero_grad();
    /// Copies values of parameters present in both stores, checking shapes.
    void copy_values_from(const ParamStore& other, const std::string& from_prefix,
                          const std::string& to_prefix);

private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

enum class Init { HeNormal, Zero, Normal002 };

Tensor init_tensor(Shape shape, Init init, int fan_in, Rng& rng);

struct Linear {
    Tensor w, b;
    static Linear make(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                       Init init = Init::HeNormal);
    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct Conv2d {
    Tensor w, b;
    int stride = 1, pad = 0;
    static Conv2d make(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride,
                       int pad, Rng& rng, Init init = Init::HeNormal);
    Tensor operator()(const Tensor& x) const { return conv2d(x, w, stride, pad, b); }
};

struct ConvTranspose2d {
    Tensor w, b;
    int stride = 1, pad = 0;
    static ConvTranspose2d make(ParamStore& ps, const std::string& name, int cin, int cout, int k,
                                int stride, int pad, Rng& rng, Init init = Init::HeNormal);
    Tensor operator()(const Tensor& x) const { return conv_transpose2d(x, w, stride, b, pad); }
};

struct LayerNorm {
    Tensor gamma, beta;
    static LayerNorm make(ParamStore& ps, const std::string& name, int d);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

}  // namespace omni
