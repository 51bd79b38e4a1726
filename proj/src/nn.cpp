// SPDX-License-Identifier: Apache-2.0
#include "omni/nn.hpp"

#include <algorithm>
#include <cmath>

namespace omni {

Tensor ParamStore::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    init.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({name, init, false});
    return init;
}

Parameter& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
}

const Parameter& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
}

void ParamStore::set_frozen(const std::string& name, bool frozen) {
    Parameter& p = get(name);
    p.frozen = frozen;
    p.tensor.set_requires_grad(!frozen);
}

void ParamStore::freeze_prefix(const std::string& prefix, bool frozen) {
    for (Parameter& p : params_)
        if (p.name.compare(0, prefix.size(), prefix) == 0) {
            p.frozen = frozen;
            p.tensor.set_requires_grad(!frozen);
        }
}

std::size_t ParamStore::count_scalars(bool trainable_only) const {
    std::size_t n = 0;
    for (const Parameter& p : params_)
        if (!trainable_only || !p.frozen) n += p.tensor.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (Parameter& p : params_) {
        if (p.frozen) {
            p.tensor.zero_grad();
            continue;
        }
        auto g = p.tensor.mutable_grad();
        std::fill(g.begin(), g.end(), 0.0);
    }
}

void ParamStore::copy_values_from(const ParamStore& other, const std::string& from_prefix,
                                  const std::string& to_prefix) {
    for (const Parameter& src : other.all()) {
        if (src.name.compare(0, from_prefix.size(), from_prefix) != 0) continue;
        const std::string dst_name = to_prefix + src.name.substr(from_prefix.size());
        Parameter& dst = get(dst_name);
        if (dst.tensor.shape() != src.tensor.shape())
            throw ShapeError("copy " + src.name + " -> " + dst_name + ": " + shape_str(src.tensor.shape()) +
                             " vs " + shape_str(dst.tensor.shape()));
        auto v = dst.tensor.mutable_values();
        std::copy(src.tensor.values().begin(), src.tensor.values().end(), v.begin());
    }
}

Tensor init_tensor(Shape shape, Init init, int fan_in, Rng& rng) {
    switch (init) {
        case Init::Zero:
            return Tensor::zeros(std::move(shape));
        case Init::Normal002:
            return Tensor::randn(std::move(shape), rng, 0.02);
        case Init::HeNormal:
        default:
            return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / std::max(1, fan_in)));
    }
}

Linear Linear::make(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, Init init) {
    Linear l;
    l.w = ps.add(name + ".weight", init_tensor({in, out}, init, in, rng));
    l.b = ps.add(name + ".bias", Tensor::zeros({out}));
    return l;
}

Conv2d Conv2d::make(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride, int pad,
                    Rng& rng, Init init) {
    Conv2d c;
    c.w = ps.add(name + ".kernel", init_tensor({cout, cin, k, k}, init, cin * k * k, rng));
    c.b = ps.add(name + ".bias", Tensor::zeros({cout}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

ConvTranspose2d ConvTranspose2d::make(ParamStore& ps, const std::string& name, int cin, int cout, int k,
                                      int stride, int pad, Rng& rng, Init init) {
    ConvTranspose2d c;
    // Each output pixel sees about cin*(k/stride)^2 taps.
    const int taps = std::max(1, cin * (k / std::max(1, stride)) * (k / std::max(1, stride)));
    c.w = ps.add(name + ".kernel", init_tensor({cin, cout, k, k}, init, taps, rng));
    c.b = ps.add(name + ".bias", Tensor::zeros({cout}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

LayerNorm LayerNorm::make(ParamStore& ps, const std::string& name, int d) {
    LayerNorm n;
    n.gamma = ps.add(name + ".gamma", Tensor::full({d}, 1.0));
    n.beta = ps.add(name + ".beta", Tensor::zeros({d}));
    return n;
}

}  // namespace omni
