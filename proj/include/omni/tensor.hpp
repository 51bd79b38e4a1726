// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode autodiff over row-major float64 tensors.
//
// Every differentiable op appends one node to the thread-local Tape when
// gradient tracking is on and at least one input requires a gradient.
// Tape::backward replays recorded nodes in reverse order of creation, which
// is a valid reverse topological order because inputs always exist before the
// ops that consume them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omni/errors.hpp"
#include "omni/rng.hpp"

namespace omni {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    std::uint64_t generation = 0;  // 0: leaf or untracked
    std::size_t tape_index = 0;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int axis) const;
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> values() const { return node_->value; }
    /// Mutable storage; intended for leaves (parameters, inputs) only.
    std::span<double> mutable_values() { return node_->value; }
    double item() const;
    double at(std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    /// Copy of the values with no graph history.
    Tensor detach() const;
    /// Same storage, new logical shape with equal element count.
    Tensor reshape(Shape shape) const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

class Tape {
public:
    static Tape& current();

    void record(const std::shared_ptr<detail::Node>& node);
    /// Accumulates d(root)/d(leaf) into every reachable leaf requiring grad.
    /// root must be a scalar recorded on this tape since the last clear().
    void backward(const Tensor& root);
    /// Drops every recorded node; later backward() on these outputs throws.
    void clear();

    std::size_t size() const { return nodes_.size(); }
    std::uint64_t generation() const { return generation_; }

private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
    std::uint64_t generation_ = 1;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Elementwise. Binary ops require equal shapes, or one operand with a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);

// Reductions to a single-element tensor of shape {1}.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_sq(const Tensor& x);

// a [m,k] x b [k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
// x [..., in] x w [in, out] (+ b [out])
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());
// Normalizes over the last axis; gamma, beta have shape [d].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// q [B,Lq,D], k [B,Lk,D], v [B,Lk,Dv]; key_mask (size B*Lk, 1 = keep) optional.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads = 1,
                 const std::vector<std::uint8_t>& key_mask = {});
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
// Rows of x [N,d] scaled to unit L2 norm.
Tensor normalize_rows(const Tensor& x, double eps = 1e-12);
// Mean cross-entropy of logits [N,K] against class indices.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

// Image ops over NCHW tensors.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride = 1, int padding = 0,
              const Tensor& bias = Tensor());
// kernel [Cin, Cout, k, k]; output spatial size (H-1)*stride + k - 2*padding.
Tensor conv_transpose2d(const Tensor& input, const Tensor& kernel, int stride,
                        const Tensor& bias = Tensor(), int padding = 0);
Tensor upsample_nearest(const Tensor& x, int factor);
// x [B,C,H,W] + v [B,C] broadcast over space.
Tensor add_channel(const Tensor& x, const Tensor& v);
// Per-pixel inner product over channels: x [B,K,H,W], v [B,K] -> [B,1,H,W].
Tensor channel_dot(const Tensor& x, const Tensor& v);
// [B,C,H,W] -> [B,H*W,C] and back.
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& x, int h, int w);
// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(const Tensor& x);

// Losses.
// Mean binary cross-entropy with p clamped to [1e-7, 1-1e-7].
Tensor bce_mean(const Tensor& p, const Tensor& target);
Tensor l1_mean(const Tensor& p, const Tensor& target);
// Mean of squared differences.
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace omni
