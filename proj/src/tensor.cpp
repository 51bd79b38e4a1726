// SPDX-License-Identifier: Apache-2.0
#include "omni/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "omni/kernels.hpp"

namespace omni {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;

void check_shape(const Shape& shape) {
    for (int d : shape)
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
}

NodePtr new_node(Shape shape, std::vector<double> values) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return n;
}

// Creates an op output; records it only when some parent needs a gradient.
Tensor make_op(Shape shape, std::vector<double> values, std::initializer_list<Tensor> parents,
               std::function<void(Node&)> backward) {
    NodePtr n = new_node(std::move(shape), std::move(values));
    bool track = false;
    if (t_grad_enabled)
        for (const Tensor& p : parents)
            if (p.defined() && p.requires_grad()) track = true;
    if (track) {
        n->requires_grad = true;
        for (const Tensor& p : parents) n->parents.push_back(p.defined() ? p.node() : nullptr);
        n->backward = std::move(backward);
        Tape::current().record(n);
    }
    return Tensor(n);
}

Tensor make_op_vec(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                   std::function<void(Node&)> backward) {
    NodePtr n = new_node(std::move(shape), std::move(values));
    bool track = false;
    if (t_grad_enabled)
        for (const Tensor& p : parents)
            if (p.requires_grad()) track = true;
    if (track) {
        n->requires_grad = true;
        for (const Tensor& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
        Tape::current().record(n);
    }
    return Tensor(n);
}

inline bool wants(const NodePtr& p) { return p && p->requires_grad; }

void need_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

Tensor unary(const Tensor& x, double (*f)(double), double (*df)(double x, double y)) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return make_op(x.shape(), std::move(out), {x}, [df](Node& self) {
        const NodePtr& p = self.parents[0];
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * df(p->value[i], self.value[i]);
    });
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
    const bool same = a.shape() == b.shape();
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!same && !a_scalar && !b_scalar)
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const Shape shape = (same || b_scalar) ? a.shape() : b.shape();
    const std::size_t n = numel(shape);
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t sa = a.numel() == n ? 1 : 0;
    const std::size_t sb = b.numel() == n ? 1 : 0;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[i * sa];
        const double y = bv[i * sb];
        out[i] = op == BinOp::Add ? x + y : op == BinOp::Sub ? x - y : x * y;
    }
    return make_op(shape, std::move(out), {a, b}, [op, sa, sb](Node& self) {
        const NodePtr& pa = self.parents[0];
        const NodePtr& pb = self.parents[1];
        const std::size_t n = self.grad.size();
        if (wants(pa)) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                const double d = op == BinOp::Mul ? pb->value[i * sb] : 1.0;
                g[i * sa] += self.grad[i] * d;
            }
        }
        if (wants(pb)) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                const double d = op == BinOp::Mul ? pa->value[i * sa] : op == BinOp::Sub ? -1.0 : 1.0;
                g[i * sb] += self.grad[i] * d;
            }
        }
    });
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    const std::size_t n = omni::numel(shape);
    auto node = new_node(std::move(shape), std::vector<double>(n, value));
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (omni::numel(shape) != values.size())
        throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                         std::to_string(omni::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    auto node = new_node(std::move(shape), std::move(values));
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

Tensor Tensor::randn(Shape shape, Rng& rng, double scale, bool requires_grad) {
    check_shape(shape);
    std::vector<double> v(omni::numel(shape));
    for (double& x : v) x = rng.normal() * scale;
    return from(std::move(shape), std::move(v), requires_grad);
}

int Tensor::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value); }

Tensor Tensor::reshape(Shape shape) const {
    check_shape(shape);
    if (omni::numel(shape) != numel())
        throw ShapeError("reshape " + shape_str(this->shape()) + " -> " + shape_str(shape));
    return make_op(std::move(shape), node_->value, {*this}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------- Tape

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(const std::shared_ptr<Node>& node) {
    node->generation = generation_;
    node->tape_index = nodes_.size();
    nodes_.push_back(node);
}

void Tape::backward(const Tensor& root) {
    if (!root.defined()) throw ContractError("backward on undefined tensor");
    if (root.numel() != 1)
        throw ContractError("backward requires a scalar output, got " + shape_str(root.shape()));
    const NodePtr& n = root.node();
    if (!n->requires_grad) return;
    if (n->generation == 0) {
        n->grad_buffer()[0] += 1.0;
        return;
    }
    if (n->generation != generation_ || n->tape_index >= nodes_.size() || nodes_[n->tape_index] != n)
        throw ContractError("backward on a stale output: its tape was cleared");
    n->grad_buffer()[0] += 1.0;
    for (std::size_t i = n->tape_index + 1; i-- > 0;) {
        Node& node = *nodes_[i];
        if (node.grad.empty()) continue;
        node.backward(node);
        std::vector<double>().swap(node.grad);
    }
}

void Tape::clear() {
    for (auto& n : nodes_) {
        n->parents.clear();
        n->backward = nullptr;
    }
    nodes_.clear();
    ++generation_;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double& x : out) x *= s;
    return make_op(a.shape(), std::move(out), {a}, [s](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double& x : out) x += s;
    return make_op(a.shape(), std::move(out), {a}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
    return unary(
        x,
        [](double v) {
            const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
            return v * s;
        },
        [](double v, double) {
            const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
            return s * (1.0 + v * (1.0 - s));
        });
}

Tensor relu(const Tensor& x) {
    return unary(
        x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
    return unary(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    const auto v = x.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!(v[i] > 0.0))
            throw DomainError("log: non-positive input " + std::to_string(v[i]) + " at index " +
                              std::to_string(i));
    return unary(
        x, [](double a) { return std::log(a); }, [](double a, double) { return 1.0 / a; });
}

Tensor sqrt(const Tensor& x) {
    const auto v = x.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!(v[i] > 0.0))
            throw DomainError("sqrt: non-positive input " + std::to_string(v[i]) + " at index " +
                              std::to_string(i));
    return unary(
        x, [](double a) { return std::sqrt(a); }, [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& x) {
    return unary(
        x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_op({1}, {s}, {x}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    return make_op({1}, {s * inv}, {x}, [inv](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (double& v : g) v += self.grad[0] * inv;
    });
}

Tensor sum_sq(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v * v;
    return make_op({1}, {s}, {x}, [](Node& self) {
        const NodePtr& p = self.parents[0];
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p->value[i] * self.grad[0];
    });
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    need_rank(a, 2, "matmul");
    need_rank(b, 2, "matmul");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    kernels::matmul_nn(m, k, n, a.values().data(), b.values().data(), out.data());
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        const NodePtr& pa = self.parents[0];
        const NodePtr& pb = self.parents[1];
        if (wants(pa))
            kernels::matmul_nt(m, n, k, self.grad.data(), pb->value.data(), pa->grad_buffer().data());
        if (wants(pb))
            kernels::matmul_tn(m, k, n, pa->value.data(), self.grad.data(), pb->grad_buffer().data());
    });
}

Tensor transpose2d(const Tensor& a) {
    need_rank(a, 2, "transpose2d");
    const int m = a.dim(0), n = a.dim(1);
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n + j];
    return make_op({n, m}, std::move(out), {a}, [m, n](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                g[static_cast<std::size_t>(i) * n + j] += self.grad[static_cast<std::size_t>(j) * m + i];
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    need_rank(w, 2, "linear");
    const int in = w.dim(0), outd = w.dim(1);
    if (x.shape().back() != in)
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
    if (b.defined() && (b.numel() != static_cast<std::size_t>(outd)))
        throw ShapeError("linear: bias " + shape_str(b.shape()) + " for output width " + std::to_string(outd));
    const int rows = static_cast<int>(x.numel() / in);
    std::vector<double> out(static_cast<std::size_t>(rows) * outd, 0.0);
    if (b.defined()) {
        const auto bv = b.values();
        for (int r = 0; r < rows; ++r)
            std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(r) * outd);
    }
    kernels::matmul_nn(rows, in, outd, x.values().data(), w.values().data(), out.data());
    Shape shape = x.shape();
    shape.back() = outd;
    return make_op(std::move(shape), std::move(out), {x, w, b}, [rows, in, outd](Node& self) {
        const NodePtr& px = self.parents[0];
        const NodePtr& pw = self.parents[1];
        const NodePtr& pb = self.parents[2];
        if (wants(px))
            kernels::matmul_nt(rows, outd, in, self.grad.data(), pw->value.data(), px->grad_buffer().data());
        if (wants(pw))
            kernels::matmul_tn(rows, in, outd, px->value.data(), self.grad.data(), pw->grad_buffer().data());
        if (wants(pb)) {
            auto& g = pb->grad_buffer();
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < outd; ++j) g[j] += self.grad[static_cast<std::size_t>(r) * outd + j];
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int d = x.shape().back();
    if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d))
        throw ShapeError("layer_norm: affine params must have length " + std::to_string(d));
    const std::size_t rows = x.numel() / d;
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    std::vector<double> out(xv.size()), xhat(xv.size()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (int i = 0; i < d; ++i) mu += xr[i];
        mu /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= d;
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i) {
            const double h = (xr[i] - mu) * rstd[r];
            xhat[r * d + i] = h;
            out[r * d + i] = h * gv[i] + bv[i];
        }
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       const NodePtr& px = self.parents[0];
                       const NodePtr& pg = self.parents[1];
                       const NodePtr& pb = self.parents[2];
                       const auto& gam = pg->value;
                       std::vector<double> dh(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* gy = self.grad.data() + r * d;
                           const double* h = xhat.data() + r * d;
                           if (wants(pg)) {
                               auto& gg = pg->grad_buffer();
                               for (int i = 0; i < d; ++i) gg[i] += gy[i] * h[i];
                           }
                           if (wants(pb)) {
                               auto& gb = pb->grad_buffer();
                               for (int i = 0; i < d; ++i) gb[i] += gy[i];
                           }
                           if (wants(px)) {
                               double s1 = 0.0, s2 = 0.0;
                               for (int i = 0; i < d; ++i) {
                                   dh[i] = gy[i] * gam[i];
                                   s1 += dh[i];
                                   s2 += dh[i] * h[i];
                               }
                               auto& gx = px->grad_buffer();
                               const double c = rstd[r] / d;
                               for (int i = 0; i < d; ++i) gx[r * d + i] += c * (d * dh[i] - s1 - h[i] * s2);
                           }
                       }
                   });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 const std::vector<std::uint8_t>& key_mask) {
    need_rank(q, 3, "attention(q)");
    need_rank(k, 3, "attention(k)");
    need_rank(v, 3, "attention(v)");
    kernels::AttentionGeom g;
    g.batch = q.dim(0);
    g.lq = q.dim(1);
    g.dim = q.dim(2);
    g.lk = k.dim(1);
    g.vdim = v.dim(2);
    g.heads = heads;
    if (k.dim(0) != g.batch || v.dim(0) != g.batch || k.dim(2) != g.dim || v.dim(1) != g.lk)
        throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    if (heads < 1 || g.dim % heads != 0 || g.vdim % heads != 0)
        throw ShapeError("attention: widths not divisible by head count " + std::to_string(heads));
    if (!key_mask.empty() && key_mask.size() != static_cast<std::size_t>(g.batch) * g.lk)
        throw ShapeError("attention: key mask must have B*Lk entries");
    if (!key_mask.empty())
        for (int b = 0; b < g.batch; ++b) {
            bool any = false;
            for (int j = 0; j < g.lk; ++j) any = any || key_mask[static_cast<std::size_t>(b) * g.lk + j];
            if (!any) throw ContractError("attention: key mask hides every key of batch item " + std::to_string(b));
        }
    std::vector<double> probs(static_cast<std::size_t>(g.batch) * g.heads * g.lq * g.lk);
    std::vector<double> out(static_cast<std::size_t>(g.batch) * g.lq * g.vdim);
    kernels::attention_forward(g, q.values().data(), k.values().data(), v.values().data(),
                               key_mask.empty() ? nullptr : key_mask.data(), probs.data(), out.data());
    return make_op({g.batch, g.lq, g.vdim}, std::move(out), {q, k, v},
                   [g, probs = std::move(probs)](Node& self) {
                       const NodePtr& pq = self.parents[0];
                       const NodePtr& pk = self.parents[1];
                       const NodePtr& pv = self.parents[2];
                       kernels::attention_backward(g, pq->value.data(), pk->value.data(), pv->value.data(),
                                                   probs.data(), self.grad.data(),
                                                   wants(pq) ? pq->grad_buffer().data() : nullptr,
                                                   wants(pk) ? pk->grad_buffer().data() : nullptr,
                                                   wants(pv) ? pv->grad_buffer().data() : nullptr);
                   });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const int rank = parts[0].rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank)
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(parts[0].shape()));
    Shape shape = parts[0].shape();
    shape[axis] = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < rank; ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()));
        shape[axis] += p.dim(axis);
    }
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    for (int i = axis + 1; i < rank; ++i) inner *= shape[i];
    std::vector<std::size_t> chunk(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) chunk[p] = parts[p].dim(axis) * inner;
    const std::size_t row = static_cast<std::size_t>(shape[axis]) * inner;
    std::vector<double> out(numel(shape));
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = o * row;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const double* src = parts[p].values().data() + o * chunk[p];
            std::copy(src, src + chunk[p], out.begin() + static_cast<std::ptrdiff_t>(off));
            off += chunk[p];
        }
    }
    return make_op_vec(std::move(shape), std::move(out), parts, [outer, row, chunk](Node& self) {
        for (std::size_t o = 0; o < outer; ++o) {
            std::size_t off = o * row;
            for (std::size_t p = 0; p < chunk.size(); ++p) {
                const NodePtr& pp = self.parents[p];
                if (wants(pp)) {
                    auto& g = pp->grad_buffer();
                    for (std::size_t i = 0; i < chunk[p]; ++i) g[o * chunk[p] + i] += self.grad[off + i];
                }
                off += chunk[p];
            }
        }
    });
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
    const int rank = x.rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError("slice: axis out of range for " + shape_str(x.shape()));
    if (start < 0 || length < 1 || start + length > x.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") outside " + shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
    const std::size_t src_row = static_cast<std::size_t>(x.dim(axis)) * inner;
    const std::size_t dst_row = static_cast<std::size_t>(length) * inner;
    const std::size_t first = static_cast<std::size_t>(start) * inner;
    Shape shape = x.shape();
    shape[axis] = length;
    std::vector<double> out(outer * dst_row);
    const auto xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(xv.begin() + static_cast<std::ptrdiff_t>(o * src_row + first),
                  xv.begin() + static_cast<std::ptrdiff_t>(o * src_row + first + dst_row),
                  out.begin() + static_cast<std::ptrdiff_t>(o * dst_row));
    return make_op(std::move(shape), std::move(out), {x}, [outer, src_row, dst_row, first](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < dst_row; ++i) g[o * src_row + first + i] += self.grad[o * dst_row + i];
    });
}

Tensor normalize_rows(const Tensor& x, double eps) {
    need_rank(x, 2, "normalize_rows");
    const int n = x.dim(0), d = x.dim(1);
    const auto xv = x.values();
    std::vector<double> out(xv.size()), norms(n);
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += xv[r * d + i] * xv[r * d + i];
        norms[r] = std::sqrt(s + eps);
        for (int i = 0; i < d; ++i) out[r * d + i] = xv[r * d + i] / norms[r];
    }
    return make_op(x.shape(), std::move(out), {x}, [n, d, norms = std::move(norms)](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int r = 0; r < n; ++r) {
            double dot = 0.0;
            for (int i = 0; i < d; ++i) dot += self.grad[r * d + i] * self.value[r * d + i];
            for (int i = 0; i < d; ++i)
                g[r * d + i] += (self.grad[r * d + i] - self.value[r * d + i] * dot) / norms[r];
        }
    });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    need_rank(logits, 2, "cross_entropy_rows");
    const int n = logits.dim(0), k = logits.dim(1);
    if (targets.size() != static_cast<std::size_t>(n))
        throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
    const auto lv = logits.values();
    std::vector<double> soft(lv.size());
    double loss = 0.0;
    for (int r = 0; r < n; ++r) {
        if (targets[r] < 0 || targets[r] >= k) throw ContractError("cross_entropy_rows: target out of range");
        double mx = lv[r * k];
        for (int j = 1; j < k; ++j) mx = std::max(mx, lv[r * k + j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(lv[r * k + j] - mx);
        for (int j = 0; j < k; ++j) soft[r * k + j] = std::exp(lv[r * k + j] - mx) / z;
        loss -= lv[r * k + targets[r]] - mx - std::log(z);
    }
    loss /= n;
    return make_op({1}, {loss}, {logits}, [n, k, targets, soft = std::move(soft)](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double s = self.grad[0] / n;
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < k; ++j)
                g[r * k + j] += s * (soft[r * k + j] - (j == targets[r] ? 1.0 : 0.0));
    });
}

// ---------------------------------------------------------------- image ops

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding, const Tensor& bias) {
    need_rank(input, 4, "conv2d(input)");
    need_rank(kernel, 4, "conv2d(kernel)");
    if (kernel.dim(1) != input.dim(1))
        throw ShapeError("conv2d: input channels of " + shape_str(input.shape()) +
                         " do not match kernel " + shape_str(kernel.shape()));
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    if (padding < 0) throw ContractError("conv2d: negative padding");
    const int h = input.dim(2), w = input.dim(3);
    if (kernel.dim(2) > h + 2 * padding || kernel.dim(3) > w + 2 * padding)
        throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                         shape_str(input.shape()));
    if (bias.defined() && bias.numel() != static_cast<std::size_t>(kernel.dim(0)))
        throw ShapeError("conv2d: bias length must equal output channels");
    const auto g = kernels::Conv2dGeom::make(input.dim(0), input.dim(1), h, w, kernel.dim(0), kernel.dim(2),
                                             kernel.dim(3), stride, padding);
    std::vector<double> out(static_cast<std::size_t>(g.batch) * g.cout * g.oh * g.ow);
    kernels::conv2d_forward(g, input.values().data(), kernel.values().data(),
                            bias.defined() ? bias.values().data() : nullptr, out.data());
    return make_op({g.batch, g.cout, g.oh, g.ow}, std::move(out), {input, kernel, bias}, [g](Node& self) {
        const NodePtr& px = self.parents[0];
        const NodePtr& pk = self.parents[1];
        const NodePtr& pb = self.parents[2];
        if (wants(px)) kernels::conv2d_backward_input(g, self.grad.data(), pk->value.data(), px->grad_buffer().data());
        if (wants(pk)) kernels::conv2d_backward_kernel(g, self.grad.data(), px->value.data(), pk->grad_buffer().data());
        if (wants(pb)) kernels::conv2d_backward_bias(g, self.grad.data(), pb->grad_buffer().data());
    });
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& kernel, int stride, const Tensor& bias, int padding) {
    need_rank(input, 4, "conv_transpose2d(input)");
    need_rank(kernel, 4, "conv_transpose2d(kernel)");
    if (kernel.dim(0) != input.dim(1))
        throw ShapeError("conv_transpose2d: input channels of " + shape_str(input.shape()) +
                         " do not match kernel " + shape_str(kernel.shape()));
    if (stride < 1) throw ContractError("conv_transpose2d: stride must be >= 1");
    const int b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int cout = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    const int oh = (h - 1) * stride + kh - 2 * padding;
    const int ow = (w - 1) * stride + kw - 2 * padding;
    if (oh < 1 || ow < 1) throw ShapeError("conv_transpose2d: empty output");
    if (bias.defined() && bias.numel() != static_cast<std::size_t>(cout))
        throw ShapeError("conv_transpose2d: bias length must equal output channels");
    // The adjoint conv maps the output space back onto the input.
    const auto g = kernels::Conv2dGeom::make(b, cout, oh, ow, cin, kh, kw, stride, padding);
    if (g.oh != h || g.ow != w) throw ShapeError("conv_transpose2d: inconsistent geometry");
    std::vector<double> out(static_cast<std::size_t>(b) * cout * oh * ow, 0.0);
    kernels::conv2d_backward_input(g, input.values().data(), kernel.values().data(), out.data());
    if (bias.defined()) {
        const auto bv = bias.values();
        const std::size_t plane = static_cast<std::size_t>(oh) * ow;
        for (int i = 0; i < b; ++i)
            for (int c = 0; c < cout; ++c) {
                double* o = out.data() + (static_cast<std::size_t>(i) * cout + c) * plane;
                for (std::size_t p = 0; p < plane; ++p) o[p] += bv[c];
            }
    }
    return make_op({b, cout, oh, ow}, std::move(out), {input, kernel, bias}, [g](Node& self) {
        const NodePtr& px = self.parents[0];
        const NodePtr& pk = self.parents[1];
        const NodePtr& pb = self.parents[2];
        if (wants(px)) {
            std::vector<double> tmp(px->value.size());
            kernels::conv2d_forward(g, self.grad.data(), pk->value.data(), nullptr, tmp.data());
            auto& gx = px->grad_buffer();
            for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
        }
        if (wants(pk)) kernels::conv2d_backward_kernel(g, px->value.data(), self.grad.data(), pk->grad_buffer().data());
        if (wants(pb)) {
            auto& gb = pb->grad_buffer();
            const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
            for (int i = 0; i < g.batch; ++i)
                for (int c = 0; c < g.cin; ++c) {
                    const double* s = self.grad.data() + (static_cast<std::size_t>(i) * g.cin + c) * plane;
                    double acc = 0.0;
                    for (std::size_t p = 0; p < plane; ++p) acc += s[p];
                    gb[c] += acc;
                }
        }
    });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
    need_rank(x, 4, "upsample_nearest");
    if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1");
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = h * factor, ow = w * factor;
    const auto xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(b) * c * oh * ow);
    const std::size_t planes = static_cast<std::size_t>(b) * c;
    for (std::size_t p = 0; p < planes; ++p)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                out[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
    return make_op({b, c, oh, ow}, std::move(out), {x}, [planes, h, w, oh, ow, factor](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx)
                    g[(p * h + y / factor) * w + xx / factor] += self.grad[(p * oh + y) * ow + xx];
    });
}

Tensor add_channel(const Tensor& x, const Tensor& v) {
    need_rank(x, 4, "add_channel");
    const int b = x.dim(0), c = x.dim(1);
    if (v.numel() != static_cast<std::size_t>(b) * c)
        throw ShapeError("add_channel: vector " + shape_str(v.shape()) + " for feature " + shape_str(x.shape()));
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    std::vector<double> out(x.values().begin(), x.values().end());
    const auto vv = v.values();
    for (std::size_t bc = 0; bc < static_cast<std::size_t>(b) * c; ++bc)
        for (std::size_t p = 0; p < plane; ++p) out[bc * plane + p] += vv[bc];
    return make_op(x.shape(), std::move(out), {x, v}, [plane](Node& self) {
        const NodePtr& px = self.parents[0];
        const NodePtr& pv = self.parents[1];
        if (wants(px)) {
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(pv)) {
            auto& g = pv->grad_buffer();
            for (std::size_t bc = 0; bc < g.size(); ++bc) {
                double acc = 0.0;
                for (std::size_t p = 0; p < plane; ++p) acc += self.grad[bc * plane + p];
                g[bc] += acc;
            }
        }
    });
}

Tensor channel_dot(const Tensor& x, const Tensor& v) {
    need_rank(x, 4, "channel_dot");
    const int b = x.dim(0), k = x.dim(1);
    if (v.numel() != static_cast<std::size_t>(b) * k)
        throw ContractError("channel_dot: task vector " + shape_str(v.shape()) + " does not match feature channels " +
                            std::to_string(k) + " for batch " + std::to_string(b));
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const auto xv = x.values();
    const auto vv = v.values();
    std::vector<double> out(static_cast<std::size_t>(b) * plane, 0.0);
    for (int i = 0; i < b; ++i)
        for (int c = 0; c < k; ++c) {
            const double wv = vv[static_cast<std::size_t>(i) * k + c];
            const double* src = xv.data() + (static_cast<std::size_t>(i) * k + c) * plane;
            double* o = out.data() + static_cast<std::size_t>(i) * plane;
            for (std::size_t p = 0; p < plane; ++p) o[p] += wv * src[p];
        }
    return make_op({b, 1, x.dim(2), x.dim(3)}, std::move(out), {x, v}, [b, k, plane](Node& self) {
        const NodePtr& px = self.parents[0];
        const NodePtr& pv = self.parents[1];
        for (int i = 0; i < b; ++i) {
            const double* gy = self.grad.data() + static_cast<std::size_t>(i) * plane;
            for (int c = 0; c < k; ++c) {
                const std::size_t off = (static_cast<std::size_t>(i) * k + c) * plane;
                if (wants(px)) {
                    auto& g = px->grad_buffer();
                    const double wv = pv->value[static_cast<std::size_t>(i) * k + c];
                    for (std::size_t p = 0; p < plane; ++p) g[off + p] += gy[p] * wv;
                }
                if (wants(pv)) {
                    double acc = 0.0;
                    for (std::size_t p = 0; p < plane; ++p) acc += gy[p] * px->value[off + p];
                    pv->grad_buffer()[static_cast<std::size_t>(i) * k + c] += acc;
                }
            }
        }
    });
}

Tensor to_tokens(const Tensor& x) {
    need_rank(x, 4, "to_tokens");
    const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (int i = 0; i < b; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                out[(static_cast<std::size_t>(i) * hw + p) * c + ch] = xv[(static_cast<std::size_t>(i) * c + ch) * hw + p];
    return make_op({b, hw, c}, std::move(out), {x}, [b, c, hw](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int i = 0; i < b; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    g[(static_cast<std::size_t>(i) * c + ch) * hw + p] += self.grad[(static_cast<std::size_t>(i) * hw + p) * c + ch];
    });
}

Tensor from_tokens(const Tensor& x, int h, int w) {
    need_rank(x, 3, "from_tokens");
    const int b = x.dim(0), hw = x.dim(1), c = x.dim(2);
    if (hw != h * w) throw ShapeError("from_tokens: " + std::to_string(hw) + " tokens for " +
                                      std::to_string(h) + "x" + std::to_string(w));
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (int i = 0; i < b; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                out[(static_cast<std::size_t>(i) * c + ch) * hw + p] = xv[(static_cast<std::size_t>(i) * hw + p) * c + ch];
    return make_op({b, c, h, w}, std::move(out), {x}, [b, c, hw](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (int i = 0; i < b; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    g[(static_cast<std::size_t>(i) * hw + p) * c + ch] += self.grad[(static_cast<std::size_t>(i) * c + ch) * hw + p];
    });
}

Tensor global_avg_pool(const Tensor& x) {
    need_rank(x, 4, "global_avg_pool");
    const int b = x.dim(0), c = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const auto xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(b) * c);
    for (std::size_t bc = 0; bc < out.size(); ++bc) {
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) acc += xv[bc * plane + p];
        out[bc] = acc / static_cast<double>(plane);
    }
    return make_op({b, c}, std::move(out), {x}, [plane](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double inv = 1.0 / static_cast<double>(plane);
        for (std::size_t bc = 0; bc < self.grad.size(); ++bc)
            for (std::size_t p = 0; p < plane; ++p) g[bc * plane + p] += self.grad[bc] * inv;
    });
}

// ---------------------------------------------------------------- losses

namespace {
constexpr double kProbLo = 1e-7;
constexpr double kProbHi = 1.0 - 1e-7;

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
}  // namespace

Tensor bce_mean(const Tensor& p, const Tensor& target) {
    same_shape(p, target, "bce_mean");
    const auto pv = p.values();
    const auto tv = target.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double q = std::clamp(pv[i], kProbLo, kProbHi);
        acc -= tv[i] * std::log(q) + (1.0 - tv[i]) * std::log(1.0 - q);
    }
    const double inv = 1.0 / static_cast<double>(pv.size());
    return make_op({1}, {acc * inv}, {p, target}, [inv](Node& self) {
        const NodePtr& pp = self.parents[0];
        const NodePtr& pt = self.parents[1];
        const double s = self.grad[0] * inv;
        for (std::size_t i = 0; i < pp->value.size(); ++i) {
            const double raw = pp->value[i];
            const double q = std::clamp(raw, kProbLo, kProbHi);
            const double t = pt->value[i];
            if (wants(pp) && raw > kProbLo && raw < kProbHi)
                pp->grad_buffer()[i] += s * (-t / q + (1.0 - t) / (1.0 - q));
            if (wants(pt)) pt->grad_buffer()[i] += s * (-std::log(q) + std::log(1.0 - q));
        }
    });
}

Tensor l1_mean(const Tensor& p, const Tensor& target) {
    same_shape(p, target, "l1_mean");
    const auto pv = p.values();
    const auto tv = target.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) acc += std::fabs(pv[i] - tv[i]);
    const double inv = 1.0 / static_cast<double>(pv.size());
    return make_op({1}, {acc * inv}, {p, target}, [inv](Node& self) {
        const NodePtr& pp = self.parents[0];
        const NodePtr& pt = self.parents[1];
        const double s = self.grad[0] * inv;
        for (std::size_t i = 0; i < pp->value.size(); ++i) {
            const double d = pp->value[i] - pt->value[i];
            const double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
            if (wants(pp)) pp->grad_buffer()[i] += s * sg;
            if (wants(pt)) pt->grad_buffer()[i] -= s * sg;
        }
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "mse");
    const auto av = a.values();
    const auto bv = b.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double inv = 1.0 / static_cast<double>(av.size());
    return make_op({1}, {acc * inv}, {a, b}, [inv](Node& self) {
        const NodePtr& pa = self.parents[0];
        const NodePtr& pb = self.parents[1];
        const double s = 2.0 * self.grad[0] * inv;
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            const double d = pa->value[i] - pb->value[i];
            if (wants(pa)) pa->grad_buffer()[i] += s * d;
            if (wants(pb)) pb->grad_buffer()[i] -= s * d;
        }
    });
}

}  // namespace omni
