// SPDX-License-Identifier: Apache-2.0
#include "omni/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace omni::kernels {

namespace {

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
int ceil_div(int a, int b) { return -floor_div(-a, b); }

// Output columns ox with 0 <= ox*s + kx - p < w.
inline void valid_range(int kx, int s, int p, int w, int ow, int& lo, int& hi) {
    lo = std::max(0, ceil_div(p - kx, s));
    hi = std::min(ow - 1, floor_div(w - 1 + p - kx, s));
}

}  // namespace

Conv2dGeom Conv2dGeom::make(int batch, int cin, int h, int w, int cout, int kh, int kw, int stride,
                            int pad) {
    Conv2dGeom g;
    g.batch = batch;
    g.cin = cin;
    g.h = h;
    g.w = w;
    g.cout = cout;
    g.kh = kh;
    g.kw = kw;
    g.stride = stride;
    g.pad = pad;
    g.oh = (h + 2 * pad - kh) / stride + 1;
    g.ow = (w + 2 * pad - kw) / stride + 1;
    return g;
}

namespace {

// cols[(ci*kh + ky)*kw + kx][oy*ow + ox] = in[ci, oy*s+ky-p, ox*s+kx-p] (0 outside).
void im2col(const Conv2dGeom& g, const double* in, double* cols) {
    const std::size_t n = static_cast<std::size_t>(g.oh) * g.ow;
    for (int ci = 0; ci < g.cin; ++ci) {
        const double* src = in + static_cast<std::size_t>(ci) * g.h * g.w;
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                double* c = cols + ((static_cast<std::size_t>(ci) * g.kh + ky) * g.kw + kx) * n;
                int lo, hi;
                valid_range(kx, g.stride, g.pad, g.w, g.ow, lo, hi);
                for (int oy = 0; oy < g.oh; ++oy) {
                    double* crow = c + static_cast<std::size_t>(oy) * g.ow;
                    const int iy = oy * g.stride + ky - g.pad;
                    if (iy < 0 || iy >= g.h || lo > hi) {
                        std::fill(crow, crow + g.ow, 0.0);
                        continue;
                    }
                    const double* row = src + static_cast<std::size_t>(iy) * g.w;
                    std::fill(crow, crow + lo, 0.0);
                    for (int ox = lo; ox <= hi; ++ox) crow[ox] = row[ox * g.stride + kx - g.pad];
                    std::fill(crow + hi + 1, crow + g.ow, 0.0);
                }
            }
    }
}

// Adds cols back onto the image planes of channel ci (inverse scatter of im2col).
void col2im_channel(const Conv2dGeom& g, const double* cols, int ci, double* dst) {
    const std::size_t n = static_cast<std::size_t>(g.oh) * g.ow;
    for (int ky = 0; ky < g.kh; ++ky)
        for (int kx = 0; kx < g.kw; ++kx) {
            const double* c = cols + ((static_cast<std::size_t>(ci) * g.kh + ky) * g.kw + kx) * n;
            int lo, hi;
            valid_range(kx, g.stride, g.pad, g.w, g.ow, lo, hi);
            if (lo > hi) continue;
            for (int oy = 0; oy < g.oh; ++oy) {
                const int iy = oy * g.stride + ky - g.pad;
                if (iy < 0 || iy >= g.h) continue;
                double* row = dst + static_cast<std::size_t>(iy) * g.w;
                const double* crow = c + static_cast<std::size_t>(oy) * g.ow;
                for (int ox = lo; ox <= hi; ++ox) row[ox * g.stride + kx - g.pad] += crow[ox];
            }
        }
}

bool is_pointwise(const Conv2dGeom& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

inline double dot4(const double* a, const double* b, std::size_t n) {
    double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += a[i] * b[i];
        a1 += a[i + 1] * b[i + 1];
        a2 += a[i + 2] * b[i + 2];
        a3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) a0 += a[i] * b[i];
    return (a0 + a1) + (a2 + a3);
}

}  // namespace

void conv2d_forward(const Conv2dGeom& g, const double* in, const double* k, const double* bias,
                    double* out) {
    const std::size_t n = static_cast<std::size_t>(g.oh) * g.ow;
    const std::size_t kk = static_cast<std::size_t>(g.cin) * g.kh * g.kw;
    const std::size_t in_img = static_cast<std::size_t>(g.cin) * g.h * g.w;
    std::vector<double> cols(is_pointwise(g) ? 0 : kk * n);
    for (int b = 0; b < g.batch; ++b) {
        const double* c = in + b * in_img;
        if (!is_pointwise(g)) {
            im2col(g, c, cols.data());
            c = cols.data();
        }
        double* ob = out + static_cast<std::size_t>(b) * g.cout * n;
#pragma omp parallel for schedule(static)
        for (int co = 0; co < g.cout; ++co) {
            double* o = ob + static_cast<std::size_t>(co) * n;
            std::fill(o, o + n, bias ? bias[co] : 0.0);
            const double* krow = k + static_cast<std::size_t>(co) * kk;
            for (std::size_t r = 0; r < kk; ++r) {
                const double wv = krow[r];
                if (wv == 0.0) continue;
                const double* cr = c + r * n;
                for (std::size_t i = 0; i < n; ++i) o[i] += wv * cr[i];
            }
        }
    }
}

void conv2d_backward_input(const Conv2dGeom& g, const double* dout, const double* k, double* din) {
    const std::size_t n = static_cast<std::size_t>(g.oh) * g.ow;
    const std::size_t kk = static_cast<std::size_t>(g.cin) * g.kh * g.kw;
    const std::size_t taps = static_cast<std::size_t>(g.kh) * g.kw;
    const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
    std::vector<double> dcols(kk * n);
    for (int b = 0; b < g.batch; ++b) {
        const double* go = dout + static_cast<std::size_t>(b) * g.cout * n;
        double* db = din + static_cast<std::size_t>(b) * g.cin * in_plane;
        const bool direct = is_pointwise(g);
#pragma omp parallel for schedule(static)
        for (int ci = 0; ci < g.cin; ++ci) {
            // Rows of dcols owned by channel ci: its taps only, so channels never collide.
            for (std::size_t t = 0; t < taps; ++t) {
                const std::size_t r = static_cast<std::size_t>(ci) * taps + t;
                double* d = direct ? db + static_cast<std::size_t>(ci) * in_plane : dcols.data() + r * n;
                if (!direct) std::fill(d, d + n, 0.0);
                for (int co = 0; co < g.cout; ++co) {
                    const double wv = k[static_cast<std::size_t>(co) * kk + r];
                    if (wv == 0.0) continue;
                    const double* gr = go + static_cast<std::size_t>(co) * n;
                    for (std::size_t i = 0; i < n; ++i) d[i] += wv * gr[i];
                }
            }
            if (!direct) col2im_channel(g, dcols.data(), ci, db + static_cast<std::size_t>(ci) * in_plane);
        }
    }
}

void conv2d_backward_kernel(const Conv2dGeom& g, const double* dout, const double* in, double* dk) {
    const std::size_t n = static_cast<std::size_t>(g.oh) * g.ow;
    const std::size_t kk = static_cast<std::size_t>(g.cin) * g.kh * g.kw;
    const std::size_t in_img = static_cast<std::size_t>(g.cin) * g.h * g.w;
    const bool direct = is_pointwise(g);
    std::vector<double> cols(direct ? 0 : static_cast<std::size_t>(g.batch) * kk * n);
    if (!direct)
        for (int b = 0; b < g.batch; ++b) im2col(g, in + b * in_img, cols.data() + static_cast<std::size_t>(b) * kk * n);
    const double* base = direct ? in : cols.data();
#pragma omp parallel for schedule(static)
    for (int co = 0; co < g.cout; ++co) {
        double* krow = dk + static_cast<std::size_t>(co) * kk;
        for (std::size_t r = 0; r < kk; ++r) {
            double acc = 0.0;
            for (int b = 0; b < g.batch; ++b)
                acc += dot4(dout + (static_cast<std::size_t>(b) * g.cout + co) * n, base + (static_cast<std::size_t>(b) * kk + r) * n, n);
            krow[r] += acc;
        }
    }
}

void conv2d_backward_bias(const Conv2dGeom& g, const double* dout, double* dbias) {
    const std::size_t out_plane = static_cast<std::size_t>(g.oh) * g.ow;
    for (int co = 0; co < g.cout; ++co) {
        double acc = 0.0;
        for (int b = 0; b < g.batch; ++b) {
            const double* go = dout + (static_cast<std::size_t>(b) * g.cout + co) * out_plane;
            for (std::size_t i = 0; i < out_plane; ++i) acc += go[i];
        }
        dbias[co] += acc;
    }
}

void matmul_nn(int m, int k, int n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::size_t>(i) * n;
        const double* ai = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void matmul_nt(int m, int k, int n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

void matmul_tn(int m, int k, int n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
    for (int p = 0; p < k; ++p) {
        double* cp = c + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<std::size_t>(i) * k + p];
            const double* bi = b + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

void attention_forward(const AttentionGeom& g, const double* q, const double* k, const double* v,
                       const std::uint8_t* key_mask, double* probs, double* out) {
    const int dh = g.dim / g.heads;
    const int dv = g.vdim / g.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int jobs = g.batch * g.heads;
#pragma omp parallel for schedule(static)
    for (int job = 0; job < jobs; ++job) {
        const int b = job / g.heads;
        const int h = job % g.heads;
        const double* qb = q + static_cast<std::size_t>(b) * g.lq * g.dim + h * dh;
        const double* kb = k + static_cast<std::size_t>(b) * g.lk * g.dim + h * dh;
        const double* vb = v + static_cast<std::size_t>(b) * g.lk * g.vdim + h * dv;
        double* ob = out + static_cast<std::size_t>(b) * g.lq * g.vdim + h * dv;
        double* pb = probs + static_cast<std::size_t>(job) * g.lq * g.lk;
        const std::uint8_t* mask = key_mask ? key_mask + static_cast<std::size_t>(b) * g.lk : nullptr;
        for (int i = 0; i < g.lq; ++i) {
            double* p = pb + static_cast<std::size_t>(i) * g.lk;
            const double* qi = qb + static_cast<std::size_t>(i) * g.dim;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < g.lk; ++j) {
                if (mask && !mask[j]) {
                    p[j] = 0.0;
                    continue;
                }
                const double* kj = kb + static_cast<std::size_t>(j) * g.dim;
                double s = 0.0;
                for (int d = 0; d < dh; ++d) s += qi[d] * kj[d];
                p[j] = s * scale;
                mx = std::max(mx, p[j]);
            }
            double z = 0.0;
            for (int j = 0; j < g.lk; ++j) {
                if (mask && !mask[j]) continue;
                p[j] = std::exp(p[j] - mx);
                z += p[j];
            }
            const double inv = 1.0 / z;
            for (int j = 0; j < g.lk; ++j) p[j] *= inv;
            double* oi = ob + static_cast<std::size_t>(i) * g.vdim;
            for (int d = 0; d < dv; ++d) oi[d] = 0.0;
            for (int j = 0; j < g.lk; ++j) {
                const double pj = p[j];
                if (pj == 0.0) continue;
                const double* vj = vb + static_cast<std::size_t>(j) * g.vdim;
                for (int d = 0; d < dv; ++d) oi[d] += pj * vj[d];
            }
        }
    }
}

void attention_backward(const AttentionGeom& g, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk,
                        double* dv_out) {
    const int dh = g.dim / g.heads;
    const int dv = g.vdim / g.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int jobs = g.batch * g.heads;
#pragma omp parallel for schedule(static)
    for (int job = 0; job < jobs; ++job) {
        const int b = job / g.heads;
        const int h = job % g.heads;
        const double* qb = q + static_cast<std::size_t>(b) * g.lq * g.dim + h * dh;
        const double* kb = k + static_cast<std::size_t>(b) * g.lk * g.dim + h * dh;
        const double* vb = v + static_cast<std::size_t>(b) * g.lk * g.vdim + h * dv;
        const double* gb = dout + static_cast<std::size_t>(b) * g.lq * g.vdim + h * dv;
        const double* pb = probs + static_cast<std::size_t>(job) * g.lq * g.lk;
        std::vector<double> ds(g.lk);
        for (int i = 0; i < g.lq; ++i) {
            const double* p = pb + static_cast<std::size_t>(i) * g.lk;
            const double* gi = gb + static_cast<std::size_t>(i) * g.vdim;
            double dot = 0.0;
            for (int j = 0; j < g.lk; ++j) {
                const double* vj = vb + static_cast<std::size_t>(j) * g.vdim;
                double dp = 0.0;
                for (int d = 0; d < dv; ++d) dp += gi[d] * vj[d];
                ds[j] = dp;
                dot += dp * p[j];
            }
            for (int j = 0; j < g.lk; ++j) ds[j] = p[j] * (ds[j] - dot) * scale;
            if (dq) {
                double* dqi = dq + (static_cast<std::size_t>(b) * g.lq + i) * g.dim + h * dh;
                for (int j = 0; j < g.lk; ++j) {
                    if (ds[j] == 0.0) continue;
                    const double* kj = kb + static_cast<std::size_t>(j) * g.dim;
                    for (int d = 0; d < dh; ++d) dqi[d] += ds[j] * kj[d];
                }
            }
            if (dk) {
                const double* qi = qb + static_cast<std::size_t>(i) * g.dim;
                for (int j = 0; j < g.lk; ++j) {
                    if (ds[j] == 0.0) continue;
                    double* dkj = dk + (static_cast<std::size_t>(b) * g.lk + j) * g.dim + h * dh;
                    for (int d = 0; d < dh; ++d) dkj[d] += ds[j] * qi[d];
                }
            }
            if (dv_out) {
                for (int j = 0; j < g.lk; ++j) {
                    if (p[j] == 0.0) continue;
                    double* dvj = dv_out + (static_cast<std::size_t>(b) * g.lk + j) * g.vdim + h * dv;
                    for (int d = 0; d < dv; ++d) dvj[d] += p[j] * gi[d];
                }
            }
        }
    }
}

namespace reference {

void conv2d_forward(const Conv2dGeom& g, const double* in, const double* k, const double* bias,
                    double* out) {
    for (int b = 0; b < g.batch; ++b)
        for (int co = 0; co < g.cout; ++co)
            for (int oy = 0; oy < g.oh; ++oy)
                for (int ox = 0; ox < g.ow; ++ox) {
                    double acc = bias ? bias[co] : 0.0;
                    for (int ci = 0; ci < g.cin; ++ci)
                        for (int ky = 0; ky < g.kh; ++ky)
                            for (int kx = 0; kx < g.kw; ++kx) {
                                const int iy = oy * g.stride + ky - g.pad;
                                const int ix = ox * g.stride + kx - g.pad;
                                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                                acc += in[((b * g.cin + ci) * g.h + iy) * g.w + ix] *
                                       k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                            }
                    out[((b * g.cout + co) * g.oh + oy) * g.ow + ox] = acc;
                }
}

void conv2d_backward_input(const Conv2dGeom& g, const double* dout, const double* k, double* din) {
    for (int b = 0; b < g.batch; ++b)
        for (int co = 0; co < g.cout; ++co)
            for (int oy = 0; oy < g.oh; ++oy)
                for (int ox = 0; ox < g.ow; ++ox) {
                    const double go = dout[((b * g.cout + co) * g.oh + oy) * g.ow + ox];
                    for (int ci = 0; ci < g.cin; ++ci)
                        for (int ky = 0; ky < g.kh; ++ky)
                            for (int kx = 0; kx < g.kw; ++kx) {
                                const int iy = oy * g.stride + ky - g.pad;
                                const int ix = ox * g.stride + kx - g.pad;
                                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                                din[((b * g.cin + ci) * g.h + iy) * g.w + ix] +=
                                    go * k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                            }
                }
}

void conv2d_backward_kernel(const Conv2dGeom& g, const double* dout, const double* in, double* dk) {
    for (int b = 0; b < g.batch; ++b)
        for (int co = 0; co < g.cout; ++co)
            for (int oy = 0; oy < g.oh; ++oy)
                for (int ox = 0; ox < g.ow; ++ox) {
                    const double go = dout[((b * g.cout + co) * g.oh + oy) * g.ow + ox];
                    for (int ci = 0; ci < g.cin; ++ci)
                        for (int ky = 0; ky < g.kh; ++ky)
                            for (int kx = 0; kx < g.kw; ++kx) {
                                const int iy = oy * g.stride + ky - g.pad;
                                const int ix = ox * g.stride + kx - g.pad;
                                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                                dk[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] +=
                                    go * in[((b * g.cin + ci) * g.h + iy) * g.w + ix];
                            }
                }
}

void matmul_nn(int m, int k, int n, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] += acc;
        }
}

void attention_forward(const AttentionGeom& g, const double* q, const double* k, const double* v,
                       const std::uint8_t* key_mask, double* out) {
    const int dh = g.dim / g.heads;
    const int dv = g.vdim / g.heads;
    std::vector<double> s(g.lk);
    for (int b = 0; b < g.batch; ++b)
        for (int h = 0; h < g.heads; ++h)
            for (int i = 0; i < g.lq; ++i) {
                double mx = -1e300;
                for (int j = 0; j < g.lk; ++j) {
                    double acc = 0.0;
                    for (int d = 0; d < dh; ++d)
                        acc += q[(b * g.lq + i) * g.dim + h * dh + d] *
                               k[(b * g.lk + j) * g.dim + h * dh + d];
                    s[j] = acc / std::sqrt(static_cast<double>(dh));
                    if (!key_mask || key_mask[b * g.lk + j]) mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (int j = 0; j < g.lk; ++j) {
                    s[j] = (!key_mask || key_mask[b * g.lk + j]) ? std::exp(s[j] - mx) : 0.0;
                    z += s[j];
                }
                for (int d = 0; d < dv; ++d) {
                    double acc = 0.0;
                    for (int j = 0; j < g.lk; ++j)
                        acc += s[j] / z * v[(b * g.lk + j) * g.vdim + h * dv + d];
                    out[(b * g.lq + i) * g.vdim + h * dv + d] = acc;
                }
            }
}

}  // namespace reference

void set_num_workers(int n) {
#ifdef _OPENMP
    if (n >= 1) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int num_workers() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace omni::kernels
