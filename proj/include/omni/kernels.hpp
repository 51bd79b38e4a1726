// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense inner loops behind the tensor ops. Every kernel in this namespace is
// OpenMP-parallel over disjoint output blocks and keeps a fixed reduction order
// per output element, so results are bitwise identical for any thread count.
// `kernels::reference` holds the naive serial versions used as test oracles
// and as the baseline in bench/.

#include <cstddef>
#include <cstdint>

namespace omni::kernels {

struct Conv2dGeom {
    int batch = 1;
    int cin = 1, h = 1, w = 1;
    int cout = 1, kh = 1, kw = 1;
    int stride = 1, pad = 0;
    int oh = 1, ow = 1;

    static Conv2dGeom make(int batch, int cin, int h, int w, int cout, int kh, int kw, int stride,
                           int pad);
};

// out[b,co,oy,ox] = bias[co] + sum_{ci,ky,kx} in[b,ci,oy*s+ky-p,ox*s+kx-p] * k[co,ci,ky,kx]
// bias may be null.
void conv2d_forward(const Conv2dGeom& g, const double* in, const double* k, const double* bias,
                    double* out);
// din += conv2d^T(dout); also the forward of a transposed convolution.
void conv2d_backward_input(const Conv2dGeom& g, const double* dout, const double* k, double* din);
// dk += d(out)/d(k) contracted with dout.
void conv2d_backward_kernel(const Conv2dGeom& g, const double* dout, const double* in, double* dk);
// dbias += sum over batch and space of dout.
void conv2d_backward_bias(const Conv2dGeom& g, const double* dout, double* dbias);

// c[m,n] += a[m,k] * b[k,n]
void matmul_nn(int m, int k, int n, const double* a, const double* b, double* c);
// c[m,n] += a[m,k] * b[n,k]^T
void matmul_nt(int m, int k, int n, const double* a, const double* b, double* c);
// c[k,n] += a[m,k]^T * b[m,n]
void matmul_tn(int m, int k, int n, const double* a, const double* b, double* c);

struct AttentionGeom {
    int batch = 1, heads = 1;
    int lq = 1, lk = 1;
    int dim = 1;    // q/k width, split evenly across heads
    int vdim = 1;   // v width, split evenly across heads
};

// q [B,Lq,D], k [B,Lk,D], v [B,Lk,Dv]; key_mask [B,Lk] (nonzero = attend) may be null.
// probs receives softmax weights [B,H,Lq,Lk] for the backward pass.
void attention_forward(const AttentionGeom& g, const double* q, const double* k, const double* v,
                       const std::uint8_t* key_mask, double* probs, double* out);
// Accumulates into dq, dk, dv (any may be null).
void attention_backward(const AttentionGeom& g, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk,
                        double* dv);

namespace reference {

void conv2d_forward(const Conv2dGeom& g, const double* in, const double* k, const double* bias,
                    double* out);
void conv2d_backward_input(const Conv2dGeom& g, const double* dout, const double* k, double* din);
void conv2d_backward_kernel(const Conv2dGeom& g, const double* dout, const double* in, double* dk);
void matmul_nn(int m, int k, int n, const double* a, const double* b, double* c);
void attention_forward(const AttentionGeom& g, const double* q, const double* k, const double* v,
                       const std::uint8_t* key_mask, double* out);

}  // namespace reference

/// Sets the OpenMP worker count (no-op without OpenMP). Values < 1 are ignored.
void set_num_workers(int n);
int num_workers();

}  // namespace omni::kernels
