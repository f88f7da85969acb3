#ifndef DC_OPS_HPP
#define DC_OPS_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "dc/kernels.hpp"
#include "dc/tensor.hpp"

// Differentiable ops. Each op computes its value eagerly and, when a tape
// is given and an input tracks gradients, records a backward closure that
// accumulates (+=) into the input gradient buffers. Backward loops follow
// the same one-writer-per-element pattern as the forward kernels, so whole
// training steps are bit-stable for any worker count.

namespace dc {

template <typename S>
inline bool track(const Tape<S>* tp, const Tensor<S>& a) {
    return tp && a.requires_grad();
}

template <typename S>
inline bool track(const Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
    return tp && (a.requires_grad() || b.requires_grad());
}

template <typename S>
inline void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    require(a.shape() == b.shape(), ErrorCode::dimension,
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// ---- elementwise -----------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tp) {
    require_same_shape(a, b, "add");
    Tensor<S> out(a.shape());
    const int64_t n = out.numel();
    {
        const S *pa = a.data(), *pb = b.data();
        S* po = out.data();
        parallel_for(n, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = pa[i] + pb[i];
        });
    }
    if (track(tp, a, b)) {
        out.set_requires_grad(true);
        tp->record([a = a, b = b, out, n]() mutable {
            const S* g = out.grad();
            if (a.requires_grad()) {
                S* ga = a.grad();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        ga[i] += g[i];
                });
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        gb[i] += g[i];
                });
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tp) {
    require_same_shape(a, b, "sub");
    Tensor<S> out(a.shape());
    const int64_t n = out.numel();
    {
        const S *pa = a.data(), *pb = b.data();
        S* po = out.data();
        parallel_for(n, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = pa[i] - pb[i];
        });
    }
    if (track(tp, a, b)) {
        out.set_requires_grad(true);
        tp->record([a = a, b = b, out, n]() mutable {
            const S* g = out.grad();
            if (a.requires_grad()) {
                S* ga = a.grad();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        ga[i] += g[i];
                });
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        gb[i] -= g[i];
                });
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tp) {
    require_same_shape(a, b, "mul");
    Tensor<S> out(a.shape());
    const int64_t n = out.numel();
    {
        const S *pa = a.data(), *pb = b.data();
        S* po = out.data();
        parallel_for(n, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = pa[i] * pb[i];
        });
    }
    if (track(tp, a, b)) {
        out.set_requires_grad(true);
        tp->record([a = a, b = b, out, n]() mutable {
            const S* g = out.grad();
            if (a.requires_grad()) {
                S* ga = a.grad();
                const S* pb = b.data();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        ga[i] += g[i] * pb[i];
                });
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                const S* pa = a.data();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        gb[i] += g[i] * pa[i];
                });
            }
        });
    }
    return out;
}

// out = a * m + c (scalar multiply-add)
template <typename S>
Tensor<S> affine(const Tensor<S>& a, S m, S c, Tape<S>* tp) {
    Tensor<S> out(a.shape());
    const int64_t n = out.numel();
    {
        const S* pa = a.data();
        S* po = out.data();
        parallel_for(n, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = pa[i] * m + c;
        });
    }
    if (track(tp, a)) {
        out.set_requires_grad(true);
        tp->record([a = a, out, m, n]() mutable {
            const S* g = out.grad();
            S* ga = a.grad();
            parallel_for(n, [=](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    ga[i] += g[i] * m;
            });
        });
    }
    return out;
}

// out = x * sigmoid(x)
template <typename S>
Tensor<S> silu(const Tensor<S>& a, Tape<S>* tp) {
    Tensor<S> out(a.shape());
    const int64_t n = out.numel();
    {
        const S* pa = a.data();
        S* po = out.data();
        parallel_for(n, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                const S sg = S(1) / (S(1) + std::exp(-pa[i]));
                po[i] = pa[i] * sg;
            }
        });
    }
    if (track(tp, a)) {
        out.set_requires_grad(true);
        tp->record([a = a, out, n]() mutable {
            const S* g = out.grad();
            const S* pa = a.data();
            S* ga = a.grad();
            parallel_for(n, [=](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    const S sg = S(1) / (S(1) + std::exp(-pa[i]));
                    ga[i] += g[i] * sg * (S(1) + pa[i] * (S(1) - sg));
                }
            });
        });
    }
    return out;
}

// ---- matrix products -------------------------------------------------------

// [n,k] x [k,m] -> [n,m]
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tp) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorCode::dimension,
            "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor<S> out({n, m});
    kern::gemm(a.data(), b.data(), out.data(), n, k, m);
    if (track(tp, a, b)) {
        out.set_requires_grad(true);
        tp->record([a = a, b = b, out, n, k, m]() mutable {
            if (a.requires_grad())  // dA += dO x B^T
                kern::gemm_nt(out.grad(), b.data(), a.grad(), n, m, k, true);
            if (b.requires_grad())  // dB += A^T x dO
                kern::gemm_tn(a.data(), out.grad(), b.grad(), k, n, m, true);
        });
    }
    return out;
}

// [n,k] x [m,k]^T -> [n,m]
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tp) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), ErrorCode::dimension,
            "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    const int n = a.dim(0), k = a.dim(1), m = b.dim(0);
    Tensor<S> out({n, m});
    kern::gemm_nt(a.data(), b.data(), out.data(), n, k, m);
    if (track(tp, a, b)) {
        out.set_requires_grad(true);
        tp->record([a = a, b = b, out, n, k, m]() mutable {
            if (a.requires_grad())  // dA += dO x B
                kern::gemm(out.grad(), b.data(), a.grad(), n, m, k, true);
            if (b.requires_grad())  // dB += dO^T x A
                kern::gemm_tn(out.grad(), a.data(), b.grad(), m, n, k, true);
        });
    }
    return out;
}

// [r,c] -> [c,r]
template <typename S>
Tensor<S> transpose2d(const Tensor<S>& a, Tape<S>* tp) {
    require(a.rank() == 2, ErrorCode::dimension, "transpose2d: rank-2 input required");
    const int r = a.dim(0), c = a.dim(1);
    Tensor<S> out({c, r});
    {
        const S* pa = a.data();
        S* po = out.data();
        parallel_for(int64_t(r) * c, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = pa[(i % r) * c + i / r];
        });
    }
    if (track(tp, a)) {
        out.set_requires_grad(true);
        tp->record([a = a, out, r, c]() mutable {
            const S* g = out.grad();
            S* ga = a.grad();
            parallel_for(int64_t(r) * c, [=](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    ga[i] += g[(i % c) * r + i / c];
            });
        });
    }
    return out;
}

// ---- softmax ---------------------------------------------------------------

template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& a, Tape<S>* tp) {
    require(a.rank() == 2, ErrorCode::dimension, "softmax_rows: rank-2 input required");
    const int rows = a.dim(0), cols = a.dim(1);
    Tensor<S> out(a.shape());
    kern::softmax_rows(a.data(), out.data(), rows, cols);
    if (track(tp, a)) {
        out.set_requires_grad(true);
        tp->record([a = a, out, rows, cols]() mutable {
            const S *g = out.grad(), *y = out.data();
            S* ga = a.grad();
            parallel_for(rows, [=](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const S *gr = g + r * cols, *yr = y + r * cols;
                    S dot = 0;
                    for (int c = 0; c < cols; ++c)
                        dot += gr[c] * yr[c];
                    S* gar = ga + r * cols;
                    for (int c = 0; c < cols; ++c)
                        gar[c] += yr[c] * (gr[c] - dot);
                }
            });
        });
    }
    return out;
}

// ---- convolution -----------------------------------------------------------

// x [ic,h,w], w [oc,ic,kh,kw], bias [oc] -> [oc,oh,ow]
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride,
                 int pad, Tape<S>* tp) {
    require(x.rank() == 3 && w.rank() == 4 && bias.rank() == 1, ErrorCode::dimension,
            "conv2d: expected x[ic,h,w], w[oc,ic,kh,kw], bias[oc]");
    const int ic = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    require(w.dim(1) == ic && bias.dim(0) == oc, ErrorCode::dimension, "conv2d: channel mismatch");
    require(stride >= 1 && pad >= 0, ErrorCode::config, "conv2d: bad stride/pad");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    require(oh >= 1 && ow >= 1, ErrorCode::dimension, "conv2d: empty output");
    Tensor<S> out({oc, oh, ow});
    kern::conv2d(x.data(), w.data(), bias.data(), out.data(), ic, h, wd, oc, kh, kw, stride, pad,
                 oh, ow);
    if (tp && (x.requires_grad() || w.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        tp->record([x = x, w = w, bias = bias, out, ic, h, wd, oc, kh, kw, stride, pad, oh, ow]() mutable {
            const S* g = out.grad();
            if (x.requires_grad())
                kern::conv2d_grad_x(g, w.data(), x.grad(), ic, h, wd, oc, kh, kw, stride, pad, oh, ow);
            if (w.requires_grad())
                kern::conv2d_grad_w(g, x.data(), w.grad(), ic, h, wd, oc, kh, kw, stride, pad, oh, ow);
            if (bias.requires_grad())
                kern::conv2d_grad_b(g, bias.grad(), oc, oh, ow);
        });
    }
    return out;
}

// ---- normalization ---------------------------------------------------------

// x [c,h,w] normalized over channel groups; gamma/beta [c].
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, int groups, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tape<S>* tp, S eps = S(1e-5)) {
    require(x.rank() == 3, ErrorCode::dimension, "group_norm: expected x[c,h,w]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    require(groups >= 1 && c % groups == 0, ErrorCode::config,
            "group_norm: channels not divisible by groups");
    require(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
            ErrorCode::dimension, "group_norm: gamma/beta must be [c]");
    const int cg = c / groups;
    const int64_t hw = int64_t(h) * w, m = cg * hw;
    std::vector<S> mean(static_cast<size_t>(groups)), inv(static_cast<size_t>(groups));
    {
        const S* px = x.data();
        S *pm = mean.data(), *pi = inv.data();
        parallel_for(groups, [=](int64_t lo, int64_t hi) {
            for (int64_t gidx = lo; gidx < hi; ++gidx) {
                const S* base = px + gidx * m;
                S s = 0;
                for (int64_t i = 0; i < m; ++i)
                    s += base[i];
                const S mu = s / S(m);
                S v = 0;
                for (int64_t i = 0; i < m; ++i) {
                    const S d = base[i] - mu;
                    v += d * d;
                }
                pm[gidx] = mu;
                pi[gidx] = S(1) / std::sqrt(v / S(m) + eps);
            }
        });
    }
    Tensor<S> out(x.shape());
    {
        const S *px = x.data(), *pg = gamma.data(), *pb = beta.data();
        const S *pm = mean.data(), *pi = inv.data();
        S* po = out.data();
        parallel_for(int64_t(c) * hw, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                const int64_t ch = i / hw, gidx = ch / cg;
                po[i] = pg[ch] * (px[i] - pm[gidx]) * pi[gidx] + pb[ch];
            }
        });
    }
    if (tp && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        out.set_requires_grad(true);
        // mean/inv moved into the closure for the backward pass
        tp->record([x = x, gamma = gamma, beta = beta, out, mean = std::move(mean), inv = std::move(inv), groups, cg,
                    hw, m, c]() mutable {
            const S *g = out.grad(), *px = x.data(), *pg = gamma.data();
            const S *pm = mean.data(), *pi = inv.data();
            if (x.requires_grad()) {
                S* gx = x.grad();
                parallel_for(groups, [=](int64_t lo, int64_t hi) {
                    for (int64_t gi = lo; gi < hi; ++gi) {
                        const S* xb = px + gi * m;
                        const S* gb = g + gi * m;
                        S s1 = 0, s2 = 0;
                        for (int64_t i = 0; i < m; ++i) {
                            const S gg = gb[i] * pg[gi * cg + i / hw];
                            const S xh = (xb[i] - pm[gi]) * pi[gi];
                            s1 += gg;
                            s2 += gg * xh;
                        }
                        s1 /= S(m);
                        s2 /= S(m);
                        S* gxb = gx + gi * m;
                        for (int64_t i = 0; i < m; ++i) {
                            const S gg = gb[i] * pg[gi * cg + i / hw];
                            const S xh = (xb[i] - pm[gi]) * pi[gi];
                            gxb[i] += pi[gi] * (gg - s1 - xh * s2);
                        }
                    }
                });
            }
            if (gamma.requires_grad() || beta.requires_grad()) {
                S* ggam = gamma.requires_grad() ? gamma.grad() : nullptr;
                S* gbet = beta.requires_grad() ? beta.grad() : nullptr;
                parallel_for(c, [=](int64_t lo, int64_t hi) {
                    for (int64_t ch = lo; ch < hi; ++ch) {
                        const int64_t gi = ch / cg;
                        S sg = 0, sb = 0;
                        for (int64_t i = 0; i < hw; ++i) {
                            const S gv = g[ch * hw + i];
                            sg += gv * (px[ch * hw + i] - pm[gi]) * pi[gi];
                            sb += gv;
                        }
                        if (ggam)
                            ggam[ch] += sg;
                        if (gbet)
                            gbet[ch] += sb;
                    }
                });
            }
        });
    }
    return out;
}

// x [n,d] normalized per row; gamma/beta [d].
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, Tape<S>* tp,
                     S eps = S(1e-5)) {
    require(x.rank() == 2, ErrorCode::dimension, "layer_norm: expected x[n,d]");
    const int n = x.dim(0), d = x.dim(1);
    require(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
            ErrorCode::dimension, "layer_norm: gamma/beta must be [d]");
    std::vector<S> mean(static_cast<size_t>(n)), inv(static_cast<size_t>(n));
    Tensor<S> out(x.shape());
    {
        const S *px = x.data(), *pg = gamma.data(), *pb = beta.data();
        S *pm = mean.data(), *pi = inv.data(), *po = out.data();
        parallel_for(n, [=](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const S* xr = px + r * d;
                S s = 0;
                for (int c = 0; c < d; ++c)
                    s += xr[c];
                const S mu = s / S(d);
                S v = 0;
                for (int c = 0; c < d; ++c) {
                    const S df = xr[c] - mu;
                    v += df * df;
                }
                const S iv = S(1) / std::sqrt(v / S(d) + eps);
                pm[r] = mu;
                pi[r] = iv;
                S* yr = po + r * d;
                for (int c = 0; c < d; ++c)
                    yr[c] = pg[c] * (xr[c] - mu) * iv + pb[c];
            }
        });
    }
    if (tp && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        out.set_requires_grad(true);
        tp->record([x = x, gamma = gamma, beta = beta, out, mean = std::move(mean), inv = std::move(inv), n,
                    d]() mutable {
            const S *g = out.grad(), *px = x.data(), *pg = gamma.data();
            const S *pm = mean.data(), *pi = inv.data();
            if (x.requires_grad()) {
                S* gx = x.grad();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r) {
                        const S *xr = px + r * d, *gr = g + r * d;
                        S s1 = 0, s2 = 0;
                        for (int c = 0; c < d; ++c) {
                            const S gg = gr[c] * pg[c];
                            const S xh = (xr[c] - pm[r]) * pi[r];
                            s1 += gg;
                            s2 += gg * xh;
                        }
                        s1 /= S(d);
                        s2 /= S(d);
                        S* gxr = gx + r * d;
                        for (int c = 0; c < d; ++c) {
                            const S gg = gr[c] * pg[c];
                            const S xh = (xr[c] - pm[r]) * pi[r];
                            gxr[c] += pi[r] * (gg - s1 - xh * s2);
                        }
                    }
                });
            }
            if (gamma.requires_grad() || beta.requires_grad()) {
                S* ggam = gamma.requires_grad() ? gamma.grad() : nullptr;
                S* gbet = beta.requires_grad() ? beta.grad() : nullptr;
                parallel_for(d, [=](int64_t lo, int64_t hi) {
                    for (int64_t c = lo; c < hi; ++c) {
                        S sg = 0, sb = 0;
                        for (int64_t r = 0; r < n; ++r) {
                            const S gv = g[r * d + c];
                            sg += gv * (px[r * d + c] - pm[r]) * pi[r];
                            sb += gv;
                        }
                        if (ggam)
                            ggam[c] += sg;
                        if (gbet)
                            gbet[c] += sb;
                    }
                });
            }
        });
    }
    return out;
}

// ---- structural ops --------------------------------------------------------

// View with shared payload and gradient; no tape node needed.
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> shape) {
    Tensor<S> v = a;
    if (v.requires_grad())
        v.ensure_grad();
    return v.reshaped(std::move(shape));
}

// columns [c0, c0+len) of a [n,d]
template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, int c0, int len, Tape<S>* tp) {
    require(a.rank() == 2, ErrorCode::dimension, "slice_cols: rank-2 input required");
    const int n = a.dim(0), d = a.dim(1);
    require(c0 >= 0 && len >= 1 && c0 + len <= d, ErrorCode::dimension, "slice_cols: out of range");
    Tensor<S> out({n, len});
    {
        const S* pa = a.data();
        S* po = out.data();
        parallel_for(int64_t(n) * len, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = pa[(i / len) * d + c0 + i % len];
        });
    }
    if (track(tp, a)) {
        out.set_requires_grad(true);
        tp->record([a = a, out, n, d, c0, len]() mutable {
            const S* g = out.grad();
            S* ga = a.grad();
            parallel_for(int64_t(n) * len, [=](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    ga[(i / len) * d + c0 + i % len] += g[i];
            });
        });
    }
    return out;
}

// [n,da] ++ [n,db] -> [n,da+db]
template <typename S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tp) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0), ErrorCode::dimension,
            "concat_cols: row mismatch");
    const int n = a.dim(0), da = a.dim(1), db = b.dim(1), d = da + db;
    Tensor<S> out({n, d});
    {
        const S *pa = a.data(), *pb = b.data();
        S* po = out.data();
        parallel_for(int64_t(n) * d, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                const int64_t r = i / d, c = i % d;
                po[i] = c < da ? pa[r * da + c] : pb[r * db + (c - da)];
            }
        });
    }
    if (track(tp, a, b)) {
        out.set_requires_grad(true);
        tp->record([a = a, b = b, out, n, da, db, d]() mutable {
            const S* g = out.grad();
            if (a.requires_grad()) {
                S* ga = a.grad();
                parallel_for(int64_t(n) * da, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        ga[i] += g[(i / da) * d + i % da];
                });
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                parallel_for(int64_t(n) * db, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        gb[i] += g[(i / db) * d + da + i % db];
                });
            }
        });
    }
    return out;
}

// [na,d] ++ [nb,d] -> [na+nb,d]
template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tp) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), ErrorCode::dimension,
            "concat_rows: column mismatch");
    const int na = a.dim(0), nb = b.dim(0), d = a.dim(1);
    Tensor<S> out({na + nb, d});
    {
        const S *pa = a.data(), *pb = b.data();
        S* po = out.data();
        const int64_t la = int64_t(na) * d, lb = int64_t(nb) * d;
        parallel_for(la + lb, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = i < la ? pa[i] : pb[i - la];
        });
    }
    if (track(tp, a, b)) {
        out.set_requires_grad(true);
        tp->record([a = a, b = b, out, na, nb, d]() mutable {
            const S* g = out.grad();
            const int64_t la = int64_t(na) * d, lb = int64_t(nb) * d;
            if (a.requires_grad()) {
                S* ga = a.grad();
                parallel_for(la, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        ga[i] += g[i];
                });
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                parallel_for(lb, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        gb[i] += g[la + i];
                });
            }
        });
    }
    return out;
}

// table [v,d], ids -> [len(ids),d]; repeated ids accumulate gradients.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<int>& ids, Tape<S>* tp) {
    require(table.rank() == 2, ErrorCode::dimension, "gather_rows: rank-2 table required");
    require(!ids.empty(), ErrorCode::dimension, "gather_rows: empty id list");
    const int v = table.dim(0), d = table.dim(1), l = int(ids.size());
    for (int id : ids)
        require(id >= 0 && id < v, ErrorCode::dimension, "gather_rows: id out of range");
    Tensor<S> out({l, d});
    {
        const S* pt = table.data();
        const int* pi = ids.data();
        S* po = out.data();
        parallel_for(int64_t(l) * d, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = pt[int64_t(pi[i / d]) * d + i % d];
        });
    }
    if (track(tp, table)) {
        out.set_requires_grad(true);
        tp->record([table = table, out, ids = ids, l, d]() mutable {
            const S* g = out.grad();
            S* gt = table.grad();
            const int* pi = ids.data();
            // parallel over columns, serial over ids: repeats stay race-free
            parallel_for(d, [=](int64_t lo, int64_t hi) {
                for (int64_t c = lo; c < hi; ++c)
                    for (int r = 0; r < l; ++r)
                        gt[int64_t(pi[r]) * d + c] += g[int64_t(r) * d + c];
            });
        });
    }
    return out;
}

// [n,d] -> [1,d] column means
template <typename S>
Tensor<S> mean_rows(const Tensor<S>& a, Tape<S>* tp) {
    require(a.rank() == 2, ErrorCode::dimension, "mean_rows: rank-2 input required");
    const int n = a.dim(0), d = a.dim(1);
    Tensor<S> out({1, d});
    {
        const S* pa = a.data();
        S* po = out.data();
        parallel_for(d, [=](int64_t lo, int64_t hi) {
            for (int64_t c = lo; c < hi; ++c) {
                S s = 0;
                for (int64_t r = 0; r < n; ++r)
                    s += pa[r * d + c];
                po[c] = s / S(n);
            }
        });
    }
    if (track(tp, a)) {
        out.set_requires_grad(true);
        tp->record([a = a, out, n, d]() mutable {
            const S* g = out.grad();
            S* ga = a.grad();
            const S invn = S(1) / S(n);
            parallel_for(int64_t(n) * d, [=](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    ga[i] += g[i % d] * invn;
            });
        });
    }
    return out;
}

// a [n,d] + bias [d] broadcast over rows
template <typename S>
Tensor<S> add_row_bias(const Tensor<S>& a, const Tensor<S>& bias, Tape<S>* tp) {
    require(a.rank() == 2 && bias.rank() == 1 && bias.dim(0) == a.dim(1), ErrorCode::dimension,
            "add_row_bias: bias must match columns");
    const int n = a.dim(0), d = a.dim(1);
    Tensor<S> out(a.shape());
    {
        const S *pa = a.data(), *pb = bias.data();
        S* po = out.data();
        parallel_for(int64_t(n) * d, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = pa[i] + pb[i % d];
        });
    }
    if (track(tp, a, bias)) {
        out.set_requires_grad(true);
        tp->record([a = a, bias = bias, out, n, d]() mutable {
            const S* g = out.grad();
            if (a.requires_grad()) {
                S* ga = a.grad();
                parallel_for(int64_t(n) * d, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        ga[i] += g[i];
                });
            }
            if (bias.requires_grad()) {
                S* gb = bias.grad();
                parallel_for(d, [=](int64_t lo, int64_t hi) {
                    for (int64_t c = lo; c < hi; ++c) {
                        S s = 0;
                        for (int64_t r = 0; r < n; ++r)
                            s += g[r * d + c];
                        gb[c] += s;
                    }
                });
            }
        });
    }
    return out;
}

// x [c,h,w] + bias [c] broadcast over positions
template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& bias, Tape<S>* tp) {
    require(x.rank() == 3 && bias.rank() == 1 && bias.dim(0) == x.dim(0), ErrorCode::dimension,
            "add_channel_bias: bias must match channels");
    const int c = x.dim(0);
    const int64_t hw = int64_t(x.dim(1)) * x.dim(2);
    Tensor<S> out(x.shape());
    {
        const S *px = x.data(), *pb = bias.data();
        S* po = out.data();
        parallel_for(c * hw, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                po[i] = px[i] + pb[i / hw];
        });
    }
    if (track(tp, x, bias)) {
        out.set_requires_grad(true);
        tp->record([x = x, bias = bias, out, c, hw]() mutable {
            const S* g = out.grad();
            if (x.requires_grad()) {
                S* gx = x.grad();
                parallel_for(c * hw, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        gx[i] += g[i];
                });
            }
            if (bias.requires_grad()) {
                S* gb = bias.grad();
                parallel_for(c, [=](int64_t lo, int64_t hi) {
                    for (int64_t ch = lo; ch < hi; ++ch) {
                        S s = 0;
                        for (int64_t i = 0; i < hw; ++i)
                            s += g[ch * hw + i];
                        gb[ch] += s;
                    }
                });
            }
        });
    }
    return out;
}

// nearest-neighbor x2: [c,h,w] -> [c,2h,2w]
template <typename S>
Tensor<S> upsample2x(const Tensor<S>& x, Tape<S>* tp) {
    require(x.rank() == 3, ErrorCode::dimension, "upsample2x: expected x[c,h,w]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<S> out({c, 2 * h, 2 * w});
    {
        const S* px = x.data();
        S* po = out.data();
        parallel_for(int64_t(c) * 4 * h * w, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                const int64_t ch = i / (int64_t(4) * h * w);
                const int64_t r = i / (2 * w) % (2 * h), cc = i % (2 * w);
                po[i] = px[(ch * h + r / 2) * w + cc / 2];
            }
        });
    }
    if (track(tp, x)) {
        out.set_requires_grad(true);
        tp->record([x = x, out, c, h, w]() mutable {
            const S* g = out.grad();
            S* gx = x.grad();
            parallel_for(int64_t(c) * h * w, [=](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    const int64_t ch = i / (int64_t(h) * w);
                    const int64_t r = i / w % h, cc = i % w;
                    const S* gb = g + (ch * 2 * h + 2 * r) * 2 * w + 2 * cc;
                    gx[i] += gb[0] + gb[1] + gb[int64_t(2) * w] + gb[int64_t(2) * w + 1];
                }
            });
        });
    }
    return out;
}

// sum of all elements -> scalar [1]
template <typename S>
Tensor<S> sum_all(const Tensor<S>& a, Tape<S>* tp) {
    Tensor<S> out({1});
    out.flat(0) = kern::chunked_sum(a.data(), a.numel());
    if (track(tp, a)) {
        out.set_requires_grad(true);
        const int64_t n = a.numel();
        tp->record([a = a, out, n]() mutable {
            const S g = out.grad()[0];
            S* ga = a.grad();
            parallel_for(n, [=](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    ga[i] += g;
            });
        });
    }
    return out;
}

// mean((a-b)^2) -> scalar [1]
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tp) {
    require_same_shape(a, b, "mse");
    const int64_t n = a.numel();
    Tensor<S> out({1});
    {
        // fixed 64-slot partials, same grid as kern::chunked_sum
        const int64_t chunk = std::max<int64_t>(1, (n + 63) / 64);
        const int64_t slots = (n + chunk - 1) / chunk;
        std::vector<S> part(size_t(slots), S(0));
        const S *pa = a.data(), *pb = b.data();
        S* pp = part.data();
        parallel_for(slots, [=](int64_t lo, int64_t hi) {
            for (int64_t s = lo; s < hi; ++s) {
                S acc = 0;
                const int64_t e = std::min(n, (s + 1) * chunk);
                for (int64_t i = s * chunk; i < e; ++i) {
                    const S d = pa[i] - pb[i];
                    acc += d * d;
                }
                pp[s] = acc;
            }
        });
        S total = 0;
        for (int64_t s = 0; s < slots; ++s)
            total += part[size_t(s)];
        out.flat(0) = total / S(n);
    }
    if (track(tp, a, b)) {
        out.set_requires_grad(true);
        tp->record([a = a, b = b, out, n]() mutable {
            const S scale = out.grad()[0] * S(2) / S(n);
            const S *pa = a.data(), *pb = b.data();
            if (a.requires_grad()) {
                S* ga = a.grad();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        ga[i] += scale * (pa[i] - pb[i]);
                });
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                parallel_for(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        gb[i] -= scale * (pa[i] - pb[i]);
                });
            }
        });
    }
    return out;
}

// x [n,din] * w [din,dout] + b [dout]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, Tape<S>* tp) {
    return add_row_bias(matmul(x, w, tp), b, tp);
}

}  // namespace dc

#endif  // DC_OPS_HPP
