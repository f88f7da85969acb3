#ifndef DC_KERNELS_HPP
#define DC_KERNELS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dc/common.hpp"

// Raw compute loops behind the autodiff ops. Every output element is
// produced by exactly one loop iteration with a fixed inner accumulation
// order, so results are bitwise identical for any worker count and match
// the serial reference implementations in dc::ref.

namespace dc::kern {

// out[n,m] = sum_k a[n,k] * b[k,m]   (acc: += instead of =)
template <typename S>
void gemm(const S* a, const S* b, S* out, int n, int k, int m, bool acc = false) {
    parallel_for(int64_t(n) * m, [=](int64_t lo, int64_t hi) {
        for (int64_t idx = lo; idx < hi; ++idx) {
            const int i = int(idx / m), j = int(idx % m);
            S s = 0;
            const S* ai = a + int64_t(i) * k;
            for (int kk = 0; kk < k; ++kk)
                s += ai[kk] * b[int64_t(kk) * m + j];
            if (acc)
                out[idx] += s;
            else
                out[idx] = s;
        }
    });
}

// out[n,m] = sum_k a[n,k] * b[m,k]   (b transposed)
template <typename S>
void gemm_nt(const S* a, const S* b, S* out, int n, int k, int m, bool acc = false) {
    parallel_for(int64_t(n) * m, [=](int64_t lo, int64_t hi) {
        for (int64_t idx = lo; idx < hi; ++idx) {
            const int i = int(idx / m), j = int(idx % m);
            S s = 0;
            const S* ai = a + int64_t(i) * k;
            const S* bj = b + int64_t(j) * k;
            for (int kk = 0; kk < k; ++kk)
                s += ai[kk] * bj[kk];
            if (acc)
                out[idx] += s;
            else
                out[idx] = s;
        }
    });
}

// out[n,m] = sum_k a[k,n] * b[k,m]   (a transposed)
template <typename S>
void gemm_tn(const S* a, const S* b, S* out, int n, int k, int m, bool acc = false) {
    parallel_for(int64_t(n) * m, [=](int64_t lo, int64_t hi) {
        for (int64_t idx = lo; idx < hi; ++idx) {
            const int i = int(idx / m), j = int(idx % m);
            S s = 0;
            for (int kk = 0; kk < k; ++kk)
                s += a[int64_t(kk) * n + i] * b[int64_t(kk) * m + j];
            if (acc)
                out[idx] += s;
            else
                out[idx] = s;
        }
    });
}

// Numerically safe row softmax: out[r] = exp(x[r]-max) / sum.
template <typename S>
void softmax_rows(const S* x, S* out, int rows, int cols) {
    parallel_for(rows, [=](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const S* xr = x + r * cols;
            S* yr = out + r * cols;
            S mx = xr[0];
            for (int c = 1; c < cols; ++c)
                mx = std::max(mx, xr[c]);
            S sum = 0;
            for (int c = 0; c < cols; ++c) {
                yr[c] = std::exp(xr[c] - mx);
                sum += yr[c];
            }
            const S inv = S(1) / sum;
            for (int c = 0; c < cols; ++c)
                yr[c] *= inv;
        }
    });
}

// x [ic,h,w] * w [oc,ic,kh,kw] -> out [oc,oh,ow]; bias [oc] optional.
template <typename S>
void conv2d(const S* x, const S* w, const S* bias, S* out, int ic, int h, int wd,
            int oc, int kh, int kw, int stride, int pad, int oh, int ow) {
    parallel_for(int64_t(oc) * oh * ow, [=](int64_t lo, int64_t hi) {
        for (int64_t idx = lo; idx < hi; ++idx) {
            const int o = int(idx / (int64_t(oh) * ow));
            const int r = int(idx / ow % oh), c = int(idx % ow);
            S s = bias ? bias[o] : S(0);
            for (int i = 0; i < ic; ++i)
                for (int a = 0; a < kh; ++a) {
                    const int ih = r * stride - pad + a;
                    if (ih < 0 || ih >= h)
                        continue;
                    for (int b = 0; b < kw; ++b) {
                        const int iw = c * stride - pad + b;
                        if (iw < 0 || iw >= wd)
                            continue;
                        s += x[(int64_t(i) * h + ih) * wd + iw] *
                             w[((int64_t(o) * ic + i) * kh + a) * kw + b];
                    }
                }
            out[idx] = s;
        }
    });
}

// dx[ic,h,w] += correlation of dout with w (one iteration per dx element).
template <typename S>
void conv2d_grad_x(const S* dout, const S* w, S* dx, int ic, int h, int wd,
                   int oc, int kh, int kw, int stride, int pad, int oh, int ow) {
    parallel_for(int64_t(ic) * h * wd, [=](int64_t lo, int64_t hi) {
        for (int64_t idx = lo; idx < hi; ++idx) {
            const int i = int(idx / (int64_t(h) * wd));
            const int ih = int(idx / wd % h), iw = int(idx % wd);
            S s = 0;
            for (int o = 0; o < oc; ++o)
                for (int a = 0; a < kh; ++a) {
                    const int num = ih + pad - a;
                    if (num < 0 || num % stride || num / stride >= oh)
                        continue;
                    const int r = num / stride;
                    for (int b = 0; b < kw; ++b) {
                        const int numw = iw + pad - b;
                        if (numw < 0 || numw % stride || numw / stride >= ow)
                            continue;
                        s += dout[(int64_t(o) * oh + r) * ow + numw / stride] *
                             w[((int64_t(o) * ic + i) * kh + a) * kw + b];
                    }
                }
            dx[idx] += s;
        }
    });
}

// dw[oc,ic,kh,kw] += sum over output positions (one iteration per weight).
template <typename S>
void conv2d_grad_w(const S* dout, const S* x, S* dw, int ic, int h, int wd,
                   int oc, int kh, int kw, int stride, int pad, int oh, int ow) {
    parallel_for(int64_t(oc) * ic * kh * kw, [=](int64_t lo, int64_t hi) {
        for (int64_t idx = lo; idx < hi; ++idx) {
            const int b = int(idx % kw), a = int(idx / kw % kh);
            const int i = int(idx / (int64_t(kw) * kh) % ic);
            const int o = int(idx / (int64_t(kw) * kh * ic));
            S s = 0;
            for (int r = 0; r < oh; ++r) {
                const int ih = r * stride - pad + a;
                if (ih < 0 || ih >= h)
                    continue;
                for (int c = 0; c < ow; ++c) {
                    const int iw = c * stride - pad + b;
                    if (iw < 0 || iw >= wd)
                        continue;
                    s += dout[(int64_t(o) * oh + r) * ow + c] * x[(int64_t(i) * h + ih) * wd + iw];
                }
            }
            dw[idx] += s;
        }
    });
}

// db[oc] += sum over spatial positions.
template <typename S>
void conv2d_grad_b(const S* dout, S* db, int oc, int oh, int ow) {
    parallel_for(oc, [=](int64_t lo, int64_t hi) {
        for (int64_t o = lo; o < hi; ++o) {
            S s = 0;
            for (int64_t p = 0; p < int64_t(oh) * ow; ++p)
                s += dout[o * oh * ow + p];
            db[o] += s;
        }
    });
}

// Full-tensor sum over a fixed 64-slot grid; combine order never depends
// on the worker count.
template <typename S>
S chunked_sum(const S* x, int64_t n) {
    if (n <= 0)
        return S(0);
    const int64_t chunk = std::max<int64_t>(1, (n + 63) / 64);
    const int64_t slots = (n + chunk - 1) / chunk;
    std::vector<S> part(size_t(slots), S(0));
    S* pp = part.data();
    parallel_for(slots, [=](int64_t lo, int64_t hi) {
        for (int64_t s = lo; s < hi; ++s) {
            S acc = 0;
            const int64_t e = std::min(n, (s + 1) * chunk);
            for (int64_t i = s * chunk; i < e; ++i)
                acc += x[i];
            pp[s] = acc;
        }
    });
    S total = 0;
    for (int64_t s = 0; s < slots; ++s)
        total += part[size_t(s)];
    return total;
}

}  // namespace dc::kern

// Plain serial loops, kept as the ground truth the parallel kernels are
// tested (bitwise) and benchmarked against.
namespace dc::ref {

template <typename S>
void gemm(const S* a, const S* b, S* out, int n, int k, int m) {
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            S s = 0;
            for (int kk = 0; kk < k; ++kk)
                s += a[int64_t(i) * k + kk] * b[int64_t(kk) * m + j];
            out[int64_t(i) * m + j] = s;
        }
}

template <typename S>
void softmax_rows(const S* x, S* out, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const S* xr = x + int64_t(r) * cols;
        S* yr = out + int64_t(r) * cols;
        S mx = xr[0];
        for (int c = 1; c < cols; ++c)
            mx = std::max(mx, xr[c]);
        S sum = 0;
        for (int c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        const S inv = S(1) / sum;
        for (int c = 0; c < cols; ++c)
            yr[c] *= inv;
    }
}

template <typename S>
void conv2d(const S* x, const S* w, const S* bias, S* out, int ic, int h, int wd,
            int oc, int kh, int kw, int stride, int pad, int oh, int ow) {
    for (int o = 0; o < oc; ++o)
        for (int r = 0; r < oh; ++r)
            for (int c = 0; c < ow; ++c) {
                S s = bias ? bias[o] : S(0);
                for (int i = 0; i < ic; ++i)
                    for (int a = 0; a < kh; ++a) {
                        const int ih = r * stride - pad + a;
                        if (ih < 0 || ih >= h)
                            continue;
                        for (int b = 0; b < kw; ++b) {
                            const int iw = c * stride - pad + b;
                            if (iw < 0 || iw >= wd)
                                continue;
                            s += x[(int64_t(i) * h + ih) * wd + iw] *
                                 w[((int64_t(o) * ic + i) * kh + a) * kw + b];
                        }
                    }
                out[(int64_t(o) * oh + r) * ow + c] = s;
            }
}

template <typename S>
S chunked_sum(const S* x, int64_t n) {
    const int64_t chunk = std::max<int64_t>(1, (n + 63) / 64);
    const int64_t slots = (n + chunk - 1) / chunk;
    S total = 0;
    for (int64_t s = 0; s < slots; ++s) {
        S acc = 0;
        const int64_t e = std::min(n, (s + 1) * chunk);
        for (int64_t i = s * chunk; i < e; ++i)
            acc += x[i];
        total += acc;
    }
    return total;
}

}  // namespace dc::ref

#endif  // DC_KERNELS_HPP
