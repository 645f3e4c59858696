#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <string>

#include "urbanfm/nn/tensor.hpp"

namespace urbanfm::nn {

// ---------------------------------------------------------------------------
// BLAS dispatch

inline void gemm_impl(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, float alpha,
                      const float* a, int lda, const float* b, int ldb, float beta, float* c,
                      int ldc) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void gemm_impl(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, double alpha,
                      const double* a, int lda, const double* b, int ldb, double beta, double* c,
                      int ldc) {
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// Row-major C(m,n) = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, const T* b, T beta,
          T* c) {
    gemm_impl(trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, trans_a ? m : k, b, trans_b ? k : n, beta, c, n);
}

// ---------------------------------------------------------------------------
// Elementwise / structural ops

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> y(x.data());
    for (auto& v : y) v = v > T(0) ? v : T(0);
    auto out = Tensor<T>::from_data(x.shape(), std::move(y));
    bool rg = g_grad_enabled && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto on = out.node();
        on->parents = {xn};
        on->backward = [xn, on = on.get()]() {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->data.size(); ++i)
                if (xn->data[i] > T(0)) xn->grad[i] += on->grad[i];
        };
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    std::vector<T> y(a.size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
    auto out = Tensor<T>::from_data(a.shape(), std::move(y));
    bool rg = g_grad_enabled && (a.requires_grad() || b.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        on->parents = {an, bn};
        on->backward = [an, bn, on = on.get()]() {
            if (an->requires_grad || !an->parents.empty() || an->backward) {
                an->ensure_grad();
                for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad || !bn->parents.empty() || bn->backward) {
                bn->ensure_grad();
                for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        };
    }
    return out;
}

// Elementwise product with a fixed (non-differentiated) buffer.
template <typename T>
Tensor<T> mul_const(const Tensor<T>& x, std::vector<T> factor) {
    if (factor.size() != x.size()) throw ShapeError("mul_const: factor length mismatch");
    std::vector<T> y(x.size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * factor[i];
    auto out = Tensor<T>::from_data(x.shape(), std::move(y));
    bool rg = g_grad_enabled && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto on = out.node();
        auto f = std::make_shared<std::vector<T>>(std::move(factor));
        on->parents = {xn};
        on->backward = [xn, on = on.get(), f]() {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i] * (*f)[i];
        };
    }
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
    std::vector<T> y(x.size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * s;
    auto out = Tensor<T>::from_data(x.shape(), std::move(y));
    bool rg = g_grad_enabled && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto on = out.node();
        on->parents = {xn};
        on->backward = [xn, on = on.get(), s]() {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i] * s;
        };
    }
    return out;
}

// Concatenate two (B,C,H,W) tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 4 || b.ndim() != 4) throw ShapeError("concat_channels: expected 4-d tensors");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: batch/spatial dims differ");
    const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const size_t hw = static_cast<size_t>(H) * W;
    std::vector<T> y(static_cast<size_t>(B) * (Ca + Cb) * hw);
    for (int bb = 0; bb < B; ++bb) {
        std::copy_n(a.data().begin() + bb * Ca * hw, Ca * hw, y.begin() + bb * (Ca + Cb) * hw);
        std::copy_n(b.data().begin() + bb * Cb * hw, Cb * hw,
                    y.begin() + (bb * (Ca + Cb) + Ca) * hw);
    }
    auto out = Tensor<T>::from_data({B, Ca + Cb, H, W}, std::move(y));
    bool rg = g_grad_enabled && (a.requires_grad() || b.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        on->parents = {an, bn};
        on->backward = [an, bn, on = on.get(), B, Ca, Cb, hw]() {
            an->ensure_grad();
            bn->ensure_grad();
            for (int bb = 0; bb < B; ++bb) {
                const T* g = on->grad.data() + static_cast<size_t>(bb) * (Ca + Cb) * hw;
                T* ga = an->grad.data() + static_cast<size_t>(bb) * Ca * hw;
                T* gb = bn->grad.data() + static_cast<size_t>(bb) * Cb * hw;
                for (size_t i = 0; i < Ca * hw; ++i) ga[i] += g[i];
                for (size_t i = 0; i < Cb * hw; ++i) gb[i] += g[Ca * hw + i];
            }
        };
    }
    return out;
}

// Concatenate 2-d (B,D_i) tensors along the feature axis.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int B = parts[0].dim(0);
    int D = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != B) throw ShapeError("concat_cols: batch dims differ");
        D += p.dim(1);
    }
    std::vector<T> y(static_cast<size_t>(B) * D);
    int off = 0;
    for (const auto& p : parts) {
        const int d = p.dim(1);
        for (int b = 0; b < B; ++b)
            std::copy_n(p.data().begin() + static_cast<size_t>(b) * d, d,
                        y.begin() + static_cast<size_t>(b) * D + off);
        off += d;
    }
    auto out = Tensor<T>::from_data({B, D}, std::move(y));
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    rg = rg && g_grad_enabled;
    out.set_requires_grad(rg);
    if (rg) {
        auto on = out.node();
        std::vector<std::shared_ptr<Node<T>>> pnodes;
        std::vector<int> widths;
        for (const auto& p : parts) {
            pnodes.push_back(p.node());
            widths.push_back(p.dim(1));
        }
        on->parents = pnodes;
        on->backward = [on = on.get(), pnodes, widths, B, D]() {
            int off = 0;
            for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                const int d = widths[pi];
                if (pnodes[pi]->requires_grad || pnodes[pi]->backward) {
                    pnodes[pi]->ensure_grad();
                    for (int b = 0; b < B; ++b)
                        for (int j = 0; j < d; ++j)
                            pnodes[pi]->grad[static_cast<size_t>(b) * d + j] +=
                                on->grad[static_cast<size_t>(b) * D + off + j];
                }
                off += d;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, "same" zero padding, odd kernel)

namespace detail {

template <typename T>
void im2col(const T* x, int B, int C, int H, int W, int k, T* col) {
    const int p = (k - 1) / 2;
    const size_t hw = static_cast<size_t>(H) * W;
    const size_t bhw = static_cast<size_t>(B) * hw;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                T* row = col + ((static_cast<size_t>(c) * k + ki) * k + kj) * bhw;
                // Hoist the padding checks: columns w with w+off in [0, W)
                // form one contiguous run, copied with memcpy; the rest is
                // zero fill. Keeps the hot loop branch-free (this routine and
                // col2im_accum dominate conv time otherwise).
                const int off = kj - p;
                const int w0 = std::max(0, -off);
                const int w1 = std::min(W, W - off);
                for (int b = 0; b < B; ++b) {
                    const T* xc = x + (static_cast<size_t>(b) * C + c) * hw;
                    T* dst = row + static_cast<size_t>(b) * hw;
                    for (int h = 0; h < H; ++h) {
                        const int sh = h + ki - p;
                        T* d = dst + static_cast<size_t>(h) * W;
                        if (sh < 0 || sh >= H || w0 >= w1) {
                            std::fill_n(d, W, T(0));
                            continue;
                        }
                        const T* s = xc + static_cast<size_t>(sh) * W;
                        std::fill_n(d, w0, T(0));
                        std::memcpy(d + w0, s + w0 + off,
                                    static_cast<size_t>(w1 - w0) * sizeof(T));
                        std::fill_n(d + w1, W - w1, T(0));
                    }
                }
            }
}

}  // namespace detail

// Column-matrix size (in elements) above which conv2d switches from
// im2col + GEMM to the direct row-loop formulation. Mutable so tests can
// force either path on small tensors; both paths compute identical math.
inline size_t& conv_col_element_limit() {
    static size_t limit = size_t(1) << 22;
    return limit;
}

// x: (B,C,H,W); weight: (Co,C,k,k); bias: (Co). Output (B,Co,H,W).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.ndim() != 4 || weight.ndim() != 4) throw ShapeError("conv2d: expected 4-d tensors");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != C)
        throw ShapeError("conv2d: input has " + std::to_string(C) + " channels, kernel expects " +
                         std::to_string(weight.dim(1)));
    if (weight.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd");
    if (bias.size() != static_cast<size_t>(Co)) throw ShapeError("conv2d: bias length mismatch");

    const size_t hw = static_cast<size_t>(H) * W;
    const size_t bhw = static_cast<size_t>(B) * hw;
    const int ckk = C * k * k;
    const int p = (k - 1) / 2;

    // im2col + GEMM wins for small kernels, but its column matrix grows as
    // C*k^2 * B*H*W; for a 9x9 kernel that is a >100 MB buffer whose GEMM
    // packing traffic dwarfs the arithmetic. Past a size threshold, run the
    // convolution directly with branch-free row loops instead.
    const bool direct = static_cast<size_t>(ckk) * bhw > conv_col_element_limit();

    std::shared_ptr<std::vector<T>> col;
    std::vector<T> y(static_cast<size_t>(B) * Co * hw);
    if (direct) {
        for (int b = 0; b < B; ++b)
            for (int co = 0; co < Co; ++co)
                std::fill_n(y.data() + (static_cast<size_t>(b) * Co + co) * hw, hw,
                            bias.data()[co]);
        for (int b = 0; b < B; ++b)
            for (int co = 0; co < Co; ++co) {
                T* yc = y.data() + (static_cast<size_t>(b) * Co + co) * hw;
                for (int c = 0; c < C; ++c) {
                    const T* xc = x.data().data() + (static_cast<size_t>(b) * C + c) * hw;
                    for (int ki = 0; ki < k; ++ki) {
                        const int h0 = std::max(0, p - ki), h1 = std::min(H, H + p - ki);
                        for (int kj = 0; kj < k; ++kj) {
                            const T wv =
                                weight.data()[((static_cast<size_t>(co) * C + c) * k + ki) * k +
                                              kj];
                            const int off = kj - p;
                            const int w0 = std::max(0, -off), w1 = std::min(W, W - off);
                            for (int h = h0; h < h1; ++h) {
                                const T* s = xc + static_cast<size_t>(h + ki - p) * W + off;
                                T* d = yc + static_cast<size_t>(h) * W;
                                for (int w = w0; w < w1; ++w) d[w] += wv * s[w];
                            }
                        }
                    }
                }
            }
    } else {
        col = std::make_shared<std::vector<T>>(static_cast<size_t>(ckk) * bhw);
        detail::im2col(x.data().data(), B, C, H, W, k, col->data());

        // y2(Co, B*H*W) = weight(Co, ckk) * col(ckk, B*H*W)
        std::vector<T> y2(static_cast<size_t>(Co) * bhw);
        gemm<T>(false, false, Co, static_cast<int>(bhw), ckk, T(1), weight.data().data(),
                col->data(), T(0), y2.data());

        for (int co = 0; co < Co; ++co) {
            const T bv = bias.data()[co];
            for (int b = 0; b < B; ++b) {
                const T* s =
                    y2.data() + static_cast<size_t>(co) * bhw + static_cast<size_t>(b) * hw;
                T* d = y.data() + (static_cast<size_t>(b) * Co + co) * hw;
                for (size_t i = 0; i < hw; ++i) d[i] = s[i] + bv;
            }
        }
    }
    auto out = Tensor<T>::from_data({B, Co, H, W}, std::move(y));
    bool rg = g_grad_enabled &&
              (x.requires_grad() || weight.requires_grad() || bias.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias.node();
        auto on = out.node();
        on->parents = {xn, wn, bn};
        on->backward = [xn, wn, bn, on = on.get(), col, direct, B, C, H, W, Co, k, p, hw, bhw,
                        ckk]() {
            if (direct) {
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int b = 0; b < B; ++b)
                        for (int co = 0; co < Co; ++co) {
                            const T* g = on->grad.data() + (static_cast<size_t>(b) * Co + co) * hw;
                            T s = T(0);
                            for (size_t i = 0; i < hw; ++i) s += g[i];
                            bn->grad[co] += s;
                        }
                }
                const bool want_dx = xn->requires_grad || xn->backward;
                if (want_dx) xn->ensure_grad();
                if (wn->requires_grad) wn->ensure_grad();
                for (int b = 0; b < B; ++b)
                    for (int co = 0; co < Co; ++co) {
                        const T* gy = on->grad.data() + (static_cast<size_t>(b) * Co + co) * hw;
                        for (int c = 0; c < C; ++c) {
                            const T* xc = xn->data.data() + (static_cast<size_t>(b) * C + c) * hw;
                            T* gx = want_dx
                                        ? xn->grad.data() + (static_cast<size_t>(b) * C + c) * hw
                                        : nullptr;
                            for (int ki = 0; ki < k; ++ki) {
                                const int h0 = std::max(0, p - ki), h1 = std::min(H, H + p - ki);
                                for (int kj = 0; kj < k; ++kj) {
                                    const size_t wi =
                                        ((static_cast<size_t>(co) * C + c) * k + ki) * k + kj;
                                    const int off = kj - p;
                                    const int w0 = std::max(0, -off), w1 = std::min(W, W - off);
                                    // Separate passes vectorize better than an
                                    // interleaved dot-product + axpy loop.
                                    if (wn->requires_grad) {
                                        T dw = T(0);
                                        for (int h = h0; h < h1; ++h) {
                                            const T* g = gy + static_cast<size_t>(h) * W;
                                            const T* s =
                                                xc + static_cast<size_t>(h + ki - p) * W + off;
                                            for (int w = w0; w < w1; ++w) dw += g[w] * s[w];
                                        }
                                        wn->grad[wi] += dw;
                                    }
                                    if (want_dx) {
                                        const T wv = wn->data[wi];
                                        for (int h = h0; h < h1; ++h) {
                                            const T* g = gy + static_cast<size_t>(h) * W;
                                            T* d = gx + static_cast<size_t>(h + ki - p) * W + off;
                                            for (int w = w0; w < w1; ++w) d[w] += wv * g[w];
                                        }
                                    }
                                }
                            }
                        }
                    }
                return;
            }
            // Gather dY into (Co, B*H*W).
            std::vector<T> dy2(static_cast<size_t>(Co) * bhw);
            for (int co = 0; co < Co; ++co)
                for (int b = 0; b < B; ++b)
                    std::copy_n(on->grad.data() + (static_cast<size_t>(b) * Co + co) * hw, hw,
                                dy2.data() + static_cast<size_t>(co) * bhw +
                                    static_cast<size_t>(b) * hw);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int co = 0; co < Co; ++co) {
                    T s = T(0);
                    const T* g = dy2.data() + static_cast<size_t>(co) * bhw;
                    for (size_t i = 0; i < bhw; ++i) s += g[i];
                    bn->grad[co] += s;
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                gemm<T>(false, true, Co, ckk, static_cast<int>(bhw), T(1), dy2.data(), col->data(),
                        T(1), wn->grad.data());
            }
            if (xn->requires_grad || xn->backward) {
                xn->ensure_grad();
                // dX is itself a same-padding convolution of dY with the
                // channel-transposed, spatially flipped kernel; routing it
                // through im2col + GEMM keeps the contraction dimension large
                // (Co*k*k) instead of the slow K=Co col2im formulation.
                std::vector<T> wt(static_cast<size_t>(C) * Co * k * k);
                for (int co = 0; co < Co; ++co)
                    for (int c = 0; c < C; ++c)
                        for (int ki = 0; ki < k; ++ki)
                            for (int kj = 0; kj < k; ++kj)
                                wt[((static_cast<size_t>(c) * Co + co) * k + (k - 1 - ki)) * k +
                                   (k - 1 - kj)] =
                                    wn->data[((static_cast<size_t>(co) * C + c) * k + ki) * k +
                                             kj];
                std::vector<T> dycol(static_cast<size_t>(Co) * k * k * bhw);
                detail::im2col(on->grad.data(), B, Co, H, W, k, dycol.data());
                std::vector<T> dx2(static_cast<size_t>(C) * bhw);
                gemm<T>(false, false, C, static_cast<int>(bhw), Co * k * k, T(1), wt.data(),
                        dycol.data(), T(0), dx2.data());
                for (int c = 0; c < C; ++c)
                    for (int b = 0; b < B; ++b) {
                        const T* s = dx2.data() + static_cast<size_t>(c) * bhw +
                                     static_cast<size_t>(b) * hw;
                        T* d = xn->grad.data() + (static_cast<size_t>(b) * C + c) * hw;
                        for (size_t i = 0; i < hw; ++i) d[i] += s[i];
                    }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over (B,H,W) per channel

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
};

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& state, bool train, T momentum = T(0.1),
                       T eps = T(1e-5)) {
    if (x.ndim() != 4) throw ShapeError("batch_norm2d: expected 4-d tensor");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.size() != static_cast<size_t>(C) || beta.size() != static_cast<size_t>(C) ||
        state.running_mean.size() != static_cast<size_t>(C))
        throw ShapeError("batch_norm2d: channel count mismatch");
    const size_t hw = static_cast<size_t>(H) * W;
    const size_t m = static_cast<size_t>(B) * hw;

    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto inv_std = std::make_shared<std::vector<T>>(C);
    std::vector<T> y(x.size());

    for (int c = 0; c < C; ++c) {
        T mu, var;
        if (train) {
            if (B < 2) throw ConfigError("batch_norm2d: train mode requires batch >= 2");
            T s = T(0);
            for (int b = 0; b < B; ++b) {
                const T* p = x.data().data() + (static_cast<size_t>(b) * C + c) * hw;
                for (size_t i = 0; i < hw; ++i) s += p[i];
            }
            mu = s / static_cast<T>(m);
            T sv = T(0);
            for (int b = 0; b < B; ++b) {
                const T* p = x.data().data() + (static_cast<size_t>(b) * C + c) * hw;
                for (size_t i = 0; i < hw; ++i) {
                    const T d = p[i] - mu;
                    sv += d * d;
                }
            }
            var = sv / static_cast<T>(m);
            state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mu;
            const T unbiased = m > 1 ? sv / static_cast<T>(m - 1) : var;
            state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * unbiased;
        } else {
            mu = state.running_mean[c];
            var = state.running_var[c];
        }
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[c] = is;
        const T g = gamma.data()[c], bta = beta.data()[c];
        for (int b = 0; b < B; ++b) {
            const size_t base = (static_cast<size_t>(b) * C + c) * hw;
            for (size_t i = 0; i < hw; ++i) {
                const T xh = (x.data()[base + i] - mu) * is;
                (*xhat)[base + i] = xh;
                y[base + i] = g * xh + bta;
            }
        }
    }
    auto out = Tensor<T>::from_data(x.shape(), std::move(y));
    bool rg = g_grad_enabled &&
              (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto btn = beta.node();
        auto on = out.node();
        on->parents = {xn, gn, btn};
        on->backward = [xn, gn, btn, on = on.get(), xhat, inv_std, B, C, hw, m, train]() {
            for (int c = 0; c < C; ++c) {
                T sum_dy = T(0), sum_dy_xh = T(0);
                for (int b = 0; b < B; ++b) {
                    const size_t base = (static_cast<size_t>(b) * C + c) * hw;
                    for (size_t i = 0; i < hw; ++i) {
                        sum_dy += on->grad[base + i];
                        sum_dy_xh += on->grad[base + i] * (*xhat)[base + i];
                    }
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    gn->grad[c] += sum_dy_xh;
                }
                if (btn->requires_grad) {
                    btn->ensure_grad();
                    btn->grad[c] += sum_dy;
                }
                if (xn->requires_grad || xn->backward) {
                    xn->ensure_grad();
                    const T g = gn->data[c], is = (*inv_std)[c];
                    const T mean_dy = sum_dy / static_cast<T>(m);
                    const T mean_dy_xh = sum_dy_xh / static_cast<T>(m);
                    for (int b = 0; b < B; ++b) {
                        const size_t base = (static_cast<size_t>(b) * C + c) * hw;
                        for (size_t i = 0; i < hw; ++i) {
                            const T dy = on->grad[base + i];
                            if (train)
                                xn->grad[base + i] +=
                                    g * is * (dy - mean_dy - (*xhat)[base + i] * mean_dy_xh);
                            else
                                xn->grad[base + i] += g * is * dy;
                        }
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pixel shuffle (depth-to-space)

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
    if (x.ndim() != 4) throw ShapeError("pixel_shuffle: expected 4-d tensor");
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (Cin % (r * r) != 0)
        throw ShapeError("pixel_shuffle: channels " + std::to_string(Cin) +
                         " not divisible by r^2 = " + std::to_string(r * r));
    const int C = Cin / (r * r);
    std::vector<T> y(x.size());
    auto in_idx = [Cin, H, W](int b, int c, int h, int w) {
        return ((static_cast<size_t>(b) * Cin + c) * H + h) * W + w;
    };
    auto out_idx = [C, H, W, r](int b, int c, int h, int w) {
        return ((static_cast<size_t>(b) * C + c) * (H * r) + h) * (W * r) + w;
    };
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w)
                            y[out_idx(b, c, r * h + dy, r * w + dx)] =
                                x.data()[in_idx(b, c * r * r + dy * r + dx, h, w)];
    auto out = Tensor<T>::from_data({B, C, H * r, W * r}, std::move(y));
    bool rg = g_grad_enabled && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto on = out.node();
        on->parents = {xn};
        on->backward = [xn, on = on.get(), B, C, Cin, H, W, r, in_idx, out_idx]() {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    for (int dy = 0; dy < r; ++dy)
                        for (int dx = 0; dx < r; ++dx)
                            for (int h = 0; h < H; ++h)
                                for (int w = 0; w < W; ++w)
                                    xn->grad[in_idx(b, c * r * r + dy * r + dx, h, w)] +=
                                        on->grad[out_idx(b, c, r * h + dy, r * w + dx)];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense / embedding / dropout

// x: (B,Din); weight: (Dout,Din); bias: (Dout).
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.ndim() != 2 || weight.ndim() != 2) throw ShapeError("dense: expected 2-d tensors");
    const int B = x.dim(0), Din = x.dim(1), Dout = weight.dim(0);
    if (weight.dim(1) != Din)
        throw ShapeError("dense: input dim " + std::to_string(Din) + " vs weight dim " +
                         std::to_string(weight.dim(1)));
    if (bias.size() != static_cast<size_t>(Dout)) throw ShapeError("dense: bias length mismatch");
    std::vector<T> y(static_cast<size_t>(B) * Dout);
    for (int b = 0; b < B; ++b) std::copy_n(bias.data().begin(), Dout, y.begin() + b * Dout);
    gemm<T>(false, true, B, Dout, Din, T(1), x.data().data(), weight.data().data(), T(1),
            y.data());
    auto out = Tensor<T>::from_data({B, Dout}, std::move(y));
    bool rg = g_grad_enabled &&
              (x.requires_grad() || weight.requires_grad() || bias.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias.node();
        auto on = out.node();
        on->parents = {xn, wn, bn};
        on->backward = [xn, wn, bn, on = on.get(), B, Din, Dout]() {
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int b = 0; b < B; ++b)
                    for (int d = 0; d < Dout; ++d) bn->grad[d] += on->grad[b * Dout + d];
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                gemm<T>(true, false, Dout, Din, B, T(1), on->grad.data(), xn->data.data(), T(1),
                        wn->grad.data());
            }
            if (xn->requires_grad || xn->backward) {
                xn->ensure_grad();
                gemm<T>(false, false, B, Din, Dout, T(1), on->grad.data(), wn->data.data(), T(1),
                        xn->grad.data());
            }
        };
    }
    return out;
}

// table: (V,d); indices: one id per batch element. Output (B,d).
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& indices,
                           const std::string& feature) {
    if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be 2-d");
    const int V = table.dim(0), d = table.dim(1);
    const int B = static_cast<int>(indices.size());
    std::vector<T> y(static_cast<size_t>(B) * d);
    for (int b = 0; b < B; ++b) {
        const int idx = indices[b];
        if (idx < 0 || idx >= V)
            throw DomainError("embedding_lookup: index " + std::to_string(idx) +
                              " out of range for feature '" + feature + "' (vocab " +
                              std::to_string(V) + ")");
        std::copy_n(table.data().begin() + static_cast<size_t>(idx) * d, d, y.begin() + b * d);
    }
    auto out = Tensor<T>::from_data({B, d}, std::move(y));
    bool rg = g_grad_enabled && table.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto tn = table.node();
        auto on = out.node();
        auto idx = std::make_shared<std::vector<int>>(indices);
        on->parents = {tn};
        on->backward = [tn, on = on.get(), idx, d]() {
            tn->ensure_grad();
            for (size_t b = 0; b < idx->size(); ++b)
                for (int j = 0; j < d; ++j)
                    tn->grad[static_cast<size_t>((*idx)[b]) * d + j] += on->grad[b * d + j];
        };
    }
    return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, bool train, std::mt19937& rng) {
    if (rate < T(0) || rate >= T(1)) throw DomainError("dropout: rate must be in [0,1)");
    if (!train || rate == T(0)) return x;
    const T keep = T(1) - rate;
    auto mask = std::make_shared<std::vector<T>>(x.size());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<T> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const T m = u(rng) < static_cast<double>(rate) ? T(0) : T(1) / keep;
        (*mask)[i] = m;
        y[i] = x.data()[i] * m;
    }
    auto out = Tensor<T>::from_data(x.shape(), std::move(y));
    bool rg = g_grad_enabled && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto on = out.node();
        on->parents = {xn};
        on->backward = [xn, on = on.get(), mask]() {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i] * (*mask)[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Block normalization (differentiable counterpart of n2_normalize)

// x: (B,C,H,W) nonnegative; each entry divided by its n x n spatial block sum + eps.
template <typename T>
Tensor<T> block_normalize(const Tensor<T>& x, int n, T eps) {
    if (x.ndim() != 4) throw ShapeError("block_normalize: expected 4-d tensor");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % n != 0 || W % n != 0)
        throw ShapeError("block_normalize: spatial dims not divisible by scale");
    for (T v : x.data())
        if (v < T(0)) throw DomainError("block_normalize: negative input entry");
    const int BH = H / n, BW = W / n;
    auto denom = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * C * BH * BW);
    std::vector<T> y(x.size());
    auto plane = [&](int b, int c) {
        return x.data().data() + (static_cast<size_t>(b) * C + c) * H * W;
    };
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* xp = plane(b, c);
            T* yp = y.data() + (static_cast<size_t>(b) * C + c) * H * W;
            for (int bi = 0; bi < BH; ++bi)
                for (int bj = 0; bj < BW; ++bj) {
                    T s = T(0);
                    for (int di = 0; di < n; ++di)
                        for (int dj = 0; dj < n; ++dj)
                            s += xp[(bi * n + di) * W + bj * n + dj];
                    const T dn = s + eps;
                    (*denom)[((static_cast<size_t>(b) * C + c) * BH + bi) * BW + bj] = dn;
                    for (int di = 0; di < n; ++di)
                        for (int dj = 0; dj < n; ++dj) {
                            const size_t ii = (bi * n + di) * static_cast<size_t>(W) + bj * n + dj;
                            yp[ii] = dn == T(0) ? T(0) : xp[ii] / dn;
                        }
                }
        }
    auto out = Tensor<T>::from_data(x.shape(), std::move(y));
    bool rg = g_grad_enabled && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto on = out.node();
        on->parents = {xn};
        on->backward = [xn, on = on.get(), denom, B, C, H, W, n, BH, BW]() {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const size_t base = (static_cast<size_t>(b) * C + c) * H * W;
                    for (int bi = 0; bi < BH; ++bi)
                        for (int bj = 0; bj < BW; ++bj) {
                            const T dn =
                                (*denom)[((static_cast<size_t>(b) * C + c) * BH + bi) * BW + bj];
                            if (dn == T(0)) continue;
                            T dot = T(0);
                            for (int di = 0; di < n; ++di)
                                for (int dj = 0; dj < n; ++dj) {
                                    const size_t ii =
                                        base + (bi * n + di) * static_cast<size_t>(W) + bj * n + dj;
                                    dot += on->grad[ii] * xn->data[ii];
                                }
                            const T inv = T(1) / dn;
                            const T corr = dot * inv * inv;
                            for (int di = 0; di < n; ++di)
                                for (int dj = 0; dj < n; ++dj) {
                                    const size_t ii =
                                        base + (bi * n + di) * static_cast<size_t>(W) + bj * n + dj;
                                    xn->grad[ii] += on->grad[ii] * inv - corr;
                                }
                        }
                }
        };
    }
    return out;
}

// Spatial n x n block sums: (B,C,H,W) -> (B,C,H/n,W/n).
template <typename T>
Tensor<T> sum_pool(const Tensor<T>& x, int n) {
    if (x.ndim() != 4) throw ShapeError("sum_pool: expected 4-d tensor");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % n != 0 || W % n != 0) throw ShapeError("sum_pool: spatial dims not divisible by scale");
    const int BH = H / n, BW = W / n;
    std::vector<T> y(static_cast<size_t>(B) * C * BH * BW, T(0));
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* xp = x.data().data() + (static_cast<size_t>(b) * C + c) * H * W;
            T* yp = y.data() + (static_cast<size_t>(b) * C + c) * BH * BW;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) yp[(i / n) * BW + j / n] += xp[i * W + j];
        }
    auto out = Tensor<T>::from_data({B, C, BH, BW}, std::move(y));
    bool rg = g_grad_enabled && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto on = out.node();
        on->parents = {xn};
        on->backward = [xn, on = on.get(), B, C, H, W, n, BW]() {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    T* gx = xn->grad.data() + (static_cast<size_t>(b) * C + c) * H * W;
                    const T* gy = on->grad.data() + (static_cast<size_t>(b) * C + c) * (H / n) * BW;
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j) gx[i * W + j] += gy[(i / n) * BW + j / n];
                }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

// Mean over all entries of squared difference.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape()) throw ShapeError("mse_loss: shape mismatch");
    const size_t n = pred.size();
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) {
        const T d = pred.data()[i] - target.data()[i];
        acc += d * d;
    }
    auto out = Tensor<T>::from_data({1}, {acc / static_cast<T>(n)});
    bool rg = g_grad_enabled && (pred.requires_grad() || target.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        auto pn = pred.node();
        auto tn = target.node();
        auto on = out.node();
        on->parents = {pn, tn};
        on->backward = [pn, tn, on = on.get(), n]() {
            const T g = on->grad[0] * T(2) / static_cast<T>(n);
            if (pn->requires_grad || pn->backward) {
                pn->ensure_grad();
                for (size_t i = 0; i < n; ++i) pn->grad[i] += g * (pn->data[i] - tn->data[i]);
            }
            if (tn->requires_grad || tn->backward) {
                tn->ensure_grad();
                for (size_t i = 0; i < n; ++i) tn->grad[i] -= g * (pn->data[i] - tn->data[i]);
            }
        };
    }
    return out;
}

// Mean over entries of |x - target|, with fixed target; subgradient at 0 is 0.
template <typename T>
Tensor<T> mae_to_const(const Tensor<T>& x, std::vector<T> target) {
    if (target.size() != x.size()) throw ShapeError("mae_to_const: target length mismatch");
    const size_t n = x.size();
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) acc += std::abs(x.data()[i] - target[i]);
    auto out = Tensor<T>::from_data({1}, {acc / static_cast<T>(n)});
    bool rg = g_grad_enabled && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        auto xn = x.node();
        auto on = out.node();
        auto t = std::make_shared<std::vector<T>>(std::move(target));
        on->parents = {xn};
        on->backward = [xn, on = on.get(), t, n]() {
            xn->ensure_grad();
            const T g = on->grad[0] / static_cast<T>(n);
            for (size_t i = 0; i < n; ++i) {
                const T d = xn->data[i] - (*t)[i];
                if (d > T(0))
                    xn->grad[i] += g;
                else if (d < T(0))
                    xn->grad[i] -= g;
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> add_scalars(const Tensor<T>& a, const Tensor<T>& b, T weight_b) {
    auto wb = mul_scalar(b, weight_b);
    return add(a, wb);
}

}  // namespace urbanfm::nn
