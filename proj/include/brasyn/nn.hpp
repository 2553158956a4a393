#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"

namespace brasyn::nn {

using ad::Var;

// ---------------------------------------------------------------------------
// Parameter registry: every model owns one so checkpoints can address weights
// by name and optimizers can enumerate trainables.
// ---------------------------------------------------------------------------

template <class T>
struct ParamStore {
    std::vector<std::pair<std::string, Var<T>>> items;

    Var<T> add(const std::string& name, Tensor<T> t, bool trainable = true) {
        auto v = ad::make_var(std::move(t), trainable);
        items.emplace_back(name, v);
        return v;
    }

    Var<T> find(const std::string& name) const {
        for (const auto& [n, v] : items)
            if (n == name) return v;
        BRASYN_CHECK(false, "parameter not found: ", name);
        return nullptr;
    }

    std::vector<Var<T>> trainable() const {
        std::vector<Var<T>> out;
        for (const auto& [n, v] : items)
            if (v->requires_grad) out.push_back(v);
        return out;
    }

    void freeze() {
        for (auto& [n, v] : items) v->requires_grad = false;
    }

    std::size_t count() const {
        std::size_t c = 0;
        for (const auto& [n, v] : items) c += v->value.size();
        return c;
    }

    // Order-insensitive content checksum, used to verify frozen models.
    double checksum() const {
        double s = 0;
        for (const auto& [n, v] : items)
            for (std::size_t i = 0; i < v->value.size(); ++i)
                s += double(v->value[i]) * double((i % 97) + 1);
        return s;
    }
};

template <class T>
Tensor<T> kaiming_init(Shape shape, std::size_t fan_in, Rng& rng) {
    T std = T(std::sqrt(2.0 / double(fan_in)));
    return Tensor<T>::randn(std::move(shape), rng, std);
}

// ---------------------------------------------------------------------------
// im2col helpers (cubic kernels, symmetric stride/pad)
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t conv_out_size(std::size_t in, int k, int s, int p) {
    BRASYN_CHECK(std::size_t(in) + 2 * std::size_t(p) >= std::size_t(k),
                 "conv: input dim ", in, " too small for kernel ", k);
    return (in + 2 * std::size_t(p) - std::size_t(k)) / std::size_t(s) + 1;
}

// x[c, H, W] -> cols[(c*k + i)*k + j, oy*Wo + ox]
template <class T>
void im2col2d(const T* x, std::size_t C, std::size_t H, std::size_t W, int k,
              int s, int p, std::size_t Ho, std::size_t Wo, T* cols) {
    const std::size_t patch = std::size_t(k) * std::size_t(k);
    for (std::size_t c = 0; c < C; ++c) {
        const T* xc = x + c * H * W;
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
                T* row = cols + (c * patch + std::size_t(i) * k + j) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = long(oy) * s + i - p;
                    T* dst = row + oy * Wo;
                    if (iy < 0 || iy >= long(H)) {
                        std::fill(dst, dst + Wo, T(0));
                        continue;
                    }
                    const T* src = xc + std::size_t(iy) * W;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = long(ox) * s + j - p;
                        dst[ox] = (ix < 0 || ix >= long(W)) ? T(0) : src[ix];
                    }
                }
            }
    }
}

template <class T>
void col2im2d(const T* cols, std::size_t C, std::size_t H, std::size_t W, int k,
              int s, int p, std::size_t Ho, std::size_t Wo, T* x /* += */) {
    const std::size_t patch = std::size_t(k) * std::size_t(k);
    for (std::size_t c = 0; c < C; ++c) {
        T* xc = x + c * H * W;
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
                const T* row = cols + (c * patch + std::size_t(i) * k + j) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = long(oy) * s + i - p;
                    if (iy < 0 || iy >= long(H)) continue;
                    T* dst = xc + std::size_t(iy) * W;
                    const T* src = row + oy * Wo;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = long(ox) * s + j - p;
                        if (ix >= 0 && ix < long(W)) dst[ix] += src[ox];
                    }
                }
            }
    }
}

// x[c, D, H, W] -> cols[((c*k + a)*k + i)*k + j, (od*Ho + oy)*Wo + ox]
template <class T>
void im2col3d(const T* x, std::size_t C, std::size_t D, std::size_t H,
              std::size_t W, int k, int s, int p, std::size_t Do, std::size_t Ho,
              std::size_t Wo, T* cols) {
    const std::size_t patch = std::size_t(k) * k * k;
    const std::size_t ovol = Do * Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
        const T* xc = x + c * D * H * W;
        for (int a = 0; a < k; ++a)
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) {
                    T* row = cols +
                             (c * patch + (std::size_t(a) * k + i) * k + j) * ovol;
                    for (std::size_t od = 0; od < Do; ++od) {
                        const long id = long(od) * s + a - p;
                        for (std::size_t oy = 0; oy < Ho; ++oy) {
                            const long iy = long(oy) * s + i - p;
                            T* dst = row + (od * Ho + oy) * Wo;
                            if (id < 0 || id >= long(D) || iy < 0 || iy >= long(H)) {
                                std::fill(dst, dst + Wo, T(0));
                                continue;
                            }
                            const T* src = xc + (std::size_t(id) * H + std::size_t(iy)) * W;
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                const long ix = long(ox) * s + j - p;
                                dst[ox] = (ix < 0 || ix >= long(W)) ? T(0) : src[ix];
                            }
                        }
                    }
                }
    }
}

template <class T>
void col2im3d(const T* cols, std::size_t C, std::size_t D, std::size_t H,
              std::size_t W, int k, int s, int p, std::size_t Do, std::size_t Ho,
              std::size_t Wo, T* x /* += */) {
    const std::size_t patch = std::size_t(k) * k * k;
    const std::size_t ovol = Do * Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
        T* xc = x + c * D * H * W;
        for (int a = 0; a < k; ++a)
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) {
                    const T* row = cols +
                                   (c * patch + (std::size_t(a) * k + i) * k + j) * ovol;
                    for (std::size_t od = 0; od < Do; ++od) {
                        const long id = long(od) * s + a - p;
                        if (id < 0 || id >= long(D)) continue;
                        for (std::size_t oy = 0; oy < Ho; ++oy) {
                            const long iy = long(oy) * s + i - p;
                            if (iy < 0 || iy >= long(H)) continue;
                            T* dst = xc + (std::size_t(id) * H + std::size_t(iy)) * W;
                            const T* src = row + (od * Ho + oy) * Wo;
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                const long ix = long(ox) * s + j - p;
                                if (ix >= 0 && ix < long(W)) dst[ix] += src[ox];
                            }
                        }
                    }
                }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

// x: [N, Cin, H, W], w: [Cout, Cin, k, k], b: [Cout]
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1,
              int pad = 0) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    BRASYN_CHECK(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1],
                 "conv2d: bad shapes ", shape_str(xs), " w ", shape_str(ws));
    const std::size_t N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const std::size_t Cout = ws[0];
    const int k = int(ws[2]);
    const std::size_t Ho = detail::conv_out_size(H, k, stride, pad);
    const std::size_t Wo = detail::conv_out_size(W, k, stride, pad);
    const std::size_t patch = Cin * k * k, ovol = Ho * Wo;

    Tensor<T> out(Shape{N, Cout, Ho, Wo});
    std::vector<T> cols(patch * ovol);
    for (std::size_t n = 0; n < N; ++n) {
        detail::im2col2d(x->value.data() + n * Cin * H * W, Cin, H, W, k, stride,
                         pad, Ho, Wo, cols.data());
        T* om = out.data() + n * Cout * ovol;
        ad::gemm(w->value.data(), cols.data(), om, Cout, patch, ovol);
        for (std::size_t co = 0; co < Cout; ++co) {
            const T bias = b->value[co];
            T* dst = om + co * ovol;
            for (std::size_t i = 0; i < ovol; ++i) dst[i] += bias;
        }
    }
    return ad::make_op<T>(
        std::move(out), {x, w, b},
        [N, Cin, H, W, Cout, k, stride, pad, Ho, Wo, patch, ovol](ad::Node<T>& nd) {
            auto &X = *nd.inputs[0], &Wt = *nd.inputs[1], &B = *nd.inputs[2];
            std::vector<T> cols(patch * ovol);
            if (B.requires_grad) {
                auto& gb = B.ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const T* g = nd.grad.data() + (n * Cout + co) * ovol;
                        double s = 0;
                        for (std::size_t i = 0; i < ovol; ++i) s += double(g[i]);
                        gb[co] += T(s);
                    }
            }
            if (Wt.requires_grad) {
                auto& gw = Wt.ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    detail::im2col2d(X.value.data() + n * Cin * H * W, Cin, H, W, k,
                                     stride, pad, Ho, Wo, cols.data());
                    ad::gemm(nd.grad.data() + n * Cout * ovol, cols.data(), gw.data(),
                             Cout, ovol, patch, false, true, true);
                }
            }
            if (X.requires_grad) {
                auto& gx = X.ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    ad::gemm(Wt.value.data(), nd.grad.data() + n * Cout * ovol,
                             cols.data(), patch, Cout, ovol, true, false, false);
                    detail::col2im2d(cols.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                                     gx.data() + n * Cin * H * W);
                }
            }
        });
}

// x: [N, Cin, D, H, W], w: [Cout, Cin, k, k, k], b: [Cout]
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1,
              int pad = 0) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    BRASYN_CHECK(xs.size() == 5 && ws.size() == 5 && xs[1] == ws[1],
                 "conv3d: bad shapes ", shape_str(xs), " w ", shape_str(ws));
    const std::size_t N = xs[0], Cin = xs[1], D = xs[2], H = xs[3], W = xs[4];
    const std::size_t Cout = ws[0];
    const int k = int(ws[2]);
    const std::size_t Do = detail::conv_out_size(D, k, stride, pad);
    const std::size_t Ho = detail::conv_out_size(H, k, stride, pad);
    const std::size_t Wo = detail::conv_out_size(W, k, stride, pad);
    const std::size_t patch = Cin * k * k * k, ovol = Do * Ho * Wo;

    Tensor<T> out(Shape{N, Cout, Do, Ho, Wo});
    std::vector<T> cols(patch * ovol);
    for (std::size_t n = 0; n < N; ++n) {
        detail::im2col3d(x->value.data() + n * Cin * D * H * W, Cin, D, H, W, k,
                         stride, pad, Do, Ho, Wo, cols.data());
        T* om = out.data() + n * Cout * ovol;
        ad::gemm(w->value.data(), cols.data(), om, Cout, patch, ovol);
        for (std::size_t co = 0; co < Cout; ++co) {
            const T bias = b->value[co];
            T* dst = om + co * ovol;
            for (std::size_t i = 0; i < ovol; ++i) dst[i] += bias;
        }
    }
    return ad::make_op<T>(
        std::move(out), {x, w, b},
        [N, Cin, D, H, W, Cout, k, stride, pad, Do, Ho, Wo, patch, ovol](ad::Node<T>& nd) {
            auto &X = *nd.inputs[0], &Wt = *nd.inputs[1], &B = *nd.inputs[2];
            std::vector<T> cols(patch * ovol);
            if (B.requires_grad) {
                auto& gb = B.ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const T* g = nd.grad.data() + (n * Cout + co) * ovol;
                        double s = 0;
                        for (std::size_t i = 0; i < ovol; ++i) s += double(g[i]);
                        gb[co] += T(s);
                    }
            }
            if (Wt.requires_grad) {
                auto& gw = Wt.ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    detail::im2col3d(X.value.data() + n * Cin * D * H * W, Cin, D, H,
                                     W, k, stride, pad, Do, Ho, Wo, cols.data());
                    ad::gemm(nd.grad.data() + n * Cout * ovol, cols.data(), gw.data(),
                             Cout, ovol, patch, false, true, true);
                }
            }
            if (X.requires_grad) {
                auto& gx = X.ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    ad::gemm(Wt.value.data(), nd.grad.data() + n * Cout * ovol,
                             cols.data(), patch, Cout, ovol, true, false, false);
                    detail::col2im3d(cols.data(), Cin, D, H, W, k, stride, pad, Do,
                                     Ho, Wo, gx.data() + n * Cin * D * H * W);
                }
            }
        });
}

// x: [N, Cin, H, W], w: [Cin, Cout, k, k], b: [Cout].
// Out spatial size: (in-1)*stride + k - 2*pad.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                        int stride = 1, int pad = 0) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    BRASYN_CHECK(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[0],
                 "conv_transpose2d: bad shapes ", shape_str(xs), " w ", shape_str(ws));
    const std::size_t N = xs[0], Cin = xs[1], Hi = xs[2], Wi = xs[3];
    const std::size_t Cout = ws[1];
    const int k = int(ws[2]);
    const std::size_t Ho = (Hi - 1) * std::size_t(stride) + std::size_t(k) - 2 * std::size_t(pad);
    const std::size_t Wo = (Wi - 1) * std::size_t(stride) + std::size_t(k) - 2 * std::size_t(pad);
    const std::size_t patch = Cout * k * k, ivol = Hi * Wi;

    Tensor<T> out(Shape{N, Cout, Ho, Wo});
    std::vector<T> cols(patch * ivol);
    for (std::size_t n = 0; n < N; ++n) {
        // cols = W^T [Cout*k*k, Cin] * x [Cin, Hi*Wi]
        ad::gemm(w->value.data(), x->value.data() + n * Cin * ivol, cols.data(),
                 patch, Cin, ivol, true, false);
        detail::col2im2d(cols.data(), Cout, Ho, Wo, k, stride, pad, Hi, Wi,
                         out.data() + n * Cout * Ho * Wo);
        T* om = out.data() + n * Cout * Ho * Wo;
        for (std::size_t co = 0; co < Cout; ++co) {
            const T bias = b->value[co];
            T* dst = om + co * Ho * Wo;
            for (std::size_t i = 0; i < Ho * Wo; ++i) dst[i] += bias;
        }
    }
    return ad::make_op<T>(
        std::move(out), {x, w, b},
        [N, Cin, Hi, Wi, Cout, k, stride, pad, Ho, Wo, patch, ivol](ad::Node<T>& nd) {
            auto &X = *nd.inputs[0], &Wt = *nd.inputs[1], &B = *nd.inputs[2];
            std::vector<T> cols(patch * ivol);
            if (B.requires_grad) {
                auto& gb = B.ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const T* g = nd.grad.data() + (n * Cout + co) * Ho * Wo;
                        double s = 0;
                        for (std::size_t i = 0; i < Ho * Wo; ++i) s += double(g[i]);
                        gb[co] += T(s);
                    }
            }
            for (std::size_t n = 0; n < N; ++n) {
                // im2col of grad on the input grid
                detail::im2col2d(nd.grad.data() + n * Cout * Ho * Wo, Cout, Ho, Wo,
                                 k, stride, pad, Hi, Wi, cols.data());
                if (X.requires_grad)
                    // dX [Cin, ivol] = W [Cin, Cout*k*k] * cols
                    ad::gemm(Wt.value.data(), cols.data(),
                             X.ensure_grad().data() + n * Cin * ivol, Cin, patch,
                             ivol, false, false, true);
                if (Wt.requires_grad)
                    // dW [Cin, Cout*k*k] = x [Cin, ivol] * cols^T
                    ad::gemm(X.value.data() + n * Cin * ivol, cols.data(),
                             Wt.ensure_grad().data(), Cin, ivol, patch, false, true,
                             true);
            }
        });
}

// ---------------------------------------------------------------------------
// Dense / conditioning ops
// ---------------------------------------------------------------------------

// x: [N, Fin], w: [Fout, Fin], b: [Fout]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    BRASYN_CHECK(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1],
                 "linear: bad shapes ", shape_str(xs), " w ", shape_str(ws));
    const std::size_t N = xs[0], Fin = xs[1], Fout = ws[0];
    Tensor<T> out(Shape{N, Fout});
    ad::gemm(x->value.data(), w->value.data(), out.data(), N, Fin, Fout, false, true);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < Fout; ++f) out[n * Fout + f] += b->value[f];
    return ad::make_op<T>(std::move(out), {x, w, b}, [N, Fin, Fout](ad::Node<T>& nd) {
        auto &X = *nd.inputs[0], &Wt = *nd.inputs[1], &B = *nd.inputs[2];
        if (B.requires_grad) {
            auto& gb = B.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t f = 0; f < Fout; ++f)
                    gb[f] += nd.grad[n * Fout + f];
        }
        if (X.requires_grad)
            ad::gemm(nd.grad.data(), Wt.value.data(), X.ensure_grad().data(), N,
                     Fout, Fin, false, false, true);
        if (Wt.requires_grad)
            ad::gemm(nd.grad.data(), X.value.data(), Wt.ensure_grad().data(), Fout,
                     N, Fin, true, false, true);
    });
}

// Per-channel affine modulation: x [N, C, spatial...], gamma/beta [N, C].
template <class T>
Var<T> film(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    const auto& xs = x->value.shape();
    BRASYN_CHECK(xs.size() >= 2, "film: need [N,C,...] input");
    const std::size_t N = xs[0], C = xs[1];
    BRASYN_CHECK(gamma->value.shape() == Shape({N, C}) &&
                     beta->value.shape() == Shape({N, C}),
                 "film: gamma/beta must be [N,C]");
    const std::size_t V = x->value.size() / (N * C);
    Tensor<T> out(xs);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T g = gamma->value[n * C + c], be = beta->value[n * C + c];
            const T* src = x->value.data() + (n * C + c) * V;
            T* dst = out.data() + (n * C + c) * V;
            for (std::size_t v = 0; v < V; ++v) dst[v] = g * src[v] + be;
        }
    return ad::make_op<T>(std::move(out), {x, gamma, beta}, [N, C, V](ad::Node<T>& nd) {
        auto &X = *nd.inputs[0], &G = *nd.inputs[1], &B = *nd.inputs[2];
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const T* go = nd.grad.data() + (n * C + c) * V;
                if (X.requires_grad) {
                    const T g = G.value[n * C + c];
                    T* gx = X.ensure_grad().data() + (n * C + c) * V;
                    for (std::size_t v = 0; v < V; ++v) gx[v] += g * go[v];
                }
                if (G.requires_grad) {
                    const T* src = X.value.data() + (n * C + c) * V;
                    double s = 0;
                    for (std::size_t v = 0; v < V; ++v) s += double(go[v]) * double(src[v]);
                    G.ensure_grad()[n * C + c] += T(s);
                }
                if (B.requires_grad) {
                    double s = 0;
                    for (std::size_t v = 0; v < V; ++v) s += double(go[v]);
                    B.ensure_grad()[n * C + c] += T(s);
                }
            }
    });
}

// Layer norm across the channel axis at every spatial location.
// x: [N, C, spatial...], gain/bias: [C].
template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                           T eps = T(1e-5)) {
    const auto& xs = x->value.shape();
    BRASYN_CHECK(xs.size() >= 2, "layer_norm_channels: need [N,C,...]");
    const std::size_t N = xs[0], C = xs[1];
    BRASYN_CHECK(gain->value.shape() == Shape({C}) && bias->value.shape() == Shape({C}),
                 "layer_norm_channels: gain/bias must be [C]");
    const std::size_t V = x->value.size() / (N * C);

    Tensor<T> out(xs);
    Tensor<T> xhat(xs);      // saved for backward
    Tensor<T> inv_std(Shape{N, V});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t v = 0; v < V; ++v) {
            const T* base = x->value.data() + n * C * V + v;
            double mu = 0;
            for (std::size_t c = 0; c < C; ++c) mu += double(base[c * V]);
            mu /= double(C);
            double var = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const double d = double(base[c * V]) - mu;
                var += d * d;
            }
            var /= double(C);
            const T istd = T(1.0 / std::sqrt(var + double(eps)));
            inv_std[n * V + v] = istd;
            T* ob = out.data() + n * C * V + v;
            T* hb = xhat.data() + n * C * V + v;
            for (std::size_t c = 0; c < C; ++c) {
                const T h = (base[c * V] - T(mu)) * istd;
                hb[c * V] = h;
                ob[c * V] = h * gain->value[c] + bias->value[c];
            }
        }
    return ad::make_op<T>(
        std::move(out), {x, gain, bias},
        [N, C, V, xhat = std::move(xhat), inv_std = std::move(inv_std)](ad::Node<T>& nd) {
            auto &X = *nd.inputs[0], &G = *nd.inputs[1], &B = *nd.inputs[2];
            if (G.requires_grad || B.requires_grad) {
                for (std::size_t c = 0; c < C; ++c) {
                    double sg = 0, sb = 0;
                    for (std::size_t n = 0; n < N; ++n) {
                        const T* go = nd.grad.data() + (n * C + c) * V;
                        const T* hb = xhat.data() + (n * C + c) * V;
                        for (std::size_t v = 0; v < V; ++v) {
                            sg += double(go[v]) * double(hb[v]);
                            sb += double(go[v]);
                        }
                    }
                    if (G.requires_grad) G.ensure_grad()[c] += T(sg);
                    if (B.requires_grad) B.ensure_grad()[c] += T(sb);
                }
            }
            if (!X.requires_grad) return;
            auto& gx = X.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t v = 0; v < V; ++v) {
                    const T* go = nd.grad.data() + n * C * V + v;
                    const T* hb = xhat.data() + n * C * V + v;
                    double m1 = 0, m2 = 0; // mean(dxhat), mean(dxhat*xhat)
                    for (std::size_t c = 0; c < C; ++c) {
                        const double dh = double(go[c * V]) * double(G.value[c]);
                        m1 += dh;
                        m2 += dh * double(hb[c * V]);
                    }
                    m1 /= double(C);
                    m2 /= double(C);
                    const T istd = inv_std[n * V + v];
                    T* gb = gx.data() + n * C * V + v;
                    for (std::size_t c = 0; c < C; ++c) {
                        const double dh = double(go[c * V]) * double(G.value[c]);
                        gb[c * V] += T((dh - m1 - double(hb[c * V]) * m2) * double(istd));
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// Windowed local mean (uniform box, windows clipped at borders), the
// building block for differentiable SSIM. Separable sliding sums keep it
// O(voxels) per axis; normalization is by the clipped window volume.
// ---------------------------------------------------------------------------

namespace detail {

// Sliding-window sums of radius r along the middle axis of [outer, L, inner].
template <class T>
void box_sum_axis(const T* in, T* out, std::size_t outer, std::size_t L,
                  std::size_t inner, int r) {
    std::vector<double> acc(inner);
    for (std::size_t o = 0; o < outer; ++o) {
        const T* xo = in + o * L * inner;
        T* yo = out + o * L * inner;
        std::fill(acc.begin(), acc.end(), 0.0);
        const std::size_t warm = std::min(L, std::size_t(r));
        for (std::size_t i = 0; i < warm; ++i)
            for (std::size_t j = 0; j < inner; ++j) acc[j] += double(xo[i * inner + j]);
        for (std::size_t i = 0; i < L; ++i) {
            const long hi = long(i) + r;
            if (hi < long(L))
                for (std::size_t j = 0; j < inner; ++j)
                    acc[j] += double(xo[std::size_t(hi) * inner + j]);
            T* dst = yo + i * inner;
            for (std::size_t j = 0; j < inner; ++j) dst[j] = T(acc[j]);
            const long lo = long(i) - r;
            if (lo >= 0)
                for (std::size_t j = 0; j < inner; ++j)
                    acc[j] -= double(xo[std::size_t(lo) * inner + j]);
        }
    }
}

inline std::vector<double> clip_counts(std::size_t L, int r) {
    std::vector<double> c(L);
    for (std::size_t i = 0; i < L; ++i) {
        const long lo = std::max<long>(0, long(i) - r);
        const long hi = std::min<long>(long(L) - 1, long(i) + r);
        c[i] = double(hi - lo + 1);
    }
    return c;
}

// Box sums over the trailing `spatial.size()` axes of x viewed as
// [lead, spatial...]. In-place sequence of separable passes.
template <class T>
void box_sum_nd(Tensor<T>& t, std::size_t lead, const std::vector<std::size_t>& sp,
                int r) {
    Tensor<T> tmp(t.shape());
    std::size_t inner = 1;
    for (std::size_t a = 0; a < sp.size(); ++a) inner *= sp[a];
    std::size_t outer = lead;
    for (std::size_t a = 0; a < sp.size(); ++a) {
        const std::size_t L = sp[a];
        inner /= L;
        box_sum_axis(t.data(), tmp.data(), outer, L, inner, r);
        std::swap(t, tmp);
        outer *= L;
    }
}

template <class T>
void divide_by_counts(Tensor<T>& t, std::size_t lead,
                      const std::vector<std::size_t>& sp, int r) {
    std::vector<std::vector<double>> counts;
    for (std::size_t a = 0; a < sp.size(); ++a) counts.push_back(clip_counts(sp[a], r));
    std::size_t vol = 1;
    for (std::size_t a = 0; a < sp.size(); ++a) vol *= sp[a];
    std::vector<double> inv(vol);
    // product of per-axis counts at each position
    for (std::size_t pos = 0; pos < vol; ++pos) {
        std::size_t rem = pos;
        double c = 1;
        for (std::size_t a = sp.size(); a-- > 0;) {
            c *= counts[a][rem % sp[a]];
            rem /= sp[a];
        }
        inv[pos] = 1.0 / c;
    }
    for (std::size_t o = 0; o < lead; ++o) {
        T* base = t.data() + o * vol;
        for (std::size_t pos = 0; pos < vol; ++pos) base[pos] = T(double(base[pos]) * inv[pos]);
    }
}

} // namespace detail

// Uniform-window local mean over the trailing spatial axes (2 for [N,C,H,W],
// 3 for [N,C,D,H,W]); window is `window` wide (odd) and clipped at borders.
template <class T>
Var<T> local_mean(const Var<T>& x, int window) {
    const auto& xs = x->value.shape();
    BRASYN_CHECK(xs.size() == 4 || xs.size() == 5, "local_mean: need 4-d or 5-d input");
    BRASYN_CHECK(window >= 1 && window % 2 == 1, "local_mean: window must be odd");
    const int r = window / 2;
    const std::size_t lead = xs[0] * xs[1];
    std::vector<std::size_t> sp(xs.begin() + 2, xs.end());

    Tensor<T> out = x->value;
    detail::box_sum_nd(out, lead, sp, r);
    detail::divide_by_counts(out, lead, sp, r);
    return ad::make_op<T>(std::move(out), {x}, [lead, sp, r](ad::Node<T>& nd) {
        auto& X = *nd.inputs[0];
        if (!X.requires_grad) return;
        // adjoint: divide grad by counts, then apply the same clipped box sum
        Tensor<T> g = nd.grad;
        detail::divide_by_counts(g, lead, sp, r);
        detail::box_sum_nd(g, lead, sp, r);
        ad::detail::axpy(X.ensure_grad(), g);
    });
}

// ---------------------------------------------------------------------------
// Resampling / pooling / shape
// ---------------------------------------------------------------------------

// Nearest-neighbour upsample by integer factor over trailing spatial axes.
template <class T>
Var<T> upsample_nearest(const Var<T>& x, int factor = 2) {
    const auto& xs = x->value.shape();
    BRASYN_CHECK(xs.size() == 4 || xs.size() == 5, "upsample_nearest: need 4-d or 5-d");
    Shape os = xs;
    for (std::size_t a = 2; a < xs.size(); ++a) os[a] *= std::size_t(factor);
    const std::size_t lead = xs[0] * xs[1];
    std::vector<std::size_t> si(xs.begin() + 2, xs.end());
    std::vector<std::size_t> so(os.begin() + 2, os.end());
    std::size_t ivol = 1, ovol = 1;
    for (auto v : si) ivol *= v;
    for (auto v : so) ovol *= v;

    auto in_index = [&](std::size_t opos) {
        std::size_t rem = opos, idx = 0;
        for (std::size_t a = 0; a < so.size(); ++a) {
            std::size_t stride = 1;
            for (std::size_t b = a + 1; b < so.size(); ++b) stride *= so[b];
            const std::size_t oc = rem / stride;
            rem %= stride;
            idx = idx * si[a] + oc / std::size_t(factor);
        }
        return idx;
    };
    std::vector<std::size_t> map(ovol);
    for (std::size_t p = 0; p < ovol; ++p) map[p] = in_index(p);

    Tensor<T> out(os);
    for (std::size_t o = 0; o < lead; ++o) {
        const T* src = x->value.data() + o * ivol;
        T* dst = out.data() + o * ovol;
        for (std::size_t p = 0; p < ovol; ++p) dst[p] = src[map[p]];
    }
    return ad::make_op<T>(std::move(out), {x},
                          [lead, ivol, ovol, map = std::move(map)](ad::Node<T>& nd) {
                              auto& X = *nd.inputs[0];
                              if (!X.requires_grad) return;
                              auto& gx = X.ensure_grad();
                              for (std::size_t o = 0; o < lead; ++o) {
                                  const T* g = nd.grad.data() + o * ovol;
                                  T* dst = gx.data() + o * ivol;
                                  for (std::size_t p = 0; p < ovol; ++p)
                                      dst[map[p]] += g[p];
                              }
                          });
}

// Global average pool over spatial axes: [N, C, ...] -> [N, C]
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    const auto& xs = x->value.shape();
    BRASYN_CHECK(xs.size() >= 3, "global_avg_pool: need spatial axes");
    const std::size_t N = xs[0], C = xs[1];
    const std::size_t V = x->value.size() / (N * C);
    Tensor<T> out(Shape{N, C});
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* src = x->value.data() + nc * V;
        double s = 0;
        for (std::size_t v = 0; v < V; ++v) s += double(src[v]);
        out[nc] = T(s / double(V));
    }
    return ad::make_op<T>(std::move(out), {x}, [N, C, V](ad::Node<T>& nd) {
        auto& X = *nd.inputs[0];
        if (!X.requires_grad) return;
        auto& gx = X.ensure_grad();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            const T g = nd.grad[nc] / T(V);
            T* dst = gx.data() + nc * V;
            for (std::size_t v = 0; v < V; ++v) dst[v] += g;
        }
    });
}

// Concatenate two inputs along the channel axis.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& as = a->value.shape();
    const auto& bs = b->value.shape();
    BRASYN_CHECK(as.size() == bs.size() && as.size() >= 2 && as[0] == bs[0],
                 "concat_channels: incompatible ranks/batch");
    for (std::size_t i = 2; i < as.size(); ++i)
        BRASYN_CHECK(as[i] == bs[i], "concat_channels: spatial mismatch");
    const std::size_t N = as[0], Ca = as[1], Cb = bs[1];
    const std::size_t V = a->value.size() / (N * Ca);
    Shape os = as;
    os[1] = Ca + Cb;
    Tensor<T> out(os);
    for (std::size_t n = 0; n < N; ++n) {
        std::copy(a->value.data() + n * Ca * V, a->value.data() + (n + 1) * Ca * V,
                  out.data() + n * (Ca + Cb) * V);
        std::copy(b->value.data() + n * Cb * V, b->value.data() + (n + 1) * Cb * V,
                  out.data() + n * (Ca + Cb) * V + Ca * V);
    }
    return ad::make_op<T>(std::move(out), {a, b}, [N, Ca, Cb, V](ad::Node<T>& nd) {
        auto &A = *nd.inputs[0], &B = *nd.inputs[1];
        for (std::size_t n = 0; n < N; ++n) {
            const T* g = nd.grad.data() + n * (Ca + Cb) * V;
            if (A.requires_grad) {
                T* ga = A.ensure_grad().data() + n * Ca * V;
                for (std::size_t i = 0; i < Ca * V; ++i) ga[i] += g[i];
            }
            if (B.requires_grad) {
                T* gb = B.ensure_grad().data() + n * Cb * V;
                for (std::size_t i = 0; i < Cb * V; ++i) gb[i] += g[Ca * V + i];
            }
        }
    });
}

// Select one channel, keeping a singleton channel axis: [N, K, ...] -> [N, 1, ...]
template <class T>
Var<T> select_channel(const Var<T>& x, std::size_t c) {
    const auto& xs = x->value.shape();
    BRASYN_CHECK(xs.size() >= 2 && c < xs[1], "select_channel: bad channel");
    const std::size_t N = xs[0], K = xs[1];
    const std::size_t V = x->value.size() / (N * K);
    Shape os = xs;
    os[1] = 1;
    Tensor<T> out(os);
    for (std::size_t n = 0; n < N; ++n)
        std::copy(x->value.data() + (n * K + c) * V,
                  x->value.data() + (n * K + c + 1) * V, out.data() + n * V);
    return ad::make_op<T>(std::move(out), {x}, [N, K, V, c](ad::Node<T>& nd) {
        auto& X = *nd.inputs[0];
        if (!X.requires_grad) return;
        auto& gx = X.ensure_grad();
        for (std::size_t n = 0; n < N; ++n) {
            const T* g = nd.grad.data() + n * V;
            T* dst = gx.data() + (n * K + c) * V;
            for (std::size_t v = 0; v < V; ++v) dst[v] += g[v];
        }
    });
}

// Per-sample sum over all non-batch axes: [N, ...] -> [N]
template <class T>
Var<T> sum_per_sample(const Var<T>& x) {
    const auto& xs = x->value.shape();
    BRASYN_CHECK(xs.size() >= 1, "sum_per_sample: need batch axis");
    const std::size_t N = xs[0];
    const std::size_t V = x->value.size() / N;
    Tensor<T> out(Shape{N});
    for (std::size_t n = 0; n < N; ++n) {
        const T* src = x->value.data() + n * V;
        double s = 0;
        for (std::size_t v = 0; v < V; ++v) s += double(src[v]);
        out[n] = T(s);
    }
    return ad::make_op<T>(std::move(out), {x}, [N, V](ad::Node<T>& nd) {
        auto& X = *nd.inputs[0];
        if (!X.requires_grad) return;
        auto& gx = X.ensure_grad();
        for (std::size_t n = 0; n < N; ++n) {
            const T g = nd.grad[n];
            T* dst = gx.data() + n * V;
            for (std::size_t v = 0; v < V; ++v) dst[v] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// Classification heads
// ---------------------------------------------------------------------------

// Softmax over the channel axis of [N, K, ...] (K-way per location).
template <class T>
Var<T> softmax_channels(const Var<T>& x) {
    const auto& xs = x->value.shape();
    BRASYN_CHECK(xs.size() >= 2, "softmax_channels: need [N,K,...]");
    const std::size_t N = xs[0], K = xs[1];
    const std::size_t V = x->value.size() / (N * K);
    Tensor<T> out(xs);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t v = 0; v < V; ++v) {
            const T* base = x->value.data() + n * K * V + v;
            double mx = -1e300;
            for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, double(base[k * V]));
            double denom = 0;
            for (std::size_t k = 0; k < K; ++k) denom += std::exp(double(base[k * V]) - mx);
            T* ob = out.data() + n * K * V + v;
            for (std::size_t k = 0; k < K; ++k)
                ob[k * V] = T(std::exp(double(base[k * V]) - mx) / denom);
        }
    return ad::make_op<T>(std::move(out), {x}, [N, K, V](ad::Node<T>& nd) {
        auto& X = *nd.inputs[0];
        if (!X.requires_grad) return;
        auto& gx = X.ensure_grad();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t v = 0; v < V; ++v) {
                const T* y = nd.value.data() + n * K * V + v;
                const T* go = nd.grad.data() + n * K * V + v;
                double dot = 0;
                for (std::size_t k = 0; k < K; ++k)
                    dot += double(go[k * V]) * double(y[k * V]);
                T* gb = gx.data() + n * K * V + v;
                for (std::size_t k = 0; k < K; ++k)
                    gb[k * V] += T(double(y[k * V]) * (double(go[k * V]) - dot));
            }
    });
}

// Mean cross-entropy of logits [N, K] against integer targets.
template <class T>
Var<T> cross_entropy_logits(const Var<T>& logits, const std::vector<int>& targets) {
    const auto& xs = logits->value.shape();
    BRASYN_CHECK(xs.size() == 2 && xs[0] == targets.size(),
                 "cross_entropy_logits: logits [N,K] vs ", targets.size(), " targets");
    const std::size_t N = xs[0], K = xs[1];
    Tensor<T> soft(Shape{N, K});
    double loss = 0;
    for (std::size_t n = 0; n < N; ++n) {
        const T* z = logits->value.data() + n * K;
        double mx = -1e300;
        for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, double(z[k]));
        double denom = 0;
        for (std::size_t k = 0; k < K; ++k) denom += std::exp(double(z[k]) - mx);
        for (std::size_t k = 0; k < K; ++k)
            soft[n * K + k] = T(std::exp(double(z[k]) - mx) / denom);
        const int t = targets[n];
        BRASYN_CHECK(t >= 0 && std::size_t(t) < K, "cross_entropy_logits: bad target");
        loss += mx + std::log(denom) - double(z[t]);
    }
    Tensor<T> out(Shape{1});
    out[0] = T(loss / double(N));
    return ad::make_op<T>(std::move(out), {logits},
                          [N, K, targets, soft = std::move(soft)](ad::Node<T>& nd) {
                              auto& X = *nd.inputs[0];
                              if (!X.requires_grad) return;
                              auto& gx = X.ensure_grad();
                              const T g = nd.grad[0] / T(N);
                              for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t k = 0; k < K; ++k) {
                                      T d = soft[n * K + k];
                                      if (std::size_t(targets[n]) == k) d -= T(1);
                                      gx[n * K + k] += g * d;
                                  }
                          });
}

// ---------------------------------------------------------------------------
// Layer modules
// ---------------------------------------------------------------------------

template <class T>
struct Conv2dLayer {
    Var<T> w, b;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& ps, const std::string& name, std::size_t cin,
                std::size_t cout, int k, int stride_, int pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w", kaiming_init<T>({cout, cin, std::size_t(k), std::size_t(k)},
                                                cin * k * k, rng));
        b = ps.add(name + ".b", Tensor<T>::zeros({cout}));
    }
    Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class T>
struct ConvT2dLayer {
    Var<T> w, b;
    int stride = 1, pad = 0;

    ConvT2dLayer() = default;
    ConvT2dLayer(ParamStore<T>& ps, const std::string& name, std::size_t cin,
                 std::size_t cout, int k, int stride_, int pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w", kaiming_init<T>({cin, cout, std::size_t(k), std::size_t(k)},
                                                cin * k * k, rng));
        b = ps.add(name + ".b", Tensor<T>::zeros({cout}));
    }
    Var<T> operator()(const Var<T>& x) const {
        return conv_transpose2d(x, w, b, stride, pad);
    }
};

template <class T>
struct Conv3dLayer {
    Var<T> w, b;
    int stride = 1, pad = 0;

    Conv3dLayer() = default;
    Conv3dLayer(ParamStore<T>& ps, const std::string& name, std::size_t cin,
                std::size_t cout, int k, int stride_, int pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w",
                   kaiming_init<T>({cout, cin, std::size_t(k), std::size_t(k), std::size_t(k)},
                                   cin * k * k * k, rng));
        b = ps.add(name + ".b", Tensor<T>::zeros({cout}));
    }
    Var<T> operator()(const Var<T>& x) const { return conv3d(x, w, b, stride, pad); }
};

template <class T>
struct LinearLayer {
    Var<T> w, b;

    LinearLayer() = default;
    LinearLayer(ParamStore<T>& ps, const std::string& name, std::size_t fin,
                std::size_t fout, Rng& rng) {
        w = ps.add(name + ".w", kaiming_init<T>({fout, fin}, fin, rng));
        b = ps.add(name + ".b", Tensor<T>::zeros({fout}));
    }
    Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

template <class T>
struct LayerNormChannelsLayer {
    Var<T> gain, bias;

    LayerNormChannelsLayer() = default;
    LayerNormChannelsLayer(ParamStore<T>& ps, const std::string& name, std::size_t c) {
        gain = ps.add(name + ".gain", Tensor<T>::full({c}, T(1)));
        bias = ps.add(name + ".bias", Tensor<T>::zeros({c}));
    }
    Var<T> operator()(const Var<T>& x) const {
        return layer_norm_channels(x, gain, bias);
    }
};

} // namespace brasyn::nn
