#pragma once

// Differentiable operations over TensorT. Every op computes its forward value
// eagerly and, when a tape is active and an input requires gradients, records
// a backward rule closing over the involved nodes.

#include "vtok/tensor.hpp"

namespace vtok {
namespace ops {

// ----------------------------------------------------------------- elementwise

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "add");
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::recording<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::attach<S>("add", {&a, &b}, out, [an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    detail::check_finite(out, "add");
    return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "sub");
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (detail::recording<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::attach<S>("sub", {&a, &b}, out, [an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    detail::check_finite(out, "sub");
    return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "mul");
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::recording<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::attach<S>("mul", {&a, &b}, out, [an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    detail::check_finite(out, "mul");
    return out;
}

// Scalar broadcast (the only broadcasting the engine supports).
template <typename S>
TensorT<S> add_scalar(const TensorT<S>& a, S c) {
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("add_scalar", {&a}, out, [an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("scale", {&a}, out, [an, on, c] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return out;
}

template <typename S>
TensorT<S> silu(const TensorT<S>& a) {
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        const S sig = S(1) / (S(1) + std::exp(-pa[i]));
        po[i] = pa[i] * sig;
    }
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("silu", {&a}, out, [an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const S x = an->value[i];
                const S sig = S(1) / (S(1) + std::exp(-x));
                an->grad[i] += on->grad[i] * sig * (S(1) + x * (S(1) - sig));
            }
        });
    }
    detail::check_finite(out, "silu");
    return out;
}

template <typename S>
TensorT<S> tanh(const TensorT<S>& a) {
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("tanh", {&a}, out, [an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const S y = on->value[i];
                an->grad[i] += on->grad[i] * (S(1) - y * y);
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> exp(const TensorT<S>& a) {
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("exp", {&a}, out, [an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * on->value[i];
        });
    }
    detail::check_finite(out, "exp");
    return out;
}

template <typename S>
TensorT<S> abs(const TensorT<S>& a) {
    auto out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = std::fabs(pa[i]);
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("abs", {&a}, out, [an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const S x = an->value[i];
                const S sg = x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
                an->grad[i] += on->grad[i] * sg;
            }
        });
    }
    return out;
}

// alpha * x1 + (1 - alpha) * x2
template <typename S>
TensorT<S> alpha_blend(const TensorT<S>& x1, const TensorT<S>& x2, S alpha) {
    require_same_shape(x1, x2, "alpha_blend");
    auto out = TensorT<S>::zeros(x1.shape());
    const S* p1 = x1.data();
    const S* p2 = x2.data();
    S* po = out.data();
    const int64_t n = x1.numel();
    const S beta = S(1) - alpha;
    for (int64_t i = 0; i < n; ++i) po[i] = alpha * p1[i] + beta * p2[i];
    if (detail::recording<S>({&x1, &x2})) {
        auto a = x1.node(), b = x2.node(), on = out.node();
        detail::attach<S>("alpha_blend", {&x1, &x2}, out, [a, b, on, alpha, beta] {
            if (on->grad.empty()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) a->grad[i] += on->grad[i] * alpha;
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) b->grad[i] += on->grad[i] * beta;
            }
        });
    }
    return out;
}

// ----------------------------------------------------------------- reductions

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
    S acc = S(0);
    const S* pa = a.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    auto out = TensorT<S>::scalar(acc);
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("sum", {&a}, out, [an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const S g = on->grad[0];
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        });
    }
    detail::check_finite(out, "sum");
    return out;
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a) {
    S acc = S(0);
    const S* pa = a.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    auto out = TensorT<S>::scalar(acc / static_cast<S>(n));
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("mean", {&a}, out, [an, on, n] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const S g = on->grad[0] / static_cast<S>(n);
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        });
    }
    detail::check_finite(out, "mean");
    return out;
}

// ----------------------------------------------------------------- gradient flow control

// Value copy detached from the graph.
template <typename S>
TensorT<S> stop_gradient(const TensorT<S>& a) {
    return TensorT<S>::from_vector(a.shape(), a.values());
}

// Forward: value. Backward: gradient flows into surrogate only.
template <typename S>
TensorT<S> straight_through(const TensorT<S>& value, const TensorT<S>& surrogate) {
    require_same_shape(value, surrogate, "straight_through");
    auto out = TensorT<S>::from_vector(value.shape(), value.values());
    if (detail::recording<S>({&surrogate})) {
        auto sn = surrogate.node(), on = out.node();
        detail::attach<S>("straight_through", {&surrogate}, out, [sn, on] {
            if (on->grad.empty()) return;
            sn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) sn->grad[i] += on->grad[i];
        });
    }
    return out;
}

// ----------------------------------------------------------------- structural ops (4D [T,C,H,W])

template <typename S>
void require_4d(const TensorT<S>& t, const char* op) {
    if (t.ndim() != 4)
        throw std::invalid_argument(std::string(op) + ": expected 4D [T,C,H,W], got " + shape_str(t.shape()));
}

template <typename S>
TensorT<S> slice_channels(const TensorT<S>& a, int64_t c0, int64_t c1) {
    require_4d(a, "slice_channels");
    const int64_t T = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") for C=" + std::to_string(C));
    const int64_t Cs = c1 - c0, plane = H * W;
    auto out = TensorT<S>::zeros({T, Cs, H, W});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < Cs; ++c)
            std::copy_n(pa + (t * C + c0 + c) * plane, plane, po + (t * Cs + c) * plane);
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("slice_channels", {&a}, out, [an, on, T, C, Cs, c0, plane] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (int64_t t = 0; t < T; ++t)
                for (int64_t c = 0; c < Cs; ++c) {
                    const S* g = on->grad.data() + (t * Cs + c) * plane;
                    S* d = an->grad.data() + (t * C + c0 + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) d[i] += g[i];
                }
        });
    }
    return out;
}

// Prepends n copies of frame 0 (the causal duplication rule).
template <typename S>
TensorT<S> pad_front_frames(const TensorT<S>& a, int64_t n) {
    require_4d(a, "pad_front_frames");
    if (a.dim(0) < 1 || a.numel() == 0) throw std::invalid_argument("pad_front_frames: empty input");
    if (n < 0) throw std::invalid_argument("pad_front_frames: negative count");
    const int64_t T = a.dim(0), fs = a.dim(1) * a.dim(2) * a.dim(3);
    auto out = TensorT<S>::zeros({T + n, a.dim(1), a.dim(2), a.dim(3)});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t t = 0; t < n; ++t) std::copy_n(pa, fs, po + t * fs);
    std::copy_n(pa, T * fs, po + n * fs);
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("pad_front_frames", {&a}, out, [an, on, n, T, fs] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (int64_t t = 0; t < n; ++t)
                for (int64_t i = 0; i < fs; ++i) an->grad[i] += on->grad[t * fs + i];
            for (int64_t i = 0; i < T * fs; ++i) an->grad[i] += on->grad[n * fs + i];
        });
    }
    return out;
}

// Drops the first n frames.
template <typename S>
TensorT<S> trim_front_frames(const TensorT<S>& a, int64_t n) {
    require_4d(a, "trim_front_frames");
    const int64_t T = a.dim(0), fs = a.dim(1) * a.dim(2) * a.dim(3);
    if (n < 0 || n >= T) throw std::invalid_argument("trim_front_frames: bad count");
    auto out = TensorT<S>::zeros({T - n, a.dim(1), a.dim(2), a.dim(3)});
    std::copy_n(a.data() + n * fs, (T - n) * fs, out.data());
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("trim_front_frames", {&a}, out, [an, on, n, T, fs] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (int64_t i = 0; i < (T - n) * fs; ++i) an->grad[n * fs + i] += on->grad[i];
        });
    }
    return out;
}

// Each frame t becomes frames 2t and 2t+1.
template <typename S>
TensorT<S> repeat_frames_2x(const TensorT<S>& a) {
    require_4d(a, "repeat_frames_2x");
    const int64_t T = a.dim(0), fs = a.dim(1) * a.dim(2) * a.dim(3);
    auto out = TensorT<S>::zeros({2 * T, a.dim(1), a.dim(2), a.dim(3)});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t t = 0; t < T; ++t) {
        std::copy_n(pa + t * fs, fs, po + (2 * t) * fs);
        std::copy_n(pa + t * fs, fs, po + (2 * t + 1) * fs);
    }
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("repeat_frames_2x", {&a}, out, [an, on, T, fs] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (int64_t t = 0; t < T; ++t)
                for (int64_t i = 0; i < fs; ++i)
                    an->grad[t * fs + i] += on->grad[(2 * t) * fs + i] + on->grad[(2 * t + 1) * fs + i];
        });
    }
    return out;
}

// Nearest-neighbor 2x spatial upsampling.
template <typename S>
TensorT<S> upsample_nearest_2x(const TensorT<S>& a) {
    require_4d(a, "upsample_nearest_2x");
    const int64_t T = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    auto out = TensorT<S>::zeros({T, C, 2 * H, 2 * W});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t tc = 0; tc < T * C; ++tc) {
        const S* in = pa + tc * H * W;
        S* o = po + tc * 4 * H * W;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const S v = in[y * W + x];
                S* row0 = o + (2 * y) * 2 * W + 2 * x;
                S* row1 = o + (2 * y + 1) * 2 * W + 2 * x;
                row0[0] = v;
                row0[1] = v;
                row1[0] = v;
                row1[1] = v;
            }
    }
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("upsample_nearest_2x", {&a}, out, [an, on, T, C, H, W] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (int64_t tc = 0; tc < T * C; ++tc) {
                const S* g = on->grad.data() + tc * 4 * H * W;
                S* d = an->grad.data() + tc * H * W;
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x = 0; x < W; ++x)
                        d[y * W + x] += g[(2 * y) * 2 * W + 2 * x] + g[(2 * y) * 2 * W + 2 * x + 1] +
                                        g[(2 * y + 1) * 2 * W + 2 * x] + g[(2 * y + 1) * 2 * W + 2 * x + 1];
            }
        });
    }
    return out;
}

// Temporal average pool, window 2 stride 2.
// Causal: left-replication padding, so out[0] = x[0] and out[i] = (x[2i-1]+x[2i])/2.
// Non-causal: plain pairwise mean, out[i] = (x[2i]+x[2i+1])/2.
template <typename S>
TensorT<S> avg_pool_time_2(const TensorT<S>& a, bool causal) {
    require_4d(a, "avg_pool_time_2");
    const int64_t T = a.dim(0), fs = a.dim(1) * a.dim(2) * a.dim(3);
    if (T % 2 != 0) throw std::invalid_argument("avg_pool_time_2: odd temporal extent " + std::to_string(T));
    const int64_t To = T / 2;
    auto out = TensorT<S>::zeros({To, a.dim(1), a.dim(2), a.dim(3)});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t t = 0; t < To; ++t) {
        const int64_t i0 = causal ? std::max<int64_t>(2 * t - 1, 0) : 2 * t;
        const int64_t i1 = causal ? 2 * t : 2 * t + 1;
        for (int64_t i = 0; i < fs; ++i) po[t * fs + i] = (pa[i0 * fs + i] + pa[i1 * fs + i]) * S(0.5);
    }
    if (detail::recording<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach<S>("avg_pool_time_2", {&a}, out, [an, on, To, fs, causal] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (int64_t t = 0; t < To; ++t) {
                const int64_t i0 = causal ? std::max<int64_t>(2 * t - 1, 0) : 2 * t;
                const int64_t i1 = causal ? 2 * t : 2 * t + 1;
                for (int64_t i = 0; i < fs; ++i) {
                    const S g = on->grad[t * fs + i] * S(0.5);
                    an->grad[i0 * fs + i] += g;
                    an->grad[i1 * fs + i] += g;
                }
            }
        });
    }
    return out;
}

// ----------------------------------------------------------------- convolutions

enum class PadTime { kCausal, kSymmetric };

inline int64_t conv_extent(int64_t in, int64_t pad_lo, int64_t pad_hi, int64_t k, int64_t stride) {
    return (in + pad_lo + pad_hi - k) / stride + 1;
}

// input [T,Ci,H,W], weight [Co,Ci,kT,kH,kW], optional bias [Co].
// Temporal padding: causal pads kT-1 on the left only; symmetric pads (kT-1)/2
// on both sides. Spatial padding is always symmetric (kH-1)/2, (kW-1)/2.
template <typename S>
TensorT<S> conv3d(const TensorT<S>& input, const TensorT<S>& weight, const TensorT<S>& bias,
                  std::array<int64_t, 3> stride, PadTime pad_time) {
    require_4d(input, "conv3d");
    if (weight.ndim() != 5)
        throw std::invalid_argument("conv3d: weight must be 5D [Co,Ci,kT,kH,kW], got " + shape_str(weight.shape()));
    if (input.numel() == 0) throw std::invalid_argument("conv3d: zero-size input");
    const int64_t T = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Co = weight.dim(0), kT = weight.dim(2), kH = weight.dim(3), kW = weight.dim(4);
    if (weight.dim(1) != Ci)
        throw std::invalid_argument("conv3d: weight expects " + std::to_string(weight.dim(1)) +
                                    " input channels, got " + std::to_string(Ci));
    if (kH % 2 == 0 || kW % 2 == 0) throw std::invalid_argument("conv3d: spatial kernel extents must be odd");
    if (pad_time == PadTime::kSymmetric && kT % 2 == 0)
        throw std::invalid_argument("conv3d: symmetric temporal padding needs odd kT");
    const int64_t ptl = pad_time == PadTime::kCausal ? kT - 1 : (kT - 1) / 2;
    const int64_t ptr = pad_time == PadTime::kCausal ? 0 : (kT - 1) / 2;
    const int64_t ph = (kH - 1) / 2, pw = (kW - 1) / 2;
    if (T + ptl + ptr < kT || H + 2 * ph < kH || W + 2 * pw < kW)
        throw std::invalid_argument("conv3d: kernel larger than padded input");
    const int64_t st = stride[0], sh = stride[1], sw = stride[2];
    const int64_t To = conv_extent(T, ptl, ptr, kT, st);
    const int64_t Ho = conv_extent(H, ph, ph, kH, sh);
    const int64_t Wo = conv_extent(W, pw, pw, kW, sw);

    auto out = TensorT<S>::zeros({To, Co, Ho, Wo});
    const S* x = input.data();
    const S* w = weight.data();
    const S* b = bias.defined() ? bias.data() : nullptr;
    S* o = out.data();

    for (int64_t to = 0; to < To; ++to)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    S acc = b ? b[co] : S(0);
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        for (int64_t kt = 0; kt < kT; ++kt) {
                            const int64_t ti = to * st - ptl + kt;
                            if (ti < 0 || ti >= T) continue;
                            for (int64_t ky = 0; ky < kH; ++ky) {
                                const int64_t yi = yo * sh - ph + ky;
                                if (yi < 0 || yi >= H) continue;
                                const S* xrow = x + ((ti * Ci + ci) * H + yi) * W;
                                const S* wrow = w + (((co * Ci + ci) * kT + kt) * kH + ky) * kW;
                                for (int64_t kx = 0; kx < kW; ++kx) {
                                    const int64_t xi = xo * sw - pw + kx;
                                    if (xi < 0 || xi >= W) continue;
                                    acc += wrow[kx] * xrow[xi];
                                }
                            }
                        }
                    o[((to * Co + co) * Ho + yo) * Wo + xo] = acc;
                }

    if (detail::recording<S>({&input, &weight, &bias})) {
        auto xn = input.node(), wn = weight.node(), on = out.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        detail::attach<S>(
            "conv3d", {&input, &weight, &bias}, out,
            [xn, wn, bn, on, T, Ci, H, W, Co, kT, kH, kW, ptl, ph, pw, st, sh, sw, To, Ho, Wo] {
                if (on->grad.empty()) return;
                const bool gx = xn->requires_grad, gw = wn->requires_grad;
                const bool gb = bn && bn->requires_grad;
                if (gx) xn->ensure_grad();
                if (gw) wn->ensure_grad();
                if (gb) bn->ensure_grad();
                const S* x = xn->value.data();
                const S* w = wn->value.data();
                for (int64_t to = 0; to < To; ++to)
                    for (int64_t co = 0; co < Co; ++co)
                        for (int64_t yo = 0; yo < Ho; ++yo)
                            for (int64_t xo = 0; xo < Wo; ++xo) {
                                const S g = on->grad[((to * Co + co) * Ho + yo) * Wo + xo];
                                if (g == S(0)) continue;
                                if (gb) bn->grad[co] += g;
                                if (!gx && !gw) continue;
                                for (int64_t ci = 0; ci < Ci; ++ci)
                                    for (int64_t kt = 0; kt < kT; ++kt) {
                                        const int64_t ti = to * st - ptl + kt;
                                        if (ti < 0 || ti >= T) continue;
                                        for (int64_t ky = 0; ky < kH; ++ky) {
                                            const int64_t yi = yo * sh - ph + ky;
                                            if (yi < 0 || yi >= H) continue;
                                            const int64_t xbase = ((ti * Ci + ci) * H + yi) * W;
                                            const int64_t wbase = (((co * Ci + ci) * kT + kt) * kH + ky) * kW;
                                            for (int64_t kx = 0; kx < kW; ++kx) {
                                                const int64_t xi = xo * sw - pw + kx;
                                                if (xi < 0 || xi >= W) continue;
                                                if (gx) xn->grad[xbase + xi] += g * w[wbase + kx];
                                                if (gw) wn->grad[wbase + kx] += g * x[xbase + xi];
                                            }
                                        }
                                    }
                            }
            });
    }
    detail::check_finite(out, "conv3d");
    return out;
}

// Per-frame 2D convolution. input [T,Ci,H,W], weight [Co,Ci,kH,kW], pad symmetric.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& weight, const TensorT<S>& bias,
                  std::array<int64_t, 2> stride, int64_t pad) {
    require_4d(input, "conv2d");
    if (weight.ndim() != 4)
        throw std::invalid_argument("conv2d: weight must be 4D [Co,Ci,kH,kW], got " + shape_str(weight.shape()));
    if (input.numel() == 0) throw std::invalid_argument("conv2d: zero-size input");
    const int64_t T = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Co = weight.dim(0), kH = weight.dim(2), kW = weight.dim(3);
    if (weight.dim(1) != Ci)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                                    " input channels, got " + std::to_string(Ci));
    if (H + 2 * pad < kH || W + 2 * pad < kW)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    const int64_t sh = stride[0], sw = stride[1];
    const int64_t Ho = conv_extent(H, pad, pad, kH, sh);
    const int64_t Wo = conv_extent(W, pad, pad, kW, sw);

    auto out = TensorT<S>::zeros({T, Co, Ho, Wo});
    const S* x = input.data();
    const S* w = weight.data();
    const S* b = bias.defined() ? bias.data() : nullptr;
    S* o = out.data();

    for (int64_t t = 0; t < T; ++t)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    S acc = b ? b[co] : S(0);
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        for (int64_t ky = 0; ky < kH; ++ky) {
                            const int64_t yi = yo * sh - pad + ky;
                            if (yi < 0 || yi >= H) continue;
                            const S* xrow = x + ((t * Ci + ci) * H + yi) * W;
                            const S* wrow = w + ((co * Ci + ci) * kH + ky) * kW;
                            for (int64_t kx = 0; kx < kW; ++kx) {
                                const int64_t xi = xo * sw - pad + kx;
                                if (xi < 0 || xi >= W) continue;
                                acc += wrow[kx] * xrow[xi];
                            }
                        }
                    o[((t * Co + co) * Ho + yo) * Wo + xo] = acc;
                }

    if (detail::recording<S>({&input, &weight, &bias})) {
        auto xn = input.node(), wn = weight.node(), on = out.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        detail::attach<S>("conv2d", {&input, &weight, &bias}, out,
                          [xn, wn, bn, on, T, Ci, H, W, Co, kH, kW, pad, sh, sw, Ho, Wo] {
                              if (on->grad.empty()) return;
                              const bool gx = xn->requires_grad, gw = wn->requires_grad;
                              const bool gb = bn && bn->requires_grad;
                              if (gx) xn->ensure_grad();
                              if (gw) wn->ensure_grad();
                              if (gb) bn->ensure_grad();
                              const S* x = xn->value.data();
                              const S* w = wn->value.data();
                              for (int64_t t = 0; t < T; ++t)
                                  for (int64_t co = 0; co < Co; ++co)
                                      for (int64_t yo = 0; yo < Ho; ++yo)
                                          for (int64_t xo = 0; xo < Wo; ++xo) {
                                              const S g = on->grad[((t * Co + co) * Ho + yo) * Wo + xo];
                                              if (g == S(0)) continue;
                                              if (gb) bn->grad[co] += g;
                                              if (!gx && !gw) continue;
                                              for (int64_t ci = 0; ci < Ci; ++ci)
                                                  for (int64_t ky = 0; ky < kH; ++ky) {
                                                      const int64_t yi = yo * sh - pad + ky;
                                                      if (yi < 0 || yi >= H) continue;
                                                      const int64_t xbase = ((t * Ci + ci) * H + yi) * W;
                                                      const int64_t wbase = ((co * Ci + ci) * kH + ky) * kW;
                                                      for (int64_t kx = 0; kx < kW; ++kx) {
                                                          const int64_t xi = xo * sw - pad + kx;
                                                          if (xi < 0 || xi >= W) continue;
                                                          if (gx) xn->grad[xbase + xi] += g * w[wbase + kx];
                                                          if (gw) wn->grad[wbase + kx] += g * x[xbase + xi];
                                                      }
                                                  }
                                          }
                          });
    }
    detail::check_finite(out, "conv2d");
    return out;
}

// Temporal 1D convolution applied per spatial location.
// input [T,Ci,H,W], weight [Co,Ci,kT]. Causal pads kT-1 left, else symmetric.
template <typename S>
TensorT<S> conv1d_temporal(const TensorT<S>& input, const TensorT<S>& weight, const TensorT<S>& bias,
                           int64_t stride, bool causal) {
    require_4d(input, "conv1d_temporal");
    if (weight.ndim() != 3)
        throw std::invalid_argument("conv1d_temporal: weight must be 3D [Co,Ci,kT], got " +
                                    shape_str(weight.shape()));
    if (input.numel() == 0) throw std::invalid_argument("conv1d_temporal: zero-size input");
    const int64_t T = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Co = weight.dim(0), kT = weight.dim(2);
    if (weight.dim(1) != Ci)
        throw std::invalid_argument("conv1d_temporal: weight expects " + std::to_string(weight.dim(1)) +
                                    " input channels, got " + std::to_string(Ci));
    if (!causal && kT % 2 == 0)
        throw std::invalid_argument("conv1d_temporal: symmetric padding needs odd kT");
    const int64_t ptl = causal ? kT - 1 : (kT - 1) / 2;
    const int64_t ptr = causal ? 0 : (kT - 1) / 2;
    if (T + ptl + ptr < kT) throw std::invalid_argument("conv1d_temporal: kernel larger than padded input");
    const int64_t To = conv_extent(T, ptl, ptr, kT, stride);
    const int64_t plane = H * W;

    auto out = TensorT<S>::zeros({To, Co, H, W});
    const S* x = input.data();
    const S* w = weight.data();
    const S* b = bias.defined() ? bias.data() : nullptr;
    S* o = out.data();

    for (int64_t to = 0; to < To; ++to)
        for (int64_t co = 0; co < Co; ++co) {
            S* orow = o + (to * Co + co) * plane;
            if (b)
                for (int64_t i = 0; i < plane; ++i) orow[i] = b[co];
            for (int64_t ci = 0; ci < Ci; ++ci)
                for (int64_t kt = 0; kt < kT; ++kt) {
                    const int64_t ti = to * stride - ptl + kt;
                    if (ti < 0 || ti >= T) continue;
                    const S wv = w[(co * Ci + ci) * kT + kt];
                    const S* xrow = x + (ti * Ci + ci) * plane;
                    for (int64_t i = 0; i < plane; ++i) orow[i] += wv * xrow[i];
                }
        }

    if (detail::recording<S>({&input, &weight, &bias})) {
        auto xn = input.node(), wn = weight.node(), on = out.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        detail::attach<S>("conv1d_temporal", {&input, &weight, &bias}, out,
                          [xn, wn, bn, on, T, Ci, Co, kT, ptl, stride, To, plane] {
                              if (on->grad.empty()) return;
                              const bool gx = xn->requires_grad, gw = wn->requires_grad;
                              const bool gb = bn && bn->requires_grad;
                              if (gx) xn->ensure_grad();
                              if (gw) wn->ensure_grad();
                              if (gb) bn->ensure_grad();
                              const S* x = xn->value.data();
                              const S* w = wn->value.data();
                              for (int64_t to = 0; to < To; ++to)
                                  for (int64_t co = 0; co < Co; ++co) {
                                      const S* grow = on->grad.data() + (to * Co + co) * plane;
                                      if (gb)
                                          for (int64_t i = 0; i < plane; ++i) bn->grad[co] += grow[i];
                                      for (int64_t ci = 0; ci < Ci; ++ci)
                                          for (int64_t kt = 0; kt < kT; ++kt) {
                                              const int64_t ti = to * stride - ptl + kt;
                                              if (ti < 0 || ti >= T) continue;
                                              const S wv = w[(co * Ci + ci) * kT + kt];
                                              const S* xrow = x + (ti * Ci + ci) * plane;
                                              if (gx) {
                                                  S* drow = xn->grad.data() + (ti * Ci + ci) * plane;
                                                  for (int64_t i = 0; i < plane; ++i) drow[i] += grow[i] * wv;
                                              }
                                              if (gw) {
                                                  S acc = S(0);
                                                  for (int64_t i = 0; i < plane; ++i) acc += grow[i] * xrow[i];
                                                  wn->grad[(co * Ci + ci) * kT + kt] += acc;
                                              }
                                          }
                                  }
                          });
    }
    detail::check_finite(out, "conv1d_temporal");
    return out;
}

// ----------------------------------------------------------------- layer norm

// Normalizes over `axes` (per complementary-axes group), eps added to the
// biased variance, then applies the per-axes affine scale/shift.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& input, const TensorT<S>& scale_p, const TensorT<S>& shift_p,
                      const std::vector<int>& axes, S eps = S(1e-6)) {
    if (axes.empty()) throw std::invalid_argument("layer_norm: axes must be nonempty");
    const auto& shp = input.shape();
    const int nd = static_cast<int>(shp.size());
    std::vector<bool> is_axis(nd, false);
    Shape param_shape;
    for (int a : axes) {
        if (a < 0 || a >= nd) throw std::invalid_argument("layer_norm: axis out of range");
        if (is_axis[a]) throw std::invalid_argument("layer_norm: duplicate axis");
        is_axis[a] = true;
    }
    for (int a = 0; a < nd; ++a)
        if (is_axis[a]) param_shape.push_back(shp[a]);
    if (scale_p.shape() != param_shape || shift_p.shape() != param_shape)
        throw std::invalid_argument("layer_norm: affine params must have shape " + shape_str(param_shape));

    const int64_t n = input.numel();
    const int64_t group_size = shape_numel(param_shape);
    const int64_t n_groups = n / group_size;

    // Per-element (group, param) index decomposition, row-major.
    std::vector<int64_t> in_stride(nd, 1);
    for (int a = nd - 2; a >= 0; --a) in_stride[a] = in_stride[a + 1] * shp[a + 1];

    auto decompose = [&](int64_t flat, int64_t& group, int64_t& param) {
        group = 0;
        param = 0;
        for (int a = 0; a < nd; ++a) {
            const int64_t coord = (flat / in_stride[a]) % shp[a];
            if (is_axis[a])
                param = param * shp[a] + coord;
            else
                group = group * shp[a] + coord;
        }
    };

    std::vector<S> mu(n_groups, S(0)), inv_sd(n_groups, S(0));
    const S* x = input.data();
    {
        std::vector<S> sum(n_groups, S(0)), sq(n_groups, S(0));
        for (int64_t i = 0; i < n; ++i) {
            int64_t g, p;
            decompose(i, g, p);
            sum[g] += x[i];
            sq[g] += x[i] * x[i];
        }
        for (int64_t g = 0; g < n_groups; ++g) {
            mu[g] = sum[g] / static_cast<S>(group_size);
            const S var = sq[g] / static_cast<S>(group_size) - mu[g] * mu[g];
            inv_sd[g] = S(1) / std::sqrt(std::max(var, S(0)) + eps);
        }
    }

    auto out = TensorT<S>::zeros(input.shape());
    S* o = out.data();
    const S* gamma = scale_p.data();
    const S* beta = shift_p.data();
    for (int64_t i = 0; i < n; ++i) {
        int64_t g, p;
        decompose(i, g, p);
        o[i] = gamma[p] * (x[i] - mu[g]) * inv_sd[g] + beta[p];
    }

    if (detail::recording<S>({&input, &scale_p, &shift_p})) {
        auto xn = input.node(), gn = scale_p.node(), bn = shift_p.node(), on = out.node();
        detail::attach<S>(
            "layer_norm", {&input, &scale_p, &shift_p}, out,
            [xn, gn, bn, on, mu = std::move(mu), inv_sd = std::move(inv_sd), in_stride, shp, is_axis, nd, n,
             n_groups, group_size] {
                if (on->grad.empty()) return;
                const bool gx = xn->requires_grad, gg = gn->requires_grad, gb = bn->requires_grad;
                if (gx) xn->ensure_grad();
                if (gg) gn->ensure_grad();
                if (gb) bn->ensure_grad();
                const S* x = xn->value.data();
                const S* gamma = gn->value.data();
                auto decompose = [&](int64_t flat, int64_t& group, int64_t& param) {
                    group = 0;
                    param = 0;
                    for (int a = 0; a < nd; ++a) {
                        const int64_t coord = (flat / in_stride[a]) % shp[a];
                        if (is_axis[a])
                            param = param * shp[a] + coord;
                        else
                            group = group * shp[a] + coord;
                    }
                };
                // Two passes: per-group sums of dxhat and dxhat*xhat, then dx.
                std::vector<S> s1(n_groups, S(0)), s2(n_groups, S(0));
                for (int64_t i = 0; i < n; ++i) {
                    int64_t g, p;
                    decompose(i, g, p);
                    const S xhat = (x[i] - mu[g]) * inv_sd[g];
                    const S dxhat = on->grad[i] * gamma[p];
                    s1[g] += dxhat;
                    s2[g] += dxhat * xhat;
                    if (gg) gn->grad[p] += on->grad[i] * xhat;
                    if (gb) bn->grad[p] += on->grad[i];
                }
                if (gx) {
                    const S inv_m = S(1) / static_cast<S>(group_size);
                    for (int64_t i = 0; i < n; ++i) {
                        int64_t g, p;
                        decompose(i, g, p);
                        const S xhat = (x[i] - mu[g]) * inv_sd[g];
                        const S dxhat = on->grad[i] * gamma[p];
                        xn->grad[i] += inv_sd[g] * (dxhat - inv_m * s1[g] - xhat * inv_m * s2[g]);
                    }
                }
            });
    }
    detail::check_finite(out, "layer_norm");
    return out;
}

// ----------------------------------------------------------------- evaluation helpers

// Not recorded on the tape; evaluation-time output conditioning.
template <typename S>
TensorT<S> clamp_values(const TensorT<S>& a, S lo, S hi) {
    auto out = TensorT<S>::from_vector(a.shape(), a.values());
    for (auto& v : out.values()) v = std::min(hi, std::max(lo, v));
    return out;
}

}  // namespace ops
}  // namespace vtok
