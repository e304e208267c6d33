#ifndef ARNS_OPS_HPP
#define ARNS_OPS_HPP

#include <cstdint>
#include <cstring>
#include <limits>

#include "arns/tensor.hpp"

namespace arns {

struct LrnParams {
    double alpha = 1e-4;
    double beta = 0.75;
    int window = 5;
};

namespace detail {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b, const char* op) {
    if (a.tape == nullptr || b.tape == nullptr || a.tape != b.tape) {
        throw std::invalid_argument(std::string(op) + ": operands must come from the same tape");
    }
}

template <typename T>
void check_rank(const Tensor<T>& t, int rank, const char* op) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                    " tensor, got shape " + shape_str(t.shape()));
    }
}

// Zero-padded copy of a C×H×W tensor.
template <typename T>
Tensor<T> pad_chw(const Tensor<T>& x, int pad) {
    const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    Tensor<T> out(Shape{C, Hp, Wp});
    for (int c = 0; c < C; ++c) {
        for (int h = 0; h < H; ++h) {
            const T* src = x.data() + (static_cast<std::size_t>(c) * H + h) * W;
            T* dst = out.data() + (static_cast<std::size_t>(c) * Hp + h + pad) * Wp + pad;
            std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(W));
        }
    }
    return out;
}

// Adds the interior of a padded C×Hp×Wp buffer into a C×H×W gradient.
template <typename T>
void unpad_accumulate(const Tensor<T>& padded, int pad, Tensor<T>& dst) {
    const int C = dst.extent(0), H = dst.extent(1), W = dst.extent(2);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    for (int c = 0; c < C; ++c) {
        for (int h = 0; h < H; ++h) {
            const T* src = padded.data() + (static_cast<std::size_t>(c) * Hp + h + pad) * Wp + pad;
            T* d = dst.data() + (static_cast<std::size_t>(c) * H + h) * W;
            for (int w = 0; w < W; ++w) d[w] += src[w];
        }
    }
}

// Taps for exact ×2 bilinear upsampling (half-pixel centers, clamped edges).
inline void bilinear_x2_taps(int d, int n_in, int& i0, int& i1, double& w0, double& w1) {
    if (d % 2 == 0) {
        i0 = d / 2 - 1;
        i1 = d / 2;
        w0 = 0.25;
        w1 = 0.75;
    } else {
        i0 = d / 2;
        i1 = d / 2 + 1;
        w0 = 0.75;
        w1 = 0.25;
    }
    if (i0 < 0) i0 = 0;
    if (i1 > n_in - 1) i1 = n_in - 1;
}

}  // namespace detail

/// 2D convolution, zero padding. x: C×H×W, w: O×C×Kh×Kw, bias: O (optional).
template <typename T>
Var<T> conv2d(Var<T> x, Parameter<T>& w, Parameter<T>* bias, int stride = 1, int pad = 0) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::check_rank(xv, 3, "conv2d");
    detail::check_rank(w.value, 4, "conv2d kernel");
    const int C = xv.extent(0), H = xv.extent(1), W = xv.extent(2);
    const int O = w.value.extent(0), Kc = w.value.extent(1), Kh = w.value.extent(2), Kw = w.value.extent(3);
    if (Kc != C) {
        throw std::invalid_argument("conv2d: input channels " + std::to_string(C) +
                                    " do not match kernel channels " + std::to_string(Kc) +
                                    " (input " + shape_str(xv.shape()) + ", kernel " + shape_str(w.value.shape()) + ")");
    }
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and pad >= 0");
    if ((H + 2 * pad - Kh) % stride != 0 || (W + 2 * pad - Kw) % stride != 0) {
        throw std::invalid_argument("conv2d: extent " + std::to_string(H) + "+" + "2*" + std::to_string(pad) +
                                    "-" + std::to_string(Kh) + " not divisible by stride " + std::to_string(stride));
    }
    const int Ho = (H + 2 * pad - Kh) / stride + 1;
    const int Wo = (W + 2 * pad - Kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: non-positive output size");
    if (bias != nullptr) {
        if (bias->value.rank() != 1 || bias->value.extent(0) != O) {
            throw std::invalid_argument("conv2d: bias shape " + shape_str(bias->value.shape()) +
                                        " does not match output channels " + std::to_string(O));
        }
    }

    Var<T> wv = tape.use(w);
    Var<T> bv{};
    if (bias != nullptr) bv = tape.use(*bias);

    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    Tensor<T> xp = detail::pad_chw(xv, pad);
    Tensor<T> out(Shape{O, Ho, Wo});
    const T* wd = w.value.data();
    const T* bd = (bias != nullptr) ? bias->value.data() : nullptr;
    for (int o = 0; o < O; ++o) {
        const T bval = bd ? bd[o] : T(0);
        T* orow = out.data() + static_cast<std::size_t>(o) * Ho * Wo;
        for (int ho = 0; ho < Ho; ++ho) {
            for (int wo = 0; wo < Wo; ++wo) {
                T acc = bval;
                const int hi0 = ho * stride, wi0 = wo * stride;
                for (int c = 0; c < C; ++c) {
                    const T* xbase = xp.data() + static_cast<std::size_t>(c) * Hp * Wp;
                    const T* wbase = wd + (static_cast<std::size_t>(o) * C + c) * Kh * Kw;
                    for (int kh = 0; kh < Kh; ++kh) {
                        const T* xr = xbase + static_cast<std::size_t>(hi0 + kh) * Wp + wi0;
                        const T* wr = wbase + static_cast<std::size_t>(kh) * Kw;
                        for (int kw = 0; kw < Kw; ++kw) acc += xr[kw] * wr[kw];
                    }
                }
                orow[static_cast<std::size_t>(ho) * Wo + wo] = acc;
            }
        }
    }

    const int xid = x.id, wid = wv.id, bid = (bias != nullptr) ? bv.id : -1;
    auto back = [xid, wid, bid, C, H, W, O, Kh, Kw, stride, pad, Ho, Wo, Hp, Wp](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& wval = t.value(wid);
        const Tensor<T>& xval = t.value(xid);

        if (t.wants_grad(xid)) {
            Tensor<T> dxp(Shape{C, Hp, Wp});
            for (int o = 0; o < O; ++o) {
                for (int ho = 0; ho < Ho; ++ho) {
                    for (int wo = 0; wo < Wo; ++wo) {
                        const T gv = g(o, ho, wo);
                        const int hi0 = ho * stride, wi0 = wo * stride;
                        for (int c = 0; c < C; ++c) {
                            T* dxbase = dxp.data() + static_cast<std::size_t>(c) * Hp * Wp;
                            const T* wbase = wval.data() + (static_cast<std::size_t>(o) * C + c) * Kh * Kw;
                            for (int kh = 0; kh < Kh; ++kh) {
                                T* dxr = dxbase + static_cast<std::size_t>(hi0 + kh) * Wp + wi0;
                                const T* wr = wbase + static_cast<std::size_t>(kh) * Kw;
                                for (int kw = 0; kw < Kw; ++kw) dxr[kw] += gv * wr[kw];
                            }
                        }
                    }
                }
            }
            detail::unpad_accumulate(dxp, pad, t.grad(xid));
        }

        if (t.wants_grad(wid)) {
            Tensor<T> xp2 = detail::pad_chw(xval, pad);
            Tensor<T>& dw = t.grad(wid);
            for (int o = 0; o < O; ++o) {
                for (int ho = 0; ho < Ho; ++ho) {
                    for (int wo = 0; wo < Wo; ++wo) {
                        const T gv = g(o, ho, wo);
                        const int hi0 = ho * stride, wi0 = wo * stride;
                        for (int c = 0; c < C; ++c) {
                            const T* xbase = xp2.data() + static_cast<std::size_t>(c) * Hp * Wp;
                            T* dwbase = dw.data() + (static_cast<std::size_t>(o) * C + c) * Kh * Kw;
                            for (int kh = 0; kh < Kh; ++kh) {
                                const T* xr = xbase + static_cast<std::size_t>(hi0 + kh) * Wp + wi0;
                                T* dwr = dwbase + static_cast<std::size_t>(kh) * Kw;
                                for (int kw = 0; kw < Kw; ++kw) dwr[kw] += gv * xr[kw];
                            }
                        }
                    }
                }
            }
        }

        if (bid >= 0 && t.wants_grad(bid)) {
            Tensor<T>& db = t.grad(bid);
            for (int o = 0; o < O; ++o) {
                T acc = T(0);
                const T* gr = g.data() + static_cast<std::size_t>(o) * Ho * Wo;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) acc += gr[i];
                db[o] += acc;
            }
        }
    };

    std::vector<int> inputs{xid, wid};
    if (bid >= 0) inputs.push_back(bid);
    return tape.record("conv2d", std::move(out), std::move(inputs), std::move(back));
}

template <typename T>
Var<T> conv2d(Var<T> x, Parameter<T>& w, std::nullptr_t, int stride = 1, int pad = 0) {
    return conv2d(x, w, static_cast<Parameter<T>*>(nullptr), stride, pad);
}

/// Transposed convolution for exact ×2 upsampling; the adjoint of conv2d.
/// x: I×H×W, w: I×O×Kh×Kw. Rejects configurations that do not double H and W.
template <typename T>
Var<T> conv_transpose2d(Var<T> x, Parameter<T>& w, int stride = 2, int pad = 1) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::check_rank(xv, 3, "conv_transpose2d");
    detail::check_rank(w.value, 4, "conv_transpose2d kernel");
    const int I = xv.extent(0), H = xv.extent(1), W = xv.extent(2);
    const int Ki = w.value.extent(0), O = w.value.extent(1), Kh = w.value.extent(2), Kw = w.value.extent(3);
    if (Ki != I) {
        throw std::invalid_argument("conv_transpose2d: input channels " + std::to_string(I) +
                                    " do not match kernel channels " + std::to_string(Ki));
    }
    const int Ho = (H - 1) * stride - 2 * pad + Kh;
    const int Wo = (W - 1) * stride - 2 * pad + Kw;
    if (Ho != 2 * H || Wo != 2 * W) {
        throw std::invalid_argument("conv_transpose2d: kernel " + std::to_string(Kh) + "x" + std::to_string(Kw) +
                                    " stride " + std::to_string(stride) + " pad " + std::to_string(pad) +
                                    " yields " + std::to_string(Ho) + "x" + std::to_string(Wo) +
                                    ", not the required ×2 of " + std::to_string(H) + "x" + std::to_string(W));
    }

    Var<T> wv = tape.use(w);
    const int Hp = Ho + 2 * pad, Wp = Wo + 2 * pad;

    Tensor<T> op(Shape{O, Hp, Wp});
    const T* wd = w.value.data();
    for (int i = 0; i < I; ++i) {
        for (int h = 0; h < H; ++h) {
            for (int ww = 0; ww < W; ++ww) {
                const T v = xv(i, h, ww);
                const int ho0 = h * stride, wo0 = ww * stride;
                for (int o = 0; o < O; ++o) {
                    T* obase = op.data() + static_cast<std::size_t>(o) * Hp * Wp;
                    const T* wbase = wd + (static_cast<std::size_t>(i) * O + o) * Kh * Kw;
                    for (int kh = 0; kh < Kh; ++kh) {
                        T* orow = obase + static_cast<std::size_t>(ho0 + kh) * Wp + wo0;
                        const T* wr = wbase + static_cast<std::size_t>(kh) * Kw;
                        for (int kw = 0; kw < Kw; ++kw) orow[kw] += v * wr[kw];
                    }
                }
            }
        }
    }
    Tensor<T> out(Shape{O, Ho, Wo});
    for (int o = 0; o < O; ++o) {
        for (int h = 0; h < Ho; ++h) {
            const T* src = op.data() + (static_cast<std::size_t>(o) * Hp + h + pad) * Wp + pad;
            T* dst = out.data() + (static_cast<std::size_t>(o) * Ho + h) * Wo;
            std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(Wo));
        }
    }

    const int xid = x.id, wid = wv.id;
    auto back = [xid, wid, I, H, W, O, Kh, Kw, stride, pad, Ho, Wo, Hp, Wp](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T> gp = detail::pad_chw(g, pad);  // O×Hp×Wp
        const Tensor<T>& wval = t.value(wid);
        const Tensor<T>& xval = t.value(xid);

        if (t.wants_grad(xid)) {
            Tensor<T>& dx = t.grad(xid);
            for (int i = 0; i < I; ++i) {
                for (int h = 0; h < H; ++h) {
                    for (int ww = 0; ww < W; ++ww) {
                        T acc = T(0);
                        const int ho0 = h * stride, wo0 = ww * stride;
                        for (int o = 0; o < O; ++o) {
                            const T* gbase = gp.data() + static_cast<std::size_t>(o) * Hp * Wp;
                            const T* wbase = wval.data() + (static_cast<std::size_t>(i) * O + o) * Kh * Kw;
                            for (int kh = 0; kh < Kh; ++kh) {
                                const T* gr = gbase + static_cast<std::size_t>(ho0 + kh) * Wp + wo0;
                                const T* wr = wbase + static_cast<std::size_t>(kh) * Kw;
                                for (int kw = 0; kw < Kw; ++kw) acc += gr[kw] * wr[kw];
                            }
                        }
                        dx(i, h, ww) += acc;
                    }
                }
            }
        }

        if (t.wants_grad(wid)) {
            Tensor<T>& dw = t.grad(wid);
            for (int i = 0; i < I; ++i) {
                for (int h = 0; h < H; ++h) {
                    for (int ww = 0; ww < W; ++ww) {
                        const T v = xval(i, h, ww);
                        const int ho0 = h * stride, wo0 = ww * stride;
                        for (int o = 0; o < O; ++o) {
                            const T* gbase = gp.data() + static_cast<std::size_t>(o) * Hp * Wp;
                            T* dwbase = dw.data() + (static_cast<std::size_t>(i) * O + o) * Kh * Kw;
                            for (int kh = 0; kh < Kh; ++kh) {
                                const T* gr = gbase + static_cast<std::size_t>(ho0 + kh) * Wp + wo0;
                                T* dwr = dwbase + static_cast<std::size_t>(kh) * Kw;
                                for (int kw = 0; kw < Kw; ++kw) dwr[kw] += v * gr[kw];
                            }
                        }
                    }
                }
            }
        }
    };

    return tape.record("conv_transpose2d", std::move(out), {xid, wid}, std::move(back));
}

/// 2×2 max pooling, stride 2. Ties route the gradient to the first maximum in
/// row-major scan order.
template <typename T>
Var<T> maxpool2x2(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::check_rank(xv, 3, "maxpool2x2");
    const int C = xv.extent(0), H = xv.extent(1), W = xv.extent(2);
    if (H % 2 != 0 || W % 2 != 0) {
        throw std::invalid_argument("maxpool2x2: extents must be even, got " + shape_str(xv.shape()));
    }
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> out(Shape{C, Ho, Wo});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    std::int64_t oi = 0;
    for (int c = 0; c < C; ++c) {
        for (int ho = 0; ho < Ho; ++ho) {
            for (int wo = 0; wo < Wo; ++wo, ++oi) {
                // First window element wins ties in row-major order.
                std::int64_t besti = (static_cast<std::int64_t>(c) * H + 2 * ho) * W + 2 * wo;
                T best = xv[besti];
                for (int dh = 0; dh < 2; ++dh) {
                    for (int dw = dh == 0 ? 1 : 0; dw < 2; ++dw) {
                        const std::int64_t idx =
                            (static_cast<std::int64_t>(c) * H + 2 * ho + dh) * W + 2 * wo + dw;
                        if (xv[idx] > best) {
                            best = xv[idx];
                            besti = idx;
                        }
                    }
                }
                out[oi] = best;
                argmax[static_cast<std::size_t>(oi)] = besti;
            }
        }
    }
    const int xid = x.id;
    auto back = [xid, argmax = std::move(argmax)](Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& dx = t.grad(xid);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[argmax[static_cast<std::size_t>(i)]] += g[i];
    };
    return tape.record("maxpool2x2", std::move(out), {xid}, std::move(back));
}

/// 2×2 average pooling, stride 2.
template <typename T>
Var<T> avgpool2x2(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::check_rank(xv, 3, "avgpool2x2");
    const int C = xv.extent(0), H = xv.extent(1), W = xv.extent(2);
    if (H % 2 != 0 || W % 2 != 0) {
        throw std::invalid_argument("avgpool2x2: extents must be even, got " + shape_str(xv.shape()));
    }
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> out(Shape{C, Ho, Wo});
    for (int c = 0; c < C; ++c) {
        for (int ho = 0; ho < Ho; ++ho) {
            for (int wo = 0; wo < Wo; ++wo) {
                out(c, ho, wo) = (xv(c, 2 * ho, 2 * wo) + xv(c, 2 * ho, 2 * wo + 1) +
                                  xv(c, 2 * ho + 1, 2 * wo) + xv(c, 2 * ho + 1, 2 * wo + 1)) /
                                 T(4);
            }
        }
    }
    const int xid = x.id;
    auto back = [xid, C, H, W, Ho, Wo](Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& dx = t.grad(xid);
        for (int c = 0; c < C; ++c) {
            for (int ho = 0; ho < Ho; ++ho) {
                for (int wo = 0; wo < Wo; ++wo) {
                    const T q = g(c, ho, wo) / T(4);
                    dx(c, 2 * ho, 2 * wo) += q;
                    dx(c, 2 * ho, 2 * wo + 1) += q;
                    dx(c, 2 * ho + 1, 2 * wo) += q;
                    dx(c, 2 * ho + 1, 2 * wo + 1) += q;
                }
            }
        }
    };
    return tape.record("avgpool2x2", std::move(out), {xid}, std::move(back));
}

/// Elementwise max(z, 0). Gradient is 0 at exactly 0.
template <typename T>
Var<T> relu(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    const int xid = x.id;
    auto back = [xid](Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xval = t.value(xid);
        Tensor<T>& dx = t.grad(xid);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (xval[i] > T(0)) dx[i] += g[i];
        }
    };
    return tape.record("relu", std::move(out), {xid}, std::move(back));
}

/// Elementwise logistic sigmoid.
template <typename T>
Var<T> sigmoid(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) {
        out[i] = T(1) / (T(1) + std::exp(-xv[i]));
    }
    const int xid = x.id;
    auto back = [xid](Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& dx = t.grad(xid);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
    };
    return tape.record("sigmoid", std::move(out), {xid}, std::move(back));
}

/// Cross-channel local response normalization:
///   out_k = x_k / (1 + (alpha/N) * sum_{k' in [k-N/2, k+N/2]} x_{k'}^2)^beta
/// with the window clamped to valid channels. Backward includes the
/// cross-channel quotient terms.
template <typename T>
Var<T> lrn(Var<T> x, double alpha, double beta, int window) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::check_rank(xv, 3, "lrn");
    if (alpha < 0 || beta <= 0 || window < 1) {
        throw std::invalid_argument("lrn: require alpha >= 0, beta > 0, window >= 1");
    }
    const int K = xv.extent(0), H = xv.extent(1), W = xv.extent(2);
    const int half = window / 2;
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const double coeff = alpha / static_cast<double>(window);

    Tensor<T> out(xv.shape());
    // Saved for backward: D_k = 1 + (alpha/N)*S_k and D_k^(-beta).
    std::vector<T> base(static_cast<std::size_t>(xv.numel()));
    std::vector<T> dpow(static_cast<std::size_t>(xv.numel()));
    for (std::int64_t p = 0; p < plane; ++p) {
        for (int k = 0; k < K; ++k) {
            const int k0 = std::max(0, k - half), k1 = std::min(K - 1, k + half);
            double s = 0;
            for (int kk = k0; kk <= k1; ++kk) {
                const double v = static_cast<double>(xv[kk * plane + p]);
                s += v * v;
            }
            const double d = 1.0 + coeff * s;
            const double dp = std::pow(d, -beta);
            const std::int64_t idx = k * plane + p;
            base[static_cast<std::size_t>(idx)] = static_cast<T>(d);
            dpow[static_cast<std::size_t>(idx)] = static_cast<T>(dp);
            out[idx] = static_cast<T>(static_cast<double>(xv[idx]) * dp);
        }
    }

    const int xid = x.id;
    auto back = [xid, K, plane, half, coeff, beta, base = std::move(base), dpow = std::move(dpow)](
                    Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xval = t.value(xid);
        Tensor<T>& dx = t.grad(xid);
        for (std::int64_t p = 0; p < plane; ++p) {
            for (int j = 0; j < K; ++j) {
                const std::int64_t ji = j * plane + p;
                double acc = static_cast<double>(g[ji]) * static_cast<double>(dpow[static_cast<std::size_t>(ji)]);
                const int k0 = std::max(0, j - half), k1 = std::min(K - 1, j + half);
                double cross = 0;
                for (int k = k0; k <= k1; ++k) {
                    const std::int64_t ki = k * plane + p;
                    const double dk = static_cast<double>(base[static_cast<std::size_t>(ki)]);
                    const double dpk = static_cast<double>(dpow[static_cast<std::size_t>(ki)]);
                    cross += static_cast<double>(g[ki]) * static_cast<double>(xval[ki]) * dpk / dk;
                }
                acc -= 2.0 * coeff * beta * static_cast<double>(xval[ji]) * cross;
                dx[ji] += static_cast<T>(acc);
            }
        }
    };
    return tape.record("lrn", std::move(out), {xid}, std::move(back));
}

/// Column-wise softmax of a rank-2 score matrix; each column sums to 1.
/// Stabilized by subtracting the per-column maximum.
template <typename T>
Var<T> softmax_cols(Var<T> s) {
    Tape<T>& tape = *s.tape;
    const Tensor<T>& sv = s.value();
    detail::check_rank(sv, 2, "softmax_cols");
    const int M = sv.extent(0), N = sv.extent(1);

    std::vector<T> colmax(static_cast<std::size_t>(N), -std::numeric_limits<T>::infinity());
    for (int i = 0; i < M; ++i) {
        const T* row = sv.data() + static_cast<std::size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            if (row[j] > colmax[static_cast<std::size_t>(j)]) colmax[static_cast<std::size_t>(j)] = row[j];
        }
    }
    Tensor<T> out(sv.shape());
    std::vector<T> colsum(static_cast<std::size_t>(N), T(0));
    for (int i = 0; i < M; ++i) {
        const T* row = sv.data() + static_cast<std::size_t>(i) * N;
        T* orow = out.data() + static_cast<std::size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T e = std::exp(row[j] - colmax[static_cast<std::size_t>(j)]);
            orow[j] = e;
            colsum[static_cast<std::size_t>(j)] += e;
        }
    }
    for (int i = 0; i < M; ++i) {
        T* orow = out.data() + static_cast<std::size_t>(i) * N;
        for (int j = 0; j < N; ++j) orow[j] /= colsum[static_cast<std::size_t>(j)];
    }

    const int sid = s.id;
    auto back = [sid, M, N](Tape<T>& t, int self) {
        if (!t.wants_grad(sid)) return;
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& ds = t.grad(sid);
        std::vector<T> dot(static_cast<std::size_t>(N), T(0));
        for (int i = 0; i < M; ++i) {
            const T* gr = g.data() + static_cast<std::size_t>(i) * N;
            const T* yr = y.data() + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) dot[static_cast<std::size_t>(j)] += gr[j] * yr[j];
        }
        for (int i = 0; i < M; ++i) {
            const T* gr = g.data() + static_cast<std::size_t>(i) * N;
            const T* yr = y.data() + static_cast<std::size_t>(i) * N;
            T* dr = ds.data() + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) dr[j] += yr[j] * (gr[j] - dot[static_cast<std::size_t>(j)]);
        }
    };
    return tape.record("softmax_cols", std::move(out), {sid}, std::move(back));
}

/// Channel concatenation of two C×H×W maps with equal spatial extents.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    detail::check_same_tape(a, b, "concat_channels");
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    detail::check_rank(av, 3, "concat_channels");
    detail::check_rank(bv, 3, "concat_channels");
    if (av.extent(1) != bv.extent(1) || av.extent(2) != bv.extent(2)) {
        throw std::invalid_argument("concat_channels: spatial extents differ: " + shape_str(av.shape()) +
                                    " vs " + shape_str(bv.shape()));
    }
    const int Ca = av.extent(0), Cb = bv.extent(0), H = av.extent(1), W = av.extent(2);
    Tensor<T> out(Shape{Ca + Cb, H, W});
    std::memcpy(out.data(), av.data(), sizeof(T) * static_cast<std::size_t>(av.numel()));
    std::memcpy(out.data() + av.numel(), bv.data(), sizeof(T) * static_cast<std::size_t>(bv.numel()));
    const int aid = a.id, bid = b.id;
    const std::int64_t na = av.numel(), nb = bv.numel();
    auto back = [aid, bid, na, nb](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.wants_grad(aid)) {
            Tensor<T>& da = t.grad(aid);
            for (std::int64_t i = 0; i < na; ++i) da[i] += g[i];
        }
        if (t.wants_grad(bid)) {
            Tensor<T>& db = t.grad(bid);
            for (std::int64_t i = 0; i < nb; ++i) db[i] += g[na + i];
        }
    };
    return tape.record("concat_channels", std::move(out), {aid, bid}, std::move(back));
}

/// Matrix product, a: M×K, b: K×N.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::check_same_tape(a, b, "matmul");
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    detail::check_rank(av, 2, "matmul");
    detail::check_rank(bv, 2, "matmul");
    const int M = av.extent(0), K = av.extent(1), K2 = bv.extent(0), N = bv.extent(1);
    if (K != K2) {
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(av.shape()) + " · " +
                                    shape_str(bv.shape()));
    }
    Tensor<T> out(Shape{M, N});
    for (int i = 0; i < M; ++i) {
        T* orow = out.data() + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const T av_ik = av(i, k);
            const T* brow = bv.data() + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) orow[j] += av_ik * brow[j];
        }
    }
    const int aid = a.id, bid = b.id;
    auto back = [aid, bid, M, K, N](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& aval = t.value(aid);
        const Tensor<T>& bval = t.value(bid);
        if (t.wants_grad(aid)) {
            Tensor<T>& da = t.grad(aid);
            for (int i = 0; i < M; ++i) {
                const T* grow = g.data() + static_cast<std::size_t>(i) * N;
                for (int k = 0; k < K; ++k) {
                    const T* brow = bval.data() + static_cast<std::size_t>(k) * N;
                    T acc = T(0);
                    for (int j = 0; j < N; ++j) acc += grow[j] * brow[j];
                    da(i, k) += acc;
                }
            }
        }
        if (t.wants_grad(bid)) {
            Tensor<T>& db = t.grad(bid);
            for (int k = 0; k < K; ++k) {
                T* dbrow = db.data() + static_cast<std::size_t>(k) * N;
                for (int i = 0; i < M; ++i) {
                    const T a_ik = aval(i, k);
                    const T* grow = g.data() + static_cast<std::size_t>(i) * N;
                    for (int j = 0; j < N; ++j) dbrow[j] += a_ik * grow[j];
                }
            }
        }
    };
    return tape.record("matmul", std::move(out), {aid, bid}, std::move(back));
}

/// 2D transpose.
template <typename T>
Var<T> transpose2d(Var<T> a) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    detail::check_rank(av, 2, "transpose2d");
    const int M = av.extent(0), N = av.extent(1);
    Tensor<T> out(Shape{N, M});
    for (int i = 0; i < M; ++i) {
        for (int j = 0; j < N; ++j) out(j, i) = av(i, j);
    }
    const int aid = a.id;
    auto back = [aid, M, N](Tape<T>& t, int self) {
        if (!t.wants_grad(aid)) return;
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& da = t.grad(aid);
        for (int j = 0; j < N; ++j) {
            for (int i = 0; i < M; ++i) da(i, j) += g(j, i);
        }
    };
    return tape.record("transpose2d", std::move(out), {aid}, std::move(back));
}

/// Row-major reshape (copy).
template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    if (shape_numel(shape) != av.numel()) {
        throw std::invalid_argument("reshape: element count mismatch: " + shape_str(av.shape()) + " -> " +
                                    shape_str(shape));
    }
    Tensor<T> out(std::move(shape), av.vec());
    const int aid = a.id;
    auto back = [aid](Tape<T>& t, int self) {
        if (!t.wants_grad(aid)) return;
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& da = t.grad(aid);
        for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i];
    };
    return tape.record("reshape", std::move(out), {aid}, std::move(back));
}

/// Elementwise sum of two same-shape tensors.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::check_same_tape(a, b, "add");
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (!av.same_shape(bv)) {
        throw std::invalid_argument("add: shapes differ: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    Tensor<T> out(av.shape());
    for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    const int aid = a.id, bid = b.id;
    auto back = [aid, bid](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.wants_grad(aid)) {
            Tensor<T>& da = t.grad(aid);
            for (std::int64_t i = 0; i < g.numel(); ++i) da[i] += g[i];
        }
        if (t.wants_grad(bid)) {
            Tensor<T>& db = t.grad(bid);
            for (std::int64_t i = 0; i < g.numel(); ++i) db[i] += g[i];
        }
    };
    return tape.record("add", std::move(out), {aid, bid}, std::move(back));
}

/// y = gain * o + x with a scalar gain parameter.
template <typename T>
Var<T> residual_scale_add(Parameter<T>& gain, Var<T> o, Var<T> x) {
    detail::check_same_tape(o, x, "residual_scale_add");
    Tape<T>& tape = *o.tape;
    if (gain.value.numel() != 1) {
        throw std::invalid_argument("residual_scale_add: gain must be scalar, got " + shape_str(gain.value.shape()));
    }
    const Tensor<T>& ov = o.value();
    const Tensor<T>& xv = x.value();
    if (!ov.same_shape(xv)) {
        throw std::invalid_argument("residual_scale_add: shapes differ: " + shape_str(ov.shape()) + " vs " +
                                    shape_str(xv.shape()));
    }
    Var<T> gv = tape.use(gain);
    const T gamma = gain.value[0];
    Tensor<T> out(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) out[i] = gamma * ov[i] + xv[i];

    const int gid = gv.id, oid = o.id, xid = x.id;
    auto back = [gid, oid, xid](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& oval = t.value(oid);
        const T gamma_v = t.value(gid)[0];
        if (t.wants_grad(gid)) {
            T acc = T(0);
            for (std::int64_t i = 0; i < g.numel(); ++i) acc += g[i] * oval[i];
            t.grad(gid)[0] += acc;
        }
        if (t.wants_grad(oid)) {
            Tensor<T>& dov = t.grad(oid);
            for (std::int64_t i = 0; i < g.numel(); ++i) dov[i] += gamma_v * g[i];
        }
        if (t.wants_grad(xid)) {
            Tensor<T>& dxv = t.grad(xid);
            for (std::int64_t i = 0; i < g.numel(); ++i) dxv[i] += g[i];
        }
    };
    return tape.record("residual_scale_add", std::move(out), {gid, oid, xid}, std::move(back));
}

/// Nearest-neighbor ×2 upsampling.
template <typename T>
Var<T> upsample_nearest_x2(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::check_rank(xv, 3, "upsample_nearest_x2");
    const int C = xv.extent(0), H = xv.extent(1), W = xv.extent(2);
    Tensor<T> out(Shape{C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c) {
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                const T v = xv(c, h, w);
                out(c, 2 * h, 2 * w) = v;
                out(c, 2 * h, 2 * w + 1) = v;
                out(c, 2 * h + 1, 2 * w) = v;
                out(c, 2 * h + 1, 2 * w + 1) = v;
            }
        }
    }
    const int xid = x.id;
    auto back = [xid, C, H, W](Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& dx = t.grad(xid);
        for (int c = 0; c < C; ++c) {
            for (int h = 0; h < H; ++h) {
                for (int w = 0; w < W; ++w) {
                    dx(c, h, w) += g(c, 2 * h, 2 * w) + g(c, 2 * h, 2 * w + 1) + g(c, 2 * h + 1, 2 * w) +
                                   g(c, 2 * h + 1, 2 * w + 1);
                }
            }
        }
    };
    return tape.record("upsample_nearest_x2", std::move(out), {xid}, std::move(back));
}

/// Bilinear ×2 upsampling with half-pixel centers and clamped borders.
template <typename T>
Var<T> upsample_bilinear_x2(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    detail::check_rank(xv, 3, "upsample_bilinear_x2");
    const int C = xv.extent(0), H = xv.extent(1), W = xv.extent(2);
    const int Ho = 2 * H, Wo = 2 * W;
    Tensor<T> out(Shape{C, Ho, Wo});
    for (int ho = 0; ho < Ho; ++ho) {
        int h0, h1;
        double hw0, hw1;
        detail::bilinear_x2_taps(ho, H, h0, h1, hw0, hw1);
        for (int wo = 0; wo < Wo; ++wo) {
            int w0, w1;
            double ww0, ww1;
            detail::bilinear_x2_taps(wo, W, w0, w1, ww0, ww1);
            for (int c = 0; c < C; ++c) {
                const double v = hw0 * (ww0 * xv(c, h0, w0) + ww1 * xv(c, h0, w1)) +
                                 hw1 * (ww0 * xv(c, h1, w0) + ww1 * xv(c, h1, w1));
                out(c, ho, wo) = static_cast<T>(v);
            }
        }
    }
    const int xid = x.id;
    auto back = [xid, C, H, W, Ho, Wo](Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& dx = t.grad(xid);
        for (int ho = 0; ho < Ho; ++ho) {
            int h0, h1;
            double hw0, hw1;
            detail::bilinear_x2_taps(ho, H, h0, h1, hw0, hw1);
            for (int wo = 0; wo < Wo; ++wo) {
                int w0, w1;
                double ww0, ww1;
                detail::bilinear_x2_taps(wo, W, w0, w1, ww0, ww1);
                for (int c = 0; c < C; ++c) {
                    const double gv = static_cast<double>(g(c, ho, wo));
                    dx(c, h0, w0) += static_cast<T>(hw0 * ww0 * gv);
                    dx(c, h0, w1) += static_cast<T>(hw0 * ww1 * gv);
                    dx(c, h1, w0) += static_cast<T>(hw1 * ww0 * gv);
                    dx(c, h1, w1) += static_cast<T>(hw1 * ww1 * gv);
                }
            }
        }
    };
    return tape.record("upsample_bilinear_x2", std::move(out), {xid}, std::move(back));
}

/// Scalar dot product with a constant weight tensor of the same shape.
template <typename T>
Var<T> weighted_sum(Var<T> x, Tensor<T> weights) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    if (!xv.same_shape(weights)) {
        throw std::invalid_argument("weighted_sum: shapes differ: " + shape_str(xv.shape()) + " vs " +
                                    shape_str(weights.shape()));
    }
    double acc = 0;
    for (std::int64_t i = 0; i < xv.numel(); ++i) {
        acc += static_cast<double>(xv[i]) * static_cast<double>(weights[i]);
    }
    const int xid = x.id;
    auto back = [xid, weights = std::move(weights)](Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const T g = t.grad(self)[0];
        Tensor<T>& dx = t.grad(xid);
        for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += g * weights[i];
    };
    return tape.record("weighted_sum", Tensor<T>::scalar(static_cast<T>(acc)), {xid}, std::move(back));
}

/// Sum of all elements, as a scalar.
template <typename T>
Var<T> sum_all(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    double acc = 0;
    for (std::int64_t i = 0; i < xv.numel(); ++i) acc += static_cast<double>(xv[i]);
    const int xid = x.id;
    auto back = [xid](Tape<T>& t, int self) {
        if (!t.wants_grad(xid)) return;
        const T g = t.grad(self)[0];
        Tensor<T>& dx = t.grad(xid);
        for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    };
    return tape.record("sum_all", Tensor<T>::scalar(static_cast<T>(acc)), {xid}, std::move(back));
}

/// Mean binary cross-entropy against a constant target in {0,1}. Predictions
/// are clamped to [1e-7, 1-1e-7] before the logarithms; the gradient is zero
/// in the clamped region.
template <typename T>
Var<T> bce_mean(Var<T> pred, Tensor<T> target) {
    Tape<T>& tape = *pred.tape;
    const Tensor<T>& pv = pred.value();
    if (!pv.same_shape(target)) {
        throw std::invalid_argument("bce_mean: prediction shape " + shape_str(pv.shape()) +
                                    " does not match target shape " + shape_str(target.shape()));
    }
    const double lo = 1e-7, hi = 1.0 - 1e-7;
    const std::int64_t n = pv.numel();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double p = static_cast<double>(pv[i]);
        p = std::min(hi, std::max(lo, p));
        const double m = static_cast<double>(target[i]);
        acc -= m * std::log(p) + (1.0 - m) * std::log(1.0 - p);
    }
    acc /= static_cast<double>(n);

    const int pid = pred.id;
    auto back = [pid, lo, hi, n, target = std::move(target)](Tape<T>& t, int self) {
        if (!t.wants_grad(pid)) return;
        const T gscale = t.grad(self)[0];
        const Tensor<T>& pval = t.value(pid);
        Tensor<T>& dp = t.grad(pid);
        const double invn = 1.0 / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            const double p = static_cast<double>(pval[i]);
            if (p < lo || p > hi) continue;
            const double m = static_cast<double>(target[i]);
            dp[i] += static_cast<T>(static_cast<double>(gscale) * invn * (p - m) / (p * (1.0 - p)));
        }
    };
    return tape.record("bce_mean", Tensor<T>::scalar(static_cast<T>(acc)), {pid}, std::move(back));
}

}  // namespace arns

#endif  // ARNS_OPS_HPP
