#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <vector>

#include "tbnet/tensor.hpp"

namespace tbnet {

namespace detail {
inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}
} // namespace detail

/// RAII switch disabling graph construction (inference / evaluation).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

/// x (N,C,H,W) -> col (C*KH*KW, N*OH*OW), zero-padded.
template <typename S>
void im2col(const std::vector<S>& x, int64_t n_batch, int64_t channels, int64_t h, int64_t w,
            int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t oh, int64_t ow,
            std::vector<S>& col) {
    const int64_t cols = n_batch * oh * ow;
    col.assign(static_cast<size_t>(channels * kh * kw * cols), S(0));
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t c = 0; c < channels; ++c) {
            const S* xc = x.data() + (n * channels + c) * h * w;
            for (int64_t ky = 0; ky < kh; ++ky) {
                for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t row = (c * kh + ky) * kw + kx;
                    S* dst = col.data() + row * cols + n * oh * ow;
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            dst[oy * ow + ox] = xc[iy * w + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of dcol back into dx; exact adjoint of im2col.
template <typename S>
void col2im_accumulate(const std::vector<S>& dcol, int64_t n_batch, int64_t channels, int64_t h,
                       int64_t w, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t oh,
                       int64_t ow, std::vector<S>& dx) {
    const int64_t cols = n_batch * oh * ow;
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t c = 0; c < channels; ++c) {
            S* dxc = dx.data() + (n * channels + c) * h * w;
            for (int64_t ky = 0; ky < kh; ++ky) {
                for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t row = (c * kh + ky) * kw + kx;
                    const S* src = dcol.data() + row * cols + n * oh * ow;
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            dxc[iy * w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

} // namespace detail

/// 2-D convolution, NCHW input against OIHW weights, with bias.
template <typename S>
TensorPtr<S> conv2d(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b,
                    int64_t stride, int64_t pad) {
    if (x->rank() != 4)
        throw ShapeError(strcat_msg("conv2d: input must be NCHW, got ", shape_to_string(x->shape)));
    if (w->rank() != 4)
        throw ShapeError(strcat_msg("conv2d: weight must be OIHW, got ", shape_to_string(w->shape)));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (pad < 0) throw ShapeError("conv2d: padding must be >= 0");
    const int64_t n = x->dim(0), c = x->dim(1), h = x->dim(2), wdim = x->dim(3);
    const int64_t o = w->dim(0), wi = w->dim(1), kh = w->dim(2), kw = w->dim(3);
    if (c != wi)
        throw ShapeError(strcat_msg("conv2d: input has ", c, " channels but weight expects ", wi));
    if (b->shape != Shape{o})
        throw ShapeError(strcat_msg("conv2d: bias shape ", shape_to_string(b->shape),
                                    " does not match ", o, " output channels"));
    const int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const int64_t ow = (wdim + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1)
        throw ShapeError(strcat_msg("conv2d: kernel ", kh, "x", kw, " does not fit input ", h, "x",
                                    wdim, " with padding ", pad));

    const int64_t ckk = c * kh * kw;
    const int64_t cols = n * oh * ow;
    auto col = std::make_shared<std::vector<S>>();
    detail::im2col(x->data, n, c, h, wdim, kh, kw, stride, pad, oh, ow, *col);

    auto out = Tensor<S>::zeros({n, o, oh, ow});
    {
        std::vector<S> prod(static_cast<size_t>(o * cols));
        ConstMatMap<S> wm(w->data.data(), o, ckk);
        ConstMatMap<S> cm(col->data(), ckk, cols);
        MatMap<S> pm(prod.data(), o, cols);
        pm.noalias() = wm * cm;
        const int64_t plane = oh * ow;
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t oi = 0; oi < o; ++oi) {
                const S* src = prod.data() + oi * cols + ni * plane;
                S* dst = out->data.data() + (ni * o + oi) * plane;
                const S bias = b->data[oi];
                for (int64_t s = 0; s < plane; ++s) dst[s] = src[s] + bias;
            }
    }

    if (grad_enabled() && any_requires_grad<S>({x, w, b})) {
        out->requires_grad = true;
        out->parents = {x, w, b};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        out->backward_fn = [x, w, b, wk, col, n, c, h, wdim, o, kh, kw, stride, pad, oh, ow,
                            ckk, cols]() {
            auto outp = wk.lock();
            const int64_t plane = oh * ow;
            // Regroup dout (N,O,OH,OW) as (O, N*OH*OW).
            std::vector<S> dout_m(static_cast<size_t>(o * cols));
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t oi = 0; oi < o; ++oi) {
                    const S* src = outp->grad.data() + (ni * o + oi) * plane;
                    S* dst = dout_m.data() + oi * cols + ni * plane;
                    for (int64_t s = 0; s < plane; ++s) dst[s] = src[s];
                }
            ConstMatMap<S> dm(dout_m.data(), o, cols);
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t oi = 0; oi < o; ++oi) {
                    S acc = S(0);
                    const S* row = dout_m.data() + oi * cols;
                    for (int64_t s = 0; s < cols; ++s) acc += row[s];
                    b->grad[oi] += acc;
                }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                ConstMatMap<S> cm(col->data(), ckk, cols);
                MatMap<S> gw(w->grad.data(), o, ckk);
                gw.noalias() += dm * cm.transpose();
            }
            if (x->requires_grad) {
                x->ensure_grad();
                std::vector<S> dcol(static_cast<size_t>(ckk * cols));
                MatMap<S> dcm(dcol.data(), ckk, cols);
                ConstMatMap<S> wm(w->data.data(), o, ckk);
                dcm.noalias() = wm.transpose() * dm;
                detail::col2im_accumulate(dcol, n, c, h, wdim, kh, kw, stride, pad, oh, ow,
                                          x->grad);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

enum class Mode { Train, Eval };

/// Per-channel batch normalization over an NCHW tensor. Train mode
/// normalizes by batch statistics and updates the running buffers in place;
/// eval mode applies the running statistics.
template <typename S>
TensorPtr<S> batchnorm(const TensorPtr<S>& x, const TensorPtr<S>& gamma, const TensorPtr<S>& beta,
                       TensorPtr<S> running_mean, TensorPtr<S> running_var, Mode mode,
                       S momentum = S(0.1), S eps = S(1e-5)) {
    if (x->rank() != 4)
        throw ShapeError(strcat_msg("batchnorm: input must be NCHW, got ",
                                    shape_to_string(x->shape)));
    const int64_t n = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    for (const auto& t : {gamma, beta, running_mean, running_var})
        if (t->shape != Shape{c})
            throw ShapeError(strcat_msg("batchnorm: parameter shape ", shape_to_string(t->shape),
                                        " does not match ", c, " channels"));
    if (mode == Mode::Train && n == 0)
        throw ShapeError("batchnorm: empty batch in train mode");

    const int64_t plane = h * w;
    const int64_t m = n * plane; // elements per channel
    auto out = Tensor<S>::zeros(x->shape);

    auto mean = std::make_shared<std::vector<S>>(static_cast<size_t>(c), S(0));
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(c), S(0));

    if (mode == Mode::Train) {
        for (int64_t ci = 0; ci < c; ++ci) {
            S sum = S(0), sq = S(0);
            for (int64_t ni = 0; ni < n; ++ni) {
                const S* src = x->data.data() + (ni * c + ci) * plane;
                for (int64_t s = 0; s < plane; ++s) {
                    sum += src[s];
                    sq += src[s] * src[s];
                }
            }
            const S mu = sum / static_cast<S>(m);
            S var = sq / static_cast<S>(m) - mu * mu;
            if (var < S(0)) var = S(0);
            (*mean)[ci] = mu;
            (*inv_std)[ci] = S(1) / std::sqrt(var + eps);
            const S var_update = m > 1 ? var * static_cast<S>(m) / static_cast<S>(m - 1) : var;
            running_mean->data[ci] = (S(1) - momentum) * running_mean->data[ci] + momentum * mu;
            running_var->data[ci] =
                (S(1) - momentum) * running_var->data[ci] + momentum * var_update;
        }
    } else {
        for (int64_t ci = 0; ci < c; ++ci) {
            (*mean)[ci] = running_mean->data[ci];
            (*inv_std)[ci] = S(1) / std::sqrt(running_var->data[ci] + eps);
        }
    }

    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const S* src = x->data.data() + (ni * c + ci) * plane;
            S* dst = out->data.data() + (ni * c + ci) * plane;
            const S mu = (*mean)[ci], is = (*inv_std)[ci];
            const S g = gamma->data[ci], be = beta->data[ci];
            for (int64_t s = 0; s < plane; ++s) dst[s] = g * (src[s] - mu) * is + be;
        }

    if (grad_enabled() && any_requires_grad<S>({x, gamma, beta})) {
        out->requires_grad = true;
        out->parents = {x, gamma, beta};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        const bool train = (mode == Mode::Train);
        out->backward_fn = [x, gamma, beta, wk, mean, inv_std, n, c, plane, m, train]() {
            auto outp = wk.lock();
            for (int64_t ci = 0; ci < c; ++ci) {
                const S mu = (*mean)[ci], is = (*inv_std)[ci];
                S sum_d = S(0), sum_dx = S(0);
                for (int64_t ni = 0; ni < n; ++ni) {
                    const S* xd = x->data.data() + (ni * c + ci) * plane;
                    const S* gd = outp->grad.data() + (ni * c + ci) * plane;
                    for (int64_t s = 0; s < plane; ++s) {
                        sum_d += gd[s];
                        sum_dx += gd[s] * (xd[s] - mu) * is;
                    }
                }
                if (beta->requires_grad) {
                    beta->ensure_grad();
                    beta->grad[ci] += sum_d;
                }
                if (gamma->requires_grad) {
                    gamma->ensure_grad();
                    gamma->grad[ci] += sum_dx;
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    const S g = gamma->data[ci];
                    if (train) {
                        const S inv_m = S(1) / static_cast<S>(m);
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const S* xd = x->data.data() + (ni * c + ci) * plane;
                            const S* gd = outp->grad.data() + (ni * c + ci) * plane;
                            S* dx = x->grad.data() + (ni * c + ci) * plane;
                            for (int64_t s = 0; s < plane; ++s) {
                                const S xhat = (xd[s] - mu) * is;
                                dx[s] += g * is * (gd[s] - inv_m * sum_d - xhat * inv_m * sum_dx);
                            }
                        }
                    } else {
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const S* gd = outp->grad.data() + (ni * c + ci) * plane;
                            S* dx = x->grad.data() + (ni * c + ci) * plane;
                            for (int64_t s = 0; s < plane; ++s) dx[s] += g * is * gd[s];
                        }
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise / activation ops
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> relu(const TensorPtr<S>& x) {
    auto out = Tensor<S>::zeros(x->shape);
    for (size_t i = 0; i < x->data.size(); ++i)
        out->data[i] = x->data[i] > S(0) ? x->data[i] : S(0);
    if (grad_enabled() && x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        out->backward_fn = [x, wk]() {
            auto outp = wk.lock();
            x->ensure_grad();
            for (size_t i = 0; i < x->data.size(); ++i)
                if (x->data[i] > S(0)) x->grad[i] += outp->grad[i];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> elementwise_add(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape != b->shape)
        throw ShapeError(strcat_msg("elementwise_add: shape ", shape_to_string(a->shape),
                                    " vs ", shape_to_string(b->shape)));
    auto out = Tensor<S>::zeros(a->shape);
    for (size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (grad_enabled() && any_requires_grad<S>({a, b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        out->backward_fn = [a, b, wk]() {
            auto outp = wk.lock();
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += outp->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < b->grad.size(); ++i) b->grad[i] += outp->grad[i];
            }
        };
    }
    return out;
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
template <typename S>
TensorPtr<S> maxpool2x2(const TensorPtr<S>& x) {
    if (x->rank() != 4)
        throw ShapeError(strcat_msg("maxpool2x2: input must be NCHW, got ",
                                    shape_to_string(x->shape)));
    const int64_t n = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    if (h < 2 || w < 2)
        throw ShapeError(strcat_msg("maxpool2x2: spatial dims ", h, "x", w, " too small"));
    const int64_t oh = h / 2, ow = w / 2;
    auto out = Tensor<S>::zeros({n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<int64_t>>(out->data.size());
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const S* src = x->data.data() + (ni * c + ci) * h * w;
            S* dst = out->data.data() + (ni * c + ci) * oh * ow;
            int64_t* am = argmax->data() + (ni * c + ci) * oh * ow;
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    int64_t best = (2 * oy) * w + (2 * ox);
                    S best_v = src[best];
                    for (int64_t ky = 0; ky < 2; ++ky)
                        for (int64_t kx = 0; kx < 2; ++kx) {
                            const int64_t idx = (2 * oy + ky) * w + (2 * ox + kx);
                            if (src[idx] > best_v) {
                                best_v = src[idx];
                                best = idx;
                            }
                        }
                    dst[oy * ow + ox] = best_v;
                    am[oy * ow + ox] = (ni * c + ci) * h * w + best;
                }
        }
    if (grad_enabled() && x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        out->backward_fn = [x, wk, argmax]() {
            auto outp = wk.lock();
            x->ensure_grad();
            for (size_t i = 0; i < outp->grad.size(); ++i)
                x->grad[(*argmax)[i]] += outp->grad[i];
        };
    }
    return out;
}

/// (N,C,H,W) -> (N,C) spatial mean.
template <typename S>
TensorPtr<S> global_avgpool(const TensorPtr<S>& x) {
    if (x->rank() != 4)
        throw ShapeError(strcat_msg("global_avgpool: input must be NCHW, got ",
                                    shape_to_string(x->shape)));
    const int64_t n = x->dim(0), c = x->dim(1), plane = x->dim(2) * x->dim(3);
    auto out = Tensor<S>::zeros({n, c});
    for (int64_t i = 0; i < n * c; ++i) {
        const S* src = x->data.data() + i * plane;
        S acc = S(0);
        for (int64_t s = 0; s < plane; ++s) acc += src[s];
        out->data[i] = acc / static_cast<S>(plane);
    }
    if (grad_enabled() && x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        out->backward_fn = [x, wk, n, c, plane]() {
            auto outp = wk.lock();
            x->ensure_grad();
            const S scale = S(1) / static_cast<S>(plane);
            for (int64_t i = 0; i < n * c; ++i) {
                const S g = outp->grad[i] * scale;
                S* dst = x->grad.data() + i * plane;
                for (int64_t s = 0; s < plane; ++s) dst[s] += g;
            }
        };
    }
    return out;
}

/// Fully connected layer: x (N,I) * w (O,I)^T + b.
template <typename S>
TensorPtr<S> dense(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b) {
    if (x->rank() != 2 || w->rank() != 2)
        throw ShapeError(strcat_msg("dense: expected 2-D input and weight, got ",
                                    shape_to_string(x->shape), " and ", shape_to_string(w->shape)));
    const int64_t n = x->dim(0), in = x->dim(1), o = w->dim(0);
    if (w->dim(1) != in)
        throw ShapeError(strcat_msg("dense: input has ", in, " features but weight expects ",
                                    w->dim(1)));
    if (b->shape != Shape{o})
        throw ShapeError(strcat_msg("dense: bias shape ", shape_to_string(b->shape),
                                    " does not match ", o, " outputs"));
    auto out = Tensor<S>::zeros({n, o});
    {
        ConstMatMap<S> xm(x->data.data(), n, in);
        ConstMatMap<S> wm(w->data.data(), o, in);
        MatMap<S> om(out->data.data(), n, o);
        om.noalias() = xm * wm.transpose();
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t oi = 0; oi < o; ++oi) out->data[ni * o + oi] += b->data[oi];
    }
    if (grad_enabled() && any_requires_grad<S>({x, w, b})) {
        out->requires_grad = true;
        out->parents = {x, w, b};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        out->backward_fn = [x, w, b, wk, n, in, o]() {
            auto outp = wk.lock();
            ConstMatMap<S> dm(outp->grad.data(), n, o);
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t oi = 0; oi < o; ++oi) b->grad[oi] += outp->grad[ni * o + oi];
            }
            if (w->requires_grad) {
                w->ensure_grad();
                ConstMatMap<S> xm(x->data.data(), n, in);
                MatMap<S> gw(w->grad.data(), o, in);
                gw.noalias() += dm.transpose() * xm;
            }
            if (x->requires_grad) {
                x->ensure_grad();
                ConstMatMap<S> wm(w->data.data(), o, in);
                MatMap<S> gx(x->grad.data(), n, in);
                gx.noalias() += dm * wm;
            }
        };
    }
    return out;
}

/// Select channels of x (axis 1, rank 2 or 4) by index list.
template <typename S>
TensorPtr<S> gather_channels(const TensorPtr<S>& x, const std::vector<int64_t>& indices) {
    if (x->rank() != 2 && x->rank() != 4)
        throw ShapeError(strcat_msg("gather_channels: rank must be 2 or 4, got ",
                                    shape_to_string(x->shape)));
    const int64_t n = x->dim(0), c = x->dim(1);
    const int64_t plane = x->rank() == 4 ? x->dim(2) * x->dim(3) : 1;
    for (int64_t idx : indices)
        if (idx < 0 || idx >= c)
            throw ValidationError(strcat_msg("gather_channels: index ", idx, " out of range [0, ",
                                             c,
                                        ")"));
    const int64_t oc = static_cast<int64_t>(indices.size());
    Shape out_shape = x->shape;
    out_shape[1] = oc;
    auto out = Tensor<S>::zeros(out_shape);
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t oi = 0; oi < oc; ++oi) {
            const S* src = x->data.data() + (ni * c + indices[oi]) * plane;
            S* dst = out->data.data() + (ni * oc + oi) * plane;
            for (int64_t s = 0; s < plane; ++s) dst[s] = src[s];
        }
    if (grad_enabled() && x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        auto idx = std::make_shared<std::vector<int64_t>>(indices);
        out->backward_fn = [x, wk, idx, n, c, oc, plane]() {
            auto outp = wk.lock();
            x->ensure_grad();
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t oi = 0; oi < oc; ++oi) {
                    const S* src = outp->grad.data() + (ni * oc + oi) * plane;
                    S* dst = x->grad.data() + (ni * c + (*idx)[oi]) * plane;
                    for (int64_t s = 0; s < plane; ++s) dst[s] += src[s];
                }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the batch. Labels are class indices.
template <typename S>
TensorPtr<S> softmax_cross_entropy(const TensorPtr<S>& logits, const std::vector<int64_t>& labels) {
    if (logits->rank() != 2)
        throw ShapeError(strcat_msg("softmax_cross_entropy: logits must be (N,K), got ",
                                    shape_to_string(logits->shape)));
    const int64_t n = logits->dim(0), k = logits->dim(1);
    if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
    if (static_cast<int64_t>(labels.size()) != n)
        throw ShapeError(strcat_msg("softmax_cross_entropy: ", labels.size(), " labels for batch ",
                                    n));
    for (int64_t y : labels)
        if (y < 0 || y >= k)
            throw ValidationError(strcat_msg("softmax_cross_entropy: label ", y, " outside [0, ",
                                             k, ")"));
    auto probs = std::make_shared<std::vector<S>>(logits->data);
    S loss_acc = S(0);
    for (int64_t ni = 0; ni < n; ++ni) {
        S* row = probs->data() + ni * k;
        S mx = row[0];
        for (int64_t ki = 1; ki < k; ++ki) mx = std::max(mx, row[ki]);
        S denom = S(0);
        for (int64_t ki = 0; ki < k; ++ki) {
            row[ki] = std::exp(row[ki] - mx);
            denom += row[ki];
        }
        for (int64_t ki = 0; ki < k; ++ki) row[ki] /= denom;
        loss_acc -= std::log(std::max(row[labels[ni]], std::numeric_limits<S>::min()));
    }
    auto out = Tensor<S>::from({1}, {loss_acc / static_cast<S>(n)});
    if (grad_enabled() && logits->requires_grad) {
        out->requires_grad = true;
        out->parents = {logits};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        auto lab = std::make_shared<std::vector<int64_t>>(labels);
        out->backward_fn = [logits, wk, probs, lab, n, k]() {
            auto outp = wk.lock();
            logits->ensure_grad();
            const S g = outp->grad[0] / static_cast<S>(n);
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t ki = 0; ki < k; ++ki) {
                    S d = (*probs)[ni * k + ki];
                    if (ki == (*lab)[ni]) d -= S(1);
                    logits->grad[ni * k + ki] += g * d;
                }
        };
    }
    return out;
}

/// Fixed-coefficient inner product reducing a tensor to a scalar; the
/// gradient-check suites use it to build scalar objectives over any op.
template <typename S>
TensorPtr<S> weighted_sum(const TensorPtr<S>& x, const std::vector<S>& coeffs) {
    if (static_cast<int64_t>(coeffs.size()) != x->numel())
        throw ShapeError(strcat_msg("weighted_sum: ", coeffs.size(), " coefficients for ",
                                    x->numel(), " elements"));
    S acc = S(0);
    for (size_t i = 0; i < coeffs.size(); ++i) acc += coeffs[i] * x->data[i];
    auto out = Tensor<S>::from({1}, {acc});
    if (grad_enabled() && x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        auto wk = std::weak_ptr<Tensor<S>>(out);
        auto cf = std::make_shared<std::vector<S>>(coeffs);
        out->backward_fn = [x, wk, cf]() {
            auto outp = wk.lock();
            x->ensure_grad();
            for (size_t i = 0; i < cf->size(); ++i) x->grad[i] += outp->grad[0] * (*cf)[i];
        };
    }
    return out;
}

} // namespace tbnet
