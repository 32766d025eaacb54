#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cda/core/blas.hpp"
#include "cda/core/tensor.hpp"

namespace cda {

// Reverse-mode autodiff over dense tensors. Ops record backward closures on a
// tape in creation order; backward() replays them in reverse. Leaves
// (parameters, inputs) live off-tape and receive gradients from consumer ops.
template <class T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_live = false;  // grad allocated and zeroed
    std::function<void()> back;

    void ensure_grad() {
        if (!grad_live) {
            grad = Tensor<T>(val.shape());
            grad_live = true;
        }
    }
    void zero_grad() {
        if (grad_live) grad.zero();
    }
};

template <class T>
using NodeP = std::shared_ptr<Node<T>>;

template <class T>
class Tape {
public:
    bool grad_enabled = true;

    NodeP<T> leaf(Tensor<T> v, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->val = std::move(v);
        n->requires_grad = requires_grad;
        return n;
    }

    NodeP<T> op(Tensor<T> v, bool requires_grad, std::function<void()> back) {
        auto n = std::make_shared<Node<T>>();
        n->val = std::move(v);
        n->requires_grad = requires_grad && grad_enabled;
        if (n->requires_grad) {
            n->back = std::move(back);
            tape_.push_back(n);
        }
        return n;
    }

    void backward(const NodeP<T>& out) {
        out->ensure_grad();
        out->grad.fill(T(1));
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
            Node<T>& n = **it;
            if (n.grad_live && n.back) n.back();
        }
    }

    void clear() { tape_.clear(); }
    size_t size() const { return tape_.size(); }

private:
    std::vector<NodeP<T>> tape_;
};

namespace ag {

template <class T>
bool wants_grad(const NodeP<T>& a) {
    return a->requires_grad;
}
template <class T, class... Rest>
bool wants_grad(const NodeP<T>& a, const Rest&... rest) {
    return a->requires_grad || wants_grad(rest...);
}

template <class T>
NodeP<T> binary_op(Tape<T>& tp, NodeP<T> a, NodeP<T> b, Tensor<T> v,
                   std::function<void(Node<T>&, Node<T>&, Node<T>&)> back) {
    bool rg = wants_grad(a, b);
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto w = std::weak_ptr<Node<T>>(out);
        out->back = [a, b, w, back]() {
            auto o = w.lock();
            back(*o, *a, *b);
        };
    }
    return out;
}

}  // namespace ag

// Helper: out = a + b
template <class T>
NodeP<T> op_add(Tape<T>& tp, NodeP<T> a, NodeP<T> b) {
    return ag::binary_op<T>(tp, a, b, a->val + b->val, [](Node<T>& o, Node<T>& a, Node<T>& b) {
        if (a.requires_grad) {
            a.ensure_grad();
            a.grad += o.grad;
        }
        if (b.requires_grad) {
            b.ensure_grad();
            b.grad += o.grad;
        }
    });
}

template <class T>
NodeP<T> op_sub(Tape<T>& tp, NodeP<T> a, NodeP<T> b) {
    return ag::binary_op<T>(tp, a, b, a->val - b->val, [](Node<T>& o, Node<T>& a, Node<T>& b) {
        if (a.requires_grad) {
            a.ensure_grad();
            a.grad += o.grad;
        }
        if (b.requires_grad) {
            b.ensure_grad();
            b.grad -= o.grad;
        }
    });
}

template <class T>
NodeP<T> op_mul(Tape<T>& tp, NodeP<T> a, NodeP<T> b) {
    if (!a->val.same_shape(b->val)) throw ShapeMismatch("op_mul");
    Tensor<T> v = a->val;
    for (long i = 0; i < v.size(); ++i) v[i] *= b->val[i];
    return ag::binary_op<T>(tp, a, b, std::move(v), [](Node<T>& o, Node<T>& a, Node<T>& b) {
        if (a.requires_grad) {
            a.ensure_grad();
            for (long i = 0; i < o.grad.size(); ++i) a.grad[i] += o.grad[i] * b.val[i];
        }
        if (b.requires_grad) {
            b.ensure_grad();
            for (long i = 0; i < o.grad.size(); ++i) b.grad[i] += o.grad[i] * a.val[i];
        }
    });
}

template <class T>
NodeP<T> op_scale(Tape<T>& tp, NodeP<T> a, T s) {
    Tensor<T> v = a->val;
    v *= s;
    bool rg = a->requires_grad;
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto w = std::weak_ptr<Node<T>>(out);
        out->back = [a, w, s]() {
            auto o = w.lock();
            a->ensure_grad();
            for (long i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i] * s;
        };
    }
    return out;
}

template <class T>
NodeP<T> op_silu(Tape<T>& tp, NodeP<T> a) {
    Tensor<T> v = a->val;
    for (long i = 0; i < v.size(); ++i) {
        double x = double(v[i]);
        v[i] = T(x / (1.0 + std::exp(-x)));
    }
    auto out = tp.op(std::move(v), a->requires_grad, nullptr);
    if (out->requires_grad) {
        auto w = std::weak_ptr<Node<T>>(out);
        out->back = [a, w]() {
            auto o = w.lock();
            a->ensure_grad();
            for (long i = 0; i < o->grad.size(); ++i) {
                double x = double(a->val[i]);
                double s = 1.0 / (1.0 + std::exp(-x));
                a->grad[i] += o->grad[i] * T(s * (1.0 + x * (1.0 - s)));
            }
        };
    }
    return out;
}

template <class T>
NodeP<T> op_relu(Tape<T>& tp, NodeP<T> a) {
    Tensor<T> v = a->val;
    for (long i = 0; i < v.size(); ++i) v[i] = std::max(v[i], T(0));
    auto out = tp.op(std::move(v), a->requires_grad, nullptr);
    if (out->requires_grad) {
        auto w = std::weak_ptr<Node<T>>(out);
        out->back = [a, w]() {
            auto o = w.lock();
            a->ensure_grad();
            for (long i = 0; i < o->grad.size(); ++i)
                if (a->val[i] > T(0)) a->grad[i] += o->grad[i];
        };
    }
    return out;
}

// ---- linear algebra ----

// x [N,D] * w [D,F] + b [F] -> [N,F]; b may be null.
template <class T>
NodeP<T> op_linear(Tape<T>& tp, NodeP<T> x, NodeP<T> w, NodeP<T> b) {
    const long n = x->val.dim(0), d = x->val.dim(1), f = w->val.dim(1);
    if (w->val.dim(0) != d) throw ShapeMismatch("op_linear: inner dims");
    Tensor<T> v({n, f});
    gemm<T>(false, false, n, f, d, T(1), x->val.data(), d, w->val.data(), f, T(0), v.data(), f);
    if (b) {
        for (long i = 0; i < n; ++i)
            for (long j = 0; j < f; ++j) v[i * f + j] += b->val[j];
    }
    bool rg = b ? ag::wants_grad(x, w, b) : ag::wants_grad(x, w);
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, w, b, wk, n, d, f]() {
            auto o = wk.lock();
            if (x->requires_grad) {
                x->ensure_grad();
                gemm<T>(false, true, n, d, f, T(1), o->grad.data(), f, w->val.data(), f, T(1),
                        x->grad.data(), d);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                gemm<T>(true, false, d, f, n, T(1), x->val.data(), d, o->grad.data(), f, T(1),
                        w->grad.data(), f);
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                for (long i = 0; i < n; ++i)
                    for (long j = 0; j < f; ++j) b->grad[j] += o->grad[i * f + j];
            }
        };
    }
    return out;
}

// ---- convolution (NHWC) ----

struct ConvDims {
    long n, h, w, c;     // input
    long kh, kw, f;      // kernel and output channels
    long stride, pad;
    long oh, ow;

    static ConvDims of(const std::vector<long>& xshape, const std::vector<long>& wshape,
                       long stride, long pad) {
        ConvDims d;
        d.n = xshape[0];
        d.h = xshape[1];
        d.w = xshape[2];
        d.c = xshape[3];
        d.kh = wshape[0];
        d.kw = wshape[1];
        if (wshape[2] != d.c) throw ShapeMismatch("conv: kernel channels != input channels");
        d.f = wshape[3];
        d.stride = stride;
        d.pad = pad;
        d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
        d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
        return d;
    }
    long col_rows() const { return n * oh * ow; }
    long col_k() const { return kh * kw * c; }
};

template <class T>
void im2col(const T* x, const ConvDims& d, T* col) {
    const long row_len = d.col_k();
    for (long n = 0; n < d.n; ++n) {
        const T* xn = x + n * d.h * d.w * d.c;
        for (long oy = 0; oy < d.oh; ++oy) {
            for (long ox = 0; ox < d.ow; ++ox) {
                T* row = col + ((n * d.oh + oy) * d.ow + ox) * row_len;
                for (long ky = 0; ky < d.kh; ++ky) {
                    long iy = oy * d.stride - d.pad + ky;
                    T* dst = row + ky * d.kw * d.c;
                    if (iy < 0 || iy >= d.h) {
                        std::memset(dst, 0, size_t(d.kw * d.c) * sizeof(T));
                        continue;
                    }
                    for (long kx = 0; kx < d.kw; ++kx) {
                        long ix = ox * d.stride - d.pad + kx;
                        if (ix < 0 || ix >= d.w) {
                            std::memset(dst + kx * d.c, 0, size_t(d.c) * sizeof(T));
                        } else {
                            std::memcpy(dst + kx * d.c, xn + (iy * d.w + ix) * d.c,
                                        size_t(d.c) * sizeof(T));
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, const ConvDims& d, T* dx) {
    const long row_len = d.col_k();
    for (long n = 0; n < d.n; ++n) {
        T* xn = dx + n * d.h * d.w * d.c;
        for (long oy = 0; oy < d.oh; ++oy) {
            for (long ox = 0; ox < d.ow; ++ox) {
                const T* row = col + ((n * d.oh + oy) * d.ow + ox) * row_len;
                for (long ky = 0; ky < d.kh; ++ky) {
                    long iy = oy * d.stride - d.pad + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    for (long kx = 0; kx < d.kw; ++kx) {
                        long ix = ox * d.stride - d.pad + kx;
                        if (ix < 0 || ix >= d.w) continue;
                        const T* src = row + (ky * d.kw + kx) * d.c;
                        T* dst = xn + (iy * d.w + ix) * d.c;
                        for (long c = 0; c < d.c; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }
}

// x [N,H,W,C], w [KH,KW,C,F], b [F] or null -> [N,OH,OW,F]
template <class T>
NodeP<T> op_conv2d(Tape<T>& tp, NodeP<T> x, NodeP<T> w, NodeP<T> b, long stride = 1, long pad = 0) {
    ConvDims d = ConvDims::of(x->val.shape(), w->val.shape(), stride, pad);
    std::vector<T> col(size_t(d.col_rows()) * d.col_k());
    im2col(x->val.data(), d, col.data());
    Tensor<T> v({d.n, d.oh, d.ow, d.f});
    gemm<T>(false, false, d.col_rows(), d.f, d.col_k(), T(1), col.data(), d.col_k(),
            w->val.data(), d.f, T(0), v.data(), d.f);
    if (b) {
        T* vp = v.data();
        for (long r = 0; r < d.col_rows(); ++r)
            for (long j = 0; j < d.f; ++j) vp[r * d.f + j] += b->val[j];
    }
    bool rg = b ? ag::wants_grad(x, w, b) : ag::wants_grad(x, w);
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, w, b, wk, d]() {
            auto o = wk.lock();
            const T* dy = o->grad.data();
            if (x->requires_grad) {
                x->ensure_grad();
                std::vector<T> dcol(size_t(d.col_rows()) * d.col_k());
                gemm<T>(false, true, d.col_rows(), d.col_k(), d.f, T(1), dy, d.f, w->val.data(),
                        d.f, T(0), dcol.data(), d.col_k());
                col2im_add(dcol.data(), d, x->grad.data());
            }
            if (w->requires_grad) {
                w->ensure_grad();
                std::vector<T> col(size_t(d.col_rows()) * d.col_k());
                im2col(x->val.data(), d, col.data());
                gemm<T>(true, false, d.col_k(), d.f, d.col_rows(), T(1), col.data(), d.col_k(), dy,
                        d.f, T(1), w->grad.data(), d.f);
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                for (long r = 0; r < d.col_rows(); ++r)
                    for (long j = 0; j < d.f; ++j) b->grad[j] += dy[r * d.f + j];
            }
        };
    }
    return out;
}

// ---- normalization ----

// Group normalization over [N,H,W,C] with channel groups; per-channel affine.
template <class T>
NodeP<T> op_group_norm(Tape<T>& tp, NodeP<T> x, NodeP<T> gamma, NodeP<T> beta, long groups,
                       double eps = 1e-5) {
    const long n = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2), c = x->val.dim(3);
    if (c % groups != 0) throw ShapeMismatch("group_norm: C % groups != 0");
    const long cg = c / groups;
    const long spatial = h * w;
    Tensor<T> v(x->val.shape());
    // cache per-(n,g) stats for backward
    auto mean = std::make_shared<std::vector<double>>(size_t(n * groups));
    auto inv_std = std::make_shared<std::vector<double>>(size_t(n * groups));
    const T* xp = x->val.data();
    T* vp = v.data();
    for (long ni = 0; ni < n; ++ni) {
        for (long g = 0; g < groups; ++g) {
            double sum = 0.0, sq = 0.0;
            for (long s = 0; s < spatial; ++s) {
                const T* px = xp + (ni * spatial + s) * c + g * cg;
                for (long k = 0; k < cg; ++k) {
                    double val = double(px[k]);
                    sum += val;
                    sq += val * val;
                }
            }
            double m = sum / double(spatial * cg);
            double var = sq / double(spatial * cg) - m * m;
            double is = 1.0 / std::sqrt(std::max(var, 0.0) + eps);
            (*mean)[size_t(ni * groups + g)] = m;
            (*inv_std)[size_t(ni * groups + g)] = is;
            for (long s = 0; s < spatial; ++s) {
                const T* px = xp + (ni * spatial + s) * c + g * cg;
                T* pv = vp + (ni * spatial + s) * c + g * cg;
                for (long k = 0; k < cg; ++k) {
                    long ch = g * cg + k;
                    pv[k] = T((double(px[k]) - m) * is * double(gamma->val[ch]) +
                              double(beta->val[ch]));
                }
            }
        }
    }
    bool rg = ag::wants_grad(x, gamma, beta);
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, gamma, beta, wk, mean, inv_std, n, groups, cg, spatial, c]() {
            auto o = wk.lock();
            const T* xp = x->val.data();
            const T* dy = o->grad.data();
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (long ni = 0; ni < n; ++ni) {
                for (long g = 0; g < groups; ++g) {
                    double m = (*mean)[size_t(ni * groups + g)];
                    double is = (*inv_std)[size_t(ni * groups + g)];
                    double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
                    const double count = double(spatial * cg);
                    for (long s = 0; s < spatial; ++s) {
                        const T* px = xp + (ni * spatial + s) * c + g * cg;
                        const T* pdy = dy + (ni * spatial + s) * c + g * cg;
                        for (long k = 0; k < cg; ++k) {
                            long ch = g * cg + k;
                            double xhat = (double(px[k]) - m) * is;
                            double dyg = double(pdy[k]) * double(gamma->val[ch]);
                            sum_dyg += dyg;
                            sum_dyg_xhat += dyg * xhat;
                            if (gamma->requires_grad) gamma->grad[ch] += T(double(pdy[k]) * xhat);
                            if (beta->requires_grad) beta->grad[ch] += pdy[k];
                        }
                    }
                    if (x->requires_grad) {
                        for (long s = 0; s < spatial; ++s) {
                            const T* px = xp + (ni * spatial + s) * c + g * cg;
                            const T* pdy = dy + (ni * spatial + s) * c + g * cg;
                            T* pdx = x->grad.data() + (ni * spatial + s) * c + g * cg;
                            for (long k = 0; k < cg; ++k) {
                                long ch = g * cg + k;
                                double xhat = (double(px[k]) - m) * is;
                                double dyg = double(pdy[k]) * double(gamma->val[ch]);
                                pdx[k] += T(is * (dyg - sum_dyg / count - xhat * sum_dyg_xhat / count));
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

// Batch normalization over N*H*W per channel (also accepts [N,D] as [N,1,1,D]).
// Updates running stats in training mode.
template <class T>
NodeP<T> op_batch_norm(Tape<T>& tp, NodeP<T> x, NodeP<T> gamma, NodeP<T> beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                       double momentum = 0.1, double eps = 1e-5) {
    std::vector<long> shape = x->val.shape();
    const long c = shape.back();
    const long rows = x->val.size() / c;
    Tensor<T> v(shape);
    auto mean = std::make_shared<std::vector<double>>(size_t(c));
    auto inv_std = std::make_shared<std::vector<double>>(size_t(c));
    const T* xp = x->val.data();
    if (training) {
        std::vector<double> sum(size_t(c), 0.0), sq(size_t(c), 0.0);
        for (long r = 0; r < rows; ++r)
            for (long ch = 0; ch < c; ++ch) {
                double val = double(xp[r * c + ch]);
                sum[size_t(ch)] += val;
                sq[size_t(ch)] += val * val;
            }
        for (long ch = 0; ch < c; ++ch) {
            double m = sum[size_t(ch)] / double(rows);
            double var = sq[size_t(ch)] / double(rows) - m * m;
            var = std::max(var, 0.0);
            (*mean)[size_t(ch)] = m;
            (*inv_std)[size_t(ch)] = 1.0 / std::sqrt(var + eps);
            running_mean[ch] = T((1.0 - momentum) * double(running_mean[ch]) + momentum * m);
            // unbiased running variance, matching the usual convention
            double unbiased = rows > 1 ? var * double(rows) / double(rows - 1) : var;
            running_var[ch] = T((1.0 - momentum) * double(running_var[ch]) + momentum * unbiased);
        }
    } else {
        for (long ch = 0; ch < c; ++ch) {
            (*mean)[size_t(ch)] = double(running_mean[ch]);
            (*inv_std)[size_t(ch)] = 1.0 / std::sqrt(double(running_var[ch]) + eps);
        }
    }
    T* vp = v.data();
    for (long r = 0; r < rows; ++r)
        for (long ch = 0; ch < c; ++ch)
            vp[r * c + ch] = T(((double(xp[r * c + ch]) - (*mean)[size_t(ch)]) * (*inv_std)[size_t(ch)]) *
                                   double(gamma->val[ch]) +
                               double(beta->val[ch]));
    bool rg = ag::wants_grad(x, gamma, beta);
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, gamma, beta, wk, mean, inv_std, rows, c, training]() {
            auto o = wk.lock();
            const T* xp = x->val.data();
            const T* dy = o->grad.data();
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (long ch = 0; ch < c; ++ch) {
                double m = (*mean)[size_t(ch)];
                double is = (*inv_std)[size_t(ch)];
                double g = double(gamma->val[ch]);
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (long r = 0; r < rows; ++r) {
                    double xhat = (double(xp[r * c + ch]) - m) * is;
                    double d = double(dy[r * c + ch]);
                    sum_dy += d;
                    sum_dy_xhat += d * xhat;
                }
                if (gamma->requires_grad) gamma->grad[ch] += T(sum_dy_xhat);
                if (beta->requires_grad) beta->grad[ch] += T(sum_dy);
                if (x->requires_grad) {
                    if (training) {
                        for (long r = 0; r < rows; ++r) {
                            double xhat = (double(xp[r * c + ch]) - m) * is;
                            double d = double(dy[r * c + ch]);
                            x->grad[r * c + ch] +=
                                T(g * is * (d - sum_dy / double(rows) - xhat * sum_dy_xhat / double(rows)));
                        }
                    } else {
                        for (long r = 0; r < rows; ++r)
                            x->grad[r * c + ch] += T(g * is * double(dy[r * c + ch]));
                    }
                }
            }
        };
    }
    return out;
}

// ---- shape / pooling ----

template <class T>
NodeP<T> op_reshape(Tape<T>& tp, NodeP<T> x, std::vector<long> shape) {
    Tensor<T> v = x->val.reshaped(shape);
    auto out = tp.op(std::move(v), x->requires_grad, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, wk]() {
            auto o = wk.lock();
            x->ensure_grad();
            for (long i = 0; i < o->grad.size(); ++i) x->grad[i] += o->grad[i];
        };
    }
    return out;
}

// global average over spatial dims: [N,H,W,C] -> [N,C]
template <class T>
NodeP<T> op_global_avg_pool(Tape<T>& tp, NodeP<T> x) {
    const long n = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2), c = x->val.dim(3);
    const long spatial = h * w;
    Tensor<T> v({n, c});
    const T* xp = x->val.data();
    for (long ni = 0; ni < n; ++ni) {
        for (long s = 0; s < spatial; ++s)
            for (long ch = 0; ch < c; ++ch) v[ni * c + ch] += xp[(ni * spatial + s) * c + ch];
        for (long ch = 0; ch < c; ++ch) v[ni * c + ch] /= T(spatial);
    }
    auto out = tp.op(std::move(v), x->requires_grad, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, wk, n, spatial, c]() {
            auto o = wk.lock();
            x->ensure_grad();
            for (long ni = 0; ni < n; ++ni)
                for (long s = 0; s < spatial; ++s)
                    for (long ch = 0; ch < c; ++ch)
                        x->grad[(ni * spatial + s) * c + ch] += o->grad[ni * c + ch] / T(spatial);
        };
    }
    return out;
}

template <class T>
NodeP<T> op_max_pool2d(Tape<T>& tp, NodeP<T> x, long k, long stride, long pad) {
    const long n = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2), c = x->val.dim(3);
    const long oh = (h + 2 * pad - k) / stride + 1;
    const long ow = (w + 2 * pad - k) / stride + 1;
    Tensor<T> v({n, oh, ow, c});
    auto argmax = std::make_shared<std::vector<long>>(size_t(n * oh * ow * c));
    const T* xp = x->val.data();
    for (long ni = 0; ni < n; ++ni)
        for (long oy = 0; oy < oh; ++oy)
            for (long ox = 0; ox < ow; ++ox)
                for (long ch = 0; ch < c; ++ch) {
                    T best = -std::numeric_limits<T>::infinity();
                    long best_idx = -1;
                    for (long ky = 0; ky < k; ++ky) {
                        long iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (long kx = 0; kx < k; ++kx) {
                            long ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            long idx = ((ni * h + iy) * w + ix) * c + ch;
                            if (xp[idx] > best) {
                                best = xp[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    long oidx = ((ni * oh + oy) * ow + ox) * c + ch;
                    v[oidx] = best;
                    (*argmax)[size_t(oidx)] = best_idx;
                }
    auto out = tp.op(std::move(v), x->requires_grad, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, wk, argmax]() {
            auto o = wk.lock();
            x->ensure_grad();
            for (long i = 0; i < o->grad.size(); ++i) x->grad[(*argmax)[size_t(i)]] += o->grad[i];
        };
    }
    return out;
}

template <class T>
NodeP<T> op_upsample_nearest2x(Tape<T>& tp, NodeP<T> x) {
    const long n = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2), c = x->val.dim(3);
    Tensor<T> v({n, 2 * h, 2 * w, c});
    const T* xp = x->val.data();
    for (long ni = 0; ni < n; ++ni)
        for (long y = 0; y < 2 * h; ++y)
            for (long xw = 0; xw < 2 * w; ++xw)
                std::memcpy(v.data() + ((ni * 2 * h + y) * 2 * w + xw) * c,
                            xp + ((ni * h + y / 2) * w + xw / 2) * c, size_t(c) * sizeof(T));
    auto out = tp.op(std::move(v), x->requires_grad, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, wk, n, h, w, c]() {
            auto o = wk.lock();
            x->ensure_grad();
            for (long ni = 0; ni < n; ++ni)
                for (long y = 0; y < 2 * h; ++y)
                    for (long xw = 0; xw < 2 * w; ++xw) {
                        const T* src = o->grad.data() + ((ni * 2 * h + y) * 2 * w + xw) * c;
                        T* dst = x->grad.data() + ((ni * h + y / 2) * w + xw / 2) * c;
                        for (long ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
        };
    }
    return out;
}

// concat along the channel (last) dim
template <class T>
NodeP<T> op_concat_channels(Tape<T>& tp, NodeP<T> a, NodeP<T> b) {
    auto sa = a->val.shape(), sb = b->val.shape();
    if (sa.size() != sb.size()) throw ShapeMismatch("concat: rank");
    for (size_t i = 0; i + 1 < sa.size(); ++i)
        if (sa[i] != sb[i]) throw ShapeMismatch("concat: leading dims");
    const long ca = sa.back(), cb = sb.back();
    const long rows = a->val.size() / ca;
    std::vector<long> shape = sa;
    shape.back() = ca + cb;
    Tensor<T> v(shape);
    for (long r = 0; r < rows; ++r) {
        std::memcpy(v.data() + r * (ca + cb), a->val.data() + r * ca, size_t(ca) * sizeof(T));
        std::memcpy(v.data() + r * (ca + cb) + ca, b->val.data() + r * cb, size_t(cb) * sizeof(T));
    }
    bool rg = ag::wants_grad(a, b);
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [a, b, wk, rows, ca, cb]() {
            auto o = wk.lock();
            if (a->requires_grad) {
                a->ensure_grad();
                for (long r = 0; r < rows; ++r)
                    for (long ch = 0; ch < ca; ++ch)
                        a->grad[r * ca + ch] += o->grad[r * (ca + cb) + ch];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (long r = 0; r < rows; ++r)
                    for (long ch = 0; ch < cb; ++ch)
                        b->grad[r * cb + ch] += o->grad[r * (ca + cb) + ca + ch];
            }
        };
    }
    return out;
}

// columns [begin, begin+len) of a [N,D] matrix
template <class T>
NodeP<T> op_slice_cols(Tape<T>& tp, NodeP<T> x, long begin, long len) {
    const long n = x->val.dim(0), d = x->val.dim(1);
    if (begin < 0 || begin + len > d) throw ShapeMismatch("slice_cols: out of range");
    Tensor<T> v({n, len});
    for (long i = 0; i < n; ++i)
        std::memcpy(v.data() + i * len, x->val.data() + i * d + begin, size_t(len) * sizeof(T));
    auto out = tp.op(std::move(v), x->requires_grad, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, wk, n, d, begin, len]() {
            auto o = wk.lock();
            x->ensure_grad();
            for (long i = 0; i < n; ++i)
                for (long j = 0; j < len; ++j) x->grad[i * d + begin + j] += o->grad[i * len + j];
        };
    }
    return out;
}

// per-sample channel bias: x [N,H,W,C] + v [N,C] broadcast over spatial dims
template <class T>
NodeP<T> op_add_channel_bias(Tape<T>& tp, NodeP<T> x, NodeP<T> v) {
    const long n = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2), c = x->val.dim(3);
    if (v->val.dim(0) != n || v->val.dim(1) != c) throw ShapeMismatch("add_channel_bias");
    const long spatial = h * w;
    Tensor<T> out_v = x->val;
    for (long ni = 0; ni < n; ++ni)
        for (long s = 0; s < spatial; ++s)
            for (long ch = 0; ch < c; ++ch)
                out_v[(ni * spatial + s) * c + ch] += v->val[ni * c + ch];
    bool rg = ag::wants_grad(x, v);
    auto out = tp.op(std::move(out_v), rg, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [x, v, wk, n, spatial, c]() {
            auto o = wk.lock();
            if (x->requires_grad) {
                x->ensure_grad();
                x->grad += o->grad;
            }
            if (v->requires_grad) {
                v->ensure_grad();
                for (long ni = 0; ni < n; ++ni)
                    for (long s = 0; s < spatial; ++s)
                        for (long ch = 0; ch < c; ++ch)
                            v->grad[ni * c + ch] += o->grad[(ni * spatial + s) * c + ch];
            }
        };
    }
    return out;
}

// ---- attention ----

// Multi-head cross-attention between L query tokens [N,L,D] and S context
// tokens [N,S,D]; weights wq,wk,wv,wo are [D,D]. Returns [N,L,D].
template <class T>
NodeP<T> op_cross_attention(Tape<T>& tp, NodeP<T> x_tokens, NodeP<T> ctx, NodeP<T> wq, NodeP<T> wk,
                            NodeP<T> wv, NodeP<T> wo, long heads) {
    const long n = x_tokens->val.dim(0), L = x_tokens->val.dim(1), dm = x_tokens->val.dim(2);
    const long S = ctx->val.dim(1);
    if (ctx->val.dim(0) != n || ctx->val.dim(2) != dm) throw ShapeMismatch("cross_attention ctx");
    if (dm % heads != 0) throw ShapeMismatch("heads must divide attention width");
    const long dk = dm / heads;
    const double scale = 1.0 / std::sqrt(double(dk));

    // projections for the whole batch at once
    auto q = op_linear<T>(tp, op_reshape(tp, x_tokens, {n * L, dm}), wq, nullptr);   // [N*L, D]
    auto kk = op_linear<T>(tp, op_reshape(tp, ctx, {n * S, dm}), wk, nullptr);       // [N*S, D]
    auto vv = op_linear<T>(tp, op_reshape(tp, ctx, {n * S, dm}), wv, nullptr);       // [N*S, D]

    // fused scaled-dot-product attention with softmax over S
    Tensor<T> attn_out({n * L, dm});
    auto probs = std::make_shared<Tensor<double>>(Tensor<double>({n, heads, L, S}));
    {
        const T* qp = q->val.data();
        const T* kp = kk->val.data();
        const T* vp = vv->val.data();
        for (long ni = 0; ni < n; ++ni)
            for (long hd = 0; hd < heads; ++hd)
                for (long l = 0; l < L; ++l) {
                    const T* qrow = qp + (ni * L + l) * dm + hd * dk;
                    double mx = -1e300;
                    std::vector<double> sc(size_t(S));
                    for (long s = 0; s < S; ++s) {
                        const T* krow = kp + (ni * S + s) * dm + hd * dk;
                        double dot = 0.0;
                        for (long k2 = 0; k2 < dk; ++k2) dot += double(qrow[k2]) * double(krow[k2]);
                        sc[size_t(s)] = dot * scale;
                        mx = std::max(mx, sc[size_t(s)]);
                    }
                    double denom = 0.0;
                    for (long s = 0; s < S; ++s) denom += std::exp(sc[size_t(s)] - mx);
                    T* orow = attn_out.data() + (ni * L + l) * dm + hd * dk;
                    for (long k2 = 0; k2 < dk; ++k2) orow[k2] = T(0);
                    for (long s = 0; s < S; ++s) {
                        double p = std::exp(sc[size_t(s)] - mx) / denom;
                        (*probs)[((ni * heads + hd) * L + l) * S + s] = p;
                        const T* vrow = vp + (ni * S + s) * dm + hd * dk;
                        for (long k2 = 0; k2 < dk; ++k2) orow[k2] += T(p * double(vrow[k2]));
                    }
                }
    }
    bool rg = ag::wants_grad(q, kk, vv);
    auto attn = tp.op(std::move(attn_out), rg, nullptr);
    if (attn->requires_grad) {
        auto wkp = std::weak_ptr<Node<T>>(attn);
        attn->back = [q, kk, vv, wkp, probs, n, heads, L, S, dk, dm, scale]() {
            auto o = wkp.lock();
            const T* dy = o->grad.data();
            const T* qp = q->val.data();
            const T* kp = kk->val.data();
            const T* vp = vv->val.data();
            if (q->requires_grad) q->ensure_grad();
            if (kk->requires_grad) kk->ensure_grad();
            if (vv->requires_grad) vv->ensure_grad();
            for (long ni = 0; ni < n; ++ni)
                for (long hd = 0; hd < heads; ++hd)
                    for (long l = 0; l < L; ++l) {
                        const T* dyrow = dy + (ni * L + l) * dm + hd * dk;
                        // dP, then through the softmax Jacobian
                        std::vector<double> dp(size_t(S)), ds(size_t(S));
                        double dot_dp_p = 0.0;
                        for (long s = 0; s < S; ++s) {
                            const T* vrow = vp + (ni * S + s) * dm + hd * dk;
                            double acc = 0.0;
                            for (long k2 = 0; k2 < dk; ++k2)
                                acc += double(dyrow[k2]) * double(vrow[k2]);
                            dp[size_t(s)] = acc;
                            dot_dp_p += acc * (*probs)[((ni * heads + hd) * L + l) * S + s];
                        }
                        for (long s = 0; s < S; ++s) {
                            double p = (*probs)[((ni * heads + hd) * L + l) * S + s];
                            ds[size_t(s)] = p * (dp[size_t(s)] - dot_dp_p);
                            if (vv->requires_grad) {
                                T* dvrow = vv->grad.data() + (ni * S + s) * dm + hd * dk;
                                for (long k2 = 0; k2 < dk; ++k2)
                                    dvrow[k2] += T(p * double(dyrow[k2]));
                            }
                        }
                        if (q->requires_grad) {
                            T* dqrow = q->grad.data() + (ni * L + l) * dm + hd * dk;
                            for (long s = 0; s < S; ++s) {
                                const T* krow = kp + (ni * S + s) * dm + hd * dk;
                                for (long k2 = 0; k2 < dk; ++k2)
                                    dqrow[k2] += T(ds[size_t(s)] * scale * double(krow[k2]));
                            }
                        }
                        if (kk->requires_grad) {
                            const T* qrow = qp + (ni * L + l) * dm + hd * dk;
                            for (long s = 0; s < S; ++s) {
                                T* dkrow = kk->grad.data() + (ni * S + s) * dm + hd * dk;
                                for (long k2 = 0; k2 < dk; ++k2)
                                    dkrow[k2] += T(ds[size_t(s)] * scale * double(qrow[k2]));
                            }
                        }
                    }
        };
    }
    auto out = op_linear<T>(tp, attn, wo, nullptr);  // [N*L, D]
    return op_reshape(tp, out, {n, L, dm});
}

// ---- losses / reductions ----

template <class T>
NodeP<T> op_mse(Tape<T>& tp, NodeP<T> pred, NodeP<T> target) {
    if (!pred->val.same_shape(target->val)) throw ShapeMismatch("mse");
    const long m = pred->val.size();
    double acc = 0.0;
    for (long i = 0; i < m; ++i) {
        double d = double(pred->val[i]) - double(target->val[i]);
        acc += d * d;
    }
    Tensor<T> v({1});
    v[0] = T(acc / double(m));
    bool rg = ag::wants_grad(pred, target);
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [pred, target, wk, m]() {
            auto o = wk.lock();
            T g = o->grad[0];
            if (pred->requires_grad) {
                pred->ensure_grad();
                for (long i = 0; i < m; ++i)
                    pred->grad[i] += g * T(2.0 / double(m)) * (pred->val[i] - target->val[i]);
            }
            if (target->requires_grad) {
                target->ensure_grad();
                for (long i = 0; i < m; ++i)
                    target->grad[i] -= g * T(2.0 / double(m)) * (pred->val[i] - target->val[i]);
            }
        };
    }
    return out;
}

// Weighted softmax cross-entropy over logits [N,C]; weights indexed by the
// true class, loss = sum_i w_{y_i} nll_i / sum_i w_{y_i} (weighted mean).
template <class T>
NodeP<T> op_cross_entropy(Tape<T>& tp, NodeP<T> logits, const std::vector<int>& targets,
                          const std::vector<double>& class_weights = {}) {
    const long n = logits->val.dim(0), c = logits->val.dim(1);
    if ((long)targets.size() != n) throw ShapeMismatch("cross_entropy: target count");
    auto softmax = std::make_shared<Tensor<double>>(Tensor<double>({n, c}));
    double loss = 0.0, wsum = 0.0;
    for (long i = 0; i < n; ++i) {
        double mx = -1e300;
        for (long j = 0; j < c; ++j) mx = std::max(mx, double(logits->val[i * c + j]));
        double denom = 0.0;
        for (long j = 0; j < c; ++j) denom += std::exp(double(logits->val[i * c + j]) - mx);
        double log_denom = std::log(denom) + mx;
        int y = targets[size_t(i)];
        double w = class_weights.empty() ? 1.0 : class_weights[size_t(y)];
        loss += w * (log_denom - double(logits->val[i * c + y]));
        wsum += w;
        for (long j = 0; j < c; ++j)
            (*softmax)[i * c + j] = std::exp(double(logits->val[i * c + j]) - mx) / denom;
    }
    Tensor<T> v({1});
    v[0] = T(loss / wsum);
    auto out = tp.op(std::move(v), logits->requires_grad, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        auto tgt = std::make_shared<std::vector<int>>(targets);
        auto cw = std::make_shared<std::vector<double>>(class_weights);
        out->back = [logits, wk, softmax, tgt, cw, n, c, wsum]() {
            auto o = wk.lock();
            double g = double(o->grad[0]);
            logits->ensure_grad();
            for (long i = 0; i < n; ++i) {
                int y = (*tgt)[size_t(i)];
                double w = cw->empty() ? 1.0 : (*cw)[size_t(y)];
                for (long j = 0; j < c; ++j) {
                    double p = (*softmax)[i * c + j];
                    double ind = j == y ? 1.0 : 0.0;
                    logits->grad[i * c + j] += T(g * w * (p - ind) / wsum);
                }
            }
        };
    }
    return out;
}

// Pixelwise unweighted cross-entropy over [N,H,W,C] logits vs integer masks.
template <class T>
NodeP<T> op_pixel_cross_entropy(Tape<T>& tp, NodeP<T> logits, const std::vector<uint8_t>& labels) {
    const long n = logits->val.dim(0), h = logits->val.dim(1), w = logits->val.dim(2),
               c = logits->val.dim(3);
    const long px = n * h * w;
    if ((long)labels.size() != px) throw ShapeMismatch("pixel_cross_entropy: label count");
    auto softmax = std::make_shared<Tensor<double>>(Tensor<double>({px, c}));
    double loss = 0.0;
    for (long i = 0; i < px; ++i) {
        double mx = -1e300;
        for (long j = 0; j < c; ++j) mx = std::max(mx, double(logits->val[i * c + j]));
        double denom = 0.0;
        for (long j = 0; j < c; ++j) denom += std::exp(double(logits->val[i * c + j]) - mx);
        int y = labels[size_t(i)];
        loss += std::log(denom) + mx - double(logits->val[i * c + y]);
        for (long j = 0; j < c; ++j)
            (*softmax)[i * c + j] = std::exp(double(logits->val[i * c + j]) - mx) / denom;
    }
    Tensor<T> v({1});
    v[0] = T(loss / double(px));
    auto out = tp.op(std::move(v), logits->requires_grad, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        auto lab = std::make_shared<std::vector<uint8_t>>(labels);
        out->back = [logits, wk, softmax, lab, px, c]() {
            auto o = wk.lock();
            double g = double(o->grad[0]);
            logits->ensure_grad();
            for (long i = 0; i < px; ++i) {
                int y = (*lab)[size_t(i)];
                for (long j = 0; j < c; ++j) {
                    double p = (*softmax)[i * c + j];
                    double ind = j == y ? 1.0 : 0.0;
                    logits->grad[i * c + j] += T(g * (p - ind) / double(px));
                }
            }
        };
    }
    return out;
}

template <class T>
NodeP<T> op_add_scalar_nodes(Tape<T>& tp, std::vector<NodeP<T>> terms) {
    if (terms.empty()) throw ShapeMismatch("add_scalar_nodes: empty");
    double acc = 0.0;
    bool rg = false;
    for (auto& t : terms) {
        acc += double(t->val[0]);
        rg = rg || t->requires_grad;
    }
    Tensor<T> v({1});
    v[0] = T(acc);
    auto out = tp.op(std::move(v), rg, nullptr);
    if (out->requires_grad) {
        auto wk = std::weak_ptr<Node<T>>(out);
        out->back = [terms, wk]() {
            auto o = wk.lock();
            for (auto& t : terms) {
                if (!t->requires_grad) continue;
                t->ensure_grad();
                t->grad[0] += o->grad[0];
            }
        };
    }
    return out;
}

}  // namespace cda
