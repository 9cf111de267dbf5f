#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "spc/common.hpp"

// Reverse-mode automatic differentiation on dense tensors.
//
// Design: define-by-run.  A Tape records every operation as it executes; the
// output of each op carries a pointer to its producing tape.  backward(loss)
// walks the recorded ops in reverse, accumulating gradients into every
// tensor on the gradient path.  Tapes are cheap and rebuilt per forward pass
// (the encoder's stochastic sparsity patterns change every pass, so nothing
// is gained by graph reuse).  A tape must stay confined to one thread;
// independent tapes may run concurrently over shared read-only parameters.

namespace spc {

template <class T>
class Tape;

template <class T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape) {
        return Tensor(shape, std::vector<T>(numel(shape), T(0)));
    }
    static Tensor full(const Shape& shape, T v) {
        return Tensor(shape, std::vector<T>(numel(shape), v));
    }
    static Tensor from(const Shape& shape, std::vector<T> values) {
        if (values.size() != numel(shape))
            throw ShapeError("from: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
        return Tensor(shape, std::move(values));
    }

    bool defined() const { return static_cast<bool>(p_); }
    const Shape& shape() const { return payload().shape; }
    int extent(int axis) const { return payload().shape.at(static_cast<std::size_t>(axis)); }
    std::size_t size() const { return payload().value.size(); }

    std::vector<T>& value() { return payload().value; }
    const std::vector<T>& value() const { return payload().value; }

    // Gradient buffer, allocated (zero-filled) on first touch.
    std::vector<T>& grad() {
        Payload& p = payload();
        if (p.grad.empty()) p.grad.assign(p.value.size(), T(0));
        return p.grad;
    }
    bool has_grad() const { return p_ && !p_->grad.empty(); }
    void zero_grad() {
        if (p_ && !p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), T(0));
    }

    Tensor& set_requires_grad(bool b) {
        payload().requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return p_ && p_->requires_grad; }
    // True when gradients must flow through this tensor during backward.
    bool on_grad_path() const { return p_ && (p_->requires_grad || p_->path); }

    T scalar() const {
        if (size() != 1) throw ShapeError("scalar() on tensor of shape " + shape_str(shape()));
        return payload().value[0];
    }

    T& at(const std::vector<int>& index) {
        return payload().value[offset(index)];
    }
    T at(const std::vector<int>& index) const {
        return payload().value[offset(index)];
    }

    // Deep copy of values (no grad, not a leaf, detached from any tape).
    Tensor clone_detached() const {
        return Tensor(payload().shape, payload().value);
    }

  private:
    struct Payload {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;         // empty until first accumulation
        bool requires_grad = false;  // leaf flag set by the caller
        bool path = false;           // an ancestor leaf requires grad
        const void* producer = nullptr;  // tape that recorded this tensor
    };

    Tensor(const Shape& shape, std::vector<T> values) : p_(std::make_shared<Payload>()) {
        p_->shape = shape;
        p_->value = std::move(values);
    }

    Payload& payload() {
        if (!p_) throw ShapeError("use of undefined tensor");
        return *p_;
    }
    const Payload& payload() const {
        if (!p_) throw ShapeError("use of undefined tensor");
        return *p_;
    }

    std::size_t offset(const std::vector<int>& index) const {
        const Shape& s = payload().shape;
        if (index.size() != s.size())
            throw ShapeError("index rank " + std::to_string(index.size()) + " vs shape " +
                             shape_str(s));
        std::size_t off = 0;
        for (std::size_t a = 0; a < s.size(); ++a) {
            if (index[a] < 0 || index[a] >= s[a])
                throw ShapeError("index out of bounds at axis " + std::to_string(a));
            off = off * static_cast<std::size_t>(s[a]) + static_cast<std::size_t>(index[a]);
        }
        return off;
    }

    std::shared_ptr<Payload> p_;

    friend class Tape<T>;
};

namespace detail {

// Geometry shared by convolution and transposed convolution.  All forward
// and backward passes of both ops are expressed through three primitives on
// this one dims record; the transposed op swaps the roles of the image-side
// and output-side fields.  That pairing makes adjointness structural rather
// than re-derived per kernel.
struct ConvDims {
    int B, Ci, H, W;    // gather-side tensor (B, Ci, H, W)
    int Co, kh, kw;     // kernel (Co, Ci, kh, kw)
    int s, p;           // stride, symmetric zero padding
    int Ho, Wo;         // scatter-side spatial extents
};

inline constexpr int kMaxConvRow = 4096;

// y[b,co,oh,ow] += sum_{ci,ki,kj} x[b,ci,oh*s-p+ki, ow*s-p+kj] * k[co,ci,ki,kj]
template <class T>
void conv_fwd_acc(const T* x, const T* k, T* y, const ConvDims& d) {
    if (d.Wo > kMaxConvRow) throw ShapeError("convolution row exceeds supported width");
    parallel_for(static_cast<std::size_t>(d.B) * d.Co, [&](std::size_t bc) {
        const int b = static_cast<int>(bc) / d.Co;
        const int co = static_cast<int>(bc) % d.Co;
        T acc[kMaxConvRow];
        for (int oh = 0; oh < d.Ho; ++oh) {
            for (int ow = 0; ow < d.Wo; ++ow) acc[ow] = T(0);
            for (int ci = 0; ci < d.Ci; ++ci) {
                const T* xplane = x + (static_cast<std::size_t>(b) * d.Ci + ci) *
                                          static_cast<std::size_t>(d.H) * d.W;
                const T* ktap =
                    k + (static_cast<std::size_t>(co) * d.Ci + ci) * d.kh * d.kw;
                for (int ki = 0; ki < d.kh; ++ki) {
                    const int ih = oh * d.s - d.p + ki;
                    if (ih < 0 || ih >= d.H) continue;
                    const T* __restrict xrow = xplane + static_cast<std::size_t>(ih) * d.W;
                    for (int kj = 0; kj < d.kw; ++kj) {
                        const T w = ktap[ki * d.kw + kj];
                        // valid ow range: 0 <= ow*s - p + kj < W
                        int lo = 0;
                        if (d.p - kj > 0) lo = (d.p - kj + d.s - 1) / d.s;
                        int hi = (d.W - 1 + d.p - kj) / d.s;
                        if (hi > d.Wo - 1) hi = d.Wo - 1;
                        const int base = kj - d.p;
                        for (int ow = lo; ow <= hi; ++ow) acc[ow] += w * xrow[ow * d.s + base];
                    }
                }
            }
            T* yrow = y + ((static_cast<std::size_t>(b) * d.Co + co) *
                               static_cast<std::size_t>(d.Ho) +
                           oh) *
                          d.Wo;
            for (int ow = 0; ow < d.Wo; ++ow) yrow[ow] += acc[ow];
        }
    });
}

template <class T>
std::size_t count_nonzeros(const T* v, std::size_t n) {
    std::size_t nnz = 0;
    for (std::size_t i = 0; i < n; ++i) nnz += (v[i] != T(0));
    return nnz;
}

// dx[b,ci,ih,iw] += sum dy[b,co,oh,ow] * k[co,ci,ki,kj]
//   over (co,ki,kj,oh,ow) with ih = oh*s-p+ki, iw = ow*s-p+kj.
// This is both conv2d's input-gradient and conv-transpose2d's forward pass.
// When dy is sparse (transposed conv on sparse codes) a scatter path over
// its nonzeros is used; path choice depends only on the data, so results
// stay deterministic for fixed inputs.
template <class T>
void conv_dx_acc(const T* dy, const T* k, T* dx, const ConvDims& d) {
    const std::size_t dy_total =
        static_cast<std::size_t>(d.B) * d.Co * d.Ho * d.Wo;
    if (count_nonzeros(dy, dy_total) * 8 < dy_total) {
        // Scatter over nonzeros; each image is written by one worker only.
        parallel_for(static_cast<std::size_t>(d.B), [&](std::size_t bi) {
            const int b = static_cast<int>(bi);
            for (int co = 0; co < d.Co; ++co) {
                const T* dyplane = dy + (static_cast<std::size_t>(b) * d.Co + co) *
                                            static_cast<std::size_t>(d.Ho) * d.Wo;
                for (int oh = 0; oh < d.Ho; ++oh) {
                    for (int ow = 0; ow < d.Wo; ++ow) {
                        const T v = dyplane[static_cast<std::size_t>(oh) * d.Wo + ow];
                        if (v == T(0)) continue;
                        for (int ki = 0; ki < d.kh; ++ki) {
                            const int ih = oh * d.s - d.p + ki;
                            if (ih < 0 || ih >= d.H) continue;
                            for (int kj = 0; kj < d.kw; ++kj) {
                                const int iw = ow * d.s - d.p + kj;
                                if (iw < 0 || iw >= d.W) continue;
                                const T* kcol =
                                    k + (static_cast<std::size_t>(co) * d.Ci) * d.kh * d.kw +
                                    ki * d.kw + kj;
                                T* xcol = dx + (static_cast<std::size_t>(b) * d.Ci) *
                                                   static_cast<std::size_t>(d.H) * d.W +
                                          static_cast<std::size_t>(ih) * d.W + iw;
                                const std::size_t kstep = static_cast<std::size_t>(d.kh) * d.kw;
                                const std::size_t xstep = static_cast<std::size_t>(d.H) * d.W;
                                for (int ci = 0; ci < d.Ci; ++ci)
                                    xcol[ci * xstep] += v * kcol[ci * kstep];
                            }
                        }
                    }
                }
            }
        });
        return;
    }
    if (d.W > kMaxConvRow) throw ShapeError("convolution row exceeds supported width");
    parallel_for(static_cast<std::size_t>(d.B) * d.Ci, [&](std::size_t bc) {
        const int b = static_cast<int>(bc) / d.Ci;
        const int ci = static_cast<int>(bc) % d.Ci;
        T acc[kMaxConvRow];
        for (int ih = 0; ih < d.H; ++ih) {
            for (int iw = 0; iw < d.W; ++iw) acc[iw] = T(0);
            for (int co = 0; co < d.Co; ++co) {
                const T* ktap =
                    k + (static_cast<std::size_t>(co) * d.Ci + ci) * d.kh * d.kw;
                const T* dyplane = dy + (static_cast<std::size_t>(b) * d.Co + co) *
                                            static_cast<std::size_t>(d.Ho) * d.Wo;
                for (int ki = 0; ki < d.kh; ++ki) {
                    // need oh with oh*s = ih + p - ki
                    const int num = ih + d.p - ki;
                    if (num < 0 || num % d.s != 0) continue;
                    const int oh = num / d.s;
                    if (oh >= d.Ho) continue;
                    const T* __restrict dyrow = dyplane + static_cast<std::size_t>(oh) * d.Wo;
                    for (int kj = 0; kj < d.kw; ++kj) {
                        const T w = ktap[ki * d.kw + kj];
                        int lo = 0;
                        if (d.p - kj > 0) lo = (d.p - kj + d.s - 1) / d.s;
                        int hi = (d.W - 1 + d.p - kj) / d.s;
                        if (hi > d.Wo - 1) hi = d.Wo - 1;
                        const int base = kj - d.p;
                        for (int ow = lo; ow <= hi; ++ow) acc[ow * d.s + base] += w * dyrow[ow];
                    }
                }
            }
            T* xrow = dx + ((static_cast<std::size_t>(b) * d.Ci + ci) *
                                static_cast<std::size_t>(d.H) +
                            ih) *
                          d.W;
            for (int iw = 0; iw < d.W; ++iw) xrow[iw] += acc[iw];
        }
    });
}

// dk[co,ci,ki,kj] += sum_{b,oh,ow} dy[b,co,oh,ow] * x[b,ci,oh*s-p+ki, ow*s-p+kj]
// Shared by conv2d (weight gradient) and conv-transpose2d (weight gradient,
// with dy := the transposed op's input).  A sparse path over dy handles the
// decoder's first layer, whose input codes are overwhelmingly zero.
template <class T>
void conv_dk_acc(const T* x, const T* dy, T* dk, const ConvDims& d) {
    const std::size_t dy_total =
        static_cast<std::size_t>(d.B) * d.Co * d.Ho * d.Wo;
    if (count_nonzeros(dy, dy_total) * 8 < dy_total) {
        for (int b = 0; b < d.B; ++b) {
            for (int co = 0; co < d.Co; ++co) {
                const T* dyplane = dy + (static_cast<std::size_t>(b) * d.Co + co) *
                                            static_cast<std::size_t>(d.Ho) * d.Wo;
                for (int oh = 0; oh < d.Ho; ++oh) {
                    for (int ow = 0; ow < d.Wo; ++ow) {
                        const T v = dyplane[static_cast<std::size_t>(oh) * d.Wo + ow];
                        if (v == T(0)) continue;
                        for (int ci = 0; ci < d.Ci; ++ci) {
                            const T* xplane = x + (static_cast<std::size_t>(b) * d.Ci + ci) *
                                                      static_cast<std::size_t>(d.H) * d.W;
                            T* ktap =
                                dk + (static_cast<std::size_t>(co) * d.Ci + ci) * d.kh * d.kw;
                            for (int ki = 0; ki < d.kh; ++ki) {
                                const int ih = oh * d.s - d.p + ki;
                                if (ih < 0 || ih >= d.H) continue;
                                const T* xrow = xplane + static_cast<std::size_t>(ih) * d.W;
                                for (int kj = 0; kj < d.kw; ++kj) {
                                    const int iw = ow * d.s - d.p + kj;
                                    if (iw < 0 || iw >= d.W) continue;
                                    ktap[ki * d.kw + kj] += v * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    parallel_for(static_cast<std::size_t>(d.Co) * d.Ci, [&](std::size_t cc) {
        const int co = static_cast<int>(cc) / d.Ci;
        const int ci = static_cast<int>(cc) % d.Ci;
        T* ktap = dk + cc * static_cast<std::size_t>(d.kh) * d.kw;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                int lo = 0;
                if (d.p - kj > 0) lo = (d.p - kj + d.s - 1) / d.s;
                int hi = (d.W - 1 + d.p - kj) / d.s;
                if (hi > d.Wo - 1) hi = d.Wo - 1;
                const int base = kj - d.p;
                T acc = T(0);
                for (int b = 0; b < d.B; ++b) {
                    const T* xplane = x + (static_cast<std::size_t>(b) * d.Ci + ci) *
                                              static_cast<std::size_t>(d.H) * d.W;
                    const T* dyplane = dy + (static_cast<std::size_t>(b) * d.Co + co) *
                                                static_cast<std::size_t>(d.Ho) * d.Wo;
                    for (int oh = 0; oh < d.Ho; ++oh) {
                        const int ih = oh * d.s - d.p + ki;
                        if (ih < 0 || ih >= d.H) continue;
                        const T* __restrict xrow = xplane + static_cast<std::size_t>(ih) * d.W;
                        const T* __restrict dyrow = dyplane + static_cast<std::size_t>(oh) * d.Wo;
                        for (int ow = lo; ow <= hi; ++ow) acc += dyrow[ow] * xrow[ow * d.s + base];
                    }
                }
                ktap[ki * d.kw + kj] += acc;
            }
        }
    });
}

}  // namespace detail

// Parameters for record_forward; only the fields relevant to the requested
// op kind are read.
template <class T>
struct OpAttrs {
    int stride = 1;
    int pad = 0;
    T lo = T(0);
    T hi = T(1);
    std::vector<int> labels;  // cross-entropy targets
    Shape shape;              // reshape target
    bool spatial = false;     // mean over H,W only (keeps batch and channel)
};

template <class T>
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- recorded operations -------------------------------------------

    Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
        require_rank(a, 2, "matmul lhs");
        require_rank(b, 2, "matmul rhs");
        const int M = a.shape()[0], K = a.shape()[1], K2 = b.shape()[0], N = b.shape()[1];
        if (K != K2)
            throw ShapeError("matmul: inner extents " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
        std::vector<T> y(static_cast<std::size_t>(M) * N, T(0));
        const T* A = a.value().data();
        const T* B = b.value().data();
        parallel_for(static_cast<std::size_t>(M), [&](std::size_t i) {
            T* __restrict yrow = y.data() + i * N;
            for (int k = 0; k < K; ++k) {
                const T av = A[i * K + k];
                const T* __restrict brow = B + static_cast<std::size_t>(k) * N;
                for (int j = 0; j < N; ++j) yrow[j] += av * brow[j];
            }
        });
        Tensor<T> out = make_output({M, N}, std::move(y), {a, b});
        if (out.on_grad_path()) {
            auto pa = a.p_, pb = b.p_, po = out.p_;
            push("matmul", [pa, pb, po, M, K, N] {
                if (po->grad.empty()) return;
                const T* dy = po->grad.data();
                if (pa->requires_grad || pa->path) {
                    ensure_grad(*pa);
                    T* da = pa->grad.data();
                    const T* B = pb->value.data();
                    parallel_for(static_cast<std::size_t>(M), [&](std::size_t i) {
                        const T* dyrow = dy + i * N;
                        for (int k = 0; k < K; ++k) {
                            const T* __restrict brow = B + static_cast<std::size_t>(k) * N;
                            T acc = T(0);
                            for (int j = 0; j < N; ++j) acc += dyrow[j] * brow[j];
                            da[i * K + k] += acc;
                        }
                    });
                }
                if (pb->requires_grad || pb->path) {
                    ensure_grad(*pb);
                    T* db = pb->grad.data();
                    const T* A = pa->value.data();
                    parallel_for(static_cast<std::size_t>(K), [&](std::size_t k) {
                        T* __restrict dbrow = db + k * N;
                        for (int i = 0; i < M; ++i) {
                            const T av = A[static_cast<std::size_t>(i) * K + k];
                            const T* __restrict dyrow = dy + static_cast<std::size_t>(i) * N;
                            for (int j = 0; j < N; ++j) dbrow[j] += av * dyrow[j];
                        }
                    });
                }
            });
        }
        return out;
    }

    // x: (B, Ci, H, W), k: (Co, Ci, kh, kw) -> (B, Co, Ho, Wo)
    Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad) {
        require_rank(x, 4, "conv2d input");
        require_rank(k, 4, "conv2d kernel");
        if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
        if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");
        if (x.shape()[1] != k.shape()[1])
            throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(k.shape()));
        detail::ConvDims d;
        d.B = x.shape()[0];
        d.Ci = x.shape()[1];
        d.H = x.shape()[2];
        d.W = x.shape()[3];
        d.Co = k.shape()[0];
        d.kh = k.shape()[2];
        d.kw = k.shape()[3];
        d.s = stride;
        d.p = pad;
        if (d.H + 2 * pad < d.kh || d.W + 2 * pad < d.kw)
            throw ShapeError("conv2d: kernel larger than padded input");
        d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
        d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
        std::vector<T> y(static_cast<std::size_t>(d.B) * d.Co * d.Ho * d.Wo, T(0));
        detail::conv_fwd_acc(x.value().data(), k.value().data(), y.data(), d);
        Tensor<T> out = make_output({d.B, d.Co, d.Ho, d.Wo}, std::move(y), {x, k});
        if (out.on_grad_path()) {
            auto px = x.p_, pk = k.p_, po = out.p_;
            push("conv2d", [px, pk, po, d] {
                if (po->grad.empty()) return;
                const T* dy = po->grad.data();
                if (px->requires_grad || px->path) {
                    ensure_grad(*px);
                    detail::conv_dx_acc(dy, pk->value.data(), px->grad.data(), d);
                }
                if (pk->requires_grad || pk->path) {
                    ensure_grad(*pk);
                    detail::conv_dk_acc(px->value.data(), dy, pk->grad.data(), d);
                }
            });
        }
        return out;
    }

    // x: (B, Ci, Hi, Wi), k: (Ci, Co, kh, kw) -> (B, Co, Ho, Wo)
    // with Ho = (Hi-1)*stride + kh - 2*pad.  Exact adjoint of the conv2d
    // whose input is this op's output: the two share their kernels.
    Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad) {
        require_rank(x, 4, "conv-transpose2d input");
        require_rank(k, 4, "conv-transpose2d kernel");
        if (stride < 1) throw ShapeError("conv-transpose2d: stride must be >= 1");
        if (pad < 0) throw ShapeError("conv-transpose2d: pad must be >= 0");
        if (x.shape()[1] != k.shape()[0])
            throw ShapeError("conv-transpose2d: channel mismatch " + shape_str(x.shape()) +
                             " vs " + shape_str(k.shape()));
        const int B = x.shape()[0], Cy = x.shape()[1], Hi = x.shape()[2], Wi = x.shape()[3];
        const int Cz = k.shape()[1], kh = k.shape()[2], kw = k.shape()[3];
        const int Ho = (Hi - 1) * stride + kh - 2 * pad;
        const int Wo = (Wi - 1) * stride + kw - 2 * pad;
        if (Ho < 1 || Wo < 1) throw ShapeError("conv-transpose2d: empty output");
        // Dims of the matching forward conv (B, Cz, Ho, Wo) -> (B, Cy, Hi, Wi).
        detail::ConvDims d;
        d.B = B;
        d.Ci = Cz;
        d.H = Ho;
        d.W = Wo;
        d.Co = Cy;
        d.kh = kh;
        d.kw = kw;
        d.s = stride;
        d.p = pad;
        d.Ho = Hi;
        d.Wo = Wi;
        std::vector<T> z(static_cast<std::size_t>(B) * Cz * Ho * Wo, T(0));
        detail::conv_dx_acc(x.value().data(), k.value().data(), z.data(), d);
        Tensor<T> out = make_output({B, Cz, Ho, Wo}, std::move(z), {x, k});
        if (out.on_grad_path()) {
            auto px = x.p_, pk = k.p_, po = out.p_;
            push("conv-transpose2d", [px, pk, po, d] {
                if (po->grad.empty()) return;
                const T* dz = po->grad.data();
                if (px->requires_grad || px->path) {
                    ensure_grad(*px);
                    detail::conv_fwd_acc(dz, pk->value.data(), px->grad.data(), d);
                }
                if (pk->requires_grad || pk->path) {
                    ensure_grad(*pk);
                    detail::conv_dk_acc(dz, px->value.data(), pk->grad.data(), d);
                }
            });
        }
        return out;
    }

    Tensor<T> relu(const Tensor<T>& x) {
        const std::vector<T>& v = x.value();
        std::vector<T> y(v.size());
        T kd = kink_;
        for (std::size_t i = 0; i < v.size(); ++i) {
            y[i] = v[i] > T(0) ? v[i] : T(0);
            const T dist = std::abs(v[i]);
            if (dist < kd) kd = dist;
        }
        kink_ = kd;
        Tensor<T> out = make_output(x.shape(), std::move(y), {x});
        if (out.on_grad_path()) {
            auto px = x.p_, po = out.p_;
            push("relu", [px, po] {
                if (po->grad.empty()) return;
                ensure_grad(*px);
                const T* dy = po->grad.data();
                const T* v = px->value.data();
                T* dx = px->grad.data();
                // Derivative at exactly 0 is 0.
                for (std::size_t i = 0; i < px->value.size(); ++i)
                    if (v[i] > T(0)) dx[i] += dy[i];
            });
        }
        return out;
    }

    Tensor<T> clip(const Tensor<T>& x, T lo, T hi) {
        if (!(lo < hi)) throw ShapeError("clip: lo must be < hi");
        const std::vector<T>& v = x.value();
        std::vector<T> y(v.size());
        T kd = kink_;
        for (std::size_t i = 0; i < v.size(); ++i) {
            y[i] = std::min(std::max(v[i], lo), hi);
            const T dist = std::min(std::abs(v[i] - lo), std::abs(v[i] - hi));
            if (dist < kd) kd = dist;
        }
        kink_ = kd;
        Tensor<T> out = make_output(x.shape(), std::move(y), {x});
        if (out.on_grad_path()) {
            auto px = x.p_, po = out.p_;
            push("clip", [px, po, lo, hi] {
                if (po->grad.empty()) return;
                ensure_grad(*px);
                const T* dy = po->grad.data();
                const T* v = px->value.data();
                T* dx = px->grad.data();
                // Derivative outside [lo, hi] and at the boundaries is 0.
                for (std::size_t i = 0; i < px->value.size(); ++i)
                    if (v[i] > lo && v[i] < hi) dx[i] += dy[i];
            });
        }
        return out;
    }

    // Same-shape addition, or bias broadcast: b of shape (C) added to every
    // row of a (B, C) tensor or every channel plane of a (B, C, H, W) tensor.
    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
        const bool same = same_shape(a.shape(), b.shape());
        const bool bias = !same && b.shape().size() == 1 &&
                          (a.shape().size() == 2 || a.shape().size() == 4) &&
                          a.shape()[1] == b.shape()[0];
        if (!same && !bias)
            throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
        std::vector<T> y(a.size());
        const T* av = a.value().data();
        const T* bv = b.value().data();
        const int C = same ? 0 : a.shape()[1];
        const std::size_t plane =
            same ? 0
                 : (a.shape().size() == 4
                        ? static_cast<std::size_t>(a.shape()[2]) * a.shape()[3]
                        : 1);
        if (same) {
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
        } else {
            const std::size_t stride = static_cast<std::size_t>(C) * plane;
            for (std::size_t i = 0; i < y.size(); ++i)
                y[i] = av[i] + bv[(i % stride) / plane];
        }
        Tensor<T> out = make_output(a.shape(), std::move(y), {a, b});
        if (out.on_grad_path()) {
            auto pa = a.p_, pb = b.p_, po = out.p_;
            push("add", [pa, pb, po, same, C, plane] {
                if (po->grad.empty()) return;
                const T* dy = po->grad.data();
                const std::size_t n = po->value.size();
                if (pa->requires_grad || pa->path) {
                    ensure_grad(*pa);
                    T* da = pa->grad.data();
                    for (std::size_t i = 0; i < n; ++i) da[i] += dy[i];
                }
                if (pb->requires_grad || pb->path) {
                    ensure_grad(*pb);
                    T* db = pb->grad.data();
                    if (same) {
                        for (std::size_t i = 0; i < n; ++i) db[i] += dy[i];
                    } else {
                        const std::size_t stride = static_cast<std::size_t>(C) * plane;
                        for (std::size_t i = 0; i < n; ++i) db[(i % stride) / plane] += dy[i];
                    }
                }
            });
        }
        return out;
    }

    // Elementwise product; b may also be a 1-element tensor (scalar factor).
    Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
        const bool same = same_shape(a.shape(), b.shape());
        const bool scalar = !same && b.size() == 1;
        if (!same && !scalar)
            throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
        std::vector<T> y(a.size());
        const T* av = a.value().data();
        const T* bv = b.value().data();
        if (same)
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
        else
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[0];
        Tensor<T> out = make_output(a.shape(), std::move(y), {a, b});
        if (out.on_grad_path()) {
            auto pa = a.p_, pb = b.p_, po = out.p_;
            push("mul", [pa, pb, po, same] {
                if (po->grad.empty()) return;
                const T* dy = po->grad.data();
                const std::size_t n = po->value.size();
                if (pa->requires_grad || pa->path) {
                    ensure_grad(*pa);
                    T* da = pa->grad.data();
                    const T* bv = pb->value.data();
                    if (same)
                        for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * bv[i];
                    else
                        for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * bv[0];
                }
                if (pb->requires_grad || pb->path) {
                    ensure_grad(*pb);
                    T* db = pb->grad.data();
                    const T* av = pa->value.data();
                    if (same)
                        for (std::size_t i = 0; i < n; ++i) db[i] += dy[i] * av[i];
                    else
                        for (std::size_t i = 0; i < n; ++i) db[0] += dy[i] * av[i];
                }
            });
        }
        return out;
    }

    // Row-wise softmax on (B, C).
    Tensor<T> softmax(const Tensor<T>& x) {
        require_rank(x, 2, "softmax");
        const int B = x.shape()[0], C = x.shape()[1];
        std::vector<T> y(x.size());
        const T* v = x.value().data();
        for (int b = 0; b < B; ++b) {
            const T* row = v + static_cast<std::size_t>(b) * C;
            T* yrow = y.data() + static_cast<std::size_t>(b) * C;
            T mx = row[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            T sum = T(0);
            for (int c = 0; c < C; ++c) {
                yrow[c] = std::exp(row[c] - mx);
                sum += yrow[c];
            }
            for (int c = 0; c < C; ++c) yrow[c] /= sum;
        }
        Tensor<T> out = make_output(x.shape(), std::move(y), {x});
        if (out.on_grad_path()) {
            auto px = x.p_, po = out.p_;
            push("softmax", [px, po, B, C] {
                if (po->grad.empty()) return;
                ensure_grad(*px);
                const T* p = po->value.data();
                const T* dy = po->grad.data();
                T* dx = px->grad.data();
                for (int b = 0; b < B; ++b) {
                    const std::size_t off = static_cast<std::size_t>(b) * C;
                    T dot = T(0);
                    for (int c = 0; c < C; ++c) dot += dy[off + c] * p[off + c];
                    for (int c = 0; c < C; ++c) dx[off + c] += p[off + c] * (dy[off + c] - dot);
                }
            });
        }
        return out;
    }

    // Mean negative log-likelihood of integer labels under probability rows.
    Tensor<T> cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
        require_rank(probs, 2, "cross-entropy");
        const int B = probs.shape()[0], C = probs.shape()[1];
        if (static_cast<int>(labels.size()) != B)
            throw ShapeError("cross-entropy: " + std::to_string(labels.size()) +
                             " labels for batch " + std::to_string(B));
        for (int y : labels)
            if (y < 0 || y >= C) throw ShapeError("cross-entropy: label out of range");
        const T* p = probs.value().data();
        const T floor = std::numeric_limits<T>::min();  // guards log(0) only
        T loss = T(0);
        for (int b = 0; b < B; ++b)
            loss -= std::log(std::max(p[static_cast<std::size_t>(b) * C + labels[b]], floor));
        loss /= static_cast<T>(B);
        Tensor<T> out = make_output({1}, {loss}, {probs});
        if (out.on_grad_path()) {
            auto pp = probs.p_, po = out.p_;
            auto lab = labels;
            push("cross-entropy", [pp, po, lab, B, C, floor] {
                if (po->grad.empty()) return;
                ensure_grad(*pp);
                const T g = po->grad[0];
                const T* p = pp->value.data();
                T* dp = pp->grad.data();
                for (int b = 0; b < B; ++b) {
                    const std::size_t i = static_cast<std::size_t>(b) * C + lab[b];
                    dp[i] -= g / (static_cast<T>(B) * std::max(p[i], floor));
                }
            });
        }
        return out;
    }

    // Sum of squared differences divided by the leading extent (per-sample
    // mean of squared l2 distances).
    Tensor<T> squared_l2(const Tensor<T>& a, const Tensor<T>& b) {
        if (!same_shape(a.shape(), b.shape()))
            throw ShapeError("squared-l2: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        if (a.shape().empty()) throw ShapeError("squared-l2: rank must be >= 1");
        const T denom = static_cast<T>(a.shape()[0]);
        const T* av = a.value().data();
        const T* bv = b.value().data();
        T loss = T(0);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const T dlt = av[i] - bv[i];
            loss += dlt * dlt;
        }
        loss /= denom;
        Tensor<T> out = make_output({1}, {loss}, {a, b});
        if (out.on_grad_path()) {
            auto pa = a.p_, pb = b.p_, po = out.p_;
            push("squared-l2", [pa, pb, po, denom] {
                if (po->grad.empty()) return;
                const T g = po->grad[0];
                const T* av = pa->value.data();
                const T* bv = pb->value.data();
                const std::size_t n = pa->value.size();
                if (pa->requires_grad || pa->path) {
                    ensure_grad(*pa);
                    T* da = pa->grad.data();
                    for (std::size_t i = 0; i < n; ++i)
                        da[i] += g * T(2) * (av[i] - bv[i]) / denom;
                }
                if (pb->requires_grad || pb->path) {
                    ensure_grad(*pb);
                    T* db = pb->grad.data();
                    for (std::size_t i = 0; i < n; ++i)
                        db[i] -= g * T(2) * (av[i] - bv[i]) / denom;
                }
            });
        }
        return out;
    }

    Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
        if (numel(shape) != x.size())
            throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
        Tensor<T> out = make_output(shape, x.value(), {x});
        if (out.on_grad_path()) {
            auto px = x.p_, po = out.p_;
            push("reshape", [px, po] {
                if (po->grad.empty()) return;
                ensure_grad(*px);
                const T* dy = po->grad.data();
                T* dx = px->grad.data();
                for (std::size_t i = 0; i < px->value.size(); ++i) dx[i] += dy[i];
            });
        }
        return out;
    }

    // spatial = false: mean over all elements -> shape (1).
    // spatial = true: (B, C, H, W) -> (B, C), mean over H and W.
    Tensor<T> mean(const Tensor<T>& x, bool spatial = false) {
        if (!spatial) {
            const T denom = static_cast<T>(x.size());
            T m = T(0);
            for (T v : x.value()) m += v;
            m /= denom;
            Tensor<T> out = make_output({1}, {m}, {x});
            if (out.on_grad_path()) {
                auto px = x.p_, po = out.p_;
                push("mean", [px, po, denom] {
                    if (po->grad.empty()) return;
                    ensure_grad(*px);
                    const T g = po->grad[0] / denom;
                    T* dx = px->grad.data();
                    for (std::size_t i = 0; i < px->value.size(); ++i) dx[i] += g;
                });
            }
            return out;
        }
        require_rank(x, 4, "mean(spatial)");
        const int B = x.shape()[0], C = x.shape()[1];
        const std::size_t plane = static_cast<std::size_t>(x.shape()[2]) * x.shape()[3];
        std::vector<T> y(static_cast<std::size_t>(B) * C, T(0));
        const T* v = x.value().data();
        for (std::size_t bc = 0; bc < y.size(); ++bc) {
            const T* src = v + bc * plane;
            T m = T(0);
            for (std::size_t i = 0; i < plane; ++i) m += src[i];
            y[bc] = m / static_cast<T>(plane);
        }
        Tensor<T> out = make_output({B, C}, std::move(y), {x});
        if (out.on_grad_path()) {
            auto px = x.p_, po = out.p_;
            push("mean", [px, po, plane] {
                if (po->grad.empty()) return;
                ensure_grad(*px);
                const T* dy = po->grad.data();
                T* dx = px->grad.data();
                for (std::size_t bc = 0; bc < po->value.size(); ++bc) {
                    const T g = dy[bc] / static_cast<T>(plane);
                    T* dst = dx + bc * plane;
                    for (std::size_t i = 0; i < plane; ++i) dst[i] += g;
                }
            });
        }
        return out;
    }

    // String-keyed dispatcher over the op set above.
    Tensor<T> record_forward(const std::string& kind, const std::vector<Tensor<T>>& inputs,
                             const OpAttrs<T>& attrs = {}) {
        auto want = [&](std::size_t n) {
            if (inputs.size() != n)
                throw ShapeError(kind + ": expected " + std::to_string(n) + " inputs, got " +
                                 std::to_string(inputs.size()));
        };
        if (kind == "matmul") {
            want(2);
            return matmul(inputs[0], inputs[1]);
        }
        if (kind == "conv2d") {
            want(2);
            return conv2d(inputs[0], inputs[1], attrs.stride, attrs.pad);
        }
        if (kind == "conv-transpose2d") {
            want(2);
            return conv_transpose2d(inputs[0], inputs[1], attrs.stride, attrs.pad);
        }
        if (kind == "relu") {
            want(1);
            return relu(inputs[0]);
        }
        if (kind == "clip") {
            want(1);
            return clip(inputs[0], attrs.lo, attrs.hi);
        }
        if (kind == "add") {
            want(2);
            return add(inputs[0], inputs[1]);
        }
        if (kind == "mul") {
            want(2);
            return mul(inputs[0], inputs[1]);
        }
        if (kind == "softmax") {
            want(1);
            return softmax(inputs[0]);
        }
        if (kind == "cross-entropy") {
            want(1);
            return cross_entropy(inputs[0], attrs.labels);
        }
        if (kind == "squared-l2") {
            want(2);
            return squared_l2(inputs[0], inputs[1]);
        }
        if (kind == "reshape") {
            want(1);
            return reshape(inputs[0], attrs.shape);
        }
        if (kind == "mean") {
            want(1);
            return mean(inputs[0], attrs.spatial);
        }
        throw TapeError("unknown op-kind '" + kind + "'");
    }

    // ---- differentiation -----------------------------------------------

    void backward(const Tensor<T>& loss) {
        if (consumed_) throw TapeError("backward invoked twice on a consumed tape");
        if (!loss.defined() || loss.size() != 1)
            throw TapeError("backward requires a scalar loss");
        if (loss.p_->producer != this)
            throw TapeError("loss was not produced on this tape");
        loss.p_->grad.assign(1, T(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->bwd();
        consumed_ = true;
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
        kink_ = std::numeric_limits<T>::infinity();
    }

    bool consumed() const { return consumed_; }
    std::size_t node_count() const { return nodes_.size(); }

    // Smallest distance of any relu/clip input to its nearest non-smooth
    // point, over everything this tape has executed since reset().
    T min_kink_distance() const { return kink_; }

  private:
    struct Node {
        const char* kind;
        std::function<void()> bwd;
    };

    static void ensure_grad(typename Tensor<T>::Payload& p) {
        if (p.grad.empty()) p.grad.assign(p.value.size(), T(0));
    }

    static void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
        if (t.shape().size() != rank)
            throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got " + shape_str(t.shape()));
    }

    Tensor<T> make_output(const Shape& shape, std::vector<T> values,
                          std::initializer_list<Tensor<T>> inputs) {
        Tensor<T> out(shape, std::move(values));
        bool path = false;
        for (const Tensor<T>& in : inputs) path = path || in.on_grad_path();
        out.p_->path = path;
        out.p_->producer = this;
        return out;
    }

    void push(const char* kind, std::function<void()> bwd) {
        nodes_.push_back(Node{kind, std::move(bwd)});
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
    T kink_ = std::numeric_limits<T>::infinity();
};

// One plain SGD step: value -= lr * grad, then grads are zeroed.
template <class T>
void sgd_step(std::vector<Tensor<T>>& params, T lr) {
    for (Tensor<T>& p : params)
        if (!p.has_grad()) throw TapeError("sgd_step: parameter with missing gradient");
    for (Tensor<T>& p : params) {
        T* v = p.value().data();
        T* g = p.grad().data();
        for (std::size_t i = 0; i < p.size(); ++i) v[i] -= lr * g[i];
        p.zero_grad();
    }
}

struct FdReport {
    double max_rel_err = 0.0;     // over checkable coordinates
    std::size_t checked = 0;      // coordinates compared
    std::size_t non_checkable = 0;  // skipped: forward pass too close to a kink
    bool all_checkable() const { return non_checkable == 0; }
};

// Central-difference validation of tape gradients.  `build` must run the
// scalar-valued forward pass on the given tape, reading the current values
// of `leaves`.  Coordinates whose probes bring any relu/clip input within
// `kink_guard` of a non-smooth point are reported as non-checkable instead
// of compared (subgradient ambiguity makes the comparison meaningless).
template <class T, class BuildFn>
FdReport finite_difference_check(BuildFn&& build, std::vector<Tensor<T>> leaves,
                                 T h = T(1e-5), T kink_guard = T(1e-3)) {
    FdReport report;
    for (Tensor<T>& leaf : leaves) leaf.set_requires_grad(true).zero_grad();
    Tape<T> tape;
    Tensor<T> loss = build(tape);
    tape.backward(loss);
    const T base_kink = tape.min_kink_distance();
    std::vector<std::vector<T>> analytic;
    for (Tensor<T>& leaf : leaves)
        analytic.push_back(leaf.has_grad() ? leaf.grad() : std::vector<T>(leaf.size(), T(0)));

    auto probe = [&](T& slot, T v, T& kink) {
        const T old = slot;
        slot = v;
        Tape<T> t;
        Tensor<T> out = build(t);
        kink = t.min_kink_distance();
        slot = old;
        return out.scalar();
    };

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        std::vector<T>& vals = leaves[li].value();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            T k1, k2;
            const T f1 = probe(vals[i], vals[i] + h, k1);
            const T f2 = probe(vals[i], vals[i] - h, k2);
            if (std::min({base_kink, k1, k2}) < kink_guard) {
                ++report.non_checkable;
                continue;
            }
            const double fd = (static_cast<double>(f1) - static_cast<double>(f2)) /
                              (2.0 * static_cast<double>(h));
            const double an = static_cast<double>(analytic[li][i]);
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            const double rel = std::abs(fd - an) / denom;
            if (rel > report.max_rel_err) report.max_rel_err = rel;
            ++report.checked;
        }
    }
    return report;
}

}  // namespace spc
