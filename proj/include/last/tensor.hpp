// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node in a dynamically recorded computation
// graph. Ops are free functions; when recording is enabled and any input
// requires a gradient, the output carries a backward closure and parent links.
// The per-thread tape tracks which activations each op retains for the
// backward pass, so training-memory accounting can be validated against the
// analytic model.
//
// Retention convention (mirrored by the analytic memory estimator):
//   - matmul retains an operand iff the *other* operand requires grad
//   - layer_norm / gelu retain their input iff the output requires grad
//   - softmax retains its output
//   - cross_entropy retains the logits
//   - adds, scales, permutes, reshapes and selects retain nothing
// Parameters are excluded from retention counts; each distinct tensor is
// counted at most once.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace last {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool is_param = false;   // excluded from activation accounting
    bool retained = false;   // counted once by the tape
    bool backward_ran = false;
    std::function<void(TensorImpl&)> backward_fn;
    std::vector<std::shared_ptr<TensorImpl>> parents;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

struct TapeStats {
    std::size_t retained_tensors = 0;
    std::size_t retained_elements = 0;
};

// Per-thread recording state. Independent model instances on separate threads
// get independent tapes.
class Tape {
public:
    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }
    const TapeStats& stats() const { return stats_; }
    void reset_stats() { stats_ = {}; }
    void note_retained(std::size_t elems) {
        ++stats_.retained_tensors;
        stats_.retained_elements += elems;
    }

private:
    bool recording_ = true;
    TapeStats stats_;
};

inline Tape& tape() {
    thread_local Tape t;
    return t;
}

class NoGradGuard {
public:
    NoGradGuard() : prev_(tape().recording()) { tape().set_recording(false); }
    ~NoGradGuard() { tape().set_recording(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        impl_ = std::make_shared<TensorImpl>();
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double v) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mutable_data() { return impl_->data; }
    double item() const {
        if (impl_->data.size() != 1)
            throw ShapeError("item() on non-scalar tensor " + shape_str(impl_->shape));
        return impl_->data[0];
    }
    double at(std::size_t i) const { return impl_->data.at(i); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    void mark_param() { impl_->is_param = true; }
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline bool grad_enabled(std::initializer_list<Tensor> inputs) {
    if (!tape().recording()) return false;
    for (const auto& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

inline void retain(const Tensor& t) {
    auto& impl = *t.impl();
    if (impl.is_param || impl.retained) return;
    impl.retained = true;
    tape().note_retained(impl.data.size());
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size());
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Flat-index map from an output shape onto a (possibly broadcast) input shape.
inline std::vector<std::size_t> broadcast_index_map(const Shape& out, const Shape& in) {
    std::size_t n = out.size();
    std::vector<std::size_t> in_stride(n, 0);
    auto ist = row_major_strides(in);
    for (std::size_t i = 0; i < in.size(); ++i) {
        std::size_t o = n - in.size() + i;
        in_stride[o] = (in[i] == 1 && out[o] != 1) ? 0 : ist[i];
    }
    std::vector<std::size_t> map(numel(out));
    std::vector<std::size_t> idx(n, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < map.size(); ++flat) {
        map[flat] = off;
        for (std::size_t i = n; i-- > 0;) {
            ++idx[i];
            off += in_stride[i];
            if (idx[i] < out[i]) break;
            off -= in_stride[i] * out[i];
            idx[i] = 0;
            if (i == 0) break;
        }
    }
    return map;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto map_a = broadcast_index_map(out_shape, a.shape());
    auto map_b = broadcast_index_map(out_shape, b.shape());
    std::vector<double> out(numel(out_shape));
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[map_a[i]], db[map_b[i]]);
    Tensor y(std::move(out_shape), std::move(out));
    if (grad_enabled({a, b})) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        y.impl()->parents = {ai, bi};
        y.impl()->backward_fn = [ai, bi, map_a, map_b, bwd](TensorImpl& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                double g = self.grad[i];
                double va = ai->data[map_a[i]];
                double vb = bi->data[map_b[i]];
                auto [ga, gb] = bwd(va, vb, g);
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    ai->grad[map_a[i]] += ga;
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    bi->grad[map_b[i]] += gb;
                }
            }
        };
    }
    return y;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double g) { return std::pair<double, double>{g, g}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double g) { return std::pair<double, double>{g, -g}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g) { return std::pair<double, double>{g * y, g * x}; });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    Tensor y(a.shape(), std::move(out));
    if (detail::grad_enabled({a})) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        y.impl()->parents = {ai};
        y.impl()->backward_fn = [ai, c](TensorImpl& self) {
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * c;
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// matmul with leading-batch broadcasting

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul requires rank >= 2, got " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
    std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
    std::size_t Kb = b.dim(b.rank() - 2), P = b.dim(b.rank() - 1);
    if (K != Kb)
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    Shape batch = detail::broadcast_shape(batch_a, batch_b);
    auto map_a = detail::broadcast_index_map(batch, batch_a);
    auto map_b = detail::broadcast_index_map(batch, batch_b);
    std::size_t nbatch = numel(batch);

    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(P);
    std::vector<double> out(nbatch * M * P, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t n = 0; n < nbatch; ++n) {
        const double* A = pa + map_a[n] * M * K;
        const double* B = pb + map_b[n] * K * P;
        double* C = out.data() + n * M * P;
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                double av = A[i * K + k];
                if (av == 0.0) continue;
                const double* Br = B + k * P;
                double* Cr = C + i * P;
                for (std::size_t j = 0; j < P; ++j) Cr[j] += av * Br[j];
            }
    }
    Tensor y(std::move(out_shape), std::move(out));
    if (detail::grad_enabled({a, b})) {
        y.set_requires_grad(true);
        if (b.requires_grad()) detail::retain(a);
        if (a.requires_grad()) detail::retain(b);
        auto ai = a.impl();
        auto bi = b.impl();
        y.impl()->parents = {ai, bi};
        y.impl()->backward_fn = [ai, bi, map_a, map_b, nbatch, M, K, P](TensorImpl& self) {
            if (ai->requires_grad) ai->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            for (std::size_t n = 0; n < nbatch; ++n) {
                const double* G = self.grad.data() + n * M * P;
                const double* A = ai->data.data() + map_a[n] * M * K;
                const double* B = bi->data.data() + map_b[n] * K * P;
                if (ai->requires_grad) {
                    double* dA = ai->grad.data() + map_a[n] * M * K;
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t k = 0; k < K; ++k) {
                            double acc = 0.0;
                            const double* Gr = G + i * P;
                            const double* Br = B + k * P;
                            for (std::size_t j = 0; j < P; ++j) acc += Gr[j] * Br[j];
                            dA[i * K + k] += acc;
                        }
                }
                if (bi->requires_grad) {
                    double* dB = bi->grad.data() + map_b[n] * K * P;
                    for (std::size_t k = 0; k < K; ++k)
                        for (std::size_t i = 0; i < M; ++i) {
                            double av = A[i * K + k];
                            if (av == 0.0) continue;
                            const double* Gr = G + i * P;
                            double* dBr = dB + k * P;
                            for (std::size_t j = 0; j < P; ++j) dBr[j] += av * Gr[j];
                        }
                }
            }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax / layer norm / gelu

inline Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1 || x.dim(x.rank() - 1) < 1)
        throw ShapeError("softmax_lastdim: empty last dimension");
    std::size_t d = x.dim(x.rank() - 1);
    std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x.data().data() + r * d;
        double* yi = out.data() + r * d;
        double m = xi[0];
        for (std::size_t j = 1; j < d; ++j) m = std::max(m, xi[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            yi[j] = std::exp(xi[j] - m);
            sum += yi[j];
        }
        for (std::size_t j = 0; j < d; ++j) yi[j] /= sum;
    }
    Tensor y(x.shape(), std::move(out));
    if (detail::grad_enabled({x})) {
        y.set_requires_grad(true);
        detail::retain(y);
        auto xi = x.impl();
        y.impl()->parents = {xi};
        y.impl()->backward_fn = [xi, rows, d](TensorImpl& self) {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yv = self.data.data() + r * d;
                const double* gy = self.grad.data() + r * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += gy[j] * yv[j];
                double* gx = xi->grad.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) gx[j] += yv[j] * (gy[j] - dot);
            }
        };
    }
    return y;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
    std::size_t d = x.dim(x.rank() - 1);
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("layer_norm affine size mismatch: x " + shape_str(x.shape()) +
                         ", gamma " + shape_str(gamma.shape()));
    std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x.data().data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (xi[j] - mean) * is;
            (*xhat)[r * d + j] = xh;
            out[r * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    Tensor y(x.shape(), std::move(out));
    if (detail::grad_enabled({x, gamma, beta})) {
        y.set_requires_grad(true);
        detail::retain(x);
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        y.impl()->parents = {xi, gi, bi};
        y.impl()->backward_fn = [xi, gi, bi, xhat, inv_std, rows, d](TensorImpl& self) {
            if (gi->requires_grad) gi->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            if (xi->requires_grad) xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gy = self.grad.data() + r * d;
                const double* xh = xhat->data() + r * d;
                if (gi->requires_grad || bi->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) {
                        if (gi->requires_grad) gi->grad[j] += gy[j] * xh[j];
                        if (bi->requires_grad) bi->grad[j] += gy[j];
                    }
                }
                if (xi->requires_grad) {
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        double dxh = gy[j] * gi->data[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= static_cast<double>(d);
                    mean_dxh_xh /= static_cast<double>(d);
                    double is = (*inv_std)[r];
                    double* gx = xi->grad.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        double dxh = gy[j] * gi->data[j];
                        gx[j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
            }
        };
    }
    return y;
}

// Exact Gaussian-CDF GELU.
inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(x.data()[i]);
    Tensor y(x.shape(), std::move(out));
    if (detail::grad_enabled({x})) {
        y.set_requires_grad(true);
        detail::retain(x);
        auto xi = x.impl();
        y.impl()->parents = {xi};
        y.impl()->backward_fn = [xi](TensorImpl& self) {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                double v = xi->data[i];
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                xi->grad[i] += self.grad[i] * (cdf + v * pdf);
            }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (numel(new_shape) != x.size())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    Tensor y(std::move(new_shape), x.data());
    if (detail::grad_enabled({x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        y.impl()->parents = {xi};
        y.impl()->backward_fn = [xi](TensorImpl& self) {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
        };
    }
    return y;
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.rank()) throw ShapeError("permute rank mismatch");
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
    auto in_strides = detail::row_major_strides(x.shape());
    std::vector<std::size_t> strides(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) strides[i] = in_strides[perm[i]];
    std::vector<double> out(x.size());
    auto src_index = std::make_shared<std::vector<std::size_t>>(x.size());
    std::vector<std::size_t> idx(perm.size(), 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        out[flat] = x.data()[off];
        (*src_index)[flat] = off;
        for (std::size_t i = perm.size(); i-- > 0;) {
            ++idx[i];
            off += strides[i];
            if (idx[i] < out_shape[i]) break;
            off -= strides[i] * out_shape[i];
            idx[i] = 0;
            if (i == 0) break;
        }
    }
    Tensor y(std::move(out_shape), std::move(out));
    if (detail::grad_enabled({x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        y.impl()->parents = {xi};
        y.impl()->backward_fn = [xi, src_index](TensorImpl& self) {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                xi->grad[(*src_index)[i]] += self.grad[i];
        };
    }
    return y;
}

// Select one index along a dimension, dropping that dimension.
inline Tensor select(const Tensor& x, std::size_t dim, std::size_t index) {
    if (dim >= x.rank() || index >= x.dim(dim))
        throw ShapeError("select(dim=" + std::to_string(dim) + ", index=" + std::to_string(index) +
                         ") out of range for " + shape_str(x.shape()));
    Shape out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (i != dim) out_shape.push_back(x.dim(i));
    if (out_shape.empty()) out_shape.push_back(1);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= x.dim(i);
    for (std::size_t i = dim + 1; i < x.rank(); ++i) inner *= x.dim(i);
    std::size_t ndim = x.dim(dim);
    std::vector<double> out(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i)
            out[o * inner + i] = x.data()[(o * ndim + index) * inner + i];
    Tensor y(std::move(out_shape), std::move(out));
    if (detail::grad_enabled({x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        y.impl()->parents = {xi};
        y.impl()->backward_fn = [xi, outer, inner, ndim, index](TensorImpl& self) {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i)
                    xi->grad[(o * ndim + index) * inner + i] += self.grad[o * inner + i];
        };
    }
    return y;
}

inline Tensor sum(const Tensor& x) {
    double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
    Tensor y({1}, {s});
    if (detail::grad_enabled({x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        y.impl()->parents = {xi};
        y.impl()->backward_fn = [xi](TensorImpl& self) {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (auto& g : xi->grad) g += self.grad[0];
        };
    }
    return y;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// ---------------------------------------------------------------------------
// backward

inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward() expects a scalar loss, got " + shape_str(loss.shape()));
    auto root = loss.impl();
    if (root->backward_ran)
        throw std::runtime_error("backward() called twice on the same graph without reset");
    root->backward_ran = true;

    // iterative post-order topological sort
    std::vector<std::shared_ptr<TensorImpl>> topo;
    std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
    std::unordered_set<TensorImpl*> seen;
    stack.emplace_back(root, 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            auto next = node->parents[child];
            ++child;
            if (next->requires_grad && !seen.count(next.get())) {
                seen.insert(next.get());
                stack.emplace_back(next, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        auto& node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

}  // namespace last
