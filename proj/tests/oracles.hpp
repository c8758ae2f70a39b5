// Independent reference implementations used to validate the library:
// central finite differences for gradients, and plain-loop attention /
// layer-norm forwards with no shared code on the library side.

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "last/optim.hpp"
#include "last/tensor.hpp"

namespace last::oracle {

// Relative error with an absolute floor: near-zero gradients are compared
// absolutely, since central differences at h=1e-5 carry ~1e-10 roundoff noise.
inline double rel_err(double a, double b) {
    double denom = std::max({std::abs(a), std::abs(b), 1e-4});
    return std::abs(a - b) / denom;
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;
};

// Analytic gradient of loss_fn (a fresh forward each call) against central
// finite differences, for every element of every trainable parameter.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Parameter*>& params, double h = 1e-5) {
    for (Parameter* p : params) p->tensor.zero_grad();
    backward(loss_fn());
    GradCheckResult res;
    for (Parameter* p : params) {
        if (p->frozen) continue;
        std::vector<double> analytic =
            p->tensor.has_grad() ? p->tensor.grad() : std::vector<double>(p->size(), 0.0);
        auto& w = p->tensor.mutable_data();
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < w.size(); ++i) {
            double orig = w[i];
            w[i] = orig + h;
            double up = loss_fn().item();
            w[i] = orig - h;
            double dn = loss_fn().item();
            w[i] = orig;
            double fd = (up - dn) / (2.0 * h);
            double e = rel_err(analytic[i], fd);
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst = p->name + "[" + std::to_string(i) + "] analytic=" +
                            std::to_string(analytic[i]) + " fd=" + std::to_string(fd);
            }
        }
    }
    for (Parameter* p : params) p->tensor.zero_grad();
    return res;
}

// Multi-head attention over projected q/k/v of one sample [L, r], written
// with explicit loops and per-head slices.
inline std::vector<double> attention_ref(const std::vector<double>& q,
                                         const std::vector<double>& k,
                                         const std::vector<double>& v, std::size_t L,
                                         std::size_t r, std::size_t n_heads) {
    std::size_t rh = r / n_heads;
    double scl = 1.0 / std::sqrt(static_cast<double>(rh));
    std::vector<double> out(L * r, 0.0);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<double> score(L);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < L; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < rh; ++t)
                    s += q[i * r + hd * rh + t] * k[j * r + hd * rh + t];
                score[j] = s * scl;
                mx = std::max(mx, score[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < L; ++j) {
                score[j] = std::exp(score[j] - mx);
                denom += score[j];
            }
            for (std::size_t j = 0; j < L; ++j)
                for (std::size_t t = 0; t < rh; ++t)
                    out[i * r + hd * rh + t] += score[j] / denom * v[j * r + hd * rh + t];
        }
    }
    return out;
}

inline std::vector<double> layer_norm_ref(const std::vector<double>& x,
                                          const std::vector<double>& gamma,
                                          const std::vector<double>& beta, std::size_t d,
                                          double eps) {
    std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    for (std::size_t row = 0; row < rows; ++row) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x[row * d + j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = x[row * d + j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j)
            out[row * d + j] =
                gamma[j] * (x[row * d + j] - mean) / std::sqrt(var + eps) + beta[j];
    }
    return out;
}

inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      std::size_t M, std::size_t K, std::size_t P) {
    std::vector<double> out(M * P, 0.0);
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < P; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += a[i * K + k] * b[k * P + j];
            out[i * P + j] = s;
        }
    return out;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scl = 1.0) {
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = rng.normal() * scl;
    return Tensor(std::move(shape), std::move(data));
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace last::oracle
