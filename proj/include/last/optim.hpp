// Named parameters and the Adam optimizer.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "last/rng.hpp"
#include "last/tensor.hpp"

namespace last {

struct Parameter {
    Tensor tensor;
    std::string name;
    bool frozen = false;

    Parameter() = default;
    Parameter(Tensor t, std::string n, bool froz = false)
        : tensor(std::move(t)), name(std::move(n)), frozen(froz) {
        tensor.mark_param();
        tensor.set_requires_grad(!frozen);
    }

    std::size_t size() const { return tensor.size(); }
};

inline Parameter make_param(std::string name, Shape shape, Rng& rng, double stddev,
                            bool frozen = false) {
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = rng.truncated_normal(stddev);
    return Parameter(Tensor(std::move(shape), std::move(data)), std::move(name), frozen);
}

inline Parameter make_zeros_param(std::string name, Shape shape, bool frozen = false) {
    return Parameter(Tensor::zeros(std::move(shape)), std::move(name), frozen);
}

inline Parameter make_const_param(std::string name, Shape shape, double v, bool frozen = false) {
    return Parameter(Tensor::full(std::move(shape), v), std::move(name), frozen);
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam with bias correction. Gradients are cleared after each step.
// Frozen parameters are never touched.
class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->size(), 0.0);
            v_[i].assign(params_[i]->size(), 0.0);
        }
    }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter& p = *params_[i];
            if (p.frozen) continue;
            if (!p.tensor.has_grad())
                throw std::runtime_error("adam_step: missing gradient for trainable parameter '" +
                                         p.name + "'");
            const auto& g = p.tensor.grad();
            auto& w = p.tensor.mutable_data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                w[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
            p.tensor.zero_grad();
        }
    }

    std::size_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<Parameter*> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace last
