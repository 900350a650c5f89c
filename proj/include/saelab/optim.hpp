// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "saelab/tensor.hpp"

namespace saelab {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// In-place parameter updates. Adam moments persist across steps and are
/// keyed by tensor identity; SGD is stateless.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    void step(const std::vector<Tensor>& params) {
        ++t_;
        for (const Tensor& p : params) step_one(p);
    }

    void zero_grad(const std::vector<Tensor>& params) {
        for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
    }

    /// Clears first/second moments at specific flat indices of a parameter.
    /// Used after dead-latent resampling so stale momentum does not drag the
    /// reinitialized entries.
    void reset_moments_at(const Tensor& p, const std::vector<size_t>& indices) {
        auto it = state_.find(p.impl());
        if (it == state_.end()) return;
        for (size_t i : indices) {
            it->second.m[i] = 0.0;
            it->second.v[i] = 0.0;
        }
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };

    void step_one(const Tensor& param) {
        TensorImpl* impl = param.impl();
        if (!impl->requires_grad)
            throw ContractError("optimizer: parameter does not require grad");
        if (impl->grad.size() != impl->data.size())
            throw ContractError("optimizer: parameter has no gradient (shape " +
                                shape_str(impl->shape) + ")");
        if (cfg_.kind == OptimizerKind::sgd) {
            for (size_t i = 0; i < impl->data.size(); ++i) impl->data[i] -= cfg_.lr * impl->grad[i];
            return;
        }
        Moments& mo = state_[impl];
        if (mo.m.size() != impl->data.size()) {
            mo.m.assign(impl->data.size(), 0.0);
            mo.v.assign(impl->data.size(), 0.0);
        }
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < impl->data.size(); ++i) {
            double g = impl->grad[i];
            mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g;
            mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = mo.m[i] / bc1;
            double vhat = mo.v[i] / bc2;
            impl->data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

    OptimizerConfig cfg_;
    int64_t t_ = 0;
    std::unordered_map<TensorImpl*, Moments> state_;
};

inline uint64_t params_checksum(const std::vector<Tensor>& params) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const Tensor& p : params) h = fnv1a64(p.vec(), h);
    return h;
}

}  // namespace saelab
