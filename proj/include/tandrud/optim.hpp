#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tandrud/tensor.hpp"

namespace tandrud {

struct NonFiniteGradient : std::runtime_error {
    explicit NonFiniteGradient(const std::string& param)
        : std::runtime_error("non-finite gradient for parameter '" + param + "'") {}
};

// Adam with bias correction. Moment buffers are zero-initialized and the
// step counter advances by exactly one per update.
class AdamState {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void register_param(const std::string& name, const Tensor& p) {
        names_.push_back(name);
        m_.push_back(Tensor::zeros_like(p));
        v_.push_back(Tensor::zeros_like(p));
    }

    std::int64_t step_count() const { return step_; }
    std::size_t param_count() const { return names_.size(); }

    // params and grads must be in registration order.
    void step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads,
              double lr) {
        if (params.size() != names_.size() || grads.size() != names_.size())
            throw ContractError("adam_step: parameter count mismatch");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(m_[i]))
                throw ContractError("adam_step: shape mismatch for '" + names_[i] + "'");
            if (!grads[i]->finite()) throw NonFiniteGradient(names_[i]);
        }
        ++step_;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const Tensor& g = *grads[i];
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t k = 0; k < p.values.size(); ++k) {
                double gk = g.values[k];
                m.values[k] = beta1 * m.values[k] + (1.0 - beta1) * gk;
                v.values[k] = beta2 * v.values[k] + (1.0 - beta2) * gk * gk;
                double mhat = m.values[k] / bc1;
                double vhat = v.values[k] / bc2;
                p.values[k] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> m_, v_;
    std::int64_t step_ = 0;
};

// Central-difference gradient check. f must be deterministic.
// Returns the max relative error over all coordinates of all parameters,
// with denominator max(1, |analytic|, |numeric|).
inline double finite_diff_check(const std::function<double()>& f,
                                std::vector<Tensor*> params,
                                const std::vector<const Tensor*>& analytic,
                                double h = 1e-5) {
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            double orig = p.values[k];
            p.values[k] = orig + h;
            double fp = f();
            p.values[k] = orig - h;
            double fm = f();
            p.values[k] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[i]->values[k];
            double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace tandrud
