#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "scoredist/tensor.hpp"

namespace scoredist {

// Adam with bias correction (https://arxiv.org/abs/1412.6980). State is
// allocated on first use and keyed by position, so the parameter list must
// keep a stable order across steps.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    double learning_rate() const { return lr_; }

    void step(std::vector<Tensor*> params, const std::vector<Tensor>& grads) {
        if (params.size() != grads.size()) {
            throw std::invalid_argument("adam: params/grads size mismatch");
        }
        if (m_.empty()) {
            for (const auto* p : params) {
                m_.push_back(Tensor::zeros_like(*p));
                v_.push_back(Tensor::zeros_like(*p));
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const Tensor& g = grads[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
                const double mh = m_[i][j] / c1;
                const double vh = v_[i][j] / c2;
                p[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

    void step(Tensor& param, const Tensor& grad) { step({&param}, {grad}); }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace scoredist
