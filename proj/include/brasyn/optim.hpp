#pragma once

#include <cmath>
#include <vector>

#include "nn.hpp"

namespace brasyn::nn {

template <class T>
class Adam {
public:
    Adam(std::vector<Var<T>> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
         T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.push_back(Tensor<T>::zeros(p->value.shape()));
            v_.push_back(Tensor<T>::zeros(p->value.shape()));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(double(beta1_), double(t_));
        const double bc2 = 1.0 - std::pow(double(beta2_), double(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            if (p.grad.size() != p.value.size()) continue; // never touched this step
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                const T g = p.grad[j];
                m_[i][j] = beta1_ * m_[i][j] + (T(1) - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (T(1) - beta2_) * g * g;
                const double mhat = double(m_[i][j]) / bc1;
                const double vhat = double(v_[i][j]) / bc2;
                p.value[j] -= T(double(lr_) * mhat / (std::sqrt(vhat) + double(eps_)));
            }
        }
    }

    void set_lr(T lr) { lr_ = lr; }
    std::int64_t steps() const { return t_; }

private:
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> m_, v_;
    T lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

} // namespace brasyn::nn
