#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cldis/nn.hpp"

namespace cldis::nn {

// Adam with bias correction. State is exposed for checkpointing.
template <typename T = float>
class Adam {
public:
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void attach(const ParamRefs<T>& params) {
        params_ = params;
        m_.clear();
        v_.clear();
        for (auto* p : params_) {
            m_.emplace_back(p->w.size(), T(0));
            v_.emplace_back(p->w.size(), T(0));
        }
        t_ = 0;
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, double(t_));
        const double bc2 = 1.0 - std::pow(beta2, double(t_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            Param<T>& p = *params_[pi];
            std::vector<T>& m = m_[pi];
            std::vector<T>& v = v_[pi];
            for (size_t i = 0; i < p.w.size(); ++i) {
                const double g = double(p.g[i]);
                m[i] = T(beta1 * double(m[i]) + (1.0 - beta1) * g);
                v[i] = T(beta2 * double(v[i]) + (1.0 - beta2) * g * g);
                const double mhat = double(m[i]) / bc1;
                const double vhat = double(v[i]) / bc2;
                p.w[i] = T(double(p.w[i]) - lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }

    int64_t step_count() const { return t_; }
    void set_step_count(int64_t t) { t_ = t; }
    std::vector<std::vector<T>>& moment1() { return m_; }
    std::vector<std::vector<T>>& moment2() { return v_; }
    const ParamRefs<T>& params() const { return params_; }

private:
    ParamRefs<T> params_;
    std::vector<std::vector<T>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace cldis::nn
