#pragma once

#include <cmath>
#include <vector>

#include "cldis/tensor.hpp"

namespace cldis::diff {

// Per-timestep noise coefficients. alpha_bar is the cumulative product of
// alpha; sigma is zero everywhere under the deterministic sampler.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar, sigma;

    // t = -1 denotes the clean endpoint (alpha_bar = 1).
    double ab(int t) const {
        require(t >= -1 && t < T, "schedule: timestep out of range");
        return t < 0 ? 1.0 : alpha_bar[size_t(t)];
    }
};

inline DiffusionSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    require(T >= 1, "make_linear_schedule: T must be positive");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "make_linear_schedule: need 0 < beta_start <= beta_end < 1");
    DiffusionSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.sigma.assign(T, 0.0);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.beta[t] = (T == 1) ? beta_start
                             : beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, per-sample timesteps.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, const std::vector<int>& ts, const Tensor<T>& eps,
                          const DiffusionSchedule& sched) {
    require(x0.same_shape(eps), "forward_diffuse: x0/eps shape mismatch");
    require(ts.size() == size_t(x0.n), "forward_diffuse: one timestep per sample");
    Tensor<T> xt = zeros_like(x0);
    const size_t ps = size_t(x0.per_sample());
    for (int i = 0; i < x0.n; ++i) {
        require(ts[i] >= 0 && ts[i] < sched.T, "forward_diffuse: timestep out of range");
        const T a = T(std::sqrt(sched.ab(ts[i])));
        const T b = T(std::sqrt(1.0 - sched.ab(ts[i])));
        const T* x = x0.sample(i);
        const T* e = eps.sample(i);
        T* o = xt.sample(i);
        for (size_t j = 0; j < ps; ++j) o[j] = a * x[j] + b * e[j];
    }
    return xt;
}

template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, int t, const Tensor<T>& eps, const DiffusionSchedule& sched) {
    return forward_diffuse(x0, std::vector<int>(size_t(x0.n), t), eps, sched);
}

// x0_hat = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t); exact inverse of the
// closed form when eps_hat equals the true noise.
template <typename T>
Tensor<T> predict_x0(const Tensor<T>& xt, const Tensor<T>& eps_hat, const std::vector<int>& ts,
                     const DiffusionSchedule& sched) {
    require(xt.same_shape(eps_hat), "predict_x0: shape mismatch");
    require(ts.size() == size_t(xt.n), "predict_x0: one timestep per sample");
    Tensor<T> x0 = zeros_like(xt);
    const size_t ps = size_t(xt.per_sample());
    for (int i = 0; i < xt.n; ++i) {
        const double ab = sched.ab(ts[i]);
        const T inv = T(1.0 / std::sqrt(ab));
        const T b = T(std::sqrt(1.0 - ab));
        const T* x = xt.sample(i);
        const T* e = eps_hat.sample(i);
        T* o = x0.sample(i);
        for (size_t j = 0; j < ps; ++j) o[j] = (x[j] - b * e[j]) * inv;
    }
    return x0;
}

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& xt, const Tensor<T>& eps_hat, int t, const DiffusionSchedule& sched) {
    return predict_x0(xt, eps_hat, std::vector<int>(size_t(xt.n), t), sched);
}

// Deterministic (sigma = 0) reverse update from t to t_prev; t_prev = -1 maps
// straight to the x0 prediction.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& xt, const Tensor<T>& eps_hat, int t, int t_prev,
                    const DiffusionSchedule& sched) {
    require(t_prev < t, "ddim_step: t_prev must be below t");
    require(t_prev >= -1 && t >= 0 && t < sched.T, "ddim_step: timestep out of range");
    const double ab_t = sched.ab(t), ab_p = sched.ab(t_prev);
    // x_prev = A x_t + B eps_hat
    const double A = std::sqrt(ab_p / ab_t);
    const double B = std::sqrt(1.0 - ab_p) - A * std::sqrt(1.0 - ab_t);
    Tensor<T> out = zeros_like(xt);
    for (size_t j = 0; j < xt.size(); ++j) out.v[j] = T(A) * xt.v[j] + T(B) * eps_hat.v[j];
    return out;
}

// Evenly strided reverse-time schedule over [0, T), ending at 0.
inline std::vector<int> strided_step_schedule(int T, int steps) {
    require(steps >= 1 && steps <= T, "strided_step_schedule: bad step count");
    std::vector<int> ts(steps);
    for (int i = 0; i < steps; ++i)
        ts[i] = int(std::llround(double(T - 1) * double(steps - 1 - i) / double(std::max(1, steps - 1))));
    if (ts.back() != 0) ts.back() = 0;
    for (size_t i = 1; i < ts.size(); ++i) require(ts[i] < ts[i - 1], "strided_step_schedule: not decreasing");
    return ts;
}

}  // namespace cldis::diff
