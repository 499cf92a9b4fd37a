#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cldis/common.hpp"

namespace cldis {

// Dense NCHW tensor. 2-D data (latents, logits) uses {n, d, 1, 1}.
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), v(size_t(n_) * c_ * h_ * w_, T(0)) {}
    static Tensor vec(int n_, int d) { return Tensor(n_, d, 1, 1); }

    size_t size() const { return v.size(); }
    int per_sample() const { return c * h * w; }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
    T* sample(int i) { return v.data() + size_t(i) * per_sample(); }
    const T* sample(int i) const { return v.data() + size_t(i) * per_sample(); }
    T& at(int ni, int ci, int hi, int wi) { return v[((size_t(ni) * c + ci) * h + hi) * w + wi]; }
    const T& at(int ni, int ci, int hi, int wi) const { return v[((size_t(ni) * c + ci) * h + hi) * w + wi]; }

    bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

    Tensor slice(int start, int count) const {
        Tensor out(count, c, h, w);
        std::copy(sample(start), sample(start) + size_t(count) * per_sample(), out.data());
        return out;
    }

    bool finite() const {
        for (const T& x : v)
            if (!std::isfinite(double(x))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(n, c, h, w);
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = U(v[i]);
        return out;
    }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& x) {
    return Tensor<T>(x.n, x.c, x.h, x.w);
}

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "mse: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = double(a.v[i]) - double(b.v[i]);
        s += d * d;
    }
    return a.size() ? s / double(a.size()) : 0.0;
}

template <typename T>
double l1_distance(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "l1_distance: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += std::abs(double(a.v[i]) - double(b.v[i]));
    return s;
}

}  // namespace cldis
