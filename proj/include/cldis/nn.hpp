#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "cldis/rng.hpp"
#include "cldis/tensor.hpp"

namespace cldis::nn {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
struct Param {
    std::string name;
    std::vector<T> w;
    std::vector<T> g;

    void resize(size_t n) {
        w.assign(n, T(0));
        g.assign(n, T(0));
    }
    void zero_grad() { std::fill(g.begin(), g.end(), T(0)); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

// Gradients are accumulated per sample into slots and reduced in sample order,
// so results are bit-identical for any thread count.
template <typename T>
inline void reduce_slots(const std::vector<T>& slots, size_t n_slots, std::vector<T>& out) {
    const size_t len = out.size();
    for (size_t s = 0; s < n_slots; ++s) {
        const T* src = slots.data() + s * len;
        for (size_t i = 0; i < len; ++i) out[i] += src[i];
    }
}

template <typename T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// ---------------------------------------------------------------------------
// Linear: y = x W^T + b, x [N, in]
// ---------------------------------------------------------------------------
template <typename T>
struct Linear {
    int in = 0, out = 0;
    Param<T> W, b;
    std::vector<Tensor<T>> xs_;

    void init(int in_, int out_, Rng& rng, const std::string& name, bool zero = false) {
        in = in_;
        out = out_;
        W.name = name + ".w";
        b.name = name + ".b";
        W.resize(size_t(out) * in);
        b.resize(out);
        if (!zero) {
            const double bound = 1.0 / std::sqrt(double(in));
            rng.fill_uniform(W.w.data(), W.w.size(), -bound, bound);
            rng.fill_uniform(b.w.data(), b.w.size(), -bound, bound);
        }
    }

    // Hand-rolled loops: Eigen's gemv/redux kernels reorder sums based on the
    // heap address of their operands, which breaks bit-reproducibility. These
    // layers are small, so fixed-order scalar loops cost nothing.
    Tensor<T> forward(const Tensor<T>& x, bool want_grad = true) {
        require(x.per_sample() == in, "Linear " + W.name + ": bad input size");
        Tensor<T> y = Tensor<T>::vec(x.n, out);
        for (int i = 0; i < x.n; ++i) {
            const T* xi = x.sample(i);
            T* yi = y.sample(i);
            for (int o = 0; o < out; ++o) {
                const T* wrow = W.w.data() + size_t(o) * in;
                T acc = b.w[o];
                for (int j = 0; j < in; ++j) acc += wrow[j] * xi[j];
                yi[o] = acc;
            }
        }
        if (want_grad) xs_.push_back(x);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> x = std::move(xs_.back());
        xs_.pop_back();
        Tensor<T> dx = Tensor<T>::vec(x.n, in);
        for (int i = 0; i < x.n; ++i) {
            const T* dyi = dy.sample(i);
            const T* xi = x.sample(i);
            T* dxi = dx.sample(i);
            for (int o = 0; o < out; ++o) {
                const T d = dyi[o];
                const T* wrow = W.w.data() + size_t(o) * in;
                T* grow = W.g.data() + size_t(o) * in;
                for (int j = 0; j < in; ++j) {
                    dxi[j] += wrow[j] * d;
                    grow[j] += xi[j] * d;
                }
                b.g[o] += d;
            }
        }
        return dx;
    }

    void collect(ParamRefs<T>& ps) {
        ps.push_back(&W);
        ps.push_back(&b);
    }
};

// ---------------------------------------------------------------------------
// Conv2d, square kernel, zero padding. Weight layout [cout][cin*k*k] matching
// im2col rows ordered (ci, ky, kx).
// ---------------------------------------------------------------------------
template <typename T>
struct Conv2d {
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
    Param<T> W, b;
    std::vector<Tensor<T>> xs_;

    void init(int cin_, int cout_, int k_, int stride_, int pad_, Rng& rng, const std::string& name,
              bool zero = false) {
        cin = cin_;
        cout = cout_;
        k = k_;
        stride = stride_;
        pad = pad_;
        W.name = name + ".w";
        b.name = name + ".b";
        W.resize(size_t(cout) * cin * k * k);
        b.resize(cout);
        if (!zero) {
            const double bound = 1.0 / std::sqrt(double(cin) * k * k);
            rng.fill_uniform(W.w.data(), W.w.size(), -bound, bound);
            rng.fill_uniform(b.w.data(), b.w.size(), -bound, bound);
        }
    }

    int out_h(int h) const { return (h + 2 * pad - k) / stride + 1; }
    int out_w(int w) const { return (w + 2 * pad - k) / stride + 1; }

    void im2col(const T* x, int h, int w, T* col) const {
        const int oh = out_h(h), ow = out_w(w);
        for (int ci = 0; ci < cin; ++ci) {
            const T* xc = x + size_t(ci) * h * w;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T* row = col + (size_t(ci) * k * k + ky * k + kx) * oh * ow;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) {
                            std::fill(row + size_t(oy) * ow, row + size_t(oy + 1) * ow, T(0));
                            continue;
                        }
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            row[size_t(oy) * ow + ox] = (ix >= 0 && ix < w) ? xc[size_t(iy) * w + ix] : T(0);
                        }
                    }
                }
        }
    }

    void col2im(const T* col, int h, int w, T* dx) const {
        const int oh = out_h(h), ow = out_w(w);
        for (int ci = 0; ci < cin; ++ci) {
            T* xc = dx + size_t(ci) * h * w;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T* row = col + (size_t(ci) * k * k + ky * k + kx) * oh * ow;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < w) xc[size_t(iy) * w + ix] += row[size_t(oy) * ow + ox];
                        }
                    }
                }
        }
    }

    Tensor<T> forward(const Tensor<T>& x, bool want_grad = true) {
        require(x.c == cin, "Conv2d " + W.name + ": bad channel count");
        const int oh = out_h(x.h), ow = out_w(x.w);
        const int cols = oh * ow, rows = cin * k * k;
        Tensor<T> y(x.n, cout, oh, ow);
#pragma omp parallel
        {
            std::vector<T> col(size_t(rows) * cols);
#pragma omp for schedule(static)
            for (int i = 0; i < x.n; ++i) {
                im2col(x.sample(i), x.h, x.w, col.data());
                ECMap<T> C(col.data(), rows, cols);
                ECMap<T> Wm(W.w.data(), cout, rows);
                EMap<T> Y(y.sample(i), cout, cols);
                Y.noalias() = Wm * C;
                for (int co = 0; co < cout; ++co) Y.row(co).array() += b.w[co];
            }
        }
        if (want_grad) xs_.push_back(x);
        return y;
    }

    // im2col is recomputed here instead of cached; keeps deep sampler chains cheap in memory.
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> x = std::move(xs_.back());
        xs_.pop_back();
        const int oh = out_h(x.h), ow = out_w(x.w);
        const int cols = oh * ow, rows = cin * k * k;
        Tensor<T> dx = zeros_like(x);
        std::vector<T> dw_slots(size_t(x.n) * W.w.size(), T(0));
        std::vector<T> db_slots(size_t(x.n) * cout, T(0));
#pragma omp parallel
        {
            std::vector<T> col(size_t(rows) * cols);
            std::vector<T> dcol(size_t(rows) * cols);
#pragma omp for schedule(static)
            for (int i = 0; i < x.n; ++i) {
                im2col(x.sample(i), x.h, x.w, col.data());
                ECMap<T> C(col.data(), rows, cols);
                ECMap<T> dY(dy.sample(i), cout, cols);
                ECMap<T> Wm(W.w.data(), cout, rows);
                EMap<T>(dcol.data(), rows, cols).noalias() = Wm.transpose() * dY;
                col2im(dcol.data(), x.h, x.w, dx.sample(i));
                EMap<T>(dw_slots.data() + size_t(i) * W.w.size(), cout, rows).noalias() = dY * C.transpose();
                // fixed-order bias reduction (Eigen redux is alignment-sensitive)
                T* dbs = db_slots.data() + size_t(i) * cout;
                for (int co = 0; co < cout; ++co) {
                    const T* row = dy.sample(i) + size_t(co) * cols;
                    T acc = T(0);
                    for (int j = 0; j < cols; ++j) acc += row[j];
                    dbs[co] = acc;
                }
            }
        }
        reduce_slots(dw_slots, x.n, W.g);
        reduce_slots(db_slots, x.n, b.g);
        return dx;
    }

    void collect(ParamRefs<T>& ps) {
        ps.push_back(&W);
        ps.push_back(&b);
    }
};

// ---------------------------------------------------------------------------
// GroupNorm with affine, eps 1e-5.
// ---------------------------------------------------------------------------
template <typename T>
struct GroupNorm {
    int groups = 8, channels = 0;
    T eps = T(1e-5);
    Param<T> gamma, beta;
    std::vector<Tensor<T>> xhat_;
    std::vector<std::vector<T>> inv_;  // [n*groups] inverse stddev per forward

    void init(int groups_, int channels_, const std::string& name) {
        groups = groups_;
        channels = channels_;
        require(channels % groups == 0, "GroupNorm: channels must divide by groups");
        gamma.name = name + ".g";
        beta.name = name + ".b";
        gamma.resize(channels);
        beta.resize(channels);
        std::fill(gamma.w.begin(), gamma.w.end(), T(1));
    }

    Tensor<T> forward(const Tensor<T>& x, bool want_grad = true) {
        require(x.c == channels, "GroupNorm: bad channel count");
        const int gs = channels / groups, hw = x.h * x.w;
        const size_t glen = size_t(gs) * hw;
        Tensor<T> xhat = zeros_like(x);
        Tensor<T> y = zeros_like(x);
        std::vector<T> inv(size_t(x.n) * groups);
#pragma omp parallel for schedule(static)
        for (int i = 0; i < x.n; ++i) {
            for (int g = 0; g < groups; ++g) {
                const T* xs = x.sample(i) + size_t(g) * glen;
                T* hs = xhat.sample(i) + size_t(g) * glen;
                T* ys = y.sample(i) + size_t(g) * glen;
                double m = 0.0, m2 = 0.0;
                for (size_t j = 0; j < glen; ++j) m += xs[j];
                m /= double(glen);
                for (size_t j = 0; j < glen; ++j) {
                    const double d = xs[j] - m;
                    m2 += d * d;
                }
                const T iv = T(1.0 / std::sqrt(m2 / double(glen) + double(eps)));
                inv[size_t(i) * groups + g] = iv;
                for (int cc = 0; cc < gs; ++cc) {
                    const int ch = g * gs + cc;
                    for (int j = 0; j < hw; ++j) {
                        const T xh = (xs[size_t(cc) * hw + j] - T(m)) * iv;
                        hs[size_t(cc) * hw + j] = xh;
                        ys[size_t(cc) * hw + j] = gamma.w[ch] * xh + beta.w[ch];
                    }
                }
            }
        }
        if (want_grad) {
            xhat_.push_back(std::move(xhat));
            inv_.push_back(std::move(inv));
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> xhat = std::move(xhat_.back());
        xhat_.pop_back();
        std::vector<T> inv = std::move(inv_.back());
        inv_.pop_back();
        const int gs = channels / groups, hw = xhat.h * xhat.w;
        const size_t glen = size_t(gs) * hw;
        Tensor<T> dx = zeros_like(xhat);
        std::vector<T> dgamma_slots(size_t(xhat.n) * channels, T(0));
        std::vector<T> dbeta_slots(size_t(xhat.n) * channels, T(0));
#pragma omp parallel for schedule(static)
        for (int i = 0; i < xhat.n; ++i) {
            T* dgs = dgamma_slots.data() + size_t(i) * channels;
            T* dbs = dbeta_slots.data() + size_t(i) * channels;
            for (int g = 0; g < groups; ++g) {
                const T* hs = xhat.sample(i) + size_t(g) * glen;
                const T* ds = dy.sample(i) + size_t(g) * glen;
                T* dxs = dx.sample(i) + size_t(g) * glen;
                double m1 = 0.0, m2 = 0.0;
                for (int cc = 0; cc < gs; ++cc) {
                    const int ch = g * gs + cc;
                    for (int j = 0; j < hw; ++j) {
                        const T d = ds[size_t(cc) * hw + j];
                        const T xh = hs[size_t(cc) * hw + j];
                        dgs[ch] += d * xh;
                        dbs[ch] += d;
                        const double t = double(gamma.w[ch]) * d;
                        m1 += t;
                        m2 += t * xh;
                    }
                }
                m1 /= double(glen);
                m2 /= double(glen);
                const T iv = inv[size_t(i) * groups + g];
                for (int cc = 0; cc < gs; ++cc) {
                    const int ch = g * gs + cc;
                    for (int j = 0; j < hw; ++j) {
                        const double t = double(gamma.w[ch]) * ds[size_t(cc) * hw + j];
                        dxs[size_t(cc) * hw + j] = T(double(iv) * (t - m1 - double(hs[size_t(cc) * hw + j]) * m2));
                    }
                }
            }
        }
        reduce_slots(dgamma_slots, xhat.n, gamma.g);
        reduce_slots(dbeta_slots, xhat.n, beta.g);
        return dx;
    }

    void collect(ParamRefs<T>& ps) {
        ps.push_back(&gamma);
        ps.push_back(&beta);
    }
};

// ---------------------------------------------------------------------------
// SiLU activation.
// ---------------------------------------------------------------------------
template <typename T>
struct SiLU {
    std::vector<Tensor<T>> xs_;

    Tensor<T> forward(const Tensor<T>& x, bool want_grad = true) {
        Tensor<T> y = zeros_like(x);
        const size_t len = x.size();
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < (long long)len; ++i) y.v[i] = x.v[i] * sigmoid(x.v[i]);
        if (want_grad) xs_.push_back(x);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> x = std::move(xs_.back());
        xs_.pop_back();
        Tensor<T> dx = zeros_like(x);
        const size_t len = x.size();
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < (long long)len; ++i) {
            const T s = sigmoid(x.v[i]);
            dx.v[i] = dy.v[i] * s * (T(1) + x.v[i] * (T(1) - s));
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsampling.
// ---------------------------------------------------------------------------
template <typename T>
struct Upsample2x {
    Tensor<T> forward(const Tensor<T>& x, bool /*want_grad*/ = true) {
        Tensor<T> y(x.n, x.c, x.h * 2, x.w * 2);
#pragma omp parallel for schedule(static)
        for (int i = 0; i < x.n; ++i)
            for (int ci = 0; ci < x.c; ++ci)
                for (int yy = 0; yy < y.h; ++yy)
                    for (int xx = 0; xx < y.w; ++xx)
                        y.at(i, ci, yy, xx) = x.at(i, ci, yy / 2, xx / 2);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
#pragma omp parallel for schedule(static)
        for (int i = 0; i < dy.n; ++i)
            for (int ci = 0; ci < dy.c; ++ci)
                for (int yy = 0; yy < dy.h; ++yy)
                    for (int xx = 0; xx < dy.w; ++xx)
                        dx.at(i, ci, yy / 2, xx / 2) += dy.at(i, ci, yy, xx);
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Feature-wise affine modulation: y[n,c,:,:] = x[n,c,:,:] * (1 + s[n,c]) + t[n,c]
// with sb = [N, 2C] packed as (s | t). Stateless apart from the cache.
// ---------------------------------------------------------------------------
template <typename T>
struct Film {
    std::vector<Tensor<T>> xs_, sbs_;

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& sb, bool want_grad = true) {
        require(sb.per_sample() == 2 * x.c && sb.n == x.n, "Film: bad modulation shape");
        Tensor<T> y = zeros_like(x);
        const int hw = x.h * x.w;
#pragma omp parallel for schedule(static)
        for (int i = 0; i < x.n; ++i) {
            const T* sbp = sb.sample(i);
            for (int ci = 0; ci < x.c; ++ci) {
                const T s = T(1) + sbp[ci], t = sbp[x.c + ci];
                const T* xp = x.sample(i) + size_t(ci) * hw;
                T* yp = y.sample(i) + size_t(ci) * hw;
                for (int j = 0; j < hw; ++j) yp[j] = xp[j] * s + t;
            }
        }
        if (want_grad) {
            xs_.push_back(x);
            sbs_.push_back(sb);
        }
        return y;
    }

    // Returns dx; writes d(sb) into dsb.
    Tensor<T> backward(const Tensor<T>& dy, Tensor<T>& dsb) {
        Tensor<T> x = std::move(xs_.back());
        xs_.pop_back();
        Tensor<T> sb = std::move(sbs_.back());
        sbs_.pop_back();
        Tensor<T> dx = zeros_like(x);
        dsb = zeros_like(sb);
        const int hw = x.h * x.w;
#pragma omp parallel for schedule(static)
        for (int i = 0; i < x.n; ++i) {
            const T* sbp = sb.sample(i);
            T* dsbp = dsb.sample(i);
            for (int ci = 0; ci < x.c; ++ci) {
                const T s = T(1) + sbp[ci];
                const T* xp = x.sample(i) + size_t(ci) * hw;
                const T* dp = dy.sample(i) + size_t(ci) * hw;
                T* dxp = dx.sample(i) + size_t(ci) * hw;
                double dsum = 0.0, dxsum = 0.0;
                for (int j = 0; j < hw; ++j) {
                    dxp[j] = dp[j] * s;
                    dsum += dp[j];
                    dxsum += double(dp[j]) * xp[j];
                }
                dsbp[ci] = T(dxsum);
                dsbp[x.c + ci] = T(dsum);
            }
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Channel concat / residual helpers.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.n == b.n && a.h == b.h && a.w == b.w, "concat_channels: shape mismatch");
    Tensor<T> y(a.n, a.c + b.c, a.h, a.w);
    const size_t pa = a.per_sample(), pb = b.per_sample();
    for (int i = 0; i < a.n; ++i) {
        std::copy(a.sample(i), a.sample(i) + pa, y.sample(i));
        std::copy(b.sample(i), b.sample(i) + pb, y.sample(i) + pa);
    }
    return y;
}

template <typename T>
void split_channels(const Tensor<T>& dy, Tensor<T>& da, Tensor<T>& db, int ca) {
    da = Tensor<T>(dy.n, ca, dy.h, dy.w);
    db = Tensor<T>(dy.n, dy.c - ca, dy.h, dy.w);
    const size_t pa = da.per_sample(), pb = db.per_sample();
    for (int i = 0; i < dy.n; ++i) {
        std::copy(dy.sample(i), dy.sample(i) + pa, da.sample(i));
        std::copy(dy.sample(i) + pa, dy.sample(i) + pa + pb, db.sample(i));
    }
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "add_inplace: shape mismatch");
    for (size_t i = 0; i < a.size(); ++i) a.v[i] += b.v[i];
}

// Sinusoidal timestep embedding, dim must be even.
template <typename T>
Tensor<T> timestep_embedding(const std::vector<int>& ts, int dim) {
    const int half = dim / 2;
    Tensor<T> e = Tensor<T>::vec(int(ts.size()), dim);
    for (size_t i = 0; i < ts.size(); ++i) {
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * double(j) / double(half));
            e.v[i * dim + j] = T(std::sin(double(ts[i]) * freq));
            e.v[i * dim + half + j] = T(std::cos(double(ts[i]) * freq));
        }
    }
    return e;
}

// Mean cross-entropy over rows of logits; writes d(logits) scaled by 1/N.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                             std::type_identity_t<Tensor<T>*> dlogits) {
    const int n = logits.n, k = logits.per_sample();
    double loss = 0.0;
    if (dlogits) *dlogits = zeros_like(logits);
    for (int i = 0; i < n; ++i) {
        const T* row = logits.sample(i);
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, double(row[j]));
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(double(row[j]) - mx);
        const double logz = std::log(z) + mx;
        loss += logz - double(row[labels[i]]);
        if (dlogits) {
            T* drow = dlogits->sample(i);
            for (int j = 0; j < k; ++j) {
                const double p = std::exp(double(row[j]) - logz);
                drow[j] = T((p - (j == labels[i] ? 1.0 : 0.0)) / double(n));
            }
        }
    }
    return loss / double(n);
}

}  // namespace cldis::nn
