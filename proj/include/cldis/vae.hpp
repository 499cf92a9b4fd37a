#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cldis/nn.hpp"
#include "cldis/rng.hpp"

namespace cldis::vae {

template <typename T>
struct GaussianPosterior {
    Tensor<T> mu;      // [N, D]
    Tensor<T> logvar;  // [N, D]
};

struct VaeConfig {
    int in_c = 3, img = 32;
    int c1 = 32, c2 = 64, c3 = 64;
    int fc = 128;
    int d_latent = 32;
    double beta = 4.0;
};

// Gaussian encoder / decoder pair with an isotropic unit Gaussian prior.
// The decoder exists only to train the co-pilot and is discarded at inference.
template <typename T>
struct VaeModel {
    VaeConfig cfg;
    // encoder
    nn::Conv2d<T> e_conv1, e_conv2, e_conv3;
    nn::SiLU<T> e_a1, e_a2, e_a3, e_a4;
    nn::Linear<T> e_fc, e_head;  // head emits [mu | logvar]
    // decoder
    nn::Linear<T> d_fc1, d_fc2;
    nn::SiLU<T> d_a1, d_a2, d_a3, d_a4;
    nn::Upsample2x<T> d_up1, d_up2, d_up3;
    nn::Conv2d<T> d_conv1, d_conv2, d_conv3, d_out;

    void init(const VaeConfig& c, Rng& rng, const std::string& name = "vae") {
        cfg = c;
        e_conv1.init(c.in_c, c.c1, 3, 2, 1, rng, name + ".e1");
        e_conv2.init(c.c1, c.c2, 3, 2, 1, rng, name + ".e2");
        e_conv3.init(c.c2, c.c3, 3, 2, 1, rng, name + ".e3");
        const int side = c.img / 8;
        e_fc.init(c.c3 * side * side, c.fc, rng, name + ".efc");
        e_head.init(c.fc, 2 * c.d_latent, rng, name + ".ehead");
        d_fc1.init(c.d_latent, c.fc, rng, name + ".dfc1");
        d_fc2.init(c.fc, c.c3 * side * side, rng, name + ".dfc2");
        d_conv1.init(c.c3, c.c2, 3, 1, 1, rng, name + ".d1");
        d_conv2.init(c.c2, c.c1, 3, 1, 1, rng, name + ".d2");
        d_conv3.init(c.c1, c.c1, 3, 1, 1, rng, name + ".d3");
        d_out.init(c.c1, c.in_c, 3, 1, 1, rng, name + ".dout");
    }

    Tensor<T> encode_raw(const Tensor<T>& x, bool g = true) {
        require(x.c == cfg.in_c && x.h == cfg.img && x.w == cfg.img, "vae_encode: bad input shape");
        Tensor<T> h = e_a1.forward(e_conv1.forward(x, g), g);
        h = e_a2.forward(e_conv2.forward(h, g), g);
        h = e_a3.forward(e_conv3.forward(h, g), g);
        Tensor<T> flat = Tensor<T>::vec(h.n, h.per_sample());
        flat.v = h.v;
        return e_head.forward(e_a4.forward(e_fc.forward(flat, g), g), g);
    }

    Tensor<T> encode_backward(const Tensor<T>& dhead) {
        Tensor<T> dflat = e_fc.backward(e_a4.backward(e_head.backward(dhead)));
        const int side = cfg.img / 8;
        Tensor<T> dh(dflat.n, cfg.c3, side, side);
        dh.v = dflat.v;
        dh = e_conv3.backward(e_a3.backward(dh));
        dh = e_conv2.backward(e_a2.backward(dh));
        return e_conv1.backward(e_a1.backward(dh));
    }

    Tensor<T> decode(const Tensor<T>& z, bool g = true) {
        require(z.per_sample() == cfg.d_latent, "decode: bad latent width");
        Tensor<T> h2 = d_fc2.forward(d_a1.forward(d_fc1.forward(z, g), g), g);
        const int side = cfg.img / 8;
        Tensor<T> h(h2.n, cfg.c3, side, side);
        h.v = h2.v;
        h = d_a2.forward(d_conv1.forward(d_up1.forward(h, g), g), g);
        h = d_a3.forward(d_conv2.forward(d_up2.forward(h, g), g), g);
        h = d_a4.forward(d_conv3.forward(d_up3.forward(h, g), g), g);
        return d_out.forward(h, g);
    }

    Tensor<T> decode_backward(const Tensor<T>& dxhat) {
        Tensor<T> dh = d_out.backward(dxhat);
        dh = d_up3.backward(d_conv3.backward(d_a4.backward(dh)));
        dh = d_up2.backward(d_conv2.backward(d_a3.backward(dh)));
        dh = d_up1.backward(d_conv1.backward(d_a2.backward(dh)));
        Tensor<T> dflat = Tensor<T>::vec(dh.n, dh.per_sample());
        dflat.v = dh.v;
        return d_fc1.backward(d_a1.backward(d_fc2.backward(dflat)));
    }

    void collect(nn::ParamRefs<T>& ps) {
        collect_encoder(ps);
        collect_decoder(ps);
    }
    void collect_encoder(nn::ParamRefs<T>& ps) {
        e_conv1.collect(ps);
        e_conv2.collect(ps);
        e_conv3.collect(ps);
        e_fc.collect(ps);
        e_head.collect(ps);
    }
    void collect_decoder(nn::ParamRefs<T>& ps) {
        d_fc1.collect(ps);
        d_fc2.collect(ps);
        d_conv1.collect(ps);
        d_conv2.collect(ps);
        d_conv3.collect(ps);
        d_out.collect(ps);
    }
};

template <typename T>
GaussianPosterior<T> split_posterior(const Tensor<T>& head, int d) {
    GaussianPosterior<T> p;
    p.mu = Tensor<T>::vec(head.n, d);
    p.logvar = Tensor<T>::vec(head.n, d);
    for (int i = 0; i < head.n; ++i) {
        const T* h = head.sample(i);
        std::copy(h, h + d, p.mu.sample(i));
        std::copy(h + d, h + 2 * d, p.logvar.sample(i));
    }
    return p;
}

template <typename T>
GaussianPosterior<T> vae_encode(VaeModel<T>& model, const Tensor<T>& x) {
    return split_posterior(model.encode_raw(x, /*g=*/false), model.cfg.d_latent);
}

// z = mu + exp(logvar / 2) * eps
template <typename T>
Tensor<T> reparameterize(const GaussianPosterior<T>& post, const Tensor<T>& eps) {
    require(post.mu.same_shape(eps), "reparameterize: eps shape mismatch");
    Tensor<T> z = zeros_like(post.mu);
    for (size_t i = 0; i < z.size(); ++i)
        z.v[i] = post.mu.v[i] + std::exp(post.logvar.v[i] / T(2)) * eps.v[i];
    return z;
}

// 0.5 sum_d (mu^2 + e^logvar - logvar - 1) per sample, averaged over the batch.
template <typename T>
double kl_to_standard_normal(const GaussianPosterior<T>& post) {
    double acc = 0.0;
    for (size_t i = 0; i < post.mu.size(); ++i) {
        const double m = double(post.mu.v[i]);
        const double lv = double(post.logvar.v[i]);
        acc += 0.5 * (m * m + std::exp(lv) - lv - 1.0);
    }
    return acc / double(post.mu.n);
}

template <typename T>
struct VaeLossParts {
    double total = 0.0, recon = 0.0, kl = 0.0;
};

namespace detail {

// Shared forward pass; fills intermediates needed by the analytic backward.
template <typename T>
struct VaeForward {
    GaussianPosterior<T> post;
    Tensor<T> z, xhat;
    double recon = 0.0, kl = 0.0;
};

// Reconstruction is the unit-variance Gaussian NLL with constants dropped:
// 0.5 * sum of squared errors per image, averaged over the batch.
template <typename T>
VaeForward<T> vae_forward(VaeModel<T>& model, const Tensor<T>& x, const Tensor<T>& eps, bool g) {
    VaeForward<T> f;
    f.post = split_posterior(model.encode_raw(x, g), model.cfg.d_latent);
    f.z = reparameterize(f.post, eps);
    f.xhat = model.decode(f.z, g);
    double se = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double d = double(f.xhat.v[i]) - double(x.v[i]);
        se += d * d;
    }
    f.recon = 0.5 * se / double(x.n);
    f.kl = kl_to_standard_normal(f.post);
    return f;
}

// Backprop for recon + kl_weight * |kl - C| style objectives, where the kl
// term's derivative w.r.t. kl is `dkl_sign * kl_weight`.
template <typename T>
void vae_backward(VaeModel<T>& model, const Tensor<T>& x, const Tensor<T>& eps, VaeForward<T>& f,
                  double kl_coeff) {
    const int d = model.cfg.d_latent;
    const T inv_n = T(1.0 / double(x.n));
    Tensor<T> dxhat = zeros_like(f.xhat);
    for (size_t i = 0; i < x.size(); ++i) dxhat.v[i] = (f.xhat.v[i] - x.v[i]) * inv_n;
    Tensor<T> dz = model.decode_backward(dxhat);

    Tensor<T> dhead = Tensor<T>::vec(x.n, 2 * d);
    for (int i = 0; i < x.n; ++i) {
        const T* mu = f.post.mu.sample(i);
        const T* lv = f.post.logvar.sample(i);
        const T* ep = eps.sample(i);
        const T* dzi = dz.sample(i);
        T* dh = dhead.sample(i);
        for (int j = 0; j < d; ++j) {
            const T sigma = std::exp(lv[j] / T(2));
            // mu: recon path + kl path (d kl / d mu = mu / N)
            dh[j] = dzi[j] + T(kl_coeff) * mu[j] * inv_n;
            // logvar: recon path via z = mu + sigma*eps, kl path 0.5(e^lv - 1)/N
            dh[d + j] = dzi[j] * ep[j] * sigma / T(2) + T(kl_coeff) * T(0.5) * (std::exp(lv[j]) - T(1)) * inv_n;
        }
    }
    model.encode_backward(dhead);
}

}  // namespace detail

// Eq. 1 objective: recon + beta * KL. Gradients accumulate when grad is set.
template <typename T>
VaeLossParts<T> beta_vae_loss(VaeModel<T>& model, const Tensor<T>& x, const Tensor<T>& eps,
                              bool grad = false) {
    auto f = detail::vae_forward(model, x, eps, grad);
    VaeLossParts<T> parts;
    parts.recon = f.recon;
    parts.kl = f.kl;
    parts.total = f.recon + model.cfg.beta * f.kl;
    if (grad) detail::vae_backward(model, x, eps, f, model.cfg.beta);
    return parts;
}

// Eq. 2 objective: recon + beta * |KL - C|.
template <typename T>
VaeLossParts<T> capacity_loss(VaeModel<T>& model, const Tensor<T>& x, const Tensor<T>& eps, double c,
                              bool grad = false) {
    require(c >= 0.0, "capacity_loss: C must be nonnegative");
    auto f = detail::vae_forward(model, x, eps, grad);
    VaeLossParts<T> parts;
    parts.recon = f.recon;
    parts.kl = f.kl;
    parts.total = f.recon + model.cfg.beta * std::abs(f.kl - c);
    if (grad) {
        const double sign = f.kl > c ? 1.0 : (f.kl < c ? -1.0 : 0.0);
        detail::vae_backward(model, x, eps, f, model.cfg.beta * sign);
    }
    return parts;
}

}  // namespace cldis::vae
