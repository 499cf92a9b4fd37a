#pragma once

#include <string>
#include <vector>

#include "cldis/nn.hpp"
#include "cldis/rng.hpp"
#include "cldis/schedule.hpp"

namespace cldis::diff {

// ---------------------------------------------------------------------------
// Residual block with adaptive group-norm conditioning. The second conv is
// zero-initialized so a fresh block is the identity and conditioning only
// engages as training moves it off zero.
// ---------------------------------------------------------------------------
template <typename T>
struct ResBlock {
    int cin = 0, cout = 0;
    bool has_skip = false;
    nn::GroupNorm<T> gn1, gn2;
    nn::SiLU<T> act1, act2, act_cond;
    nn::Conv2d<T> conv1, conv2, skip;
    nn::Linear<T> emb;
    nn::Film<T> film;

    void init(int cin_, int cout_, int emb_dim, int groups, Rng& rng, const std::string& name) {
        cin = cin_;
        cout = cout_;
        has_skip = cin != cout;
        gn1.init(groups, cin, name + ".gn1");
        gn2.init(groups, cout, name + ".gn2");
        conv1.init(cin, cout, 3, 1, 1, rng, name + ".conv1");
        conv2.init(cout, cout, 3, 1, 1, rng, name + ".conv2", /*zero=*/true);
        emb.init(emb_dim, 2 * cout, rng, name + ".emb");
        if (has_skip) skip.init(cin, cout, 1, 1, 0, rng, name + ".skip");
    }

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& cond, bool g = true) {
        Tensor<T> h = conv1.forward(act1.forward(gn1.forward(x, g), g), g);
        Tensor<T> sb = emb.forward(act_cond.forward(cond, g), g);
        h = conv2.forward(act2.forward(film.forward(gn2.forward(h, g), sb, g), g), g);
        Tensor<T> res = has_skip ? skip.forward(x, g) : x;
        nn::add_inplace(h, res);
        return h;
    }

    Tensor<T> backward(const Tensor<T>& dy, Tensor<T>& dcond) {
        Tensor<T> dh = act2.backward(conv2.backward(dy));
        Tensor<T> dsb;
        dh = film.backward(dh, dsb);
        nn::add_inplace(dcond, act_cond.backward(emb.backward(dsb)));
        Tensor<T> dx = gn1.backward(act1.backward(conv1.backward(gn2.backward(dh))));
        if (has_skip)
            nn::add_inplace(dx, skip.backward(dy));
        else
            nn::add_inplace(dx, dy);
        return dx;
    }

    void collect(nn::ParamRefs<T>& ps) {
        gn1.collect(ps);
        conv1.collect(ps);
        gn2.collect(ps);
        emb.collect(ps);
        conv2.collect(ps);
        if (has_skip) skip.collect(ps);
    }
};

// ---------------------------------------------------------------------------
// Semantic encoder E_sem: four stride-2 conv stages then a linear head.
// ---------------------------------------------------------------------------
struct EncoderConfig {
    int in_c = 3, img = 32;
    int c1 = 32, c2 = 64, c3 = 64, c4 = 64;
    int d_latent = 32;
};

template <typename T>
struct SemanticEncoder {
    EncoderConfig cfg;
    nn::Conv2d<T> conv1, conv2, conv3, conv4;
    nn::SiLU<T> a1, a2, a3, a4;
    nn::Linear<T> head;

    void init(const EncoderConfig& c, Rng& rng, const std::string& name = "enc") {
        cfg = c;
        conv1.init(c.in_c, c.c1, 3, 2, 1, rng, name + ".conv1");
        conv2.init(c.c1, c.c2, 3, 2, 1, rng, name + ".conv2");
        conv3.init(c.c2, c.c3, 3, 2, 1, rng, name + ".conv3");
        conv4.init(c.c3, c.c4, 3, 2, 1, rng, name + ".conv4");
        const int side = c.img / 16;
        head.init(c.c4 * side * side, c.d_latent, rng, name + ".head");
    }

    Tensor<T> forward(const Tensor<T>& x, bool g = true) {
        require(x.c == cfg.in_c && x.h == cfg.img && x.w == cfg.img, "SemanticEncoder: bad input shape");
        Tensor<T> h = a1.forward(conv1.forward(x, g), g);
        h = a2.forward(conv2.forward(h, g), g);
        h = a3.forward(conv3.forward(h, g), g);
        h = a4.forward(conv4.forward(h, g), g);
        Tensor<T> flat = Tensor<T>::vec(h.n, h.per_sample());
        flat.v = h.v;
        return head.forward(flat, g);
    }

    Tensor<T> backward(const Tensor<T>& dz) {
        Tensor<T> dflat = head.backward(dz);
        const int side = cfg.img / 16;
        Tensor<T> dh(dflat.n, cfg.c4, side, side);
        dh.v = dflat.v;
        dh = conv4.backward(a4.backward(dh));
        dh = conv3.backward(a3.backward(dh));
        dh = conv2.backward(a2.backward(dh));
        return conv1.backward(a1.backward(dh));
    }

    void collect(nn::ParamRefs<T>& ps) {
        conv1.collect(ps);
        conv2.collect(ps);
        conv3.collect(ps);
        conv4.collect(ps);
        head.collect(ps);
    }
};

// ---------------------------------------------------------------------------
// Conditional denoiser: 3-level U-Net, FiLM-conditioned on (t, z_sem).
// ---------------------------------------------------------------------------
struct DenoiserConfig {
    int in_c = 3, img = 32;
    int c1 = 16, c2 = 32, c3 = 64;
    int emb = 96, t_embed = 64;
    int d_latent = 32;
    int groups = 8;
};

template <typename T>
struct ConditionalDenoiser {
    DenoiserConfig cfg;
    nn::Conv2d<T> in_conv, down1, down2, upc2, upc1, out_conv;
    ResBlock<T> rb1, rb2, rb3, rbm, rbu2, rbu1;
    nn::Upsample2x<T> ups2, ups1;
    nn::GroupNorm<T> gn_out;
    nn::SiLU<T> act_out;
    nn::Linear<T> t_lin1, t_lin2, z_lin1, z_lin2;
    nn::SiLU<T> t_act, z_act;

    void init(const DenoiserConfig& c, Rng& rng, const std::string& name = "den") {
        cfg = c;
        in_conv.init(c.in_c, c.c1, 3, 1, 1, rng, name + ".in");
        rb1.init(c.c1, c.c1, c.emb, c.groups, rng, name + ".rb1");
        down1.init(c.c1, c.c2, 3, 2, 1, rng, name + ".down1");
        rb2.init(c.c2, c.c2, c.emb, c.groups, rng, name + ".rb2");
        down2.init(c.c2, c.c3, 3, 2, 1, rng, name + ".down2");
        rb3.init(c.c3, c.c3, c.emb, c.groups, rng, name + ".rb3");
        rbm.init(c.c3, c.c3, c.emb, c.groups, rng, name + ".rbm");
        upc2.init(c.c3, c.c2, 3, 1, 1, rng, name + ".upc2");
        rbu2.init(2 * c.c2, c.c2, c.emb, c.groups, rng, name + ".rbu2");
        upc1.init(c.c2, c.c1, 3, 1, 1, rng, name + ".upc1");
        rbu1.init(2 * c.c1, c.c1, c.emb, c.groups, rng, name + ".rbu1");
        gn_out.init(c.groups, c.c1, name + ".gn_out");
        out_conv.init(c.c1, c.in_c, 3, 1, 1, rng, name + ".out", /*zero=*/true);
        t_lin1.init(c.t_embed, c.emb, rng, name + ".t1");
        t_lin2.init(c.emb, c.emb, rng, name + ".t2");
        z_lin1.init(c.d_latent, c.emb, rng, name + ".z1");
        z_lin2.init(c.emb, c.emb, rng, name + ".z2");
    }

    Tensor<T> forward(const Tensor<T>& xt, const std::vector<int>& ts, const Tensor<T>& z, bool g = true) {
        require(xt.c == cfg.in_c && xt.h == cfg.img && xt.w == cfg.img, "denoiser: bad input shape");
        require(z.n == xt.n && z.per_sample() == cfg.d_latent, "denoiser: bad latent shape");
        Tensor<T> temb = nn::timestep_embedding<T>(ts, cfg.t_embed);
        Tensor<T> cond = t_lin2.forward(t_act.forward(t_lin1.forward(temb, g), g), g);
        nn::add_inplace(cond, z_lin2.forward(z_act.forward(z_lin1.forward(z, g), g), g));

        Tensor<T> h0 = in_conv.forward(xt, g);
        Tensor<T> h1 = rb1.forward(h0, cond, g);
        Tensor<T> h2 = rb2.forward(down1.forward(h1, g), cond, g);
        Tensor<T> h3 = rb3.forward(down2.forward(h2, g), cond, g);
        Tensor<T> hm = rbm.forward(h3, cond, g);
        Tensor<T> u2 = upc2.forward(ups2.forward(hm, g), g);
        Tensor<T> hu2 = rbu2.forward(nn::concat_channels(u2, h2), cond, g);
        Tensor<T> u1 = upc1.forward(ups1.forward(hu2, g), g);
        Tensor<T> hu1 = rbu1.forward(nn::concat_channels(u1, h1), cond, g);
        return out_conv.forward(act_out.forward(gn_out.forward(hu1, g), g), g);
    }

    // Returns d(x_t); accumulates d(z) into dz (must be zero-initialized [N, D]).
    Tensor<T> backward(const Tensor<T>& d_eps, Tensor<T>& dz) {
        Tensor<T> d_hu1 = gn_out.backward(act_out.backward(out_conv.backward(d_eps)));
        Tensor<T> dcond = Tensor<T>::vec(d_eps.n, cfg.emb);

        Tensor<T> d_cat1 = rbu1.backward(d_hu1, dcond);
        Tensor<T> d_u1, d_h1a;
        nn::split_channels(d_cat1, d_u1, d_h1a, cfg.c1);
        Tensor<T> d_hu2 = ups1.backward(upc1.backward(d_u1));

        Tensor<T> d_cat2 = rbu2.backward(d_hu2, dcond);
        Tensor<T> d_u2, d_h2a;
        nn::split_channels(d_cat2, d_u2, d_h2a, cfg.c2);
        Tensor<T> d_hm = ups2.backward(upc2.backward(d_u2));

        Tensor<T> d_h3 = rbm.backward(d_hm, dcond);
        Tensor<T> d_d2 = rb3.backward(d_h3, dcond);
        Tensor<T> d_h2 = down2.backward(d_d2);
        nn::add_inplace(d_h2, d_h2a);
        Tensor<T> d_d1 = rb2.backward(d_h2, dcond);
        Tensor<T> d_h1 = down1.backward(d_d1);
        nn::add_inplace(d_h1, d_h1a);
        Tensor<T> d_h0 = rb1.backward(d_h1, dcond);
        Tensor<T> d_xt = in_conv.backward(d_h0);

        nn::add_inplace(dz, z_lin1.backward(z_act.backward(z_lin2.backward(dcond))));
        t_lin1.backward(t_act.backward(t_lin2.backward(dcond)));  // t path: params only
        return d_xt;
    }

    void collect(nn::ParamRefs<T>& ps) {
        in_conv.collect(ps);
        rb1.collect(ps);
        down1.collect(ps);
        rb2.collect(ps);
        down2.collect(ps);
        rb3.collect(ps);
        rbm.collect(ps);
        upc2.collect(ps);
        rbu2.collect(ps);
        upc1.collect(ps);
        rbu1.collect(ps);
        gn_out.collect(ps);
        out_conv.collect(ps);
        t_lin1.collect(ps);
        t_lin2.collect(ps);
        z_lin1.collect(ps);
        z_lin2.collect(ps);
    }
};

// E_sem(x0); deterministic in evaluation mode.
template <typename T>
Tensor<T> encode_semantic(SemanticEncoder<T>& enc, const Tensor<T>& x0) {
    return enc.forward(x0, /*want_grad=*/false);
}

// Mean squared error between eps and the model's prediction at x_t.
template <typename T>
double denoising_loss(ConditionalDenoiser<T>& den, const Tensor<T>& x0, const Tensor<T>& z,
                      const std::vector<int>& ts, const Tensor<T>& eps, const DiffusionSchedule& sched) {
    Tensor<T> xt = forward_diffuse(x0, ts, eps, sched);
    Tensor<T> eh = den.forward(xt, ts, z, /*want_grad=*/false);
    return mse(eh, eps);
}

// Same loss with backprop; parameter grads accumulate in the denoiser and the
// latent gradient accumulates into dz.
template <typename T>
double denoising_loss_backward(ConditionalDenoiser<T>& den, const Tensor<T>& x0, const Tensor<T>& z,
                               const std::vector<int>& ts, const Tensor<T>& eps,
                               const DiffusionSchedule& sched, Tensor<T>& dz) {
    Tensor<T> xt = forward_diffuse(x0, ts, eps, sched);
    Tensor<T> eh = den.forward(xt, ts, z, /*want_grad=*/true);
    const double loss = mse(eh, eps);
    Tensor<T> dm = zeros_like(eh);
    const T scale = T(2.0 / double(eh.size()));
    for (size_t i = 0; i < eh.size(); ++i) dm.v[i] = scale * (eh.v[i] - eps.v[i]);
    den.backward(dm, dz);
    return loss;
}

inline void check_step_schedule(const std::vector<int>& steps) {
    require(!steps.empty(), "sample: empty step schedule");
    require(steps.back() == 0, "sample: step schedule must end at 0");
    for (size_t i = 1; i < steps.size(); ++i)
        require(steps[i] < steps[i - 1], "sample: step schedule must be strictly decreasing");
}

// Deterministic conditional DDIM decode from x_T.
template <typename T>
Tensor<T> sample(ConditionalDenoiser<T>& den, const Tensor<T>& z, const Tensor<T>& x_T,
                 const std::vector<int>& steps, const DiffusionSchedule& sched) {
    check_step_schedule(steps);
    Tensor<T> x = x_T;
    for (size_t i = 0; i < steps.size(); ++i) {
        const int t = steps[i];
        const int t_prev = (i + 1 < steps.size()) ? steps[i + 1] : -1;
        const std::vector<int> ts(size_t(x.n), t);
        Tensor<T> eh = den.forward(x, ts, z, /*want_grad=*/false);
        x = ddim_step(x, eh, t, t_prev, sched);
    }
    return x;
}

// Grad-mode decode: leaves one cache entry per step in the denoiser, to be
// consumed by sample_backward in reverse order.
template <typename T>
Tensor<T> sample_grad(ConditionalDenoiser<T>& den, const Tensor<T>& z, const Tensor<T>& x_T,
                      const std::vector<int>& steps, const DiffusionSchedule& sched) {
    check_step_schedule(steps);
    Tensor<T> x = x_T;
    for (size_t i = 0; i < steps.size(); ++i) {
        const int t = steps[i];
        const int t_prev = (i + 1 < steps.size()) ? steps[i + 1] : -1;
        const std::vector<int> ts(size_t(x.n), t);
        Tensor<T> eh = den.forward(x, ts, z, /*want_grad=*/true);
        x = ddim_step(x, eh, t, t_prev, sched);
    }
    return x;
}

// Backprop through the whole decode chain; accumulates dz, returns d(x_T).
template <typename T>
Tensor<T> sample_backward(ConditionalDenoiser<T>& den, const Tensor<T>& d_out,
                          const std::vector<int>& steps, const DiffusionSchedule& sched, Tensor<T>& dz) {
    Tensor<T> dx = d_out;
    for (size_t ri = steps.size(); ri-- > 0;) {
        const int t = steps[ri];
        const int t_prev = (ri + 1 < steps.size()) ? steps[ri + 1] : -1;
        const double ab_t = sched.ab(t), ab_p = sched.ab(t_prev);
        const double A = std::sqrt(ab_p / ab_t);
        const double B = std::sqrt(1.0 - ab_p) - A * std::sqrt(1.0 - ab_t);
        Tensor<T> deps = zeros_like(dx);
        for (size_t j = 0; j < dx.size(); ++j) deps.v[j] = T(B) * dx.v[j];
        Tensor<T> dx_net = den.backward(deps, dz);
        for (size_t j = 0; j < dx.size(); ++j) dx.v[j] = T(A) * dx.v[j] + dx_net.v[j];
    }
    return dx;
}

}  // namespace cldis::diff
