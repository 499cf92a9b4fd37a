#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cldis/diffusion.hpp"
#include "test_support.hpp"

using namespace cldis;
using namespace cldis::diff;

namespace {

DenoiserConfig tiny_denoiser_cfg() {
    DenoiserConfig c;
    c.img = 16;
    c.c1 = 8;
    c.c2 = 8;
    c.c3 = 8;
    c.emb = 16;
    c.t_embed = 8;
    c.d_latent = 6;
    c.groups = 4;
    return c;
}

}  // namespace

TEST_CASE("linear schedule values") {
    const auto s1 = make_linear_schedule(1, 0.1, 0.1);
    CHECK(s1.alpha_bar.size() == 1);
    CHECK(s1.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-12));

    const auto s2 = make_linear_schedule(2, 0.1, 0.1);
    CHECK(s2.alpha_bar[1] == doctest::Approx(0.81).epsilon(1e-12));

    const auto s = make_linear_schedule(1000, 1e-4, 0.02);
    for (int t = 1; t < s.T; ++t) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    for (int t = 0; t < s.T; ++t) {
        CHECK(s.beta[t] > 0.0);
        CHECK(s.beta[t] < 1.0);
        CHECK(s.sigma[t] == 0.0);
    }
    CHECK(s.alpha_bar[0] == s.alpha[0]);

    CHECK_THROWS_AS(make_linear_schedule(0, 0.1, 0.2), PreconditionError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.2), PreconditionError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.3, 0.2), PreconditionError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.3, 1.0), PreconditionError);
}

TEST_CASE("forward diffuse closed form") {
    Rng rng(3);
    const auto s = make_linear_schedule(1000, 1e-4, 0.02);
    Tensor<float> x0(2, 3, 8, 8);
    rng.fill_uniform(x0.data(), x0.size(), 0.0, 1.0);

    // eps = 0 -> sqrt(ab) * x0
    Tensor<float> zero = zeros_like(x0);
    const int t = 400;
    const auto xt = forward_diffuse(x0, t, zero, s);
    const float a = float(std::sqrt(s.alpha_bar[t]));
    for (size_t i = 0; i < x0.size(); ++i) CHECK(xt.v[i] == doctest::Approx(a * x0.v[i]).epsilon(1e-6));

    // large t -> x_t ~ eps
    Tensor<float> eps = zeros_like(x0);
    rng.fill_normal(eps.data(), eps.size());
    const auto xT = forward_diffuse(x0, s.T - 1, eps, s);
    double worst = 0.0;
    for (size_t i = 0; i < x0.size(); ++i) worst = std::max(worst, std::abs(double(xT.v[i]) - eps.v[i]));
    CHECK(worst < 0.02);

    // ab = 0.36 -> x_t = 0.8 with x0 = 0, eps = 1
    const auto s36 = make_linear_schedule(1, 0.64, 0.64);
    Tensor<float> ones = zeros_like(x0);
    std::fill(ones.v.begin(), ones.v.end(), 1.0f);
    const auto x36 = forward_diffuse(zeros_like(x0), 0, ones, s36);
    for (float v : x36.v) CHECK(v == doctest::Approx(0.8f).epsilon(1e-6));

    Tensor<float> bad(2, 3, 8, 7);
    CHECK_THROWS_AS(forward_diffuse(x0, 10, bad, s), PreconditionError);
}

TEST_CASE("predict_x0 inverts the forward closed form") {
    Rng rng(5);
    const auto s = make_linear_schedule(1000, 1e-4, 0.02);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<float> x0(1, 3, 8, 8), eps = zeros_like(x0);
        rng.fill_uniform(x0.data(), x0.size(), 0.0, 1.0);
        rng.fill_normal(eps.data(), eps.size());
        const int t = int(rng.uniform_int(uint64_t(s.T)));
        const auto xt = forward_diffuse(x0, t, eps, s);
        const auto rec = predict_x0(xt, eps, t, s);
        for (size_t i = 0; i < x0.size(); ++i) worst = std::max(worst, std::abs(double(rec.v[i]) - x0.v[i]));
    }
    CHECK(worst < 1e-4);

    // eps_hat = 0 -> x_t / sqrt(ab)
    Tensor<float> xt(1, 1, 4, 4);
    Rng r2(6);
    r2.fill_normal(xt.data(), xt.size());
    const auto out = predict_x0(xt, zeros_like(xt), 700, s);
    const float inv = float(1.0 / std::sqrt(s.alpha_bar[700]));
    for (size_t i = 0; i < xt.size(); ++i) CHECK(out.v[i] == doctest::Approx(xt.v[i] * inv).epsilon(1e-6));
}

TEST_CASE("ddim step semantics") {
    Rng rng(7);
    const auto s = make_linear_schedule(1000, 1e-4, 0.02);
    Tensor<float> x0(1, 3, 8, 8), eps = zeros_like(x0);
    rng.fill_uniform(x0.data(), x0.size(), 0.0, 1.0);
    rng.fill_normal(eps.data(), eps.size());

    // t_prev = -1 (alpha_bar = 1) returns the x0 prediction exactly
    const int t = 500;
    const auto xt = forward_diffuse(x0, t, eps, s);
    const auto direct = predict_x0(xt, eps, t, s);
    const auto stepped = ddim_step(xt, eps, t, -1, s);
    for (size_t i = 0; i < x0.size(); ++i)
        CHECK(stepped.v[i] == doctest::Approx(direct.v[i]).epsilon(1e-5));

    // oracle eps reproduces the forward trajectory point at t_prev
    const int t_prev = 230;
    const auto expect = forward_diffuse(x0, t_prev, eps, s);
    const auto got = ddim_step(xt, eps, t, t_prev, s);
    for (size_t i = 0; i < x0.size(); ++i) CHECK(got.v[i] == doctest::Approx(expect.v[i]).epsilon(2e-4));

    CHECK_THROWS_AS(ddim_step(xt, eps, 100, 100, s), PreconditionError);
    CHECK_THROWS_AS(ddim_step(xt, eps, 100, 200, s), PreconditionError);
}

TEST_CASE("full reverse pass with oracle noise recovers x0") {
    // double precision: the chain multiplies float rounding by prod sqrt(ab_prev/ab_t)
    Rng rng(9);
    const auto s = make_linear_schedule(1000, 1e-4, 0.02);
    Tensor<double> x0(1, 3, 8, 8), eps = zeros_like(x0);
    rng.fill_uniform(x0.data(), x0.size(), 0.0, 1.0);
    rng.fill_normal(eps.data(), eps.size());

    Tensor<double> x = forward_diffuse(x0, s.T - 1, eps, s);
    for (int t = s.T - 1; t >= 0; --t) x = ddim_step(x, eps, t, t - 1, s);
    double worst = 0.0;
    for (size_t i = 0; i < x0.size(); ++i) worst = std::max(worst, std::abs(x.v[i] - x0.v[i]));
    CHECK(worst < 1e-4);

    // strided 50-step pass in float stays well-behaved
    Tensor<float> x0f(1, 3, 8, 8), epsf = zeros_like(x0f);
    Rng rng2(10);
    rng2.fill_uniform(x0f.data(), x0f.size(), 0.0, 1.0);
    rng2.fill_normal(epsf.data(), epsf.size());
    Tensor<float> xf = forward_diffuse(x0f, s.T - 1, epsf, s);
    const auto steps = strided_step_schedule(s.T, 50);
    for (size_t i = 0; i < steps.size(); ++i)
        xf = ddim_step(xf, epsf, steps[i], i + 1 < steps.size() ? steps[i + 1] : -1, s);
    double worstf = 0.0;
    for (size_t i = 0; i < x0f.size(); ++i)
        worstf = std::max(worstf, std::abs(double(xf.v[i]) - x0f.v[i]));
    CHECK(worstf < 1e-3);
}

TEST_CASE("semantic encoder determinism, width, batching") {
    Rng rng(11);
    EncoderConfig ec;
    SemanticEncoder<float> enc;
    enc.init(ec, rng);
    Tensor<float> batch(3, 3, 32, 32);
    rng.fill_uniform(batch.data(), batch.size(), 0.0, 1.0);

    const auto z1 = encode_semantic(enc, batch);
    const auto z2 = encode_semantic(enc, batch);
    CHECK(z1.per_sample() == 32);
    CHECK(z1.v == z2.v);

    for (int i = 0; i < batch.n; ++i) {
        const auto zi = encode_semantic(enc, batch.slice(i, 1));
        for (int d = 0; d < 32; ++d) CHECK(zi.v[size_t(d)] == z1.sample(i)[d]);
    }

    Tensor<float> bad(1, 3, 16, 16);
    CHECK_THROWS_AS(encode_semantic(enc, bad), PreconditionError);
}

TEST_CASE("sampler is deterministic and finite on an untrained model") {
    Rng rng(13);
    DenoiserConfig dc = tiny_denoiser_cfg();
    ConditionalDenoiser<float> den;
    den.init(dc, rng);
    const auto s = make_linear_schedule(100, 1e-4, 0.02);
    const auto steps = strided_step_schedule(100, 10);

    Tensor<float> z(1, dc.d_latent, 1, 1), xT(1, 3, 16, 16);
    rng.fill_normal(z.data(), z.size());
    rng.fill_normal(xT.data(), xT.size());

    const auto a = sample(den, z, xT, steps, s);
    const auto b = sample(den, z, xT, steps, s);
    CHECK(a.v == b.v);
    CHECK(a.finite());
    CHECK(a.same_shape(xT));

    CHECK_THROWS_AS(sample(den, z, xT, {}, s), PreconditionError);
    CHECK_THROWS_AS(sample(den, z, xT, {50, 10}, s), PreconditionError);
}

TEST_CASE("denoising loss basics") {
    Rng rng(17);
    DenoiserConfig dc = tiny_denoiser_cfg();
    ConditionalDenoiser<float> den;
    den.init(dc, rng);
    const auto s = make_linear_schedule(100, 1e-4, 0.02);

    Tensor<float> x0(2, 3, 16, 16), z(2, dc.d_latent, 1, 1);
    rng.fill_uniform(x0.data(), x0.size(), 0.0, 1.0);
    rng.fill_normal(z.data(), z.size());
    const std::vector<int> ts = {10, 70};

    // zero-initialized output head predicts exactly 0, so eps = 0 gives loss 0
    const double l0 = denoising_loss(den, x0, z, ts, zeros_like(x0), s);
    CHECK(l0 == 0.0);

    Tensor<float> eps = zeros_like(x0);
    rng.fill_normal(eps.data(), eps.size());
    CHECK(denoising_loss(den, x0, z, ts, eps, s) >= 0.0);
}

TEST_CASE("denoising loss gradient matches finite differences") {
    Rng rng(19);
    DenoiserConfig dc = tiny_denoiser_cfg();
    ConditionalDenoiser<double> den;
    den.init(dc, rng);
    // move zero-initialized heads off zero so every path carries gradient
    nn::ParamRefs<double> ps;
    den.collect(ps);
    for (auto* p : ps)
        for (auto& w : p->w)
            if (w == 0.0) w = 0.01 * rng.normal();

    const auto s = make_linear_schedule(50, 1e-4, 0.02);
    Tensor<double> x0(2, 3, 16, 16), z(2, dc.d_latent, 1, 1), eps(2, 3, 16, 16);
    rng.fill_uniform(x0.data(), x0.size(), 0.0, 1.0);
    rng.fill_normal(z.data(), z.size());
    rng.fill_normal(eps.data(), eps.size());
    const std::vector<int> ts = {5, 40};

    Tensor<double> dz = Tensor<double>::vec(2, dc.d_latent);
    denoising_loss_backward(den, x0, z, ts, eps, s, dz);
    auto grads = testutil::snapshot_grads(ps);

    auto loss = [&] { return denoising_loss(den, x0, z, ts, eps, s); };
    Rng pick(23);
    CHECK(testutil::max_rel_grad_error(loss, ps, grads, pick, 3) < 1e-3);

    // latent gradient
    Rng pick2(29);
    for (int i = 0; i < 8; ++i) {
        const size_t j = size_t(pick2.uniform_int(z.size()));
        const double keep = z.v[j], d = 1e-5;
        z.v[j] = keep + d;
        const double fp = loss();
        z.v[j] = keep - d;
        const double fm = loss();
        z.v[j] = keep;
        const double fd = (fp - fm) / (2 * d);
        CHECK(std::abs(fd - dz.v[j]) / std::max({std::abs(fd), std::abs(dz.v[j]), 1e-6}) < 1e-3);
    }
}

TEST_CASE("gradients flow through the sampler chain") {
    Rng rng(31);
    DenoiserConfig dc = tiny_denoiser_cfg();
    ConditionalDenoiser<double> den;
    den.init(dc, rng);
    nn::ParamRefs<double> ps;
    den.collect(ps);
    for (auto* p : ps)
        for (auto& w : p->w)
            if (w == 0.0) w = 0.02 * rng.normal();

    const auto s = make_linear_schedule(40, 1e-3, 0.05);
    const std::vector<int> steps = {30, 15, 0};
    Tensor<double> z(1, dc.d_latent, 1, 1), xT(1, 3, 16, 16);
    rng.fill_normal(z.data(), z.size());
    rng.fill_normal(xT.data(), xT.size());
    Tensor<double> coeff(1, 3, 16, 16);
    rng.fill_normal(coeff.data(), coeff.size());

    auto loss = [&] {
        const auto y = sample(den, z, xT, steps, s);
        double acc = 0.0;
        for (size_t i = 0; i < y.size(); ++i) acc += y.v[i] * coeff.v[i];
        return acc;
    };

    sample_grad(den, z, xT, steps, s);
    Tensor<double> dz = Tensor<double>::vec(1, dc.d_latent);
    sample_backward(den, coeff, steps, s, dz);

    for (int i = 0; i < dc.d_latent; ++i) {
        const double keep = z.v[i], d = 1e-5;
        z.v[i] = keep + d;
        const double fp = loss();
        z.v[i] = keep - d;
        const double fm = loss();
        z.v[i] = keep;
        const double fd = (fp - fm) / (2 * d);
        CHECK(std::abs(fd - dz.v[i]) / std::max({std::abs(fd), std::abs(dz.v[i]), 1e-6}) < 1e-3);
    }
}
