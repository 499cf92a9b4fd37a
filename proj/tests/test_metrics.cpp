#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cldis/metrics.hpp"
#include "test_support.hpp"

using namespace cldis;
using namespace cldis::metrics;

namespace {

Tensor<float> square_image(int ox, int oy = 0, float value = 1.0f) {
    Tensor<float> img(1, 3, 32, 32);
    for (int c = 0; c < 3; ++c)
        for (int y = 10 + oy; y < 22 + oy; ++y)
            for (int x = 10 + ox; x < 22 + ox; ++x) img.at(0, c, y, x) = value;
    return img;
}

}  // namespace

TEST_CASE("flow of identical images is zero") {
    Rng rng(1);
    Tensor<float> a(1, 3, 32, 32);
    rng.fill_uniform(a.data(), a.size(), 0.0, 1.0);
    const auto f = estimate_flow(a, a);
    CHECK(f.max_norm() < 1e-6);
    CHECK(flow_ratio_metric(a, a, 0.5) == 0.0);

    Tensor<float> bad(1, 3, 32, 16);
    CHECK_THROWS_AS(estimate_flow(a, bad), PreconditionError);
}

TEST_CASE("2px translation is recovered within half a pixel") {
    const auto a = square_image(0), b = square_image(2);
    const auto f = estimate_flow(a, b);
    double su = 0.0, sv = 0.0;
    int cnt = 0;
    for (int y = 10; y < 22; ++y)
        for (int x = 10; x < 24; ++x) {  // union of source and target squares
            su += f.u[size_t(y) * 32 + x];
            sv += f.v[size_t(y) * 32 + x];
            ++cnt;
        }
    const double mu = su / cnt, mv = sv / cnt;
    CHECK(std::hypot(mu - 2.0, mv) < 0.5);
}

TEST_CASE("flow antisymmetry under argument swap") {
    const auto a = square_image(0, 0), b = square_image(2, 1);
    const auto fab = estimate_flow(a, b);
    const auto fba = estimate_flow(b, a);
    double asym = 0.0;
    int cnt = 0;
    for (int y = 10; y < 23; ++y)
        for (int x = 10; x < 24; ++x) {
            const size_t i = size_t(y) * 32 + x;
            asym += std::hypot(fab.u[i] + fba.u[i], fab.v[i] + fba.v[i]);
            ++cnt;
        }
    CHECK(asym / cnt < 0.5);
}

TEST_CASE("normalize_flow contract") {
    FlowField f;
    f.h = 4;
    f.w = 4;
    f.u.assign(16, 0.0);
    f.v.assign(16, 0.0);
    f.u[3] = 4.0;         // max norm 4
    f.u[5] = 1.0;
    f.v[5] = 1.0;
    const auto n = normalize_flow(f);
    CHECK(n.max_norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(n.u[3] == doctest::Approx(1.0));
    // direction preserved where the norm is positive
    const double cos5 = (n.u[5] * f.u[5] + n.v[5] * f.v[5]) / (n.norm_at(5) * f.norm_at(5));
    CHECK(cos5 == doctest::Approx(1.0).epsilon(1e-12));

    FlowField zero;
    zero.h = 2;
    zero.w = 2;
    zero.u.assign(4, 0.0);
    zero.v.assign(4, 0.0);
    const auto nz = normalize_flow(zero);
    CHECK(nz.max_norm() == 0.0);  // guarded degenerate case
}

TEST_CASE("constructed 10% moving field scores 1/9 at threshold 0.5") {
    FlowField f;
    f.h = 10;
    f.w = 10;
    f.u.assign(100, 0.0);
    f.v.assign(100, 0.0);
    for (int i = 0; i < 10; ++i) f.u[size_t(i) * 10 + i] = 3.0;  // 10% of pixels carry max flow
    const double score = flow_ratio_from_normalized(normalize_flow(f), 0.5);
    CHECK(score == doctest::Approx(0.1 / 0.9).epsilon(1e-9));
    CHECK(std::abs(score - 0.111) < 0.01);

    // all pixels above threshold -> S = 0 -> infinity sentinel
    FlowField all;
    all.h = 2;
    all.w = 2;
    all.u.assign(4, 2.0);
    all.v.assign(4, 0.0);
    CHECK(std::isinf(flow_ratio_from_normalized(normalize_flow(all), 0.5)));
}

TEST_CASE("flow ratio is nonincreasing in the threshold") {
    const auto a = square_image(0), b = square_image(2, 1);
    const auto nf = normalize_flow(estimate_flow(a, b));
    double prev = std::numeric_limits<double>::infinity();
    for (double tau : {0.1, 0.25, 0.5, 0.75, 0.9}) {
        const double s = flow_ratio_from_normalized(nf, tau);
        CHECK(s <= prev + 1e-12);
        prev = s;
    }
    CHECK_THROWS_AS(flow_ratio_from_normalized(nf, 0.0), PreconditionError);
    CHECK_THROWS_AS(flow_ratio_from_normalized(nf, 1.0), PreconditionError);
}

TEST_CASE("average flow metric") {
    std::vector<double> scores = {0.1, 0.3};
    const auto r = average_flow_scores(scores);
    CHECK(r.mean == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(r.threshold == 0.5);  // default is the paper's static threshold

    std::vector<double> with_inf = {0.1, std::numeric_limits<double>::infinity(), 0.3};
    const auto r2 = average_flow_scores(with_inf);
    CHECK(r2.mean == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(r2.infinite_count == 1);
    CHECK(r2.finite_count == 2);

    CHECK_THROWS_AS(average_flow_scores({}), PreconditionError);

    // identical pairs -> 0
    Tensor<float> img = square_image(0);
    std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
    for (int i = 0; i < 5; ++i) pairs.emplace_back(img, img);
    CHECK(average_flow_metric(pairs).mean == 0.0);
}

TEST_CASE("factor vae score: oracle near 1, noise near chance") {
    const auto ds = data::generate(data::default_spec(), data::Exhaustive{});

    const double oracle = factor_vae_score(oracle_encoder(ds), ds, 400, 64, 7);
    CHECK(oracle >= 0.98);

    const double noise = factor_vae_score(noise_encoder(8, 3), ds, 400, 64, 7);
    CHECK(noise == doctest::Approx(1.0 / 5.0).epsilon(0.5));  // 0.2 +- 0.1
    CHECK(std::abs(noise - 0.2) <= 0.1);

    // constant encoder has no usable dimension
    auto constant = [](const Tensor<float>& b) { return Tensor<float>::vec(b.n, 4); };
    CHECK_THROWS_AS(factor_vae_score(constant, ds, 10, 8, 1), PreconditionError);
}

TEST_CASE("dci disentanglement oracle cases") {
    const auto ds = data::generate(data::default_spec(), data::Sampled{600, 13});
    const int nf = ds.spec.n_factors();

    // identity mapping: latents = factors
    Tensor<float> ident = Tensor<float>::vec(int(ds.size()), nf);
    for (size_t i = 0; i < ds.size(); ++i)
        for (int f = 0; f < nf; ++f) ident.sample(int(i))[f] = float(ds.factor_row(i)[f]);
    const auto ro = dci_disentanglement(ident, ds.factors, nf);
    CHECK(ro.disentanglement >= 0.95);
    CHECK_FALSE(ro.degenerate);

    // dense rotation mixes factors and must score strictly lower
    Rng rng(17);
    std::vector<double> rot(size_t(nf) * nf);
    rng.fill_normal(rot.data(), rot.size());
    Tensor<float> mixed = Tensor<float>::vec(int(ds.size()), nf);
    for (size_t i = 0; i < ds.size(); ++i)
        for (int a = 0; a < nf; ++a) {
            double acc = 0.0;
            for (int b = 0; b < nf; ++b) acc += rot[size_t(a) * nf + b] * ds.factor_row(i)[b];
            mixed.sample(int(i))[a] = float(acc);
        }
    const auto rm = dci_disentanglement(mixed, ds.factors, nf);
    CHECK(rm.disentanglement < ro.disentanglement);

    // pure noise latents -> degenerate warning
    Tensor<float> noise = Tensor<float>::vec(int(ds.size()), 8);
    rng.fill_normal(noise.data(), noise.size());
    const auto rn = dci_disentanglement(noise, ds.factors, nf);
    CHECK(rn.degenerate);
    CHECK(rn.disentanglement < ro.disentanglement);

    // permutation invariance of the score
    Tensor<float> perm = Tensor<float>::vec(int(ds.size()), nf);
    const int order[5] = {3, 0, 4, 1, 2};
    for (size_t i = 0; i < ds.size(); ++i)
        for (int f = 0; f < nf; ++f) perm.sample(int(i))[f] = ident.sample(int(i))[order[f]];
    const auto rp = dci_disentanglement(perm, ds.factors, nf);
    CHECK(rp.disentanglement == doctest::Approx(ro.disentanglement).epsilon(1e-9));

    Tensor<float> small = Tensor<float>::vec(50, nf);
    CHECK_THROWS_AS(dci_disentanglement(small, std::vector<int32_t>(250), nf), PreconditionError);
}

TEST_CASE("locality heatmap basics") {
    Rng rng(23);
    diff::DenoiserConfig dc;
    dc.img = 16;
    dc.c1 = 8;
    dc.c2 = 8;
    dc.c3 = 8;
    dc.emb = 16;
    dc.t_embed = 8;
    dc.d_latent = 6;
    dc.groups = 4;
    diff::ConditionalDenoiser<float> den;
    den.init(dc, rng);
    const auto sched = diff::make_linear_schedule(50, 1e-4, 0.02);
    const auto steps = diff::strided_step_schedule(50, 5);

    Tensor<float> z(1, 6, 1, 1), xT(1, 3, 16, 16);
    rng.fill_normal(z.data(), z.size());
    rng.fill_normal(xT.data(), xT.size());
    std::vector<float> dir(6, 0.0f);
    dir[2] = 1.0f;

    // all magnitudes zero -> all-zero heatmap
    const auto zero_heat = locality_heatmap(den, sched, steps, z, dir, xT, {0.0, 0.0, 0.0});
    for (double v : zero_heat) CHECK(v == 0.0);

    const auto heat = locality_heatmap(den, sched, steps, z, dir, xT, {-2.0, -1.0, 1.0, 2.0});
    CHECK(heat.size() == 16 * 16);
    for (double v : heat) CHECK(v >= 0.0);
}
