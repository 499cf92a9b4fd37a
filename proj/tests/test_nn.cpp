#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cldis/adam.hpp"
#include "cldis/nn.hpp"
#include "test_support.hpp"

using namespace cldis;
using namespace cldis::nn;

namespace {

// Scalar loss used to exercise backward paths: weighted sum of outputs.
template <typename Net>
double weighted_sum_loss(Net&& fwd, const Tensor<double>& coeff) {
    Tensor<double> y = fwd();
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) s += y.v[i] * coeff.v[i];
    return s;
}

}  // namespace

TEST_CASE("linear gradcheck") {
    Rng rng(1);
    Linear<double> lin;
    lin.init(7, 5, rng, "lin");
    Tensor<double> x = testutil::random_tensor(3, 7, 1, 1, rng);
    Tensor<double> coeff = testutil::random_tensor(3, 5, 1, 1, rng);

    auto loss = [&] { return weighted_sum_loss([&] { return lin.forward(x, false); }, coeff); };
    Tensor<double> y = lin.forward(x);
    Tensor<double> dx = lin.backward(coeff);

    ParamRefs<double> ps;
    lin.collect(ps);
    auto grads = testutil::snapshot_grads(ps);
    Rng pick(2);
    CHECK(testutil::max_rel_grad_error(loss, ps, grads, pick, 10) < 1e-6);

    // input gradient via FD
    Rng pick2(3);
    for (int s = 0; s < 10; ++s) {
        size_t i = size_t(pick2.uniform_int(x.size()));
        const double keep = x.v[i], d = 1e-5;
        x.v[i] = keep + d;
        const double fp = loss();
        x.v[i] = keep - d;
        const double fm = loss();
        x.v[i] = keep;
        CHECK(std::abs((fp - fm) / (2 * d) - dx.v[i]) < 1e-6);
    }
}

TEST_CASE("conv2d gradcheck stride 1 and 2") {
    for (int stride : {1, 2}) {
        CAPTURE(stride);
        Rng rng(11 + stride);
        Conv2d<double> conv;
        conv.init(3, 4, 3, stride, 1, rng, "conv");
        Tensor<double> x = testutil::random_tensor(2, 3, 8, 8, rng);
        Tensor<double> coeff = testutil::random_tensor(2, 4, conv.out_h(8), conv.out_w(8), rng);

        auto loss = [&] { return weighted_sum_loss([&] { return conv.forward(x, false); }, coeff); };
        conv.forward(x);
        Tensor<double> dx = conv.backward(coeff);

        ParamRefs<double> ps;
        conv.collect(ps);
        auto grads = testutil::snapshot_grads(ps);
        Rng pick(5);
        CHECK(testutil::max_rel_grad_error(loss, ps, grads, pick, 12) < 1e-6);

        Rng pick2(6);
        for (int s = 0; s < 12; ++s) {
            size_t i = size_t(pick2.uniform_int(x.size()));
            const double keep = x.v[i], d = 1e-5;
            x.v[i] = keep + d;
            const double fp = loss();
            x.v[i] = keep - d;
            const double fm = loss();
            x.v[i] = keep;
            CHECK(std::abs((fp - fm) / (2 * d) - dx.v[i]) < 1e-6);
        }
    }
}

TEST_CASE("groupnorm gradcheck") {
    Rng rng(21);
    GroupNorm<double> gn;
    gn.init(2, 6, "gn");
    rng.fill_normal(gn.gamma.w.data(), gn.gamma.w.size(), 0.3, 1.0);
    rng.fill_normal(gn.beta.w.data(), gn.beta.w.size(), 0.3);
    Tensor<double> x = testutil::random_tensor(2, 6, 4, 4, rng);
    Tensor<double> coeff = testutil::random_tensor(2, 6, 4, 4, rng);

    auto loss = [&] { return weighted_sum_loss([&] { return gn.forward(x, false); }, coeff); };
    gn.forward(x);
    Tensor<double> dx = gn.backward(coeff);

    ParamRefs<double> ps;
    gn.collect(ps);
    auto grads = testutil::snapshot_grads(ps);
    Rng pick(7);
    CHECK(testutil::max_rel_grad_error(loss, ps, grads, pick, 10) < 1e-5);

    Rng pick2(8);
    for (int s = 0; s < 15; ++s) {
        size_t i = size_t(pick2.uniform_int(x.size()));
        const double keep = x.v[i], d = 1e-5;
        x.v[i] = keep + d;
        const double fp = loss();
        x.v[i] = keep - d;
        const double fm = loss();
        x.v[i] = keep;
        const double fd = (fp - fm) / (2 * d);
        CHECK(std::abs(fd - dx.v[i]) / std::max({std::abs(fd), std::abs(dx.v[i]), 1e-6}) < 1e-5);
    }
}

TEST_CASE("silu, film, upsample input gradients") {
    Rng rng(31);
    SiLU<double> act;
    Film<double> film;
    Upsample2x<double> up;
    Tensor<double> x = testutil::random_tensor(2, 4, 4, 4, rng);
    Tensor<double> sb = testutil::random_tensor(2, 8, 1, 1, rng, 0.5);
    Tensor<double> coeff = testutil::random_tensor(2, 4, 8, 8, rng);

    auto fwd = [&] { return up.forward(film.forward(act.forward(x, false), sb, false), false); };
    auto loss = [&] { return weighted_sum_loss(fwd, coeff); };

    Tensor<double> y = up.forward(film.forward(act.forward(x), sb));
    Tensor<double> dsb;
    Tensor<double> dx = act.backward(film.backward(up.backward(coeff), dsb));

    Rng pick(9);
    for (int s = 0; s < 12; ++s) {
        size_t i = size_t(pick.uniform_int(x.size()));
        const double keep = x.v[i], d = 1e-5;
        x.v[i] = keep + d;
        const double fp = loss();
        x.v[i] = keep - d;
        const double fm = loss();
        x.v[i] = keep;
        CHECK(std::abs((fp - fm) / (2 * d) - dx.v[i]) < 1e-6);
    }
    for (int s = 0; s < 12; ++s) {
        size_t i = size_t(pick.uniform_int(sb.size()));
        const double keep = sb.v[i], d = 1e-5;
        sb.v[i] = keep + d;
        const double fp = loss();
        sb.v[i] = keep - d;
        const double fm = loss();
        sb.v[i] = keep;
        CHECK(std::abs((fp - fm) / (2 * d) - dsb.v[i]) < 1e-6);
    }
}

TEST_CASE("softmax cross entropy matches FD and known value") {
    Rng rng(41);
    Tensor<double> logits = testutil::random_tensor(4, 6, 1, 1, rng);
    std::vector<int> labels = {1, 0, 5, 3};
    Tensor<double> dlogits;
    const double base = softmax_cross_entropy(logits, labels, &dlogits);
    CHECK(base > 0.0);

    Rng pick(42);
    for (int s = 0; s < 15; ++s) {
        size_t i = size_t(pick.uniform_int(logits.size()));
        const double keep = logits.v[i], d = 1e-6;
        logits.v[i] = keep + d;
        const double fp = softmax_cross_entropy(logits, labels, nullptr);
        logits.v[i] = keep - d;
        const double fm = softmax_cross_entropy(logits, labels, nullptr);
        logits.v[i] = keep;
        CHECK(std::abs((fp - fm) / (2 * d) - dlogits.v[i]) < 1e-6);
    }

    // uniform logits -> ln(K)
    Tensor<double> flat = Tensor<double>::vec(1, 4);
    const double lnk = softmax_cross_entropy(flat, {2}, nullptr);
    CHECK(lnk == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("adam drives a quadratic to its minimum") {
    Param<float> p;
    p.name = "q";
    p.resize(3);
    p.w = {5.f, -3.f, 2.f};
    Adam<float> opt;
    opt.lr = 0.1;
    ParamRefs<float> ps{&p};
    opt.attach(ps);
    for (int i = 0; i < 400; ++i) {
        opt.zero_grad();
        for (int j = 0; j < 3; ++j) p.g[j] = 2.f * (p.w[j] - float(j));
        opt.step();
    }
    for (int j = 0; j < 3; ++j) CHECK(std::abs(p.w[j] - float(j)) < 1e-3);
}

TEST_CASE("concat and split are inverse") {
    Rng rng(55);
    Tensor<double> a = testutil::random_tensor(2, 3, 4, 4, rng);
    Tensor<double> b = testutil::random_tensor(2, 2, 4, 4, rng);
    Tensor<double> y = concat_channels(a, b);
    Tensor<double> da, db;
    split_channels(y, da, db, 3);
    CHECK(da.v == a.v);
    CHECK(db.v == b.v);
}
