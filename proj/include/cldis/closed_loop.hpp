#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "cldis/checkpoint.hpp"
#include "cldis/datasets.hpp"
#include "cldis/diffusion.hpp"
#include "cldis/vae.hpp"

namespace cldis::loop {

constexpr double kEntropyFloor = 1e-12;

// Shannon entropy (nats) of one image treated as a distribution: flatten over
// C*H*W, clamp below the floor, normalize to sum 1. An all-zero image becomes
// uniform and scores ln(CHW).
template <typename T>
double image_entropy(const Tensor<T>& x, int sample = 0) {
    const size_t len = size_t(x.per_sample());
    require(len > 0, "image_entropy: empty image");
    const T* p = x.sample(sample);
    double total = 0.0;
    for (size_t i = 0; i < len; ++i) total += std::max(double(p[i]), kEntropyFloor);
    double h = 0.0;
    for (size_t i = 0; i < len; ++i) {
        const double pi = std::max(double(p[i]), kEntropyFloor) / total;
        h -= pi * std::log(pi);
    }
    return h;
}

template <typename T>
double mean_image_entropy(const Tensor<T>& batch) {
    double acc = 0.0;
    for (int i = 0; i < batch.n; ++i) acc += image_entropy(batch, i);
    return acc / double(batch.n);
}

// Dynamic capacity controller: C_dyn = min(c_base * e_x0 / e_xt, c_max).
struct CDynController {
    double c_base = 10.0;
    double c_max = 25.0;
    double current = 0.0;
    std::vector<std::pair<int64_t, double>> history;

    void validate() const { require(c_base > 0.0 && c_base <= c_max, "CDynController: need 0 < c_base <= c_max"); }

    double update(double e_x0, double e_xt, int64_t step) {
        validate();
        require(e_x0 > 0.0 && e_xt > 0.0, "compute_c_dyn: entropies must be positive");
        require(history.empty() || step > history.back().first,
                "CDynController: history must be strictly increasing in step");
        const double f = c_base * (e_x0 / e_xt);
        current = f >= c_max ? c_max : f;
        history.emplace_back(step, current);
        return current;
    }
};

inline double compute_c_dyn(double e_x0, double e_xt, CDynController& ctrl, int64_t step) {
    return ctrl.update(e_x0, e_xt, step);
}

// Eq. 5 distillation: both latents are softmax-normalized onto the simplex
// (with a floor), then the elementwise KL(z_sem || z_disen) is taken. Batch
// mean over rows; optional gradient w.r.t. z_sem (z_disen is a constant).
template <typename T>
double distillation_loss(const Tensor<T>& z_sem, const Tensor<T>& z_disen,
                         std::type_identity_t<Tensor<T>*> d_zsem = nullptr) {
    require(z_sem.n == z_disen.n && z_sem.per_sample() == z_disen.per_sample(),
            "distillation_loss: latent length mismatch");
    const int n = z_sem.n, d = z_sem.per_sample();
    if (d_zsem) *d_zsem = zeros_like(z_sem);
    double total = 0.0;
    std::vector<double> p(d), q(d);
    for (int i = 0; i < n; ++i) {
        const T* a = z_sem.sample(i);
        const T* b = z_disen.sample(i);
        double amax = a[0], bmax = b[0];
        for (int j = 1; j < d; ++j) {
            amax = std::max(amax, double(a[j]));
            bmax = std::max(bmax, double(b[j]));
        }
        double za = 0.0, zb = 0.0;
        for (int j = 0; j < d; ++j) {
            p[j] = std::exp(double(a[j]) - amax);
            q[j] = std::exp(double(b[j]) - bmax);
            za += p[j];
            zb += q[j];
        }
        double kl = 0.0;
        for (int j = 0; j < d; ++j) {
            p[j] = std::max(p[j] / za, kEntropyFloor);
            q[j] = std::max(q[j] / zb, kEntropyFloor);
            kl += p[j] * std::log(p[j] / q[j]);
        }
        total += kl;
        if (d_zsem) {
            T* g = d_zsem->sample(i);
            for (int j = 0; j < d; ++j)
                g[j] = T(p[j] * (std::log(p[j] / q[j]) - kl) / double(n));
        }
    }
    return total / double(n);
}

// Eq. 8: the capacity objective evaluated at the dynamic capacity.
template <typename T>
vae::VaeLossParts<T> feedback_loss(vae::VaeModel<T>& model, const Tensor<T>& x, const Tensor<T>& eps,
                                   double c_dyn, double c_max, bool grad = false) {
    require(c_dyn > 0.0 && c_dyn <= c_max, "feedback_loss: c_dyn out of (0, c_max]");
    return vae::capacity_loss(model, x, eps, c_dyn, grad);
}

// ---------------------------------------------------------------------------
// Coupled system state.
// ---------------------------------------------------------------------------
struct LoopConfig {
    diff::EncoderConfig enc;
    diff::DenoiserConfig den;
    vae::VaeConfig vae;
    int T = 1000;
    double beta_start = 1e-4, beta_end = 0.02;
    double c_base = 10.0, c_max = 25.0;
    double lambda_dt = 1.0, lambda_fd = 1.0;
    double lr = 3e-4;
    int batch_size = 16;
    uint64_t seed = 0;
};

struct StepReport {
    double l_diff = 0.0, l_dt = 0.0, l_fd = 0.0, c_dyn = 0.0, kl = 0.0;
    double total = 0.0;
};

// Append-only CSV logger with a fixed column schema.
class TrainLogger {
public:
    TrainLogger() = default;
    explicit TrainLogger(const std::filesystem::path& path, bool append = false) { open(path, append); }

    void open(const std::filesystem::path& path, bool append = false) {
        const bool fresh = !append || !std::filesystem::exists(path);
        f_.open(path, append ? std::ios::app : std::ios::trunc);
        if (!f_) throw ConfigError("cannot open log " + path.string());
        if (fresh) f_ << "step,l_diff,l_dt,l_fd,c_dyn,kl\n";
    }

    void row(int64_t step, const StepReport& r) {
        if (!f_.is_open()) return;
        char buf[192];
        std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n", (long long)step, r.l_diff,
                      r.l_dt, r.l_fd, r.c_dyn, r.kl);
        f_ << buf;
        f_.flush();
    }

private:
    std::ofstream f_;
};

class ClosedLoopState {
public:
    LoopConfig cfg;
    diff::DiffusionSchedule sched;
    diff::SemanticEncoder<float> enc;
    diff::ConditionalDenoiser<float> den;
    vae::VaeModel<float> vae_model;
    CDynController controller;
    nn::Adam<float> opt_diff, opt_vae;
    int64_t step = 0;

    // The optimizers hold pointers into the layer parameters, so the state
    // lives behind a unique_ptr and never relocates.
    ClosedLoopState() = default;
    ClosedLoopState(const ClosedLoopState&) = delete;
    ClosedLoopState& operator=(const ClosedLoopState&) = delete;

    static std::unique_ptr<ClosedLoopState> create(const LoopConfig& cfg) {
        auto s = std::make_unique<ClosedLoopState>();
        s->cfg = cfg;
        s->cfg.enc.d_latent = cfg.den.d_latent;
        s->controller.c_base = cfg.c_base;
        s->controller.c_max = cfg.c_max;
        s->controller.validate();
        s->sched = diff::make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
        Rng rng(derive_seed(cfg.seed, seed_stream::kInit));
        s->enc.init(s->cfg.enc, rng);
        s->den.init(s->cfg.den, rng);
        s->vae_model.init(s->cfg.vae, rng);
        nn::ParamRefs<float> dps;
        s->enc.collect(dps);
        s->den.collect(dps);
        s->opt_diff.lr = cfg.lr;
        s->opt_diff.attach(dps);
        nn::ParamRefs<float> vps;
        s->vae_model.collect(vps);
        s->opt_vae.lr = cfg.lr;
        s->opt_vae.attach(vps);
        return s;
    }

    nn::ParamRefs<float> diff_params() {
        nn::ParamRefs<float> ps;
        enc.collect(ps);
        den.collect(ps);
        return ps;
    }

    nn::ParamRefs<float> vae_params() {
        nn::ParamRefs<float> ps;
        vae_model.collect(ps);
        return ps;
    }

    void save(const std::filesystem::path& dir) {
        Checkpoint ck(dir);
        KvFile& m = ck.manifest();
        m.set("format", "cldis-checkpoint-v1");
        m.set("step", step);
        m.set("T", int64_t(cfg.T));
        m.set("beta_start", cfg.beta_start);
        m.set("beta_end", cfg.beta_end);
        m.set("d_latent", int64_t(cfg.den.d_latent));
        m.set("img", int64_t(cfg.den.img));
        m.set("den.c1", int64_t(cfg.den.c1));
        m.set("den.c2", int64_t(cfg.den.c2));
        m.set("den.c3", int64_t(cfg.den.c3));
        m.set("den.emb", int64_t(cfg.den.emb));
        m.set("vae.beta", cfg.vae.beta);
        m.set("controller.c_base", controller.c_base);
        m.set("controller.c_max", controller.c_max);
        m.set("controller.current", controller.current);
        m.set("lambda_dt", cfg.lambda_dt);
        m.set("lambda_fd", cfg.lambda_fd);
        m.set("lr", cfg.lr);
        m.set("seed", int64_t(cfg.seed));

        ck.add_params(diff_params());
        ck.add_params(vae_params());
        ck.add_optimizer(opt_diff);
        // flatten controller history into a float array (steps fit exactly below 2^24)
        hist_flat_.clear();
        for (const auto& [st, val] : controller.history) {
            hist_flat_.push_back(float(st));
            hist_flat_.push_back(float(val));
        }
        ck.add_array("controller.history", &hist_flat_);
        for (size_t i = 0; i < opt_vae.params().size(); ++i) {
            ck.add_array("adamv." + opt_vae.params()[i]->name + ".m", &opt_vae.moment1()[i]);
            ck.add_array("adamv." + opt_vae.params()[i]->name + ".v", &opt_vae.moment2()[i]);
        }
        m.set("adamv.step", opt_vae.step_count());
        ck.save();
    }

    void load(const std::filesystem::path& dir) {
        if (!Checkpoint::exists(dir)) throw DependencyError("no checkpoint at " + dir.string());
        Checkpoint ck(dir);
        ck.add_params(diff_params());
        ck.add_params(vae_params());
        ck.add_optimizer(opt_diff);
        ck.add_array("controller.history", &hist_flat_);
        for (size_t i = 0; i < opt_vae.params().size(); ++i) {
            ck.add_array("adamv." + opt_vae.params()[i]->name + ".m", &opt_vae.moment1()[i]);
            ck.add_array("adamv." + opt_vae.params()[i]->name + ".v", &opt_vae.moment2()[i]);
        }
        // sizes must be registered before load; history length comes from the manifest
        KvFile m = KvFile::load(dir / "manifest");
        if (m.get("format") != "cldis-checkpoint-v1")
            throw ConfigError(dir.string() + ": unknown checkpoint format");
        if (int(m.get_int("d_latent")) != cfg.den.d_latent || int(m.get_int("T")) != cfg.T ||
            int(m.get_int("den.c1")) != cfg.den.c1 || int(m.get_int("img")) != cfg.den.img)
            throw ConfigError(dir.string() + ": checkpoint architecture does not match config");
        hist_flat_.assign(size_t(m.get_int("array.controller.history")), 0.0f);
        ck.load();
        step = m.get_int("step");
        opt_vae.set_step_count(m.get_int("adamv.step"));
        controller.c_base = m.get_double("controller.c_base");
        controller.c_max = m.get_double("controller.c_max");
        controller.current = m.get_double("controller.current");
        controller.history.clear();
        for (size_t i = 0; i + 1 < hist_flat_.size(); i += 2)
            controller.history.emplace_back(int64_t(hist_flat_[i]), double(hist_flat_[i + 1]));
    }

private:
    std::vector<float> hist_flat_;
};

namespace detail {

inline void check_finite(double v, const char* what, int64_t step) {
    if (!std::isfinite(v))
        throw NumericError(std::string(what) + " became non-finite at step " + std::to_string(step));
}

inline void draw_timesteps_and_noise(const ClosedLoopState& s, int n, size_t image_elems,
                                     std::vector<int>& ts, Tensor<float>& eps) {
    Rng rng(derive_seed(s.cfg.seed, seed_stream::kDiffNoise, uint64_t(s.step)));
    ts.resize(size_t(n));
    for (int i = 0; i < n; ++i) ts[size_t(i)] = int(rng.uniform_int(uint64_t(s.cfg.T)));
    rng.fill_normal(eps.data(), image_elems);
}

}  // namespace detail

// One Phase-1 step: Diff-AE on the denoising loss alone, the co-pilot VAE on
// the beta-VAE objective alone, same batch.
inline StepReport phase1_step(ClosedLoopState& s, const Tensor<float>& x0) {
    const int n = x0.n;
    s.opt_diff.zero_grad();
    s.opt_vae.zero_grad();

    std::vector<int> ts;
    Tensor<float> eps = zeros_like(x0);
    detail::draw_timesteps_and_noise(s, n, x0.size(), ts, eps);

    Tensor<float> z = s.enc.forward(x0, /*g=*/true);
    Tensor<float> dz = Tensor<float>::vec(n, s.cfg.den.d_latent);
    const double l_diff = diff::denoising_loss_backward(s.den, x0, z, ts, eps, s.sched, dz);
    s.enc.backward(dz);

    Rng vr(derive_seed(s.cfg.seed, seed_stream::kVaeNoise, uint64_t(s.step)));
    Tensor<float> veps = Tensor<float>::vec(n, s.cfg.vae.d_latent);
    vr.fill_normal(veps.data(), veps.size());
    const auto vl = vae::beta_vae_loss(s.vae_model, x0, veps, /*grad=*/true);

    detail::check_finite(l_diff, "denoising loss", s.step);
    detail::check_finite(vl.total, "vae loss", s.step);
    s.opt_diff.step();
    s.opt_vae.step();
    ++s.step;

    StepReport r;
    r.l_diff = l_diff;
    r.kl = vl.kl;
    r.total = l_diff;
    return r;
}

// One Phase-2 closed-loop step (knowledge distillation + diffusion feedback).
inline StepReport phase2_step(ClosedLoopState& s, const Tensor<float>& x0) {
    const int n = x0.n;
    s.opt_diff.zero_grad();
    s.opt_vae.zero_grad();

    // (i) denoising loss with z_sem conditioning
    std::vector<int> ts;
    Tensor<float> eps = zeros_like(x0);
    detail::draw_timesteps_and_noise(s, n, x0.size(), ts, eps);
    Tensor<float> z_sem = s.enc.forward(x0, /*g=*/true);
    Tensor<float> xt = diff::forward_diffuse(x0, ts, eps, s.sched);
    Tensor<float> eps_hat = s.den.forward(xt, ts, z_sem, /*g=*/true);
    const double l_diff = mse(eps_hat, eps);
    Tensor<float> dm = zeros_like(eps_hat);
    const float mscale = float(2.0 / double(eps_hat.size()));
    for (size_t i = 0; i < dm.size(); ++i) dm.v[i] = mscale * (eps_hat.v[i] - eps.v[i]);
    Tensor<float> dz = Tensor<float>::vec(n, s.cfg.den.d_latent);
    s.den.backward(dm, dz);

    // (ii) entropy feedback from the one-step x0 prediction at the sampled t
    Tensor<float> x0_hat = diff::predict_x0(xt, eps_hat, ts, s.sched);
    const double e_x0 = mean_image_entropy(x0);
    const double e_xt = mean_image_entropy(x0_hat);
    const double c_dyn = s.controller.update(e_x0, e_xt, s.step);

    // (iii) one-way latent distillation from the posterior mean
    const auto post = vae::vae_encode(s.vae_model, x0);
    Tensor<float> d_zsem_dt;
    const double l_dt = distillation_loss(z_sem, post.mu, &d_zsem_dt);
    for (size_t i = 0; i < dz.size(); ++i) dz.v[i] += float(s.cfg.lambda_dt) * d_zsem_dt.v[i];
    s.enc.backward(dz);

    // (iv) feedback loss updates the VAE only
    Rng vr(derive_seed(s.cfg.seed, seed_stream::kVaeNoise, uint64_t(s.step)));
    Tensor<float> veps = Tensor<float>::vec(n, s.cfg.vae.d_latent);
    vr.fill_normal(veps.data(), veps.size());
    const auto fb = feedback_loss(s.vae_model, x0, veps, c_dyn, s.controller.c_max, /*grad=*/true);
    if (s.cfg.lambda_fd != 1.0)
        for (auto* p : s.vae_params())
            for (auto& g : p->g) g = float(double(g) * s.cfg.lambda_fd);

    StepReport r;
    r.l_diff = l_diff;
    r.l_dt = l_dt;
    r.l_fd = fb.total;
    r.c_dyn = c_dyn;
    r.kl = fb.kl;
    r.total = l_diff + s.cfg.lambda_dt * l_dt + s.cfg.lambda_fd * fb.total;
    detail::check_finite(r.total, "phase-2 total loss", s.step);

    s.opt_diff.step();
    s.opt_vae.step();
    ++s.step;
    return r;
}

// Restores the data stream position for a resumed run.
inline data::Batcher batcher_at_step(const data::FactorDataset& ds, int batch_size, uint64_t seed,
                                     int64_t step) {
    data::Batcher b(ds, batch_size, seed, /*shuffle=*/true);
    const int64_t bpe = int64_t((ds.size() + size_t(batch_size) - 1) / size_t(batch_size));
    b.seek(size_t(step / bpe), size_t(step % bpe));
    return b;
}

inline void phase1_pretrain(ClosedLoopState& s, const data::FactorDataset& ds, int64_t n_steps,
                            TrainLogger* log = nullptr) {
    data::Batcher b = batcher_at_step(ds, s.cfg.batch_size, s.cfg.seed, s.step);
    for (int64_t i = 0; i < n_steps; ++i) {
        auto [images, fac] = b.next();
        const auto r = phase1_step(s, images);
        if (log) log->row(s.step - 1, r);
    }
}

inline void phase2_train(ClosedLoopState& s, const data::FactorDataset& ds, int64_t n_steps,
                         TrainLogger* log = nullptr) {
    data::Batcher b = batcher_at_step(ds, s.cfg.batch_size, s.cfg.seed + 1, s.step);
    for (int64_t i = 0; i < n_steps; ++i) {
        auto [images, fac] = b.next();
        const auto r = phase2_step(s, images);
        if (log) log->row(s.step - 1, r);
    }
}

// Exact copy of the controller history.
inline std::vector<std::pair<int64_t, double>> export_c_dyn_curve(const ClosedLoopState& s) {
    return s.controller.history;
}

inline void write_c_dyn_csv(const ClosedLoopState& s, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "step,value\n";
    for (const auto& [st, v] : s.controller.history) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%lld,%.9g\n", (long long)st, v);
        f << buf;
    }
}

}  // namespace cldis::loop
