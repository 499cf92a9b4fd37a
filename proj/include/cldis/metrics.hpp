#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <vector>

#include "cldis/datasets.hpp"
#include "cldis/diffusion.hpp"
#include "cldis/rng.hpp"
#include "cldis/tensor.hpp"

namespace cldis::metrics {

// ---------------------------------------------------------------------------
// Dense optical flow (classic Horn-Schunck).
// ---------------------------------------------------------------------------
struct FlowField {
    int h = 0, w = 0;
    std::vector<double> u, v;  // per-pixel (dx, dy)

    double norm_at(int i) const { return std::sqrt(u[i] * u[i] + v[i] * v[i]); }
    double max_norm() const {
        double m = 0.0;
        for (size_t i = 0; i < u.size(); ++i) m = std::max(m, norm_at(int(i)));
        return m;
    }
};

struct FlowParams {
    double alpha = 1.0;            // smoothness weight, on the 0..255 intensity scale
    int max_iters = 100;
    double tol = 1e-4;             // mean update threshold
    double presmooth_sigma = 1.5;
    double intensity_scale = 255;  // unit-range inputs are mapped to the classic 8-bit range
};

namespace detail {

inline double at_clamped(const std::vector<double>& img, int h, int w, int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return img[size_t(y) * w + x];
}

inline std::vector<double> to_gray(const Tensor<float>& img, int sample = 0) {
    std::vector<double> g(size_t(img.h) * img.w, 0.0);
    for (int c = 0; c < img.c; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) g[size_t(y) * img.w + x] += img.at(sample, c, y, x);
    for (auto& v : g) v /= double(img.c);
    return g;
}

inline std::vector<double> gaussian_blur(const std::vector<double>& img, int h, int w, double sigma) {
    if (sigma <= 0.0) return img;
    const int r = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> k(size_t(2 * r + 1));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[size_t(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[size_t(i + r)];
    }
    for (auto& v : k) v /= sum;
    std::vector<double> tmp(img.size()), out(img.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[size_t(i + r)] * at_clamped(img, h, w, y, x + i);
            tmp[size_t(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += k[size_t(i + r)] * at_clamped(tmp, h, w, y + i, x);
            out[size_t(y) * w + x] = acc;
        }
    return out;
}

}  // namespace detail

// Classic Horn-Schunck: symmetric cube derivatives, weighted-neighborhood
// averages, Jacobi iteration until the mean update falls below tol.
inline FlowField estimate_flow(const Tensor<float>& img_a, const Tensor<float>& img_b,
                               const FlowParams& p = {}) {
    require(img_a.same_shape(img_b), "estimate_flow: shape mismatch");
    const int h = img_a.h, w = img_a.w;
    const size_t n = size_t(h) * w;
    auto a = detail::gaussian_blur(detail::to_gray(img_a), h, w, p.presmooth_sigma);
    auto b = detail::gaussian_blur(detail::to_gray(img_b), h, w, p.presmooth_sigma);
    for (auto& v : a) v *= p.intensity_scale;
    for (auto& v : b) v *= p.intensity_scale;

    std::vector<double> ex(n), ey(n), et(n);
    auto A = [&](int y, int x) { return detail::at_clamped(a, h, w, y, x); };
    auto B = [&](int y, int x) { return detail::at_clamped(b, h, w, y, x); };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t i = size_t(y) * w + x;
            ex[i] = 0.25 * (A(y, x + 1) - A(y, x) + A(y + 1, x + 1) - A(y + 1, x) + B(y, x + 1) -
                            B(y, x) + B(y + 1, x + 1) - B(y + 1, x));
            ey[i] = 0.25 * (A(y + 1, x) - A(y, x) + A(y + 1, x + 1) - A(y, x + 1) + B(y + 1, x) -
                            B(y, x) + B(y + 1, x + 1) - B(y, x + 1));
            et[i] = 0.25 * (B(y, x) - A(y, x) + B(y, x + 1) - A(y, x + 1) + B(y + 1, x) - A(y + 1, x) +
                            B(y + 1, x + 1) - A(y + 1, x + 1));
        }

    FlowField f;
    f.h = h;
    f.w = w;
    f.u.assign(n, 0.0);
    f.v.assign(n, 0.0);
    std::vector<double> ubar(n), vbar(n);
    auto local_avg = [&](const std::vector<double>& q, std::vector<double>& out) {
        auto Q = [&](int y, int x) { return detail::at_clamped(q, h, w, y, x); };
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                out[size_t(y) * w + x] =
                    (Q(y, x - 1) + Q(y, x + 1) + Q(y - 1, x) + Q(y + 1, x)) / 6.0 +
                    (Q(y - 1, x - 1) + Q(y - 1, x + 1) + Q(y + 1, x - 1) + Q(y + 1, x + 1)) / 12.0;
    };

    for (int it = 0; it < p.max_iters; ++it) {
        local_avg(f.u, ubar);
        local_avg(f.v, vbar);
        double delta = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double t = (ex[i] * ubar[i] + ey[i] * vbar[i] + et[i]) /
                             (p.alpha * p.alpha + ex[i] * ex[i] + ey[i] * ey[i]);
            const double nu = ubar[i] - ex[i] * t;
            const double nv = vbar[i] - ey[i] * t;
            delta += std::abs(nu - f.u[i]) + std::abs(nv - f.v[i]);
            f.u[i] = nu;
            f.v[i] = nv;
        }
        if (delta / double(2 * n) < p.tol) break;
    }
    return f;
}

// Every vector divided by the maximum per-pixel norm; an all-zero field is
// returned unchanged so identical images score 0 rather than NaN.
inline FlowField normalize_flow(const FlowField& flow) {
    FlowField out = flow;
    const double m = flow.max_norm();
    if (m <= 0.0) return out;
    for (size_t i = 0; i < out.u.size(); ++i) {
        out.u[i] /= m;
        out.v[i] /= m;
    }
    return out;
}

// L / S over a normalized field: pixels above the threshold vs the rest.
// S = 0 maps to an infinity sentinel.
inline double flow_ratio_from_normalized(const FlowField& normalized, double threshold) {
    require(threshold > 0.0 && threshold < 1.0, "flow ratio: threshold must lie in (0,1)");
    int64_t large = 0, small = 0;
    for (size_t i = 0; i < normalized.u.size(); ++i)
        (normalized.norm_at(int(i)) > threshold ? large : small)++;
    if (small == 0) return std::numeric_limits<double>::infinity();
    return double(large) / double(small);
}

inline double flow_ratio_metric(const Tensor<float>& img, const Tensor<float>& shifted_img,
                                double threshold, const FlowParams& p = {}) {
    return flow_ratio_from_normalized(normalize_flow(estimate_flow(img, shifted_img, p)), threshold);
}

struct AverageFlowResult {
    double mean = 0.0;
    int finite_count = 0;
    int infinite_count = 0;
    double threshold = 0.5;
};

inline AverageFlowResult average_flow_metric(const std::vector<std::pair<Tensor<float>, Tensor<float>>>& pairs,
                                             double threshold = 0.5, const FlowParams& p = {}) {
    require(!pairs.empty(), "average_flow_metric: empty pair list");
    AverageFlowResult r;
    r.threshold = threshold;
    double acc = 0.0;
    for (const auto& [a, b] : pairs) {
        const double s = flow_ratio_metric(a, b, threshold, p);
        if (std::isinf(s)) {
            r.infinite_count++;
        } else {
            acc += s;
            r.finite_count++;
        }
    }
    r.mean = r.finite_count ? acc / double(r.finite_count) : 0.0;
    return r;
}

inline AverageFlowResult average_flow_scores(const std::vector<double>& scores, double threshold = 0.5) {
    require(!scores.empty(), "average_flow_scores: empty score list");
    AverageFlowResult r;
    r.threshold = threshold;
    double acc = 0.0;
    for (double s : scores) {
        if (std::isinf(s)) {
            r.infinite_count++;
        } else {
            acc += s;
            r.finite_count++;
        }
    }
    r.mean = r.finite_count ? acc / double(r.finite_count) : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// FactorVAE score (majority-vote protocol).
// ---------------------------------------------------------------------------
using BatchEncoder = std::function<Tensor<float>(const Tensor<float>&)>;

inline Tensor<float> encode_dataset(const BatchEncoder& encode, const data::FactorDataset& ds,
                                    int batch = 256) {
    Tensor<float> out;
    int done = 0;
    while (done < int(ds.size())) {
        const int take = std::min(batch, int(ds.size()) - done);
        const Tensor<float> z = encode(ds.images.slice(done, take));
        if (out.n == 0) out = Tensor<float>(int(ds.size()), z.c, z.h, z.w);
        std::copy(z.data(), z.data() + z.size(), out.sample(done));
        done += take;
    }
    return out;
}

inline double factor_vae_score(const BatchEncoder& encode, const data::FactorDataset& ds, int votes,
                               int group_size, uint64_t seed) {
    require(votes >= 1 && group_size >= 2, "factor_vae_score: bad protocol parameters");
    const Tensor<float> latents = encode_dataset(encode, ds);
    const int d = latents.per_sample();
    const int nf = ds.spec.n_factors();

    // global per-dimension std; collapsed dimensions are excluded
    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (size_t i = 0; i < ds.size(); ++i)
        for (int j = 0; j < d; ++j) mean[j] += latents.sample(int(i))[j];
    for (auto& m : mean) m /= double(ds.size());
    for (size_t i = 0; i < ds.size(); ++i)
        for (int j = 0; j < d; ++j) {
            const double q = latents.sample(int(i))[j] - mean[j];
            sd[j] += q * q;
        }
    std::vector<int> active;
    for (int j = 0; j < d; ++j) {
        sd[j] = std::sqrt(sd[j] / double(ds.size()));
        if (sd[j] > 1e-9) active.push_back(j);
    }
    if (active.empty()) throw PreconditionError("factor_vae_score: every latent dimension is constant");

    // index rows by (factor, value)
    std::vector<std::vector<std::vector<size_t>>> buckets{size_t(nf)};
    for (int f = 0; f < nf; ++f) buckets[size_t(f)].resize(size_t(ds.spec.factors[f].second));
    for (size_t i = 0; i < ds.size(); ++i)
        for (int f = 0; f < nf; ++f) buckets[size_t(f)][size_t(ds.factor_row(i)[f])].push_back(i);

    Rng rng(derive_seed(seed, seed_stream::kEval));
    // one vote: fix a factor value, sample a group, find the least-variant
    // normalized dimension within the group
    auto cast_vote = [&](int& out_dim, int& out_factor) {
        const int f = int(rng.uniform_int(uint64_t(nf)));
        const auto& vals = buckets[size_t(f)];
        const std::vector<size_t>* rows = nullptr;
        do {
            rows = &vals[rng.uniform_int(uint64_t(vals.size()))];
        } while (rows->empty());
        std::vector<size_t> group(static_cast<size_t>(group_size), 0);
        for (auto& g : group) g = (*rows)[rng.uniform_int(uint64_t(rows->size()))];
        double best = std::numeric_limits<double>::infinity();
        int best_dim = active[0];
        for (int j : active) {
            double m = 0.0, m2 = 0.0;
            for (size_t row : group) {
                const double z = latents.sample(int(row))[j] / sd[j];
                m += z;
                m2 += z * z;
            }
            m /= group_size;
            const double var = m2 / group_size - m * m;
            if (var < best) {
                best = var;
                best_dim = j;
            }
        }
        out_dim = best_dim;
        out_factor = f;
    };

    // train the majority-vote classifier, then measure held-out accuracy
    std::vector<std::vector<int64_t>> counts(size_t(d), std::vector<int64_t>(size_t(nf), 0));
    for (int v = 0; v < votes; ++v) {
        int dim, f;
        cast_vote(dim, f);
        counts[size_t(dim)][size_t(f)]++;
    }
    std::vector<int> classifier(size_t(d), 0);
    for (int j = 0; j < d; ++j)
        classifier[size_t(j)] =
            int(std::max_element(counts[size_t(j)].begin(), counts[size_t(j)].end()) - counts[size_t(j)].begin());

    int64_t correct = 0;
    for (int v = 0; v < votes; ++v) {
        int dim, f;
        cast_vote(dim, f);
        if (classifier[size_t(dim)] == f) ++correct;
    }
    return double(correct) / double(votes);
}

// Exact-template oracle encoder: recognizes a rendered image and returns its
// ground-truth factor values as the latent. Chance-level noise encoder for the
// control run.
inline BatchEncoder oracle_encoder(const data::FactorDataset& ds) {
    auto lut = std::make_shared<std::map<std::vector<float>, std::vector<float>>>();
    for (size_t i = 0; i < ds.size(); ++i) {
        std::vector<float> key(ds.images.sample(int(i)), ds.images.sample(int(i)) + ds.images.per_sample());
        std::vector<float> val(ds.spec.n_factors());
        for (int f = 0; f < ds.spec.n_factors(); ++f) val[size_t(f)] = float(ds.factor_row(i)[f]);
        (*lut)[std::move(key)] = std::move(val);
    }
    const int nf = ds.spec.n_factors();
    return [lut, nf](const Tensor<float>& batch) {
        Tensor<float> z = Tensor<float>::vec(batch.n, nf);
        for (int i = 0; i < batch.n; ++i) {
            std::vector<float> key(batch.sample(i), batch.sample(i) + batch.per_sample());
            auto it = lut->find(key);
            require(it != lut->end(), "oracle_encoder: image is not a dataset render");
            std::copy(it->second.begin(), it->second.end(), z.sample(i));
        }
        return z;
    };
}

inline BatchEncoder noise_encoder(int d, uint64_t seed) {
    return [d, seed](const Tensor<float>& batch) {
        Tensor<float> z = Tensor<float>::vec(batch.n, d);
        for (int i = 0; i < batch.n; ++i) {
            // hash the image bytes so the code is a deterministic function of the input
            uint64_t h = seed ^ 0x9e3779b97f4a7c15ull;
            const float* p = batch.sample(i);
            for (int j = 0; j < batch.per_sample(); ++j) {
                uint32_t bits;
                std::memcpy(&bits, &p[j], 4);
                h = mix64(h ^ bits);
            }
            Rng rng(h);
            rng.fill_normal(z.sample(i), size_t(d));
        }
        return z;
    };
}

// ---------------------------------------------------------------------------
// DCI disentanglement with ridge-regression importances.
// ---------------------------------------------------------------------------
struct ImportanceMatrix {
    int d = 0, n = 0;
    std::vector<double> values;  // [D, N] row-major, nonnegative

    double at(int di, int ni) const { return values[size_t(di) * n + ni]; }
};

struct DciResult {
    double disentanglement = 0.0;
    ImportanceMatrix importance;
    bool degenerate = false;  // importance mass too small to be meaningful
};

inline DciResult dci_disentanglement(const Tensor<float>& latents, const std::vector<int32_t>& factors,
                                     int n_factors) {
    const int m = latents.n, d = latents.per_sample();
    require(m >= 100, "dci_disentanglement: need at least 100 samples");
    require(factors.size() == size_t(m) * n_factors, "dci_disentanglement: factor table size mismatch");

    // standardize latents; constant dimensions get zero importance
    Eigen::MatrixXd X(m, d);
    std::vector<bool> constant(size_t(d), false);
    for (int j = 0; j < d; ++j) {
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < m; ++i) mean += latents.sample(i)[j];
        mean /= m;
        for (int i = 0; i < m; ++i) {
            const double q = latents.sample(i)[j] - mean;
            var += q * q;
        }
        var /= m;
        const double sd = std::sqrt(var);
        constant[size_t(j)] = sd < 1e-9;
        for (int i = 0; i < m; ++i)
            X(i, j) = constant[size_t(j)] ? 0.0 : (latents.sample(i)[j] - mean) / sd;
    }

    const double lambda = 1e-2 * double(m);
    Eigen::MatrixXd gram = X.transpose() * X + lambda * Eigen::MatrixXd::Identity(d, d);
    Eigen::LDLT<Eigen::MatrixXd> solver(gram);

    DciResult r;
    r.importance.d = d;
    r.importance.n = n_factors;
    r.importance.values.assign(size_t(d) * n_factors, 0.0);
    for (int f = 0; f < n_factors; ++f) {
        Eigen::VectorXd y(m);
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < m; ++i) mean += factors[size_t(i) * n_factors + f];
        mean /= m;
        for (int i = 0; i < m; ++i) {
            const double q = factors[size_t(i) * n_factors + f] - mean;
            var += q * q;
        }
        var /= m;
        const double sd = std::max(std::sqrt(var), 1e-12);
        for (int i = 0; i < m; ++i) y(i) = (factors[size_t(i) * n_factors + f] - mean) / sd;
        const Eigen::VectorXd beta = solver.solve(X.transpose() * y);
        for (int j = 0; j < d; ++j)
            r.importance.values[size_t(j) * n_factors + f] = constant[size_t(j)] ? 0.0 : std::abs(beta(j));
    }

    // weighted (by importance mass) mean of per-dimension 1 - normalized entropy
    double total_mass = 0.0, score = 0.0;
    for (int j = 0; j < d; ++j) {
        double row = 0.0;
        for (int f = 0; f < n_factors; ++f) row += r.importance.at(j, f);
        if (row <= 1e-12) continue;
        double entropy = 0.0;
        for (int f = 0; f < n_factors; ++f) {
            const double p = r.importance.at(j, f) / row;
            if (p > 0.0) entropy -= p * std::log(p);
        }
        const double disent = 1.0 - entropy / std::log(double(n_factors));
        score += row * disent;
        total_mass += row;
    }
    r.degenerate = total_mass < 1e-3 * double(d);
    r.disentanglement = total_mass > 0.0 ? score / total_mass : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Locality heatmap (mean per-pixel |shifted - reconstruction| over magnitudes).
// ---------------------------------------------------------------------------
inline std::vector<double> locality_heatmap(diff::ConditionalDenoiser<float>& den,
                                            const diff::DiffusionSchedule& sched,
                                            const std::vector<int>& steps, const Tensor<float>& z,
                                            const std::vector<float>& direction, const Tensor<float>& x_T,
                                            const std::vector<double>& magnitudes) {
    require(z.n == 1 && int(direction.size()) == z.per_sample(), "locality_heatmap: bad latent/direction");
    require(!magnitudes.empty(), "locality_heatmap: need at least one magnitude");
    const Tensor<float> recon = diff::sample(den, z, x_T, steps, sched);
    std::vector<double> heat(size_t(recon.h) * recon.w, 0.0);
    for (const double mag : magnitudes) {
        Tensor<float> zs = z;
        for (int j = 0; j < z.per_sample(); ++j) zs.v[size_t(j)] += float(mag) * direction[size_t(j)];
        const Tensor<float> gen = diff::sample(den, zs, x_T, steps, sched);
        for (int y = 0; y < recon.h; ++y)
            for (int x = 0; x < recon.w; ++x) {
                double acc = 0.0;
                for (int c = 0; c < recon.c; ++c)
                    acc += std::abs(double(gen.at(0, c, y, x)) - double(recon.at(0, c, y, x)));
                heat[size_t(y) * recon.w + x] += acc / double(recon.c);
            }
    }
    for (auto& v : heat) v /= double(magnitudes.size());
    return heat;
}

}  // namespace cldis::metrics
