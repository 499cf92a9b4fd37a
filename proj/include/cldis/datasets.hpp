#pragma once

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "cldis/kvfile.hpp"
#include "cldis/rng.hpp"
#include "cldis/tensor.hpp"

namespace cldis::data {

struct FactorSpec {
    std::vector<std::pair<std::string, int>> factors;  // (name, cardinality), order fixed
    int c = 3, h = 32, w = 32;

    int n_factors() const { return int(factors.size()); }
    size_t total() const {
        size_t m = 1;
        for (const auto& [_, card] : factors) m *= size_t(card);
        return m;
    }
    void validate() const {
        require(c == 1 || c == 3, "FactorSpec: C must be 1 or 3");
        for (const auto& [name, card] : factors)
            require(card >= 2, "FactorSpec: factor '" + name + "' needs cardinality >= 2");
    }
};

// Canonical toy spec: 3*4*8*8*4 = 3072 samples at 3x32x32.
inline FactorSpec default_spec() {
    FactorSpec s;
    s.factors = {{"shape", 3}, {"scale", 4}, {"pos_x", 8}, {"pos_y", 8}, {"color", 4}};
    s.c = 3;
    s.h = 32;
    s.w = 32;
    return s;
}

namespace detail {

constexpr double kScales[4] = {0.4, 0.55, 0.7, 0.85};
constexpr double kColors[4][3] = {
    {0.95, 0.25, 0.10}, {0.20, 0.90, 0.25}, {0.15, 0.35, 0.95}, {0.90, 0.85, 0.20}};
constexpr double kGray[4] = {0.4, 0.6, 0.8, 1.0};

// Shape size as a fraction of the image half-width; radius is half that, so
// the largest shape at scale 0.85 on a 32px image has radius 6.8px.
inline double radius_for(int scale_idx, int h, int w) {
    const double half = 0.5 * double(std::min(h, w));
    return kScales[scale_idx] * half * 0.5;
}

inline double max_radius(int h, int w) { return radius_for(3, h, w); }

// Position grid inset by the maximum radius so no shape clips the border.
inline double grid_coord(int idx, int card, double extent, double inset) {
    if (card == 1) return extent * 0.5;
    return inset + (extent - 2.0 * inset) * double(idx) / double(card - 1);
}

inline bool inside_shape(int shape, double px, double py, double cx, double cy, double r) {
    const double dx = px - cx, dy = py - cy;
    switch (shape) {
        case 0:  // square
            return std::abs(dx) <= r && std::abs(dy) <= r;
        case 1: {  // ellipse, 4:3 aspect
            const double ry = 0.75 * r;
            return (dx * dx) / (r * r) + (dy * dy) / (ry * ry) <= 1.0;
        }
        default: {  // up-pointing isoceles triangle
            if (dy < -r || dy > r) return false;
            const double halfwidth = r * (dy + r) / (2.0 * r);
            return std::abs(dx) <= halfwidth;
        }
    }
}

}  // namespace detail

// Deterministic hard-edged raster of one colored shape; pure in factor_values.
inline Tensor<float> render_scene(const FactorSpec& spec, const std::vector<int>& factor_values) {
    spec.validate();
    require(factor_values.size() == size_t(spec.n_factors()), "render_scene: wrong number of factor values");
    for (int i = 0; i < spec.n_factors(); ++i)
        require(factor_values[i] >= 0 && factor_values[i] < spec.factors[i].second,
                "render_scene: factor '" + spec.factors[i].first + "' value out of range");

    const int shape = factor_values[0];
    const double r = detail::radius_for(factor_values[1], spec.h, spec.w);
    const double inset = detail::max_radius(spec.h, spec.w);
    const double cx = detail::grid_coord(factor_values[2], spec.factors[2].second, double(spec.w), inset);
    const double cy = detail::grid_coord(factor_values[3], spec.factors[3].second, double(spec.h), inset);
    const int color = factor_values[4];

    Tensor<float> img(1, spec.c, spec.h, spec.w);
    for (int y = 0; y < spec.h; ++y)
        for (int x = 0; x < spec.w; ++x) {
            if (!detail::inside_shape(shape, x + 0.5, y + 0.5, cx, cy, r)) continue;
            if (spec.c == 3)
                for (int ci = 0; ci < 3; ++ci) img.at(0, ci, y, x) = float(detail::kColors[color][ci]);
            else
                img.at(0, 0, y, x) = float(detail::kGray[color]);
        }
    return img;
}

struct FactorDataset {
    FactorSpec spec;
    Tensor<float> images;           // [M, C, H, W]
    std::vector<int32_t> factors;   // [M, N] row-major

    size_t size() const { return size_t(images.n); }
    const int32_t* factor_row(size_t i) const { return factors.data() + i * spec.n_factors(); }

    std::vector<int> factor_values(size_t i) const {
        return std::vector<int>(factor_row(i), factor_row(i) + spec.n_factors());
    }
};

struct Exhaustive {};
struct Sampled {
    size_t n = 0;
    uint64_t seed = 0;
};
using GenerateMode = std::variant<Exhaustive, Sampled>;

inline std::vector<int> unrank(const FactorSpec& spec, size_t row) {
    std::vector<int> v(spec.n_factors());
    for (int f = spec.n_factors() - 1; f >= 0; --f) {
        const int card = spec.factors[f].second;
        v[f] = int(row % card);
        row /= card;
    }
    return v;
}

inline size_t rank_of(const FactorSpec& spec, const int32_t* values) {
    size_t r = 0;
    for (int f = 0; f < spec.n_factors(); ++f) r = r * spec.factors[f].second + size_t(values[f]);
    return r;
}

// Exhaustive mode walks the factor grid in lexicographic order; sampled mode
// draws tuples uniformly and reproducibly from the given seed.
inline FactorDataset generate(const FactorSpec& spec, const GenerateMode& mode) {
    spec.validate();
    FactorDataset ds;
    ds.spec = spec;
    size_t m = 0;
    if (std::holds_alternative<Exhaustive>(mode)) {
        m = spec.total();
    } else {
        const auto& s = std::get<Sampled>(mode);
        require(s.n >= 1, "generate: sampled mode needs n >= 1");
        m = s.n;
    }
    ds.images = Tensor<float>(int(m), spec.c, spec.h, spec.w);
    ds.factors.resize(m * spec.n_factors());

    if (std::holds_alternative<Exhaustive>(mode)) {
        for (size_t i = 0; i < m; ++i) {
            const auto v = unrank(spec, i);
            for (int f = 0; f < spec.n_factors(); ++f) ds.factors[i * spec.n_factors() + f] = v[f];
        }
    } else {
        Rng rng(std::get<Sampled>(mode).seed);
        for (size_t i = 0; i < m; ++i)
            for (int f = 0; f < spec.n_factors(); ++f)
                ds.factors[i * spec.n_factors() + f] = int32_t(rng.uniform_int(uint64_t(spec.factors[f].second)));
    }

#pragma omp parallel for schedule(static)
    for (long long i = 0; i < (long long)m; ++i) {
        const Tensor<float> img = render_scene(spec, ds.factor_values(size_t(i)));
        std::copy(img.data(), img.data() + img.size(), ds.images.sample(int(i)));
    }
    return ds;
}

// One epoch covers every sample exactly once; the last partial batch is kept.
class Batcher {
public:
    Batcher(const FactorDataset& ds, int batch_size, uint64_t seed, bool shuffle)
        : ds_(ds), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
        require(batch_size >= 1 && size_t(batch_size) <= ds.size(), "Batcher: batch_size out of range");
        order_.resize(ds.size());
        std::iota(order_.begin(), order_.end(), size_t(0));
        reshuffle();
    }

    // Indices of the next batch; advances the epoch when exhausted.
    std::vector<size_t> next_indices() {
        if (cursor_ >= order_.size()) {
            ++epoch_;
            cursor_ = 0;
            reshuffle();
        }
        const size_t count = std::min(size_t(batch_size_), order_.size() - cursor_);
        std::vector<size_t> idx(order_.begin() + cursor_, order_.begin() + cursor_ + count);
        cursor_ += count;
        return idx;
    }

    std::pair<Tensor<float>, std::vector<int32_t>> next() {
        return gather(ds_, next_indices());
    }

    static std::pair<Tensor<float>, std::vector<int32_t>> gather(const FactorDataset& ds,
                                                                 const std::vector<size_t>& idx) {
        Tensor<float> images(int(idx.size()), ds.spec.c, ds.spec.h, ds.spec.w);
        std::vector<int32_t> fac(idx.size() * ds.spec.n_factors());
        for (size_t i = 0; i < idx.size(); ++i) {
            std::copy(ds.images.sample(int(idx[i])), ds.images.sample(int(idx[i])) + ds.images.per_sample(),
                      images.sample(int(i)));
            std::copy(ds.factor_row(idx[i]), ds.factor_row(idx[i]) + ds.spec.n_factors(),
                      fac.begin() + i * ds.spec.n_factors());
        }
        return {std::move(images), std::move(fac)};
    }

    size_t epoch() const { return epoch_; }

    // Jump to (epoch, batch-within-epoch); epoch orders re-derive from the seed.
    void seek(size_t epoch, size_t batch_in_epoch) {
        epoch_ = epoch;
        reshuffle();
        cursor_ = std::min(batch_in_epoch * size_t(batch_size_), order_.size());
    }

private:
    void reshuffle() {
        if (!shuffle_) return;
        std::iota(order_.begin(), order_.end(), size_t(0));
        Rng rng(derive_seed(seed_, seed_stream::kShuffle, epoch_));
        rng.shuffle(order_);
    }

    const FactorDataset& ds_;
    int batch_size_;
    uint64_t seed_;
    bool shuffle_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
    size_t epoch_ = 0;
};

// --- disk format: manifest + images.f32 + factors.i32, row-major LE ---------

inline void export_dataset(const FactorDataset& ds, const std::filesystem::path& dir,
                           bool overwrite = false) {
    if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir) && !overwrite)
        throw ConfigError("dataset target " + dir.string() + " exists and is not empty");
    std::filesystem::create_directories(dir);
    KvFile kv;
    kv.set("format", "cldis-dataset-v1");
    kv.set("m", int64_t(ds.size()));
    kv.set("image_c", int64_t(ds.spec.c));
    kv.set("image_h", int64_t(ds.spec.h));
    kv.set("image_w", int64_t(ds.spec.w));
    kv.set("n_factors", int64_t(ds.spec.n_factors()));
    for (int f = 0; f < ds.spec.n_factors(); ++f)
        kv.set("factor_" + std::to_string(f),
               ds.spec.factors[f].first + ":" + std::to_string(ds.spec.factors[f].second));
    kv.set("dtype_images", "f32");
    kv.set("dtype_factors", "i32");
    kv.save(dir / "manifest");
    write_raw(dir / "images.f32", ds.images.data(), ds.images.size());
    write_raw(dir / "factors.i32", ds.factors.data(), ds.factors.size());
}

inline FactorDataset import_dataset(const std::filesystem::path& dir) {
    KvFile kv = KvFile::load(dir / "manifest");
    if (kv.get("format") != "cldis-dataset-v1")
        throw ConfigError("manifest: key 'format': unsupported value '" + kv.get("format") + "'");
    FactorDataset ds;
    ds.spec.c = int(kv.get_int("image_c"));
    ds.spec.h = int(kv.get_int("image_h"));
    ds.spec.w = int(kv.get_int("image_w"));
    const auto n_factors = kv.get_int("n_factors");
    for (int f = 0; f < n_factors; ++f) {
        const std::string key = "factor_" + std::to_string(f);
        const std::string& v = kv.get(key);
        const auto colon = v.find(':');
        if (colon == std::string::npos)
            throw ConfigError("manifest: key '" + key + "': expected name:cardinality, got '" + v + "'");
        int card = 0;
        try {
            card = std::stoi(v.substr(colon + 1));
        } catch (...) {
            throw ConfigError("manifest: key '" + key + "': invalid cardinality '" + v.substr(colon + 1) + "'");
        }
        ds.spec.factors.emplace_back(v.substr(0, colon), card);
    }
    ds.spec.validate();
    const auto m = size_t(kv.get_int("m"));
    ds.images = Tensor<float>(int(m), ds.spec.c, ds.spec.h, ds.spec.w);
    ds.images.v = read_raw<float>(dir / "images.f32", ds.images.size());
    ds.factors = read_raw<int32_t>(dir / "factors.i32", m * size_t(ds.spec.n_factors()));
    return ds;
}

}  // namespace cldis::data
