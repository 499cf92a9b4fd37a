#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "cldis/common.hpp"
#include "cldis/tensor.hpp"

namespace cldis {

inline uint8_t to_byte(float v) {
    const float s = std::round(v * 255.0f);
    return uint8_t(std::clamp(s, 0.0f, 255.0f));
}

// Writes sample `i` of a [N,C,H,W] tensor as binary PPM (C=3) or PGM (C=1).
inline void write_image(const std::filesystem::path& path, const Tensor<float>& t, int i = 0,
                        const std::string& comment = "") {
    require(t.c == 1 || t.c == 3, "write_image: C must be 1 or 3");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << (t.c == 3 ? "P6" : "P5") << "\n";
    if (!comment.empty()) f << "# " << comment << "\n";
    f << t.w << " " << t.h << "\n255\n";
    for (int y = 0; y < t.h; ++y)
        for (int x = 0; x < t.w; ++x)
            for (int c = 0; c < t.c; ++c) f.put(char(to_byte(t.at(i, c, y, x))));
}

// Vertical grid, one image per row, 2px separators.
inline void write_image_grid(const std::filesystem::path& path, const Tensor<float>& t) {
    require(t.n >= 1, "write_image_grid: empty tensor");
    const int sep = 2;
    Tensor<float> grid(1, t.c, t.n * t.h + (t.n - 1) * sep, t.w);
    for (int i = 0; i < t.n; ++i)
        for (int c = 0; c < t.c; ++c)
            for (int y = 0; y < t.h; ++y)
                for (int x = 0; x < t.w; ++x)
                    grid.at(0, c, i * (t.h + sep) + y, x) = t.at(i, c, y, x);
    write_image(path, grid, 0);
}

// Grayscale heatmap with a linear mapping; the data min/max is recorded in a
// header comment so values can be recovered.
inline void write_heatmap(const std::filesystem::path& path, const std::vector<double>& values, int h,
                          int w) {
    require(values.size() == size_t(h) * w, "write_heatmap: size mismatch");
    double lo = values.empty() ? 0.0 : values[0], hi = lo;
    for (double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = (hi > lo) ? (hi - lo) : 1.0;
    Tensor<float> img(1, 1, h, w);
    for (int i = 0; i < h * w; ++i) img.v[i] = float((values[i] - lo) / span);
    char comment[96];
    std::snprintf(comment, sizeof comment, "min=%.9g max=%.9g", lo, hi);
    write_image(path, img, 0, comment);
}

// Minimal PPM/PGM reader for round-trip tests.
inline Tensor<float> read_image(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read " + path.string());
    std::string magic;
    f >> magic;
    const int c = magic == "P6" ? 3 : magic == "P5" ? 1 : 0;
    if (c == 0) throw ConfigError(path.string() + ": not a P5/P6 file");
    auto next_token = [&f, &path]() {
        std::string tok;
        while (f >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(f, rest);
                continue;
            }
            return tok;
        }
        throw ConfigError(path.string() + ": truncated header");
    };
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (maxval != 255) throw ConfigError(path.string() + ": unsupported maxval");
    f.get();
    Tensor<float> t(1, c, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci) t.at(0, ci, y, x) = float(uint8_t(f.get())) / 255.0f;
    return t;
}

}  // namespace cldis
