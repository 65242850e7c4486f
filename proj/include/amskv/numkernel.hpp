#pragma once

// Minimal deterministic dense numeric kernel shared by every other module:
// row-major matrices, row softmax, align-corners bilinear resize, and a
// seeded, platform-independent random initializer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "amskv/error.hpp"

namespace amskv {

// -------------------------------------------------------------------------
// Matrix

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
        if (r < 0 || c < 0) throw ShapeError("Matrix dimensions must be nonnegative");
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return data.size(); }

    bool same_shape(const Matrix& other) const {
        return rows == other.rows && cols == other.cols;
    }

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    static Matrix zeros(int r, int c) { return Matrix(r, c); }
};

inline bool all_finite(const Matrix& m) {
    return std::all_of(m.data.begin(), m.data.end(),
                       [](double v) { return std::isfinite(v); });
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols) +
                         " vs " + std::to_string(b.rows) + ")");
    }
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols; ++j) {
                out.at(i, j) += aik * b.at(k, j);
            }
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
    return out;
}

// Row softmax with temperature. Stabilized by per-row max subtraction so
// arbitrarily large finite logits cannot overflow.
inline Matrix softmax_rows(const Matrix& m, double temperature = 1.0) {
    if (!(temperature > 0.0)) throw NumericError("softmax_rows: temperature must be positive");
    if (!all_finite(m)) throw NumericError("softmax_rows: input has non-finite entries");
    Matrix out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < m.cols; ++j) row_max = std::max(row_max, m.at(i, j) / temperature);
        double denom = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            const double e = std::exp(m.at(i, j) / temperature - row_max);
            out.at(i, j) = e;
            denom += e;
        }
        for (int j = 0; j < m.cols; ++j) out.at(i, j) /= denom;
    }
    return out;
}

inline double dot_row(const Matrix& a, int ra, const Matrix& b, int rb) {
    double s = 0.0;
    for (int j = 0; j < a.cols; ++j) s += a.at(ra, j) * b.at(rb, j);
    return s;
}

inline double l2_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return std::sqrt(s);
}

// -------------------------------------------------------------------------
// SpatialMap: (h, w, d) dense grid, used for 2-D key interpolation and for
// upsampling embeddings between scales.

struct SpatialMap {
    int h = 0;
    int w = 0;
    int d = 0;
    std::vector<double> data;  // indexed (row, col, channel)

    SpatialMap() = default;
    SpatialMap(int h_, int w_, int d_)
        : h(h_), w(w_), d(d_), data(static_cast<size_t>(h_) * w_ * d_, 0.0) {
        if (h_ < 1 || w_ < 1 || d_ < 1) throw ShapeError("SpatialMap dims must be >= 1");
    }

    double& at(int r, int c, int ch) {
        return data[(static_cast<size_t>(r) * w + c) * d + ch];
    }
    double at(int r, int c, int ch) const {
        return data[(static_cast<size_t>(r) * w + c) * d + ch];
    }
};

// Views a (side*side) x d matrix as a side x side spatial grid (row-major).
inline SpatialMap spatial_from_matrix(const Matrix& m, int side) {
    if (m.rows != side * side) {
        throw ShapeError("spatial_from_matrix: rows (" + std::to_string(m.rows) +
                         ") != side^2 (" + std::to_string(side * side) + ")");
    }
    SpatialMap out(side, side, m.cols);
    std::copy(m.data.begin(), m.data.end(), out.data.begin());
    return out;
}

inline Matrix matrix_from_spatial(const SpatialMap& s) {
    Matrix out(s.h * s.w, s.d);
    std::copy(s.data.begin(), s.data.end(), out.data.begin());
    return out;
}

// Align-corners bilinear interpolation, applied per channel. A target axis of
// length 1 samples the source at coordinate 0, so a 1x1 source broadcasts its
// single value to any target size. Output values are convex combinations of
// the four surrounding source cells.
inline SpatialMap bilinear_resize(const SpatialMap& src, int target_h, int target_w) {
    if (target_h < 1 || target_w < 1) {
        throw ShapeError("bilinear_resize: target dims must be >= 1");
    }
    SpatialMap out(target_h, target_w, src.d);
    const auto src_coord = [](int t, int target_len, int src_len) -> double {
        if (target_len == 1 || src_len == 1) return 0.0;
        return static_cast<double>(t) * (src_len - 1) / (target_len - 1);
    };
    for (int y = 0; y < target_h; ++y) {
        const double sy = src_coord(y, target_h, src.h);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, src.h - 1);
        const double fy = sy - y0;
        for (int x = 0; x < target_w; ++x) {
            const double sx = src_coord(x, target_w, src.w);
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, src.w - 1);
            const double fx = sx - x0;
            for (int ch = 0; ch < src.d; ++ch) {
                const double v = (1.0 - fy) * (1.0 - fx) * src.at(y0, x0, ch) +
                                 (1.0 - fy) * fx * src.at(y0, x1, ch) +
                                 fy * (1.0 - fx) * src.at(y1, x0, ch) +
                                 fy * fx * src.at(y1, x1, ch);
                out.at(y, x, ch) = v;
            }
        }
    }
    return out;
}

// -------------------------------------------------------------------------
// Seeded PRNG.
//
// SplitMix64 (Steele, Lea & Flood / Vigna's public-domain constants): the
// state advances by the golden-gamma 0x9E3779B97F4A7C15 and the output is a
// 64-bit finalizer mix. Uniform doubles take the top 53 bits; gaussians use
// the Box-Muller transform (cosine branch, two uniforms per draw). All of it
// is integer arithmetic plus libm, so the same seed reproduces the same
// stream in any language that follows the recipe.

class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal. u1 is shifted into (0, 1] so log never sees zero.
    double next_gaussian() {
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

  private:
    uint64_t state_;
};

enum class Dist { Uniform, Gaussian };

// Fills row-major from a fresh Rng(seed); identical (seed, shape, dist)
// gives identical matrices.
inline Matrix seeded_init(uint64_t seed, int rows, int cols, Dist dist) {
    Matrix m(rows, cols);
    Rng rng(seed);
    for (auto& v : m.data) {
        v = dist == Dist::Uniform ? rng.next_uniform() : rng.next_gaussian();
    }
    return m;
}

}  // namespace amskv
