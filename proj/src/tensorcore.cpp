#include "als/tensorcore.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "als/error.hpp"

namespace als {

Vec32::Vec32(std::size_t dim, float fill) : values_(dim, fill) {
    require_finite(values_, "Vec32");
}

Vec32::Vec32(std::vector<float> values) : values_(std::move(values)) {
    require_finite(values_, "Vec32");
}

Vec32::Vec32(std::initializer_list<float> values) : values_(values) {
    require_finite(values_, "Vec32");
}

Mat32::Mat32(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {
    require_finite(values_, "Mat32");
}

Mat32::Mat32(std::size_t rows, std::size_t cols, std::vector<float> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols) {
        throw Error(ErrorKind::DimMismatch, "Mat32 value count " + std::to_string(values_.size()) +
                                                " != " + std::to_string(rows) + "x" +
                                                std::to_string(cols));
    }
    require_finite(values_, "Mat32");
}

void require_finite(std::span<const float> values, const char *what) {
    for (float x : values) {
        if (!std::isfinite(x)) {
            throw Error(ErrorKind::NonFinite, std::string(what) + " holds a non-finite value");
        }
    }
}

double dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw Error(ErrorKind::DimMismatch, "dot: " + std::to_string(a.size()) + " vs " +
                                                std::to_string(b.size()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return acc;
}

double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

float cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw Error(ErrorKind::DimMismatch, "cosine_similarity: " + std::to_string(a.size()) +
                                                " vs " + std::to_string(b.size()));
    }
    double ab = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        const double y = b[i];
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    const double na = std::sqrt(aa);
    const double nb = std::sqrt(bb);
    if (na < kZeroNormThreshold || nb < kZeroNormThreshold) {
        throw Error(ErrorKind::ZeroNorm, "cosine_similarity on a vector with norm < 1e-12");
    }
    return static_cast<float>(std::clamp(ab / (na * nb), -1.0, 1.0));
}

namespace {

template <typename Deref>
Vec32 mean_of(std::size_t n, Deref at) {
    if (n == 0) {
        throw Error(ErrorKind::EmptyPool, "mean_vector on an empty pool");
    }
    const std::size_t dim = at(0).dim();
    std::vector<double> acc(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec32 &v = at(i);
        if (v.dim() != dim) {
            throw Error(ErrorKind::DimMismatch, "mean_vector: element " + std::to_string(i) +
                                                    " has dim " + std::to_string(v.dim()) +
                                                    ", expected " + std::to_string(dim));
        }
        for (std::size_t j = 0; j < dim; ++j) {
            acc[j] += v[j];
        }
    }
    std::vector<float> out(dim);
    for (std::size_t j = 0; j < dim; ++j) {
        out[j] = static_cast<float>(acc[j] / static_cast<double>(n));
    }
    return Vec32(std::move(out));
}

} // namespace

Vec32 mean_vector(std::span<const Vec32> pool) {
    return mean_of(pool.size(), [&](std::size_t i) -> const Vec32 & { return pool[i]; });
}

Vec32 mean_vector(std::span<const Vec32 *const> pool) {
    return mean_of(pool.size(), [&](std::size_t i) -> const Vec32 & { return *pool[i]; });
}

Mat32 matmul(const Mat32 &a, const Mat32 &b) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorKind::DimMismatch, "matmul: " + std::to_string(a.rows()) + "x" +
                                                std::to_string(a.cols()) + " by " +
                                                std::to_string(b.rows()) + "x" +
                                                std::to_string(b.cols()));
    }
    Mat32 c(a.rows(), b.cols());
    kernels::gemm_acc(a.span().data(), b.span().data(), c.span().data(), a.rows(), a.cols(),
                      b.cols());
    return c;
}

void stable_softmax_inplace(std::span<float> x) {
    if (x.empty()) {
        return;
    }
    const float mx = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (float &v : x) {
        v = std::exp(v - mx);
        sum += v;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (float &v : x) {
        v *= inv;
    }
}

Vec32 stable_softmax(const Vec32 &x) {
    if (x.empty()) {
        throw Error(ErrorKind::DimMismatch, "stable_softmax needs dim >= 1");
    }
    std::vector<float> out = x.values();
    stable_softmax_inplace(out);
    return Vec32(std::move(out));
}

Vec32 rms_norm(const Vec32 &x, const Vec32 &gain, float eps) {
    if (x.dim() != gain.dim()) {
        throw Error(ErrorKind::DimMismatch, "rms_norm: x and gain differ in dim");
    }
    if (!(eps > 0.0f)) {
        throw Error(ErrorKind::InvalidConfig, "rms_norm: eps must be positive");
    }
    double ss = 0.0;
    for (float v : x.span()) {
        ss += static_cast<double>(v) * v;
    }
    const float scale = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(x.dim()) + eps));
    std::vector<float> out(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) {
        out[i] = x[i] * scale * gain[i];
    }
    return Vec32(std::move(out));
}

Vec32 add_scaled(const Vec32 &x, const Vec32 &v, float alpha) {
    if (x.dim() != v.dim()) {
        throw Error(ErrorKind::DimMismatch, "add_scaled: " + std::to_string(x.dim()) + " vs " +
                                                std::to_string(v.dim()));
    }
    std::vector<float> out(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) {
        out[i] = x[i] + alpha * v[i];
    }
    return Vec32(std::move(out));
}

namespace kernels {

void gemm_acc(const float *a, const float *b, float *c, std::size_t m, std::size_t k,
              std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        float *ci = c + i * n;
        const float *ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float av = ai[p];
            const float *bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += av * bp[j];
            }
        }
    }
}

void gemm_tn_acc(const float *a, const float *b, float *c, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const float *ai = a + i * k;
        const float *bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float av = ai[p];
            float *cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                cp[j] += av * bi[j];
            }
        }
    }
}

void vecmat(const float *x, const float *w, float *y, std::size_t k, std::size_t n) {
    std::fill(y, y + n, 0.0f);
    gemm_acc(x, w, y, 1, k, n);
}

void transpose(const float *src, float *dst, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

} // namespace kernels

} // namespace als
