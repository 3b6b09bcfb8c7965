#pragma once

// Dense f32 vectors and matrices plus the reductions the rest of the engine
// is built on. Every reduction accumulates in a fixed left-to-right order so
// results are bit-reproducible across runs.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace als {

class Vec32 {
  public:
    Vec32() = default;
    explicit Vec32(std::size_t dim, float fill = 0.0f);
    explicit Vec32(std::vector<float> values);
    Vec32(std::initializer_list<float> values);

    std::size_t dim() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    float operator[](std::size_t i) const { return values_[i]; }
    float &operator[](std::size_t i) { return values_[i]; }

    std::span<const float> span() const noexcept { return values_; }
    std::span<float> span() noexcept { return values_; }
    const std::vector<float> &values() const noexcept { return values_; }

    bool operator==(const Vec32 &other) const = default;

  private:
    std::vector<float> values_;
};

class Mat32 {
  public:
    Mat32() = default;
    Mat32(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Mat32(std::size_t rows, std::size_t cols, std::vector<float> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    float operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
    float &operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }

    std::span<const float> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
    std::span<const float> span() const noexcept { return values_; }
    std::span<float> span() noexcept { return values_; }

    bool operator==(const Mat32 &other) const = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> values_;
};

inline constexpr double kZeroNormThreshold = 1e-12;

// Throws NonFinite if any element is NaN or infinite.
void require_finite(std::span<const float> values, const char *what);

double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> a);

// a·b / (|a||b|) clamped to [-1, 1]. Throws ZeroNorm for degenerate inputs.
float cosine_similarity(std::span<const float> a, std::span<const float> b);
inline float cosine_similarity(const Vec32 &a, const Vec32 &b) {
    return cosine_similarity(a.span(), b.span());
}

Vec32 mean_vector(std::span<const Vec32> pool);
Vec32 mean_vector(std::span<const Vec32 *const> pool);

Mat32 matmul(const Mat32 &a, const Mat32 &b);

Vec32 stable_softmax(const Vec32 &x);
void stable_softmax_inplace(std::span<float> x);

Vec32 rms_norm(const Vec32 &x, const Vec32 &gain, float eps);

// out = x + alpha * v, elementwise.
Vec32 add_scaled(const Vec32 &x, const Vec32 &v, float alpha);

namespace kernels {

// c[m×n] += a[m×k] · b[k×n]; per output cell the k-terms are added in
// ascending order starting from the existing value of c.
void gemm_acc(const float *a, const float *b, float *c, std::size_t m, std::size_t k,
              std::size_t n);

// c[k×n] += aᵀ · b where a is [m×k] and b is [m×n].
void gemm_tn_acc(const float *a, const float *b, float *c, std::size_t m, std::size_t k,
                 std::size_t n);

// y[n] = x[k] · w[k×n] (overwrites y).
void vecmat(const float *x, const float *w, float *y, std::size_t k, std::size_t n);

void transpose(const float *src, float *dst, std::size_t rows, std::size_t cols);

} // namespace kernels

} // namespace als
