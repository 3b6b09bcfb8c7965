#pragma once

// Row-level pieces shared by the cached decoder and the batched trainer so
// both paths add terms in the same order.

#include <cmath>
#include <cstddef>

namespace als::detail {

inline constexpr float kGeluC = 0.7978845608028654f; // sqrt(2/pi)
inline constexpr float kGeluA = 0.044715f;

inline float gelu(float x) {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_grad(float x) {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    const float t = std::tanh(u);
    const float du = kGeluC * (1.0f + 3.0f * kGeluA * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

// out = x * gain / rms(x); returns 1/rms.
inline float rms_norm_row(const float *x, const float *gain, float *out, std::size_t d) {
    float ss = 0.0f;
    for (std::size_t i = 0; i < d; ++i) ss += x[i] * x[i];
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + 1e-5f);
    for (std::size_t i = 0; i < d; ++i) out[i] = x[i] * inv * gain[i];
    return inv;
}

// Causal attention for one query row against `len` cached rows of width d
// split into n_heads. Head h's len weights land at probs + h*prob_stride.
inline void attend_row(const float *q, const float *keys, const float *values, std::size_t len,
                       std::size_t d, std::size_t n_heads, float *out, float *probs,
                       std::size_t prob_stride) {
    const std::size_t hd = d / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    for (std::size_t i = 0; i < d; ++i) out[i] = 0.0f;
    for (std::size_t h = 0; h < n_heads; ++h) {
        const float *qh = q + h * hd;
        float *p = probs + h * prob_stride;
        float mx = -INFINITY;
        for (std::size_t j = 0; j < len; ++j) {
            const float *kj = keys + j * d + h * hd;
            float s = 0.0f;
            for (std::size_t c = 0; c < hd; ++c) s += qh[c] * kj[c];
            p[j] = s * scale;
            mx = p[j] > mx ? p[j] : mx;
        }
        float sum = 0.0f;
        for (std::size_t j = 0; j < len; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
        }
        const float inv = 1.0f / sum;
        float *oh = out + h * hd;
        for (std::size_t j = 0; j < len; ++j) {
            p[j] *= inv;
            const float *vj = values + j * d + h * hd;
            for (std::size_t c = 0; c < hd; ++c) oh[c] += p[j] * vj[c];
        }
    }
}

// logits[v] = x · emb[v]
inline void lm_head_row(const float *x, const float *emb, float *logits, std::size_t d,
                        std::size_t vocab) {
    for (std::size_t v = 0; v < vocab; ++v) {
        const float *e = emb + v * d;
        float s = 0.0f;
        for (std::size_t i = 0; i < d; ++i) s += x[i] * e[i];
        logits[v] = s;
    }
}

} // namespace als::detail
