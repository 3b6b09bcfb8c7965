#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "als/error.hpp"
#include "als/tinylm.hpp"
#include "model_math.hpp"

namespace als {

namespace {

using kernels::gemm_acc;
using kernels::gemm_tn_acc;

struct Dims {
    std::size_t d, f, v, h, hd, layers;
};

Dims dims_of(const ModelConfig &c) {
    return {static_cast<std::size_t>(c.d_model), static_cast<std::size_t>(c.d_ff()),
            static_cast<std::size_t>(c.vocab_size), static_cast<std::size_t>(c.n_heads),
            static_cast<std::size_t>(c.head_dim()), static_cast<std::size_t>(c.n_layers)};
}

struct LayerActs {
    std::vector<float> x, inv1, n1, q, k, v, p, a, xmid, inv2, n2, hpre, g;
};

// Forward activations of one sequence, kept for the backward pass.
struct SeqActs {
    std::size_t n = 0;
    std::vector<LayerActs> layers;
    std::vector<float> xl, invf, nf;
    std::vector<std::size_t> loss_rows; // input positions whose prediction is scored
    std::vector<float> probs;           // softmax rows for loss_rows [m × V]
    double loss_sum = 0.0;
};

void zero(std::vector<float> &v, std::size_t n) { v.assign(n, 0.0f); }

// Runs the network over tokens[0..n-1] (n = tokens.size() - 1 inputs).
void forward_seq(const Model &model, std::span<const TokenId> tokens, std::size_t loss_from,
                 SeqActs &acts, bool keep_probs) {
    const Dims dm = dims_of(model.config());
    const std::size_t n = tokens.size() - 1;
    acts.n = n;
    acts.layers.resize(dm.layers);

    std::vector<float> x(n * dm.d);
    const float *tok = model.token_embedding().data();
    const float *pos = model.position_embedding().data();
    for (std::size_t i = 0; i < n; ++i) {
        const float *te = tok + static_cast<std::size_t>(tokens[i]) * dm.d;
        const float *pe = pos + i * dm.d;
        for (std::size_t c = 0; c < dm.d; ++c) x[i * dm.d + c] = te[c] + pe[c];
    }

    for (std::size_t l = 0; l < dm.layers; ++l) {
        const Model::LayerWeights w = model.layer(static_cast<int>(l));
        LayerActs &la = acts.layers[l];
        la.x = x;
        la.inv1.resize(n);
        la.n1.resize(n * dm.d);
        for (std::size_t i = 0; i < n; ++i) {
            la.inv1[i] = detail::rms_norm_row(&x[i * dm.d], w.attn_norm.data(), &la.n1[i * dm.d], dm.d);
        }
        zero(la.q, n * dm.d);
        zero(la.k, n * dm.d);
        zero(la.v, n * dm.d);
        gemm_acc(la.n1.data(), w.wq.data(), la.q.data(), n, dm.d, dm.d);
        gemm_acc(la.n1.data(), w.wk.data(), la.k.data(), n, dm.d, dm.d);
        gemm_acc(la.n1.data(), w.wv.data(), la.v.data(), n, dm.d, dm.d);
        la.p.assign(n * dm.h * n, 0.0f);
        la.a.resize(n * dm.d);
        for (std::size_t i = 0; i < n; ++i) {
            detail::attend_row(&la.q[i * dm.d], la.k.data(), la.v.data(), i + 1, dm.d, dm.h,
                               &la.a[i * dm.d], &la.p[i * dm.h * n], n);
        }
        la.xmid = x;
        gemm_acc(la.a.data(), w.wo.data(), la.xmid.data(), n, dm.d, dm.d);
        la.inv2.resize(n);
        la.n2.resize(n * dm.d);
        for (std::size_t i = 0; i < n; ++i) {
            la.inv2[i] = detail::rms_norm_row(&la.xmid[i * dm.d], w.mlp_norm.data(), &la.n2[i * dm.d], dm.d);
        }
        zero(la.hpre, n * dm.f);
        gemm_acc(la.n2.data(), w.w1.data(), la.hpre.data(), n, dm.d, dm.f);
        la.g.resize(n * dm.f);
        for (std::size_t i = 0; i < n * dm.f; ++i) la.g[i] = detail::gelu(la.hpre[i]);
        // x_next = xmid + g·W2, accumulated onto a copy of xmid
        x = la.xmid;
        std::vector<float> mlp(n * dm.d, 0.0f);
        gemm_acc(la.g.data(), w.w2.data(), mlp.data(), n, dm.f, dm.d);
        for (std::size_t i = 0; i < n * dm.d; ++i) x[i] = la.xmid[i] + mlp[i];
    }

    acts.xl = x;
    acts.invf.resize(n);
    acts.nf.resize(n * dm.d);
    for (std::size_t i = 0; i < n; ++i) {
        acts.invf[i] = detail::rms_norm_row(&x[i * dm.d], model.final_norm().data(), &acts.nf[i * dm.d], dm.d);
    }

    acts.loss_rows.clear();
    const std::size_t first = std::max<std::size_t>(loss_from, 1);
    for (std::size_t i = first - 1; i < n; ++i) acts.loss_rows.push_back(i);
    acts.probs.resize(acts.loss_rows.size() * dm.v);
    acts.loss_sum = 0.0;
    for (std::size_t r = 0; r < acts.loss_rows.size(); ++r) {
        const std::size_t i = acts.loss_rows[r];
        float *lg = &acts.probs[r * dm.v];
        detail::lm_head_row(&acts.nf[i * dm.d], tok, lg, dm.d, dm.v);
        const TokenId target = tokens[i + 1];
        acts.loss_sum -= token_logprob(std::span<const float>(lg, dm.v), target);
        if (keep_probs) stable_softmax_inplace(std::span<float>(lg, dm.v));
    }
}

// dx += backward of y = x * inv * gain; dgain accumulates.
void rms_backward(const float *dy, const float *x, float inv, const float *gain, float *dx,
                  float *dgain, std::size_t d) {
    float dot = 0.0f;
    for (std::size_t c = 0; c < d; ++c) {
        dgain[c] += dy[c] * x[c] * inv;
        dot += dy[c] * gain[c] * x[c];
    }
    const float k = inv * inv * inv * dot / static_cast<float>(d);
    for (std::size_t c = 0; c < d; ++c) dx[c] += inv * gain[c] * dy[c] - k * x[c];
}

struct Transposed {
    std::vector<float> wq, wk, wv, wo, w1, w2;
};

std::vector<Transposed> transpose_weights(const Model &model) {
    const Dims dm = dims_of(model.config());
    std::vector<Transposed> out(dm.layers);
    for (std::size_t l = 0; l < dm.layers; ++l) {
        const auto w = model.layer(static_cast<int>(l));
        auto &t = out[l];
        t.wq.resize(dm.d * dm.d);
        t.wk.resize(dm.d * dm.d);
        t.wv.resize(dm.d * dm.d);
        t.wo.resize(dm.d * dm.d);
        t.w1.resize(dm.d * dm.f);
        t.w2.resize(dm.f * dm.d);
        kernels::transpose(w.wq.data(), t.wq.data(), dm.d, dm.d);
        kernels::transpose(w.wk.data(), t.wk.data(), dm.d, dm.d);
        kernels::transpose(w.wv.data(), t.wv.data(), dm.d, dm.d);
        kernels::transpose(w.wo.data(), t.wo.data(), dm.d, dm.d);
        kernels::transpose(w.w1.data(), t.w1.data(), dm.d, dm.f);
        kernels::transpose(w.w2.data(), t.w2.data(), dm.f, dm.d);
    }
    return out;
}

void backward_seq(const Model &model, const std::vector<Transposed> &wt,
                  std::span<const TokenId> tokens, const SeqActs &acts, float loss_scale,
                  std::vector<float> &grad) {
    const Dims dm = dims_of(model.config());
    const Model::Layout &lay = model.layout();
    const std::size_t n = acts.n;
    const float *emb = model.token_embedding().data();
    float *g_tok = grad.data() + lay.tok_emb;

    // LM head (tied with the token embedding)
    std::vector<float> dnf(n * dm.d, 0.0f);
    std::vector<float> dl(dm.v);
    for (std::size_t r = 0; r < acts.loss_rows.size(); ++r) {
        const std::size_t i = acts.loss_rows[r];
        const float *p = &acts.probs[r * dm.v];
        for (std::size_t t = 0; t < dm.v; ++t) dl[t] = p[t] * loss_scale;
        dl[static_cast<std::size_t>(tokens[i + 1])] -= loss_scale;
        float *dni = &dnf[i * dm.d];
        const float *nfi = &acts.nf[i * dm.d];
        for (std::size_t t = 0; t < dm.v; ++t) {
            const float g = dl[t];
            const float *e = emb + t * dm.d;
            float *ge = g_tok + t * dm.d;
            for (std::size_t c = 0; c < dm.d; ++c) {
                dni[c] += g * e[c];
                ge[c] += g * nfi[c];
            }
        }
    }

    std::vector<float> dx(n * dm.d, 0.0f);
    {
        const float *gain = model.final_norm().data();
        float *dgain = grad.data() + lay.final_norm;
        for (std::size_t i = 0; i < n; ++i) {
            rms_backward(&dnf[i * dm.d], &acts.xl[i * dm.d], acts.invf[i], gain, &dx[i * dm.d], dgain, dm.d);
        }
    }

    std::vector<float> dg, dh, dn, dxmid, da, dq, dk, dv, dp;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dm.hd));
    for (std::size_t li = dm.layers; li-- > 0;) {
        const LayerActs &la = acts.layers[li];
        const Model::LayerWeights w = model.layer(static_cast<int>(li));
        const Model::Layout::Layer &gl = lay.layers[li];
        const Transposed &t = wt[li];

        // MLP
        zero(dg, n * dm.f);
        gemm_acc(dx.data(), t.w2.data(), dg.data(), n, dm.d, dm.f);
        gemm_tn_acc(la.g.data(), dx.data(), grad.data() + gl.w2, n, dm.f, dm.d);
        dh.resize(n * dm.f);
        for (std::size_t i = 0; i < n * dm.f; ++i) dh[i] = dg[i] * detail::gelu_grad(la.hpre[i]);
        zero(dn, n * dm.d);
        gemm_acc(dh.data(), t.w1.data(), dn.data(), n, dm.f, dm.d);
        gemm_tn_acc(la.n2.data(), dh.data(), grad.data() + gl.w1, n, dm.d, dm.f);
        dxmid = dx;
        for (std::size_t i = 0; i < n; ++i) {
            rms_backward(&dn[i * dm.d], &la.xmid[i * dm.d], la.inv2[i], w.mlp_norm.data(),
                         &dxmid[i * dm.d], grad.data() + gl.mlp_norm, dm.d);
        }

        // attention output projection
        zero(da, n * dm.d);
        gemm_acc(dxmid.data(), t.wo.data(), da.data(), n, dm.d, dm.d);
        gemm_tn_acc(la.a.data(), dxmid.data(), grad.data() + gl.wo, n, dm.d, dm.d);

        // causal softmax attention
        zero(dq, n * dm.d);
        zero(dk, n * dm.d);
        zero(dv, n * dm.d);
        dp.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t h = 0; h < dm.h; ++h) {
                const std::size_t off = h * dm.hd;
                const float *p = &la.p[i * dm.h * n + h * n];
                const float *dai = &da[i * dm.d + off];
                float sum = 0.0f;
                for (std::size_t j = 0; j <= i; ++j) {
                    const float *vj = &la.v[j * dm.d + off];
                    float s = 0.0f;
                    for (std::size_t c = 0; c < dm.hd; ++c) s += dai[c] * vj[c];
                    dp[j] = s;
                    sum += p[j] * s;
                    float *dvj = &dv[j * dm.d + off];
                    for (std::size_t c = 0; c < dm.hd; ++c) dvj[c] += p[j] * dai[c];
                }
                const float *qi = &la.q[i * dm.d + off];
                float *dqi = &dq[i * dm.d + off];
                for (std::size_t j = 0; j <= i; ++j) {
                    const float ds = p[j] * (dp[j] - sum) * scale;
                    const float *kj = &la.k[j * dm.d + off];
                    float *dkj = &dk[j * dm.d + off];
                    for (std::size_t c = 0; c < dm.hd; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }

        zero(dn, n * dm.d);
        gemm_acc(dq.data(), t.wq.data(), dn.data(), n, dm.d, dm.d);
        gemm_acc(dk.data(), t.wk.data(), dn.data(), n, dm.d, dm.d);
        gemm_acc(dv.data(), t.wv.data(), dn.data(), n, dm.d, dm.d);
        gemm_tn_acc(la.n1.data(), dq.data(), grad.data() + gl.wq, n, dm.d, dm.d);
        gemm_tn_acc(la.n1.data(), dk.data(), grad.data() + gl.wk, n, dm.d, dm.d);
        gemm_tn_acc(la.n1.data(), dv.data(), grad.data() + gl.wv, n, dm.d, dm.d);
        dx = dxmid;
        for (std::size_t i = 0; i < n; ++i) {
            rms_backward(&dn[i * dm.d], &la.x[i * dm.d], la.inv1[i], w.attn_norm.data(),
                         &dx[i * dm.d], grad.data() + gl.attn_norm, dm.d);
        }
    }

    float *g_pos = grad.data() + lay.pos_emb;
    for (std::size_t i = 0; i < n; ++i) {
        float *gt = g_tok + static_cast<std::size_t>(tokens[i]) * dm.d;
        float *gp = g_pos + i * dm.d;
        for (std::size_t c = 0; c < dm.d; ++c) {
            gt[c] += dx[i * dm.d + c];
            gp[c] += dx[i * dm.d + c];
        }
    }
}

std::size_t loss_token_count(const TrainSequence &s) {
    const std::size_t first = std::max<std::size_t>(s.loss_from, 1);
    return s.tokens.size() > first ? s.tokens.size() - first : 0;
}

void check_sequences(const Model &model, std::span<const TrainSequence> data, const char *what) {
    for (const auto &s : data) {
        if (s.tokens.size() < 2) {
            throw Error(ErrorKind::InvalidConfig, std::string(what) + ": sequences need >= 2 tokens");
        }
        if (s.tokens.size() > static_cast<std::size_t>(model.config().max_context)) {
            throw Error(ErrorKind::ContextOverflow, std::string(what) + ": sequence of " +
                                                        std::to_string(s.tokens.size()) +
                                                        " tokens exceeds max_context");
        }
        for (TokenId t : s.tokens) {
            if (t < 0 || t >= model.config().vocab_size) {
                throw Error(ErrorKind::InvalidConfig, std::string(what) + ": token id out of range");
            }
        }
    }
}

float schedule(std::size_t step, int steps, float lr, const TrainOptions &o) {
    const std::size_t total = static_cast<std::size_t>(steps);
    if (o.warmup_steps > 0 && step <= o.warmup_steps && total > o.warmup_steps) {
        return lr * static_cast<float>(step) / static_cast<float>(o.warmup_steps);
    }
    const std::size_t start = total > o.warmup_steps ? o.warmup_steps : 0;
    const double span = static_cast<double>(total - start);
    const double progress = span > 0 ? static_cast<double>(step - start) / span : 1.0;
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * std::clamp(progress, 0.0, 1.0)));
    return static_cast<float>(lr * (o.min_lr_ratio + (1.0 - o.min_lr_ratio) * cosine));
}

} // namespace

float evaluate_loss(const Model &model, std::span<const TrainSequence> data) {
    check_sequences(model, data, "evaluate_loss");
    double total = 0.0;
    std::size_t count = 0;
    SeqActs acts;
    for (const auto &s : data) {
        forward_seq(model, s.tokens, s.loss_from, acts, false);
        total += acts.loss_sum;
        count += acts.loss_rows.size();
    }
    return count == 0 ? 0.0f : static_cast<float>(total / static_cast<double>(count));
}

std::vector<float> sequence_logits(const Model &model, std::span<const TokenId> tokens) {
    const TrainSequence seq{std::vector<TokenId>(tokens.begin(), tokens.end()), 1};
    check_sequences(model, std::span<const TrainSequence>(&seq, 1), "sequence_logits");
    SeqActs acts;
    forward_seq(model, tokens, 1, acts, false);
    return acts.probs; // logits, since keep_probs=false leaves them raw
}

float loss_and_gradient(const Model &model, std::span<const TrainSequence> batch,
                        std::vector<float> &grad) {
    check_sequences(model, batch, "loss_and_gradient");
    grad.assign(model.param_count(), 0.0f);
    std::size_t loss_tokens = 0;
    for (const auto &s : batch) loss_tokens += loss_token_count(s);
    const float loss_scale = loss_tokens > 0 ? 1.0f / static_cast<float>(loss_tokens) : 0.0f;
    const auto wt = transpose_weights(model);
    SeqActs acts;
    double loss_sum = 0.0;
    for (const auto &s : batch) {
        forward_seq(model, s.tokens, s.loss_from, acts, true);
        loss_sum += acts.loss_sum;
        backward_seq(model, wt, s.tokens, acts, loss_scale, grad);
    }
    return loss_tokens > 0 ? static_cast<float>(loss_sum / static_cast<double>(loss_tokens)) : 0.0f;
}

TrainReport train(Model &model, std::span<const TrainSequence> corpus, int steps, float lr,
                  const TrainOptions &opts) {
    if (steps < 1) throw Error(ErrorKind::InvalidConfig, "train needs steps >= 1");
    if (!(lr >= 0.0f)) throw Error(ErrorKind::InvalidConfig, "learning rate must be >= 0");
    if (corpus.empty()) throw Error(ErrorKind::EmptyCorpus, "train needs a non-empty corpus");
    if (opts.batch_size == 0) throw Error(ErrorKind::InvalidConfig, "batch_size must be >= 1");
    check_sequences(model, corpus, "train");
    check_sequences(model, opts.heldout, "heldout");

    const auto start = std::chrono::steady_clock::now();
    TrainReport report;
    if (!opts.heldout.empty()) report.initial_heldout_loss = evaluate_loss(model, opts.heldout);

    const std::size_t np = model.param_count();
    std::vector<float> grad(np), m(np, 0.0f), v(np, 0.0f);
    std::mt19937_64 rng(opts.seed);
    std::vector<SeqActs> acts(opts.batch_size);
    std::vector<std::size_t> picks(opts.batch_size);
    double b1t = 1.0;
    double b2t = 1.0;

    for (std::size_t step = 1; step <= static_cast<std::size_t>(steps); ++step) {
        for (auto &p : picks) p = static_cast<std::size_t>(rng() % corpus.size());
        std::size_t loss_tokens = 0;
        for (std::size_t p : picks) loss_tokens += loss_token_count(corpus[p]);
        const float loss_scale = loss_tokens > 0 ? 1.0f / static_cast<float>(loss_tokens) : 0.0f;

        std::fill(grad.begin(), grad.end(), 0.0f);
        const auto wt = transpose_weights(model);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < picks.size(); ++b) {
            const TrainSequence &s = corpus[picks[b]];
            forward_seq(model, s.tokens, s.loss_from, acts[b], true);
            loss_sum += acts[b].loss_sum;
            backward_seq(model, wt, s.tokens, acts[b], loss_scale, grad);
            report.tokens_seen += s.tokens.size();
        }

        const float step_lr = schedule(step, steps, lr, opts);
        b1t *= opts.beta1;
        b2t *= opts.beta2;
        const float c1 = static_cast<float>(1.0 / (1.0 - b1t));
        const float c2 = static_cast<float>(1.0 / (1.0 - b2t));
        std::span<float> params = model.mutable_params();
        for (std::size_t i = 0; i < np; ++i) {
            const float g = grad[i];
            m[i] = opts.beta1 * m[i] + (1.0f - opts.beta1) * g;
            v[i] = opts.beta2 * v[i] + (1.0f - opts.beta2) * g * g;
            params[i] -= step_lr * (m[i] * c1) / (std::sqrt(v[i] * c2) + opts.adam_eps);
        }

        const float mean_loss = loss_tokens > 0 ? static_cast<float>(loss_sum / static_cast<double>(loss_tokens)) : 0.0f;
        report.loss_curve.push_back(mean_loss);
        if (!std::isfinite(mean_loss)) {
            throw Error(ErrorKind::NonFinite, "training diverged at step " + std::to_string(step));
        }
        if (opts.on_step) opts.on_step(step, mean_loss);
        if (!opts.heldout.empty() && opts.eval_every > 0 && step % opts.eval_every == 0) {
            report.heldout_curve.emplace_back(step, evaluate_loss(model, opts.heldout));
        }
    }
    require_finite(model.params(), "trained parameters");
    if (!opts.heldout.empty()) report.final_heldout_loss = evaluate_loss(model, opts.heldout);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

} // namespace als
