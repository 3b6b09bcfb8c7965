#include "als/tinylm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <string>

#include "als/error.hpp"
#include "bytes.hpp"
#include "model_math.hpp"

namespace als {

void ModelConfig::validate() const {
    auto fail = [](const std::string &msg) { throw Error(ErrorKind::InvalidConfig, msg); };
    if (n_layers < 2) fail("n_layers must be >= 2 so a penultimate layer exists");
    if (d_model <= 0 || n_heads <= 0 || vocab_size <= 0 || max_context <= 0) {
        fail("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
}

using namespace detail;

namespace {

Model::Layout make_layout(const ModelConfig &cfg) {
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t f = static_cast<std::size_t>(cfg.d_ff());
    Model::Layout lay{};
    std::size_t off = 0;
    lay.tok_emb = off;
    off += static_cast<std::size_t>(cfg.vocab_size) * d;
    lay.pos_emb = off;
    off += static_cast<std::size_t>(cfg.max_context) * d;
    for (int l = 0; l < cfg.n_layers; ++l) {
        Model::Layout::Layer ly{};
        ly.attn_norm = off; off += d;
        ly.wq = off; off += d * d;
        ly.wk = off; off += d * d;
        ly.wv = off; off += d * d;
        ly.wo = off; off += d * d;
        ly.mlp_norm = off; off += d;
        ly.w1 = off; off += d * f;
        ly.w2 = off; off += f * d;
        lay.layers.push_back(ly);
    }
    lay.final_norm = off;
    off += d;
    lay.total = off;
    return lay;
}

// Uniform in [-bound, bound) from the top 24 bits of the generator.
void fill_uniform(std::mt19937_64 &rng, std::span<float> out, float bound) {
    for (float &v : out) {
        const float u = static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
        v = (2.0f * u - 1.0f) * bound;
    }
}

using Clock = std::chrono::steady_clock;

std::uint64_t elapsed_ns(Clock::time_point since) {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - since).count());
}

constexpr char kModelMagic[4] = {'T', 'L', 'M', '1'};
constexpr std::size_t kModelHeaderBytes = 4 + 5 * 4 + 8;

} // namespace

Model::Model(const ModelConfig &cfg) : cfg_(cfg) {
    cfg_.validate();
    layout_ = make_layout(cfg_);
    params_.assign(layout_.total, 0.0f);
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t f = static_cast<std::size_t>(cfg_.d_ff());
    auto span_at = [&](std::size_t off, std::size_t n) { return std::span<float>(params_.data() + off, n); };
    // Unit-variance embeddings; linear layers U(±1/sqrt(fan_in)); norm gains 1.
    const float emb_bound = std::sqrt(3.0f);
    fill_uniform(rng, span_at(layout_.tok_emb, cfg_.vocab_size * d), emb_bound);
    fill_uniform(rng, span_at(layout_.pos_emb, cfg_.max_context * d), emb_bound);
    const float bound_d = 1.0f / std::sqrt(static_cast<float>(d));
    const float bound_f = 1.0f / std::sqrt(static_cast<float>(f));
    for (const auto &ly : layout_.layers) {
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(ly.attn_norm), d, 1.0f);
        fill_uniform(rng, span_at(ly.wq, d * d), bound_d);
        fill_uniform(rng, span_at(ly.wk, d * d), bound_d);
        fill_uniform(rng, span_at(ly.wv, d * d), bound_d);
        fill_uniform(rng, span_at(ly.wo, d * d), bound_d);
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(ly.mlp_norm), d, 1.0f);
        fill_uniform(rng, span_at(ly.w1, d * f), bound_d);
        fill_uniform(rng, span_at(ly.w2, f * d), bound_f);
    }
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(layout_.final_norm), d, 1.0f);
}

Model::Model(const ModelConfig &cfg, std::vector<float> params) : cfg_(cfg) {
    cfg_.validate();
    layout_ = make_layout(cfg_);
    if (params.size() != layout_.total) {
        throw Error(ErrorKind::DimMismatch, "parameter count " + std::to_string(params.size()) +
                                                " does not match config (" +
                                                std::to_string(layout_.total) + ")");
    }
    require_finite(params, "model parameters");
    params_ = std::move(params);
}

Model::Model(const Model &other)
    : cfg_(other.cfg_), layout_(other.layout_), params_(other.params_),
      forward_count_(other.forward_count()) {}

Model &Model::operator=(const Model &other) {
    if (this != &other) {
        cfg_ = other.cfg_;
        layout_ = other.layout_;
        params_ = other.params_;
        forward_count_.store(other.forward_count(), std::memory_order_relaxed);
    }
    return *this;
}

std::span<const float> Model::token_embedding() const {
    return {params_.data() + layout_.tok_emb, static_cast<std::size_t>(cfg_.vocab_size * cfg_.d_model)};
}

std::span<const float> Model::position_embedding() const {
    return {params_.data() + layout_.pos_emb, static_cast<std::size_t>(cfg_.max_context * cfg_.d_model)};
}

Model::LayerWeights Model::layer(int l) const {
    const auto &ly = layout_.layers.at(static_cast<std::size_t>(l));
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t f = static_cast<std::size_t>(cfg_.d_ff());
    auto at = [&](std::size_t off, std::size_t n) { return std::span<const float>(params_.data() + off, n); };
    return {at(ly.attn_norm, d), at(ly.wq, d * d), at(ly.wk, d * d), at(ly.wv, d * d),
            at(ly.wo, d * d),    at(ly.mlp_norm, d), at(ly.w1, d * f), at(ly.w2, f * d)};
}

std::span<const float> Model::final_norm() const {
    return {params_.data() + layout_.final_norm, static_cast<std::size_t>(cfg_.d_model)};
}

Digest Model::checksum() const {
    Hasher h;
    h.u64(static_cast<std::uint64_t>(cfg_.n_layers))
        .u64(static_cast<std::uint64_t>(cfg_.d_model))
        .u64(static_cast<std::uint64_t>(cfg_.n_heads))
        .u64(static_cast<std::uint64_t>(cfg_.vocab_size))
        .u64(static_cast<std::uint64_t>(cfg_.max_context))
        .u64(cfg_.seed)
        .field(std::span<const float>(params_));
    return h.finish();
}

Model init_model(const ModelConfig &cfg) { return Model(cfg); }

Hook identity_hook(int layer, HookMode mode) {
    return Hook{{layer, mode}, [](const HiddenState &h, TokenId) {
                    HookOutcome out;
                    out.replacement = h.vector;
                    return out;
                }};
}

KVCache::KVCache(const ModelConfig &cfg)
    : capacity_(static_cast<std::size_t>(cfg.max_context)),
      keys_(static_cast<std::size_t>(cfg.n_layers),
            std::vector<float>(capacity_ * static_cast<std::size_t>(cfg.d_model))),
      values_(static_cast<std::size_t>(cfg.n_layers),
              std::vector<float>(capacity_ * static_cast<std::size_t>(cfg.d_model))) {}

void KVCache::truncate(std::size_t length) {
    if (length > length_) {
        throw Error(ErrorKind::InvalidConfig, "KVCache::truncate beyond current length");
    }
    length_ = length;
}

// Runs one position through the network. Friend of KVCache.
struct StepRunner {
    static StepResult run(const Model &model, TokenId token, KVCache &cache, const Hook *hook) {
        const ModelConfig &cfg = model.config();
        const std::size_t d = static_cast<std::size_t>(cfg.d_model);
        const std::size_t f = static_cast<std::size_t>(cfg.d_ff());
        const std::size_t pos = cache.length_;
        if (pos >= cache.capacity_) {
            throw Error(ErrorKind::ContextOverflow, "position " + std::to_string(pos) +
                                                        " exceeds max_context " +
                                                        std::to_string(cache.capacity_));
        }
        if (token < 0 || token >= cfg.vocab_size) {
            throw Error(ErrorKind::InvalidConfig, "token id " + std::to_string(token) + " out of range");
        }
        const int site = hook != nullptr ? hook->site.layer : cfg.penultimate_layer();
        if (hook != nullptr && (site < 1 || site > cfg.n_layers - 1)) {
            throw Error(ErrorKind::InvalidConfig, "hook layer must be in [1, n_layers-1]");
        }

        // scratch: x, n, q, att, tmp (d each), hidden (f), head-major scores
        auto &s = cache.scratch_;
        s.resize(5 * d + f + static_cast<std::size_t>(cfg.n_heads) * cache.capacity_);
        float *x = s.data();
        float *n = x + d;
        float *q = n + d;
        float *att = q + d;
        float *tmp = att + d;
        float *hid = tmp + d;
        float *scores = hid + f;

        const float *tok = model.token_embedding().data() + static_cast<std::size_t>(token) * d;
        const float *pe = model.position_embedding().data() + pos * d;
        for (std::size_t i = 0; i < d; ++i) x[i] = tok[i] + pe[i];

        StepResult result;
        for (int l = 0; l < cfg.n_layers; ++l) {
            if (l == site) {
                result.observed = HiddenState{Vec32(std::vector<float>(x, x + d)), l, pos};
                if (hook != nullptr) {
                    HookOutcome outcome = hook->fn(result.observed, token);
                    result.cosine = outcome.cosine;
                    result.nudged = outcome.nudged;
                    if (hook->site.mode == HookMode::ObserveAndReplace && outcome.replacement) {
                        if (outcome.replacement->dim() != d) {
                            throw Error(ErrorKind::DimMismatch, "hook returned a state of the wrong dim");
                        }
                        std::copy_n(outcome.replacement->span().data(), d, x);
                    }
                }
            }
            const Model::LayerWeights w = model.layer(l);
            float *kc = cache.keys_[static_cast<std::size_t>(l)].data();
            float *vc = cache.values_[static_cast<std::size_t>(l)].data();

            detail::rms_norm_row(x, w.attn_norm.data(), n, d);
            kernels::vecmat(n, w.wq.data(), q, d, d);
            kernels::vecmat(n, w.wk.data(), kc + pos * d, d, d);
            kernels::vecmat(n, w.wv.data(), vc + pos * d, d, d);
            detail::attend_row(q, kc, vc, pos + 1, d, static_cast<std::size_t>(cfg.n_heads), att,
                               scores, pos + 1);
            kernels::vecmat(att, w.wo.data(), tmp, d, d);
            for (std::size_t i = 0; i < d; ++i) x[i] += tmp[i];

            detail::rms_norm_row(x, w.mlp_norm.data(), n, d);
            kernels::vecmat(n, w.w1.data(), hid, d, f);
            for (std::size_t i = 0; i < f; ++i) hid[i] = detail::gelu(hid[i]);
            kernels::vecmat(hid, w.w2.data(), tmp, f, d);
            for (std::size_t i = 0; i < d; ++i) x[i] += tmp[i];
        }

        detail::rms_norm_row(x, model.final_norm().data(), n, d);
        std::vector<float> logits(static_cast<std::size_t>(cfg.vocab_size));
        detail::lm_head_row(n, model.token_embedding().data(), logits.data(), d,
                            static_cast<std::size_t>(cfg.vocab_size));
        result.logits = Vec32(std::move(logits));

        cache.length_ = pos + 1;
        ++cache.forward_passes_;
        model.note_forward();
        return result;
    }
};

StepResult forward_step(const Model &model, TokenId token, KVCache &cache, const Hook *hook) {
    return StepRunner::run(model, token, cache, hook);
}

TokenId argmax_token(std::span<const float> logits) {
    TokenId best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(i);
    }
    return best;
}

float token_logprob(std::span<const float> logits, TokenId token) {
    const float mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (float v : logits) sum += std::exp(static_cast<double>(v - mx));
    return static_cast<float>(static_cast<double>(logits[static_cast<std::size_t>(token)] - mx) -
                              std::log(sum));
}

double DecodeTrace::sequence_logprob() const {
    double total = 0.0;
    for (const auto &s : per_token) total += s.logprob;
    return total;
}

std::size_t DecodeTrace::fired_count() const {
    return static_cast<std::size_t>(
        std::count_if(per_token.begin(), per_token.end(), [](const TokenStep &s) { return s.nudged; }));
}

double DecodeTrace::intervention_rate() const {
    return tokens.empty() ? 0.0 : static_cast<double>(fired_count()) / static_cast<double>(tokens.size());
}

namespace {

template <typename Picker>
DecodeTrace decode_impl(const Model &model, std::span<const TokenId> prompt, std::size_t max_new,
                        Picker &&pick, const Hook *hook) {
    const ModelConfig &cfg = model.config();
    if (prompt.empty()) {
        throw Error(ErrorKind::InvalidConfig, "decode needs a non-empty prompt");
    }
    if (prompt.size() + max_new > static_cast<std::size_t>(cfg.max_context)) {
        throw Error(ErrorKind::ContextOverflow, "prompt " + std::to_string(prompt.size()) +
                                                    " + max_new " + std::to_string(max_new) +
                                                    " exceeds max_context " +
                                                    std::to_string(cfg.max_context));
    }
    const auto start = Clock::now();
    KVCache cache(cfg);
    DecodeTrace trace;
    trace.prompt_len = prompt.size();

    StepResult last;
    for (TokenId t : prompt) last = forward_step(model, t, cache, nullptr);
    trace.ops.prefill_passes = cache.forward_passes();

    for (std::size_t i = 0; i < max_new; ++i) {
        const auto t0 = Clock::now();
        const TokenId next = pick(last.logits.span());
        const float lp = token_logprob(last.logits.span(), next);
        last = forward_step(model, next, cache, hook);
        TokenStep step{last.cosine, last.nudged, elapsed_ns(t0), lp};
        trace.ops.cosine_ops += step.cosine.has_value() ? 1 : 0;
        trace.ops.vector_adds += step.nudged ? 1 : 0;
        trace.tokens.push_back(next);
        trace.per_token.push_back(step);
        if (next == Tokenizer::kEos) break;
    }
    trace.final_hidden = std::move(last.observed);
    trace.ops.forward_passes = cache.forward_passes();
    trace.total_latency_ns = elapsed_ns(start);
    return trace;
}

} // namespace

DecodeTrace decode_greedy(const Model &model, std::span<const TokenId> prompt, std::size_t max_new,
                          const Hook *hook) {
    return decode_impl(model, prompt, max_new, [](std::span<const float> l) { return argmax_token(l); },
                       hook);
}

DecodeTrace decode_sampled(const Model &model, std::span<const TokenId> prompt,
                           std::size_t max_new, float temperature, std::uint64_t rng_seed,
                           const Hook *hook) {
    if (!(temperature > 0.0f)) {
        throw Error(ErrorKind::InvalidConfig, "temperature must be > 0");
    }
    std::mt19937_64 rng(rng_seed);
    std::vector<double> probs;
    auto pick = [&](std::span<const float> logits) -> TokenId {
        probs.resize(logits.size());
        double mx = logits[0];
        for (float v : logits) mx = std::max<double>(mx, v);
        double sum = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            probs[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
            sum += probs[i];
        }
        const double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0) * sum;
        double acc = 0.0;
        TokenId last_nonzero = 0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] <= 0.0) continue;
            acc += probs[i];
            last_nonzero = static_cast<TokenId>(i);
            if (u < acc) return last_nonzero;
        }
        return last_nonzero;
    };
    return decode_impl(model, prompt, max_new, pick, hook);
}

void save_model(const Model &model, const std::filesystem::path &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    const ModelConfig &c = model.config();
    out.write(kModelMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(c.n_layers));
    put_u32(out, static_cast<std::uint32_t>(c.d_model));
    put_u32(out, static_cast<std::uint32_t>(c.n_heads));
    put_u32(out, static_cast<std::uint32_t>(c.vocab_size));
    put_u32(out, static_cast<std::uint32_t>(c.max_context));
    put_u64(out, c.seed);
    for (float v : model.params()) put_f32(out, v);
    if (!out) throw Error(ErrorKind::IoFailure, "write failed on " + path.string());
}

Model load_model(const std::filesystem::path &path) {
    const std::vector<unsigned char> bytes = detail::read_file(path);
    if (bytes.size() < kModelHeaderBytes) {
        throw Error(ErrorKind::CorruptFile, path.string() + ": truncated header");
    }
    if (std::memcmp(bytes.data(), kModelMagic, 4) != 0) {
        throw Error(ErrorKind::CorruptFile, path.string() + ": bad magic (expected TLM1)");
    }
    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(get_u32(&bytes[4]));
    cfg.d_model = static_cast<int>(get_u32(&bytes[8]));
    cfg.n_heads = static_cast<int>(get_u32(&bytes[12]));
    cfg.vocab_size = static_cast<int>(get_u32(&bytes[16]));
    cfg.max_context = static_cast<int>(get_u32(&bytes[20]));
    cfg.seed = get_u64(&bytes[24]);
    try {
        cfg.validate();
    } catch (const Error &e) {
        throw Error(ErrorKind::CorruptFile, path.string() + ": header holds an invalid config (" + e.what() + ")");
    }
    const std::size_t expected = make_layout(cfg).total;
    const std::size_t payload = bytes.size() - kModelHeaderBytes;
    if (payload != expected * 4) {
        throw Error(ErrorKind::CorruptFile, path.string() + ": payload is " + std::to_string(payload) +
                                                " bytes, expected " + std::to_string(expected * 4));
    }
    std::vector<float> params(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        params[i] = get_f32(&bytes[kModelHeaderBytes + 4 * i]);
    }
    try {
        return Model(cfg, std::move(params));
    } catch (const Error &e) {
        throw Error(ErrorKind::CorruptFile, path.string() + ": " + e.what());
    }
}

} // namespace als
