#include "als/baselines.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <random>

#include "als/error.hpp"

namespace als {

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t since_ns(Clock::time_point t0) {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count());
}

} // namespace

const char *to_string(Method m) noexcept {
    switch (m) {
    case Method::CoT: return "cot";
    case Method::SelfConsistency: return "sc";
    case Method::IterativeLatent: return "iterative-latent";
    }
    return "?";
}

void BaselineConfig::validate() const {
    if (method != Method::CoT && k < 1) throw Error(ErrorKind::InvalidConfig, "k must be >= 1");
    if (method == Method::SelfConsistency && !(temperature > 0.0f)) {
        throw Error(ErrorKind::InvalidConfig, "temperature must be > 0");
    }
    if (method == Method::IterativeLatent && !(step_size > 0.0f && std::isfinite(step_size))) {
        throw Error(ErrorKind::InvalidConfig, "step_size must be finite and > 0");
    }
}

CostLedger &CostLedger::operator+=(const OpCounters &ops) {
    forward_passes += ops.forward_passes;
    prefill_passes += ops.prefill_passes;
    cosine_ops += ops.cosine_ops;
    vector_adds += ops.vector_adds;
    backward_passes += ops.backward_passes;
    return *this;
}

CostLedger &CostLedger::operator+=(const CostLedger &o) {
    forward_passes += o.forward_passes;
    prefill_passes += o.prefill_passes;
    cosine_ops += o.cosine_ops;
    vector_adds += o.vector_adds;
    backward_passes += o.backward_passes;
    wall_ns += o.wall_ns;
    return *this;
}

MethodOutput run_cot(const Model &model, const Problem &p, PromptFormat fmt, std::size_t max_new) {
    const auto t0 = Clock::now();
    const std::vector<TokenId> prompt = render_prompt(p, fmt);
    DecodeTrace trace = decode_greedy(model, prompt, max_new);
    MethodOutput out;
    out.text = trace.text();
    out.tokens = std::move(trace.tokens);
    out.ledger += trace.ops;
    out.ledger.wall_ns = since_ns(t0);
    return out;
}

std::optional<std::string> majority_vote(const std::vector<std::optional<std::string>> &answers) {
    std::map<std::string, int> counts;
    for (const auto &a : answers) {
        if (a) ++counts[*a];
    }
    std::optional<std::string> best;
    int best_n = 0;
    for (const auto &[ans, n] : counts) {
        if (n > best_n || (n == best_n && canonical_less(ans, *best))) {
            best = ans;
            best_n = n;
        }
    }
    return best;
}

MethodOutput run_self_consistency(const Model &model, const Problem &p, PromptFormat fmt,
                                  const BaselineConfig &cfg) {
    BaselineConfig c = cfg;
    c.method = Method::SelfConsistency;
    c.validate();
    const auto t0 = Clock::now();
    const std::vector<TokenId> prompt = render_prompt(p, fmt);

    std::vector<DecodeTrace> chains;
    std::vector<std::optional<std::string>> answers;
    CostLedger ledger;
    for (int i = 0; i < c.k; ++i) {
        DecodeTrace t = decode_sampled(model, prompt, c.max_new, c.temperature,
                                       c.rng_seed + static_cast<std::uint64_t>(i));
        ledger += t.ops;
        std::optional<std::string> a = extract_answer(t.text(), fmt);
        answers.push_back(a ? canonicalize(*a) : std::nullopt);
        chains.push_back(std::move(t));
    }

    std::size_t pick = 0;
    if (const auto winner = majority_vote(answers)) {
        for (std::size_t i = 0; i < answers.size(); ++i) {
            if (answers[i] == winner) {
                pick = i;
                break;
            }
        }
    }
    MethodOutput out;
    out.text = chains[pick].text();
    out.tokens = std::move(chains[pick].tokens);
    out.ledger = ledger;
    out.ledger.wall_ns = since_ns(t0);
    return out;
}

Vec32 refinement_direction(std::uint64_t rng_seed, int iteration, std::size_t dim) {
    std::mt19937_64 rng(rng_seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(iteration + 1)));
    std::vector<double> raw(dim);
    double norm2 = 0.0;
    for (double &x : raw) {
        x = static_cast<double>(rng() >> 11) * (2.0 / 9007199254740992.0) - 1.0;
        norm2 += x * x;
    }
    const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
    std::vector<float> out(dim);
    for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(raw[i] * inv);
    return Vec32(std::move(out));
}

MethodOutput run_iterative_latent(const Model &model, const Problem &p, PromptFormat fmt,
                                  const BaselineConfig &cfg) {
    BaselineConfig c = cfg;
    c.method = Method::IterativeLatent;
    c.validate();
    const auto t0 = Clock::now();
    const ModelConfig &mc = model.config();
    const std::size_t d = static_cast<std::size_t>(mc.d_model);
    const std::vector<TokenId> prompt = render_prompt(p, fmt);

    const DecodeTrace base = decode_greedy(model, prompt, c.max_new);
    CostLedger ledger;
    ledger += base.ops;

    std::vector<TokenId> incumbent = base.tokens;
    double kept = base.sequence_logprob();
    Vec32 offset(d);
    std::vector<double> history;

    KVCache cache(mc);
    Vec32 trial(d);
    std::uint64_t adds = 0;
    const Hook hook{{mc.penultimate_layer(), HookMode::ObserveAndReplace},
                    [&](const HiddenState &h, TokenId) {
                        HookOutcome o;
                        o.replacement = add_scaled(h.vector, trial, 1.0f);
                        o.nudged = true;
                        ++adds;
                        return o;
                    }};

    const std::vector<TokenId> &ref = base.tokens;
    for (int it = 0; it < c.k; ++it) {
        trial = add_scaled(offset, refinement_direction(c.rng_seed, it, d), c.step_size);

        cache.reset();
        const std::uint64_t before = cache.forward_passes();
        StepResult last;
        for (TokenId t : prompt) last = forward_step(model, t, cache, nullptr);
        ledger.prefill_passes += cache.forward_passes() - before;

        // Replay the whole initial response under the trial offset, noting
        // the first position where the perturbed argmax departs from it.
        std::optional<std::size_t> diverge;
        Vec32 diverge_logits;
        double prefix_score = 0.0;
        for (std::size_t j = 0; j < ref.size(); ++j) {
            if (!diverge) {
                if (argmax_token(last.logits.span()) != ref[j]) {
                    diverge = j;
                    diverge_logits = last.logits;
                } else {
                    prefix_score += token_logprob(last.logits.span(), ref[j]);
                }
            }
            last = forward_step(model, ref[j], cache, &hook);
        }

        std::vector<TokenId> cand(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(diverge.value_or(ref.size())));
        double score = prefix_score;
        if (diverge) {
            cache.truncate(prompt.size() + *diverge);
            Vec32 logits = std::move(diverge_logits);
            while (cand.size() < c.max_new) {
                const TokenId next = argmax_token(logits.span());
                score += token_logprob(logits.span(), next);
                cand.push_back(next);
                logits = forward_step(model, next, cache, &hook).logits;
                if (next == Tokenizer::kEos) break;
            }
        }
        ledger.forward_passes += cache.forward_passes() - before;

        if (score > kept) {
            kept = score;
            incumbent = std::move(cand);
            offset = trial;
        }
        history.push_back(kept);
    }
    ledger.vector_adds += adds;

    MethodOutput out;
    out.text = Tokenizer::decode(incumbent);
    out.tokens = std::move(incumbent);
    out.ledger = ledger;
    out.ledger.wall_ns = since_ns(t0);
    out.kept_scores = std::move(history);
    return out;
}

} // namespace als
