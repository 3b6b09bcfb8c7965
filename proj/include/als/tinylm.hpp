#pragma once

// A small pre-norm decoder-only transformer: learned positions, RMS norm,
// GELU MLP (4x), weight-tied LM head. Single-sequence KV-cached decoding
// with a hidden-state hook between blocks, and a batched trainer with a
// hand-written backward pass.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "als/digest.hpp"
#include "als/tasks.hpp"
#include "als/tensorcore.hpp"

namespace als {

struct ModelConfig {
    int n_layers = 3;
    int d_model = 64;
    int n_heads = 4;
    int vocab_size = Tokenizer::kVocabSize;
    int max_context = 192;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    int d_ff() const { return 4 * d_model; }
    // Default hook site: the residual stream leaving the penultimate block.
    int penultimate_layer() const { return n_layers - 1; }
    void validate() const;

    bool operator==(const ModelConfig &) const = default;
};

inline constexpr float kNormEps = 1e-5f;

class Model {
  public:
    struct LayerWeights {
        std::span<const float> attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2;
    };

    // Deterministic scaled-uniform initialisation from cfg.seed.
    explicit Model(const ModelConfig &cfg);
    Model(const ModelConfig &cfg, std::vector<float> params);
    Model(const Model &other);
    Model &operator=(const Model &other);

    const ModelConfig &config() const noexcept { return cfg_; }
    std::span<const float> params() const noexcept { return params_; }
    std::span<float> mutable_params() noexcept { return params_; }
    std::size_t param_count() const noexcept { return params_.size(); }

    std::span<const float> token_embedding() const;    // [vocab × d]
    std::span<const float> position_embedding() const; // [ctx × d]
    LayerWeights layer(int l) const;
    std::span<const float> final_norm() const;

    // Offsets into params() in declaration order; used by the trainer.
    struct Layout {
        std::size_t tok_emb, pos_emb, final_norm, total;
        struct Layer {
            std::size_t attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2;
        };
        std::vector<Layer> layers;
    };
    const Layout &layout() const noexcept { return layout_; }

    Digest checksum() const;

    // Counts every forward_step executed against this model, from any thread.
    std::uint64_t forward_count() const noexcept { return forward_count_.load(std::memory_order_relaxed); }
    void note_forward() const noexcept { forward_count_.fetch_add(1, std::memory_order_relaxed); }

  private:
    ModelConfig cfg_;
    Layout layout_;
    std::vector<float> params_;
    mutable std::atomic<std::uint64_t> forward_count_{0};
};

Model init_model(const ModelConfig &cfg);

struct HiddenState {
    Vec32 vector;
    int layer = 0;
    std::size_t position = 0;
};

enum class HookMode { Observe, ObserveAndReplace };

struct HookSite {
    int layer = 0;
    HookMode mode = HookMode::Observe;
};

struct HookOutcome {
    std::optional<Vec32> replacement; // ignored in Observe mode
    std::optional<float> cosine;      // set when the hook evaluated a cosine
    bool nudged = false;              // set when the hook applied a vector add
};

// Called once per hooked forward step with the hook-site state and the token
// being fed at that position.
struct Hook {
    HookSite site;
    std::function<HookOutcome(const HiddenState &, TokenId)> fn;
};

Hook identity_hook(int layer, HookMode mode = HookMode::ObserveAndReplace);

class KVCache {
  public:
    explicit KVCache(const ModelConfig &cfg);

    std::size_t size() const noexcept { return length_; }
    std::size_t capacity() const noexcept { return capacity_; }
    void reset() noexcept { length_ = 0; }
    // Drops positions >= length; their slots are overwritten on reuse.
    void truncate(std::size_t length);
    std::uint64_t forward_passes() const noexcept { return forward_passes_; }

    std::span<const float> keys(int layer) const { return keys_[layer]; }
    std::span<const float> values(int layer) const { return values_[layer]; }

  private:
    friend struct StepRunner;
    std::size_t capacity_;
    std::size_t length_ = 0;
    std::uint64_t forward_passes_ = 0;
    std::vector<std::vector<float>> keys_;
    std::vector<std::vector<float>> values_;
    std::vector<float> scratch_;
};

struct StepResult {
    Vec32 logits;
    HiddenState observed; // pre-hook state at the hook site (default: penultimate)
    std::optional<float> cosine;
    bool nudged = false;
};

// One token through the model at position cache.size().
StepResult forward_step(const Model &model, TokenId token, KVCache &cache,
                        const Hook *hook = nullptr);

struct OpCounters {
    std::uint64_t forward_passes = 0;
    std::uint64_t prefill_passes = 0;
    std::uint64_t cosine_ops = 0;
    std::uint64_t vector_adds = 0;
    std::uint64_t backward_passes = 0;
};

struct TokenStep {
    std::optional<float> cosine;
    bool nudged = false;
    std::uint64_t latency_ns = 0;
    float logprob = 0.0f; // log-probability of the emitted token
};

struct DecodeTrace {
    std::vector<TokenId> tokens; // emitted tokens, EOS included when produced
    std::vector<TokenStep> per_token;
    std::uint64_t total_latency_ns = 0;
    OpCounters ops;
    HiddenState final_hidden; // hook-site state at the last emitted token
    std::size_t prompt_len = 0;

    std::string text() const { return Tokenizer::decode(tokens); }
    double sequence_logprob() const;
    std::size_t fired_count() const;
    double intervention_rate() const;
};

// Greedy decoding; ties resolve to the lowest token id. The hook runs on
// every position that feeds an emitted token (not on prompt positions).
DecodeTrace decode_greedy(const Model &model, std::span<const TokenId> prompt, std::size_t max_new,
                          const Hook *hook = nullptr);

DecodeTrace decode_sampled(const Model &model, std::span<const TokenId> prompt,
                           std::size_t max_new, float temperature, std::uint64_t rng_seed,
                           const Hook *hook = nullptr);

// Index of the largest logit, lowest id on ties.
TokenId argmax_token(std::span<const float> logits);
// log softmax(logits)[token].
float token_logprob(std::span<const float> logits, TokenId token);

struct TrainSequence {
    std::vector<TokenId> tokens;
    // Loss covers predictions of tokens[i] for i >= loss_from (min 1).
    std::size_t loss_from = 1;
};

struct TrainOptions {
    std::size_t batch_size = 16;
    std::uint64_t seed = 1;
    std::size_t warmup_steps = 100;
    // Cosine decay from lr to min_lr_ratio*lr after warmup.
    float min_lr_ratio = 0.1f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float adam_eps = 1e-8f;
    std::span<const TrainSequence> heldout;
    std::size_t eval_every = 100;
    // Progress callback (step, train loss); optional.
    std::function<void(std::size_t, float)> on_step;
};

struct TrainReport {
    std::vector<float> loss_curve; // mean train loss per step
    std::vector<std::pair<std::size_t, float>> heldout_curve;
    std::optional<float> initial_heldout_loss;
    std::optional<float> final_heldout_loss;
    std::size_t tokens_seen = 0;
    double seconds = 0.0;
};

TrainReport train(Model &model, std::span<const TrainSequence> corpus, int steps, float lr,
                  const TrainOptions &opts = {});

// Mean loss over the batch's loss positions and its gradient with respect to
// every parameter (same layout as Model::params()).
float loss_and_gradient(const Model &model, std::span<const TrainSequence> batch,
                        std::vector<float> &grad);

// Mean next-token cross-entropy (nats/token) over the loss positions.
float evaluate_loss(const Model &model, std::span<const TrainSequence> data);

// Full-sequence logits [n-1 × vocab] for inputs tokens[0..n-2]; uses the
// trainer's batched forward path.
std::vector<float> sequence_logits(const Model &model, std::span<const TokenId> tokens);

void save_model(const Model &model, const std::filesystem::path &path);
Model load_model(const std::filesystem::path &path);

} // namespace als
