#pragma once

// Comparison decoders: greedy chain-of-thought, self-consistency voting, and
// an iterative latent-refinement stand-in whose cost grows with k.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "als/tasks.hpp"
#include "als/tinylm.hpp"

namespace als {

enum class Method { CoT, SelfConsistency, IterativeLatent };

const char *to_string(Method m) noexcept;

struct BaselineConfig {
    Method method = Method::CoT;
    int k = 5;                 // SC samples / refinement iterations
    float temperature = 0.7f;  // SC only
    float step_size = 0.5f;    // IterativeLatent only
    std::uint64_t rng_seed = 0;
    std::size_t max_new = 96;

    void validate() const;
};

struct CostLedger {
    std::uint64_t forward_passes = 0;
    std::uint64_t prefill_passes = 0;
    std::uint64_t cosine_ops = 0;
    std::uint64_t vector_adds = 0;
    std::uint64_t backward_passes = 0;
    std::uint64_t wall_ns = 0;

    CostLedger &operator+=(const OpCounters &ops);
    CostLedger &operator+=(const CostLedger &other);
    bool operator==(const CostLedger &) const = default;
};

struct MethodOutput {
    std::string text;
    std::vector<TokenId> tokens;
    CostLedger ledger;
    std::size_t fired = 0;           // steered runs only
    std::vector<double> kept_scores; // IterativeLatent: incumbent score after each iteration
};

MethodOutput run_cot(const Model &model, const Problem &p, PromptFormat fmt, std::size_t max_new);

// Samples seeded rng_seed + i for i < k; votes on canonical answers (chains
// without one abstain); ties go to the numerically smallest answer. Returns
// the first chain carrying the winning answer, or chain 0 if none voted.
MethodOutput run_self_consistency(const Model &model, const Problem &p, PromptFormat fmt,
                                  const BaselineConfig &cfg);

// Majority vote over canonical answers; nullopt when no answer is present.
std::optional<std::string> majority_vote(const std::vector<std::optional<std::string>> &answers);

// Hill-climbing over a hidden-state offset added at the penultimate layer on
// generated positions. Each iteration replays the initial greedy trajectory
// under offset + step_size * (seeded unit direction), re-decodes greedily from
// the first position whose argmax changes, and keeps the candidate only if
// its total log-probability strictly improves. Every iteration costs at least
// one full pass over prompt + initial response.
MethodOutput run_iterative_latent(const Model &model, const Problem &p, PromptFormat fmt,
                                  const BaselineConfig &cfg);

// The seeded unit direction used at a given iteration (exposed for tests).
Vec32 refinement_direction(std::uint64_t rng_seed, int iteration, std::size_t dim);

} // namespace als
