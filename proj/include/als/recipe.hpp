#pragma once

// Glue between the task generator and the trainer: turning problems into
// supervised sequences and a stable train/held-out split.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "als/tasks.hpp"
#include "als/tinylm.hpp"

namespace als {

// BOS + prompt + oracle response + EOS; loss only on the response.
TrainSequence make_train_sequence(const Problem &p, PromptFormat fmt);

// One sequence per problem; each problem is rendered as P2 with probability
// p2_fraction (seeded), otherwise P1.
std::vector<TrainSequence> make_training_set(std::span<const Problem> problems, double p2_fraction,
                                             std::uint64_t seed);

struct Split {
    std::vector<Problem> train;
    std::vector<Problem> heldout;
};

// Keyed on the question text so identical questions never straddle the split.
// heldout_percent of the hash space (0..100) goes to held-out.
Split split_by_question(std::span<const Problem> problems, unsigned heldout_percent);

// Greedy-decode budget that fits the oracle response for the given problems
// with headroom.
std::size_t response_budget(std::span<const Problem> problems, PromptFormat fmt);

} // namespace als
