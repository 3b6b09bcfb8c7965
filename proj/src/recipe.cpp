#include "als/recipe.hpp"

#include <algorithm>
#include <random>

#include "als/error.hpp"

namespace als {

TrainSequence make_train_sequence(const Problem &p, PromptFormat fmt) {
    TrainSequence s;
    s.tokens = render_prompt(p, fmt);
    s.loss_from = s.tokens.size();
    const std::vector<TokenId> resp = Tokenizer::encode(oracle_output(p, fmt));
    s.tokens.insert(s.tokens.end(), resp.begin(), resp.end());
    s.tokens.push_back(Tokenizer::kEos);
    return s;
}

std::vector<TrainSequence> make_training_set(std::span<const Problem> problems, double p2_fraction,
                                             std::uint64_t seed) {
    if (!(p2_fraction >= 0.0 && p2_fraction <= 1.0)) {
        throw Error(ErrorKind::InvalidConfig, "p2_fraction must lie in [0, 1]");
    }
    std::mt19937_64 rng(seed);
    std::vector<TrainSequence> out;
    out.reserve(problems.size());
    for (const Problem &p : problems) {
        const double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
        out.push_back(make_train_sequence(p, u < p2_fraction ? PromptFormat::P2 : PromptFormat::P1));
    }
    return out;
}

Split split_by_question(std::span<const Problem> problems, unsigned heldout_percent) {
    if (heldout_percent > 100) throw Error(ErrorKind::InvalidConfig, "heldout_percent must be <= 100");
    Split s;
    for (const Problem &p : problems) {
        Hasher h;
        const Digest d = h.field("split").field(p.question).finish();
        const unsigned bucket = (static_cast<unsigned>(d[0]) << 8 | d[1]) % 100;
        (bucket < heldout_percent ? s.heldout : s.train).push_back(p);
    }
    return s;
}

std::size_t response_budget(std::span<const Problem> problems, PromptFormat fmt) {
    std::size_t longest = 0;
    for (const Problem &p : problems) longest = std::max(longest, oracle_output(p, fmt).size());
    return longest + longest / 2 + 8;
}

} // namespace als
