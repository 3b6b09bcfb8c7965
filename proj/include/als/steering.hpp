#pragma once

// Offline construction of a mean-difference steering direction from labelled
// generations, and the cosine-gated additive nudge applied while decoding.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "als/digest.hpp"
#include "als/tasks.hpp"
#include "als/tensorcore.hpp"
#include "als/tinylm.hpp"

namespace als {

struct TrajectoryRecord {
    std::string prompt_id;
    std::vector<TokenId> tokens;
    Vec32 final_hidden; // hook-site state at the last emitted token
    Label label = Label::Incorrect;
};

struct SteeringVector {
    Vec32 v;
    int layer = 0;
    std::size_t n_good = 0;
    std::size_t n_bad = 0;
    Digest corpus_digest{};
    std::string created_at; // ISO-8601 UTC
    std::string notes;

    std::size_t dim() const noexcept { return v.dim(); }
};

enum class GateMode { Always, StructureGated };

const char *to_string(GateMode mode) noexcept;
GateMode parse_gate_mode(std::string_view text);

inline constexpr float kDefaultTau = 0.1f;
inline constexpr float kDefaultAlpha = 0.3f;

struct SteerConfig {
    float alpha = kDefaultAlpha;
    float tau = kDefaultTau;
    GateMode mode = GateMode::Always;
    int layer = -1; // -1: use the vector's layer

    // alpha finite and >= 0, tau in [-1, 1]; throws InvalidConfig.
    void validate() const;
};

// Runs greedy decoding on each problem and labels the result with verify().
std::vector<TrajectoryRecord> collect_trajectories(const Model &model,
                                                   std::span<const Problem> problems,
                                                   PromptFormat fmt, std::size_t max_new);

// v = mean(Correct) - mean(Incorrect ∪ FormatInvalid).
SteeringVector build_vector(std::span<const TrajectoryRecord> pool, int layer);

Digest trajectory_digest(std::span<const TrajectoryRecord> pool, int layer);

struct SteerOutcome {
    Vec32 h;
    bool fired = false;
    float cosine = 0.0f;
};

// Fires iff cos(h, v) < tau, then h + alpha*v; otherwise h untouched.
SteerOutcome steer_step(const Vec32 &h, const SteeringVector &sv, const SteerConfig &cfg);

// Tracks where a decoder is inside {"thought process": "...", "final answer": "..."}
// one character at a time. open() is true only inside the thought-process value.
class JsonGate {
  public:
    void feed(char c);
    void feed(TokenId token);
    bool open() const noexcept;

  private:
    enum class State { Scaffold, Key, Value, Closed };
    State state_ = State::Scaffold;
    int depth_ = 0;
    bool escape_ = false;
    bool value_next_ = false;
    std::string key_;
    std::string current_key_;
};

// P1: always true. P2: true while the next token falls inside the
// thought-process string value.
bool structural_gate(std::span<const TokenId> emitted, PromptFormat fmt);

// Greedy decoding with steer_step at every emitted position (Always) or only
// where structural_gate allows it (StructureGated; cosine is absent at
// positions the gate closes).
DecodeTrace steered_decode(const Model &model, std::span<const TokenId> prompt,
                           const SteeringVector &sv, const SteerConfig &cfg, std::size_t max_new,
                           PromptFormat fmt = PromptFormat::P1);

// Binary is authoritative; the .meta.json sidecar carries created_at/notes.
void save_vector(const SteeringVector &sv, const std::filesystem::path &path);
SteeringVector load_vector(const std::filesystem::path &path);
std::filesystem::path vector_sidecar_path(const std::filesystem::path &path);

} // namespace als
