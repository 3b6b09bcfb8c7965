#include "als/steering.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>

#include <json.hpp>

#include "als/error.hpp"
#include "bytes.hpp"

namespace als {

const char *to_string(GateMode mode) noexcept {
    return mode == GateMode::Always ? "always" : "structured";
}

GateMode parse_gate_mode(std::string_view text) {
    if (text == "always") return GateMode::Always;
    if (text == "structured") return GateMode::StructureGated;
    throw Error(ErrorKind::InvalidConfig, "gate must be always|structured, got '" + std::string(text) + "'");
}

void SteerConfig::validate() const {
    if (!std::isfinite(alpha) || alpha < 0.0f) {
        throw Error(ErrorKind::InvalidConfig, "alpha must be finite and >= 0");
    }
    // NaN fails both comparisons, so test the accepted range.
    if (!(tau >= -1.0f && tau <= 1.0f)) {
        throw Error(ErrorKind::InvalidConfig, "tau must lie in [-1, 1]");
    }
}

std::vector<TrajectoryRecord> collect_trajectories(const Model &model,
                                                   std::span<const Problem> problems,
                                                   PromptFormat fmt, std::size_t max_new) {
    std::vector<TrajectoryRecord> out;
    out.reserve(problems.size());
    for (const Problem &p : problems) {
        const std::vector<TokenId> prompt = render_prompt(p, fmt);
        DecodeTrace trace = decode_greedy(model, prompt, max_new);
        const Label label = verify(trace.text(), p, fmt).label;
        out.push_back({p.id, std::move(trace.tokens), std::move(trace.final_hidden.vector), label});
    }
    return out;
}

Digest trajectory_digest(std::span<const TrajectoryRecord> pool, int layer) {
    Hasher h;
    h.field("als-trajectories").u64(static_cast<std::uint64_t>(layer)).u64(pool.size());
    for (const TrajectoryRecord &r : pool) {
        h.field(r.prompt_id).field(r.tokens).field(r.final_hidden.span()).field(to_string(r.label));
    }
    return h.finish();
}

namespace {

std::string utc_now_iso() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace

SteeringVector build_vector(std::span<const TrajectoryRecord> pool, int layer) {
    std::vector<const Vec32 *> good, bad;
    for (const TrajectoryRecord &r : pool) {
        (r.label == Label::Correct ? good : bad).push_back(&r.final_hidden);
    }
    if (good.empty()) throw Error(ErrorKind::EmptyGoodPool, "no Correct trajectories in the pool");
    if (bad.empty()) throw Error(ErrorKind::EmptyBadPool, "no Incorrect/FormatInvalid trajectories in the pool");

    const Vec32 mg = mean_vector(std::span<const Vec32 *const>(good));
    const Vec32 mb = mean_vector(std::span<const Vec32 *const>(bad));
    if (mg.dim() != mb.dim()) {
        throw Error(ErrorKind::DimMismatch, "good and bad pools hold states of different dims");
    }
    Vec32 v(mg.dim());
    for (std::size_t i = 0; i < v.dim(); ++i) v[i] = mg[i] - mb[i];

    SteeringVector sv;
    sv.v = std::move(v);
    sv.layer = layer;
    sv.n_good = good.size();
    sv.n_bad = bad.size();
    sv.corpus_digest = trajectory_digest(pool, layer);
    sv.created_at = utc_now_iso();
    return sv;
}

SteerOutcome steer_step(const Vec32 &h, const SteeringVector &sv, const SteerConfig &cfg) {
    if (h.dim() != sv.v.dim()) {
        throw Error(ErrorKind::DimMismatch, "hidden dim " + std::to_string(h.dim()) +
                                                " vs steering dim " + std::to_string(sv.v.dim()));
    }
    const float c = cosine_similarity(h, sv.v);
    if (c < cfg.tau) {
        // alpha = 0 leaves h untouched, including the sign of zero entries.
        return {cfg.alpha == 0.0f ? h : add_scaled(h, sv.v, cfg.alpha), true, c};
    }
    return {h, false, c};
}

void JsonGate::feed(char c) {
    switch (state_) {
    case State::Closed:
        return;
    case State::Key:
    case State::Value:
        if (escape_) {
            escape_ = false;
            if (state_ == State::Key) key_ += c;
            return;
        }
        if (c == '\\') {
            escape_ = true;
            return;
        }
        if (c == '"') {
            if (state_ == State::Key) current_key_ = key_;
            state_ = State::Scaffold;
            return;
        }
        if (state_ == State::Key) key_ += c;
        return;
    case State::Scaffold:
        if (c == '{') {
            ++depth_;
            value_next_ = false;
        } else if (c == '}') {
            if (--depth_ <= 0) state_ = State::Closed;
        } else if (c == ':') {
            value_next_ = true;
        } else if (c == ',') {
            value_next_ = false;
        } else if (c == '"' && depth_ > 0) {
            if (value_next_) {
                state_ = State::Value;
                value_next_ = false;
            } else {
                state_ = State::Key;
                key_.clear();
            }
        }
        return;
    }
}

void JsonGate::feed(TokenId token) {
    if (auto c = Tokenizer::to_char(token)) feed(*c);
}

bool JsonGate::open() const noexcept {
    return state_ == State::Value && depth_ == 1 && current_key_ == "thought process";
}

bool structural_gate(std::span<const TokenId> emitted, PromptFormat fmt) {
    if (fmt == PromptFormat::P1) return true;
    JsonGate gate;
    for (TokenId t : emitted) gate.feed(t);
    return gate.open();
}

DecodeTrace steered_decode(const Model &model, std::span<const TokenId> prompt,
                           const SteeringVector &sv, const SteerConfig &cfg, std::size_t max_new,
                           PromptFormat fmt) {
    cfg.validate();
    const ModelConfig &mc = model.config();
    const int layer = cfg.layer < 0 ? sv.layer : cfg.layer;
    if (layer != sv.layer) {
        throw Error(ErrorKind::LayerMismatch, "config layer " + std::to_string(layer) +
                                                  " but vector was extracted at layer " +
                                                  std::to_string(sv.layer));
    }
    if (layer < 1 || layer > mc.n_layers - 1) {
        throw Error(ErrorKind::LayerMismatch, "layer " + std::to_string(layer) +
                                                  " is not a hook site of a " +
                                                  std::to_string(mc.n_layers) + "-layer model");
    }
    if (sv.v.dim() != static_cast<std::size_t>(mc.d_model)) {
        throw Error(ErrorKind::DimMismatch, "vector dim " + std::to_string(sv.v.dim()) +
                                                " vs d_model " + std::to_string(mc.d_model));
    }
    if (l2_norm(sv.v.span()) < kZeroNormThreshold) {
        throw Error(ErrorKind::ZeroNorm, "steering vector has zero norm");
    }

    const bool gated = cfg.mode == GateMode::StructureGated && fmt == PromptFormat::P2;
    JsonGate gate;
    Hook hook{{layer, HookMode::ObserveAndReplace},
              [&](const HiddenState &state, TokenId fed) -> HookOutcome {
                  if (gated) {
                      gate.feed(fed);
                      if (!gate.open()) return {};
                  }
                  SteerOutcome o = steer_step(state.vector, sv, cfg);
                  HookOutcome out;
                  out.cosine = o.cosine;
                  out.nudged = o.fired;
                  if (o.fired) out.replacement = std::move(o.h);
                  return out;
              }};
    return decode_greedy(model, prompt, max_new, &hook);
}

namespace {

constexpr char kVectorMagic[4] = {'A', 'L', 'S', 'V'};
constexpr std::uint16_t kVectorVersion = 1;
constexpr std::size_t kVectorHeaderBytes = 4 + 2 + 2 + 4 + 4 + 4 + 32;

} // namespace

std::filesystem::path vector_sidecar_path(const std::filesystem::path &path) {
    std::filesystem::path p = path;
    p.replace_extension(".meta.json");
    return p;
}

void save_vector(const SteeringVector &sv, const std::filesystem::path &path) {
    using namespace detail;
    if (sv.layer < 0 || sv.layer > 0xFFFF) {
        throw Error(ErrorKind::InvalidConfig, "layer does not fit the file format");
    }
    if (sv.v.dim() == 0) throw Error(ErrorKind::InvalidConfig, "cannot save an empty vector");
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
        out.write(kVectorMagic, 4);
        put_u16(out, kVectorVersion);
        put_u16(out, static_cast<std::uint16_t>(sv.layer));
        put_u32(out, static_cast<std::uint32_t>(sv.v.dim()));
        put_u32(out, static_cast<std::uint32_t>(sv.n_good));
        put_u32(out, static_cast<std::uint32_t>(sv.n_bad));
        out.write(reinterpret_cast<const char *>(sv.corpus_digest.data()), 32);
        for (float x : sv.v.values()) put_f32(out, x);
        if (!out) throw Error(ErrorKind::IoFailure, "write failed on " + path.string());
    }
    nlohmann::ordered_json meta;
    meta["created_at"] = sv.created_at;
    meta["notes"] = sv.notes;
    meta["corpus_digest"] = to_hex(sv.corpus_digest);
    const auto side = vector_sidecar_path(path);
    std::ofstream m(side);
    if (!m) throw Error(ErrorKind::IoFailure, "cannot write " + side.string());
    m << meta.dump(2) << '\n';
    if (!m) throw Error(ErrorKind::IoFailure, "write failed on " + side.string());
}

SteeringVector load_vector(const std::filesystem::path &path) {
    using namespace detail;
    const std::vector<unsigned char> bytes = read_file(path);
    const std::string where = path.string() + ": ";
    if (bytes.size() < kVectorHeaderBytes) throw Error(ErrorKind::CorruptFile, where + "truncated header");
    if (std::memcmp(bytes.data(), kVectorMagic, 4) != 0) {
        throw Error(ErrorKind::CorruptFile, where + "bad magic (expected ALSV)");
    }
    const std::uint16_t version = get_u16(&bytes[4]);
    if (version != kVectorVersion) {
        throw Error(ErrorKind::CorruptFile, where + "unsupported version " + std::to_string(version));
    }
    SteeringVector sv;
    sv.layer = get_u16(&bytes[6]);
    const std::uint32_t dim = get_u32(&bytes[8]);
    sv.n_good = get_u32(&bytes[12]);
    sv.n_bad = get_u32(&bytes[16]);
    std::memcpy(sv.corpus_digest.data(), &bytes[20], 32);
    if (dim == 0) throw Error(ErrorKind::CorruptFile, where + "dim is zero");
    if (sv.n_good == 0 || sv.n_bad == 0) throw Error(ErrorKind::CorruptFile, where + "empty pool counts");
    const std::size_t expected = kVectorHeaderBytes + 4 * static_cast<std::size_t>(dim);
    if (bytes.size() != expected) {
        throw Error(ErrorKind::CorruptFile, where + "size " + std::to_string(bytes.size()) +
                                                " does not match dim " + std::to_string(dim));
    }
    std::vector<float> v(dim);
    for (std::size_t i = 0; i < dim; ++i) v[i] = get_f32(&bytes[kVectorHeaderBytes + 4 * i]);
    try {
        sv.v = Vec32(std::move(v));
    } catch (const Error &e) {
        throw Error(ErrorKind::CorruptFile, where + e.what());
    }

    const auto side = vector_sidecar_path(path);
    if (std::filesystem::exists(side)) {
        std::ifstream m(side);
        const auto meta = nlohmann::json::parse(m, nullptr, false);
        if (meta.is_discarded() || !meta.is_object()) {
            throw Error(ErrorKind::CorruptFile, side.string() + ": not a JSON object");
        }
        sv.created_at = meta.value("created_at", "");
        sv.notes = meta.value("notes", "");
    }
    return sv;
}

} // namespace als
