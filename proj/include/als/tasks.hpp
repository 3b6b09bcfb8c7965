#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "als/digest.hpp"

namespace als {

using TokenId = int;

// Fixed character vocabulary shared by the task renderer and the model:
// EOS, BOS, printable ASCII 32..126 and newline.
class Tokenizer {
  public:
    static constexpr TokenId kEos = 0;
    static constexpr TokenId kBos = 1;
    static constexpr int kVocabSize = 98;

    // Bytes outside the vocabulary encode as '?'.
    static std::vector<TokenId> encode(std::string_view text);
    // Special tokens are dropped.
    static std::string decode(std::span<const TokenId> tokens);
    static std::optional<char> to_char(TokenId id) noexcept;
    static TokenId from_char(char c) noexcept;
};

struct Problem {
    std::string id;
    std::string question;
    std::string gold_answer; // canonical
    std::string rationale;   // worked steps, empty when unknown
};

enum class PromptFormat { P1, P2 };

const char *to_string(PromptFormat fmt) noexcept;
PromptFormat parse_format(std::string_view text);

enum class Label { Correct, Incorrect, FormatInvalid };

const char *to_string(Label label) noexcept;

struct VerifyResult {
    Label label = Label::FormatInvalid;
    std::optional<std::string> extracted;
};

struct VerifyOptions {
    // Require the two JSON keys in the printed order.
    bool strict_key_order = true;
};

// Canonical numeric form: optional '-', no leading zeros, integers as
// digits, decimals without trailing zeros, rationals reduced as "p/q".
// Commas and whitespace are ignored. Returns nullopt for non-numbers.
std::optional<std::string> canonicalize(std::string_view text);

// Numeric order over canonical strings; ties fall back to string order.
bool canonical_less(const std::string &a, const std::string &b);

// Difficulty 1..3 maps to chain lengths {2, 4, 6}.
int chain_length(int difficulty);

// Deterministic left-to-right add/sub/mul chains over operands 1..9 with
// every intermediate kept in [0, 99]. Questions read "7+5*3" and mean
// ((7+5)*3).
std::vector<Problem> gen_arithmetic(std::uint64_t seed, std::size_t n, int difficulty);

inline constexpr std::string_view kP1Template = "Step by step; end with #### N.\nQ: {question}\nA: ";
inline constexpr std::string_view kP2Template =
    "JSON {\"thought process\": \"...\", \"final answer\": \"...\"}\nQ: {question}\nA: ";

std::string render_prompt_text(const Problem &p, PromptFormat fmt);
// BOS followed by the encoded template. Throws ContextOverflow when the
// rendered prompt exceeds max_tokens.
std::vector<TokenId> render_prompt(const Problem &p, PromptFormat fmt,
                                   std::size_t max_tokens = 4096);

// The response a perfect solver would emit (no EOS).
std::string oracle_output(const Problem &p, PromptFormat fmt);

// Answer extraction shared by verify and the self-consistency vote.
std::optional<std::string> extract_answer(std::string_view output, PromptFormat fmt,
                                          const VerifyOptions &opts = {});

VerifyResult verify(std::string_view output, const Problem &p, PromptFormat fmt,
                    const VerifyOptions &opts = {});

struct IngestReject {
    std::size_t line = 0;
    std::string reason;
};

struct IngestResult {
    std::vector<Problem> problems;
    std::vector<IngestReject> rejects;
};

IngestResult ingest_jsonl(const std::filesystem::path &path);
void write_rejects(const std::vector<IngestReject> &rejects, const std::filesystem::path &path);
// GSM8K-style lines: {"question": ..., "answer": "<rationale> #### <gold>"}.
void write_jsonl(std::span<const Problem> problems, const std::filesystem::path &path);

Digest corpus_digest(std::span<const Problem> problems);

} // namespace als
