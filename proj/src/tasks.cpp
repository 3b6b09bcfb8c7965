#include "als/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "als/error.hpp"

namespace als {

namespace {

constexpr char kFirstPrintable = 32;
constexpr char kLastPrintable = 126;
constexpr TokenId kFirstCharToken = 2;
constexpr TokenId kNewlineToken = 97;

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

bool all_digits(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

std::string strip_leading_zeros(std::string_view digits) {
    std::size_t i = 0;
    while (i + 1 < digits.size() && digits[i] == '0') ++i;
    return std::string(digits.substr(i));
}

std::optional<std::uint64_t> parse_u64(std::string_view digits) {
    std::uint64_t v = 0;
    for (char c : digits) {
        const std::uint64_t d = static_cast<std::uint64_t>(c - '0');
        if (v > (UINT64_MAX - d) / 10) return std::nullopt;
        v = v * 10 + d;
    }
    return v;
}

long double canonical_value(const std::string &c) {
    const auto slash = c.find('/');
    if (slash == std::string::npos) {
        return std::strtold(c.c_str(), nullptr);
    }
    const long double p = std::strtold(c.substr(0, slash).c_str(), nullptr);
    const long double q = std::strtold(c.substr(slash + 1).c_str(), nullptr);
    return p / q;
}

std::string replace_question(std::string_view tmpl, std::string_view question) {
    constexpr std::string_view key = "{question}";
    std::string out(tmpl);
    const auto pos = out.find(key);
    out.replace(pos, key.size(), question);
    return out;
}

using OrderedJson = nlohmann::ordered_json;

constexpr std::string_view kThoughtKey = "thought process";
constexpr std::string_view kAnswerKey = "final answer";

// Returns the "final answer" string if the output satisfies the schema.
std::optional<std::string> p2_final_answer(std::string_view output, const VerifyOptions &opts) {
    OrderedJson doc;
    // Duplicate keys collapse in the parsed object, so count them as parsed.
    std::size_t top_level_keys = 0;
    auto count_keys = [&](int depth, nlohmann::json::parse_event_t event, OrderedJson &) {
        if (depth == 1 && event == nlohmann::json::parse_event_t::key) ++top_level_keys;
        return true;
    };
    try {
        doc = OrderedJson::parse(output.begin(), output.end(), count_keys);
    } catch (const nlohmann::json::exception &) {
        return std::nullopt;
    }
    if (!doc.is_object() || doc.size() != 2 || top_level_keys != 2) return std::nullopt;
    if (!doc.contains(kThoughtKey) || !doc.contains(kAnswerKey)) return std::nullopt;
    if (opts.strict_key_order && doc.begin().key() != kThoughtKey) return std::nullopt;
    const auto &thought = doc[std::string(kThoughtKey)];
    const auto &answer = doc[std::string(kAnswerKey)];
    if (!thought.is_string() || !answer.is_string()) return std::nullopt;
    return answer.get<std::string>();
}

std::optional<std::string_view> p1_marker_value(std::string_view output) {
    const auto pos = output.rfind("####");
    if (pos == std::string_view::npos) return std::nullopt;
    std::string_view rest = output.substr(pos + 4);
    while (!rest.empty() && is_space(rest.front())) rest.remove_prefix(1);
    std::size_t end = 0;
    while (end < rest.size() && !is_space(rest[end])) ++end;
    return rest.substr(0, end);
}

} // namespace

std::vector<TokenId> Tokenizer::encode(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(from_char(c));
    return out;
}

std::string Tokenizer::decode(std::span<const TokenId> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        if (auto c = to_char(t)) out.push_back(*c);
    }
    return out;
}

std::optional<char> Tokenizer::to_char(TokenId id) noexcept {
    if (id == kNewlineToken) return '\n';
    if (id >= kFirstCharToken && id < kNewlineToken) {
        return static_cast<char>(kFirstPrintable + (id - kFirstCharToken));
    }
    return std::nullopt;
}

TokenId Tokenizer::from_char(char c) noexcept {
    if (c == '\n') return kNewlineToken;
    if (c >= kFirstPrintable && c <= kLastPrintable) return kFirstCharToken + (c - kFirstPrintable);
    return from_char('?');
}

const char *to_string(PromptFormat fmt) noexcept { return fmt == PromptFormat::P1 ? "p1" : "p2"; }

PromptFormat parse_format(std::string_view text) {
    if (text == "p1" || text == "P1") return PromptFormat::P1;
    if (text == "p2" || text == "P2") return PromptFormat::P2;
    throw Error(ErrorKind::InvalidConfig, "unknown prompt format '" + std::string(text) + "'");
}

const char *to_string(Label label) noexcept {
    switch (label) {
    case Label::Correct: return "Correct";
    case Label::Incorrect: return "Incorrect";
    case Label::FormatInvalid: return "FormatInvalid";
    }
    return "?";
}

std::optional<std::string> canonicalize(std::string_view text) {
    std::string s;
    for (char c : text) {
        if (c != ',' && !is_space(c)) s.push_back(c);
    }
    bool negative = false;
    std::string_view body = s;
    if (!body.empty() && (body.front() == '+' || body.front() == '-')) {
        negative = body.front() == '-';
        body.remove_prefix(1);
    }
    if (body.empty()) return std::nullopt;

    auto with_sign = [&](std::string magnitude) {
        if (magnitude == "0" || !negative) return magnitude;
        return "-" + magnitude;
    };

    if (const auto slash = body.find('/'); slash != std::string_view::npos) {
        const auto num = body.substr(0, slash);
        const auto den = body.substr(slash + 1);
        if (num.empty() || den.empty() || !all_digits(num) || !all_digits(den)) return std::nullopt;
        auto p = parse_u64(num);
        auto q = parse_u64(den);
        if (!p || !q || *q == 0) return std::nullopt;
        if (*p == 0) return std::string("0");
        const std::uint64_t g = std::gcd(*p, *q);
        const std::uint64_t rp = *p / g;
        const std::uint64_t rq = *q / g;
        if (rq == 1) return with_sign(std::to_string(rp));
        return with_sign(std::to_string(rp) + "/" + std::to_string(rq));
    }

    if (const auto dot = body.find('.'); dot != std::string_view::npos) {
        std::string_view ip = body.substr(0, dot);
        std::string_view fp = body.substr(dot + 1);
        if ((ip.empty() && fp.empty()) || !all_digits(ip) || !all_digits(fp)) return std::nullopt;
        while (!fp.empty() && fp.back() == '0') fp.remove_suffix(1);
        std::string ints = ip.empty() ? std::string("0") : strip_leading_zeros(ip);
        if (fp.empty()) return with_sign(ints);
        return with_sign(ints + "." + std::string(fp));
    }

    if (!all_digits(body)) return std::nullopt;
    return with_sign(strip_leading_zeros(body));
}

bool canonical_less(const std::string &a, const std::string &b) {
    const long double va = canonical_value(a);
    const long double vb = canonical_value(b);
    if (va != vb) return va < vb;
    return a < b;
}

int chain_length(int difficulty) {
    if (difficulty < 1 || difficulty > 3) {
        throw Error(ErrorKind::InvalidConfig, "difficulty must be 1, 2 or 3");
    }
    return 2 * difficulty;
}

std::vector<Problem> gen_arithmetic(std::uint64_t seed, std::size_t n, int difficulty) {
    if (n == 0) {
        throw Error(ErrorKind::InvalidConfig, "gen_arithmetic needs n >= 1");
    }
    const int ops = chain_length(difficulty);
    std::mt19937_64 rng(seed);
    auto digit = [&] { return static_cast<int>(rng() % 9) + 1; };
    constexpr char kOps[] = {'+', '-', '*'};

    std::vector<Problem> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        int value = digit();
        std::string question = std::to_string(value);
        std::string rationale;
        for (int s = 0; s < ops; ++s) {
            char op;
            int operand;
            int next;
            do {
                op = kOps[rng() % 3];
                operand = digit();
                next = op == '+' ? value + operand : op == '-' ? value - operand : value * operand;
            } while (next < 0 || next > 99);
            question += op;
            question += std::to_string(operand);
            if (!rationale.empty()) rationale += ' ';
            rationale += std::to_string(value) + op + std::to_string(operand) + "=" +
                         std::to_string(next);
            value = next;
        }
        out.push_back(Problem{"arith-d" + std::to_string(difficulty) + "-" + std::to_string(seed) +
                                  "-" + std::to_string(i),
                              std::move(question), std::to_string(value), std::move(rationale)});
    }
    return out;
}

std::string render_prompt_text(const Problem &p, PromptFormat fmt) {
    return replace_question(fmt == PromptFormat::P1 ? kP1Template : kP2Template, p.question);
}

std::vector<TokenId> render_prompt(const Problem &p, PromptFormat fmt, std::size_t max_tokens) {
    std::vector<TokenId> tokens{Tokenizer::kBos};
    const auto body = Tokenizer::encode(render_prompt_text(p, fmt));
    tokens.insert(tokens.end(), body.begin(), body.end());
    if (tokens.size() > max_tokens) {
        throw Error(ErrorKind::ContextOverflow, "prompt for " + p.id + " needs " +
                                                    std::to_string(tokens.size()) +
                                                    " tokens, budget " + std::to_string(max_tokens));
    }
    return tokens;
}

std::string oracle_output(const Problem &p, PromptFormat fmt) {
    if (fmt == PromptFormat::P1) {
        return p.rationale.empty() ? "#### " + p.gold_answer
                                   : p.rationale + " #### " + p.gold_answer;
    }
    OrderedJson doc;
    doc[std::string(kThoughtKey)] = p.rationale;
    doc[std::string(kAnswerKey)] = p.gold_answer;
    // Matches the template's spacing: {"k": "v", "k": "v"}.
    std::string out = "{";
    bool first = true;
    for (const auto &[key, value] : doc.items()) {
        if (!first) out += ", ";
        first = false;
        out += OrderedJson(key).dump() + ": " + value.dump();
    }
    return out + "}";
}

std::optional<std::string> extract_answer(std::string_view output, PromptFormat fmt,
                                          const VerifyOptions &opts) {
    if (fmt == PromptFormat::P1) {
        const auto value = p1_marker_value(output);
        if (!value) return std::nullopt;
        return canonicalize(*value);
    }
    const auto answer = p2_final_answer(output, opts);
    if (!answer) return std::nullopt;
    return canonicalize(*answer);
}

VerifyResult verify(std::string_view output, const Problem &p, PromptFormat fmt,
                    const VerifyOptions &opts) {
    std::optional<std::string> raw;
    if (fmt == PromptFormat::P1) {
        if (auto v = p1_marker_value(output)) raw = std::string(*v);
    } else {
        raw = p2_final_answer(output, opts);
    }
    if (!raw) return {Label::FormatInvalid, std::nullopt};
    auto extracted = canonicalize(*raw);
    if (!extracted) return {Label::Incorrect, std::nullopt};
    const auto gold = canonicalize(p.gold_answer);
    const Label label = gold && *gold == *extracted ? Label::Correct : Label::Incorrect;
    return {label, std::move(extracted)};
}

IngestResult ingest_jsonl(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorKind::IoFailure, "cannot open corpus " + path.string());
    }
    IngestResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto reject = [&](std::string reason) {
            result.rejects.push_back({line_no, std::move(reason)});
        };
        const std::string_view body = trim(line);
        if (body.empty()) {
            reject("blank line");
            continue;
        }
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(body.begin(), body.end());
        } catch (const nlohmann::json::exception &e) {
            reject(std::string("malformed JSON: ") + e.what());
            continue;
        }
        if (!doc.is_object() || !doc.contains("question") || !doc.contains("answer") ||
            !doc["question"].is_string() || !doc["answer"].is_string()) {
            reject("expected an object with string fields 'question' and 'answer'");
            continue;
        }
        const std::string answer = doc["answer"].get<std::string>();
        std::string rationale;
        std::string_view gold_text = answer;
        if (const auto pos = answer.rfind("####"); pos != std::string::npos) {
            rationale = std::string(trim(std::string_view(answer).substr(0, pos)));
            gold_text = std::string_view(answer).substr(pos + 4);
        }
        auto gold = canonicalize(gold_text);
        if (!gold) {
            reject("answer is not a number: '" + std::string(trim(gold_text)) + "'");
            continue;
        }
        std::string id = doc.contains("id") && doc["id"].is_string()
                             ? doc["id"].get<std::string>()
                             : "line-" + std::to_string(line_no);
        result.problems.push_back(
            {std::move(id), doc["question"].get<std::string>(), std::move(*gold), std::move(rationale)});
    }
    if (in.bad()) {
        throw Error(ErrorKind::IoFailure, "read error on " + path.string());
    }
    if (result.problems.empty()) {
        throw Error(ErrorKind::EmptyCorpus, path.string() + " has no valid problems (" +
                                                std::to_string(result.rejects.size()) + " rejected)");
    }
    return result;
}

void write_rejects(const std::vector<IngestReject> &rejects, const std::filesystem::path &path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    for (const auto &r : rejects) out << "line " << r.line << ": " << r.reason << '\n';
}

void write_jsonl(std::span<const Problem> problems, const std::filesystem::path &path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    for (const auto &p : problems) {
        nlohmann::ordered_json doc;
        doc["id"] = p.id;
        doc["question"] = p.question;
        doc["answer"] = p.rationale.empty() ? "#### " + p.gold_answer
                                            : p.rationale + " #### " + p.gold_answer;
        out << doc.dump() << '\n';
    }
    if (!out) throw Error(ErrorKind::IoFailure, "write failed on " + path.string());
}

Digest corpus_digest(std::span<const Problem> problems) {
    Hasher h;
    h.u64(problems.size());
    for (const auto &p : problems) {
        h.field(p.id).field(p.question).field(p.gold_answer);
    }
    return h.finish();
}

} // namespace als
