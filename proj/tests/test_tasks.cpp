#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "als/error.hpp"
#include "als/tasks.hpp"

using namespace als;
namespace fs = std::filesystem;

namespace {

// Left-to-right evaluation of "a op b op c ...", written independently of the
// generator.
long long eval_chain(const std::string &q) {
    std::size_t i = 0;
    auto number = [&] {
        long long v = 0;
        while (i < q.size() && std::isdigit(static_cast<unsigned char>(q[i]))) v = v * 10 + (q[i++] - '0');
        return v;
    };
    long long acc = number();
    while (i < q.size()) {
        const char op = q[i++];
        const long long rhs = number();
        acc = op == '+' ? acc + rhs : op == '-' ? acc - rhs : acc * rhs;
    }
    return acc;
}

int op_count(const std::string &q) {
    int n = 0;
    for (char c : q) n += (c == '+' || c == '-' || c == '*');
    return n;
}

fs::path temp_file(const std::string &name, const std::string &body) {
    const fs::path p = fs::temp_directory_path() / ("als_tasks_" + name);
    std::ofstream(p) << body;
    return p;
}

Problem problem(std::string gold) { return {"p", "1+1", std::move(gold), ""}; }

} // namespace

TEST(GenArithmetic, Deterministic) {
    const auto a = gen_arithmetic(42, 50, 2);
    const auto b = gen_arithmetic(42, 50, 2);
    ASSERT_EQ(a.size(), 50u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].id, b[i].id);
        EXPECT_EQ(a[i].question, b[i].question);
        EXPECT_EQ(a[i].gold_answer, b[i].gold_answer);
    }
    EXPECT_NE(gen_arithmetic(43, 50, 2)[0].question + gen_arithmetic(43, 50, 2)[1].question,
              a[0].question + a[1].question);
}

TEST(GenArithmetic, GoldMatchesIndependentEvaluator) {
    for (int d = 1; d <= 3; ++d) {
        const auto probs = gen_arithmetic(7 + d, 10000, d);
        for (const Problem &p : probs) {
            ASSERT_EQ(op_count(p.question), chain_length(d)) << p.question;
            ASSERT_EQ(std::to_string(eval_chain(p.question)), p.gold_answer) << p.question;
        }
    }
    EXPECT_EQ(chain_length(1), 2);
    EXPECT_EQ(chain_length(2), 4);
    EXPECT_EQ(chain_length(3), 6);
}

TEST(GenArithmetic, RejectsBadArguments) {
    EXPECT_THROW(gen_arithmetic(1, 0, 1), Error);
    EXPECT_THROW(gen_arithmetic(1, 5, 0), Error);
    EXPECT_THROW(gen_arithmetic(1, 5, 4), Error);
}

TEST(Tokenizer, RoundTripsPrintableText) {
    const std::string s = "Q: 7+5*3 {\"a\": \"b\"}\n#### 36";
    EXPECT_EQ(Tokenizer::decode(Tokenizer::encode(s)), s);
    for (TokenId t : Tokenizer::encode(s)) {
        EXPECT_GE(t, 2);
        EXPECT_LT(t, Tokenizer::kVocabSize);
    }
    EXPECT_EQ(Tokenizer::decode(Tokenizer::encode("\x01\xff")), "??");
}

TEST(RenderPrompt, DeterministicAndCarriesTemplateLiterals) {
    const Problem p = gen_arithmetic(1, 1, 1)[0];
    EXPECT_EQ(render_prompt(p, PromptFormat::P1), render_prompt(p, PromptFormat::P1));
    const auto p1 = render_prompt(p, PromptFormat::P1);
    const auto p2 = render_prompt(p, PromptFormat::P2);
    EXPECT_EQ(p1.front(), Tokenizer::kBos);
    const std::string t1 = Tokenizer::decode(p1);
    const std::string t2 = Tokenizer::decode(p2);
    EXPECT_NE(t1.find("####"), std::string::npos);
    EXPECT_NE(t1.find(p.question), std::string::npos);
    EXPECT_NE(t2.find("\"thought process\""), std::string::npos);
    EXPECT_NE(t2.find("\"final answer\""), std::string::npos);
    EXPECT_NE(t2.find(p.question), std::string::npos);
}

TEST(RenderPrompt, ContextOverflow) {
    Problem p{"long", std::string(5000, '1'), "1", ""};
    try {
        render_prompt(p, PromptFormat::P1, 192);
        FAIL() << "expected ContextOverflow";
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::ContextOverflow);
    }
}

TEST(Verify, P1Examples) {
    EXPECT_EQ(verify("so 40+2=42 #### 42", problem("42"), PromptFormat::P1).label, Label::Correct);
    EXPECT_EQ(verify("#### 41", problem("42"), PromptFormat::P1).label, Label::Incorrect);
    EXPECT_EQ(verify("the answer is 42", problem("42"), PromptFormat::P1).label, Label::FormatInvalid);
    // Last marker wins; commas and sign are normalized.
    EXPECT_EQ(verify("#### 1 then #### 1,042", problem("1042"), PromptFormat::P1).label, Label::Correct);
    EXPECT_EQ(verify("#### -0", problem("0"), PromptFormat::P1).label, Label::Correct);
    EXPECT_EQ(verify("#### +7", problem("7"), PromptFormat::P1).label, Label::Correct);
    EXPECT_EQ(verify("#### seven", problem("7"), PromptFormat::P1).label, Label::Incorrect);
}

TEST(Verify, P2Examples) {
    const Problem p = problem("42");
    EXPECT_EQ(verify(R"({"thought process": "6*7", "final answer": "42"})", p, PromptFormat::P2).label,
              Label::Correct);
    EXPECT_EQ(verify(R"({"thought process": "6*7", "final answer": "41"})", p, PromptFormat::P2).label,
              Label::Incorrect);
    EXPECT_EQ(verify(R"({"thought process": "6*7", "final answer": "42")", p, PromptFormat::P2).label,
              Label::FormatInvalid);
    EXPECT_EQ(verify(R"({"final answer": "42", "thought process": "6*7"})", p, PromptFormat::P2).label,
              Label::FormatInvalid);
    EXPECT_EQ(verify(R"({"final answer": "42", "thought process": "6*7"})", p, PromptFormat::P2,
                     VerifyOptions{false})
                  .label,
              Label::Correct);
    EXPECT_EQ(verify(R"({"thought process": "x", "final answer": "42", "extra": "1"})", p, PromptFormat::P2).label,
              Label::FormatInvalid);
    EXPECT_EQ(verify(R"({"thought process": "x", "final answer": 42})", p, PromptFormat::P2).label,
              Label::FormatInvalid);
    EXPECT_EQ(verify(R"({"thought process": "x", "thought process": "y", "final answer": "42"})", p,
                     PromptFormat::P2)
                  .label,
              Label::FormatInvalid);
    EXPECT_EQ(verify(R"([1, 2])", p, PromptFormat::P2).label, Label::FormatInvalid);
    EXPECT_EQ(verify(R"({"thought process": "x", "final answer": "42"} trailing)", p, PromptFormat::P2).label,
              Label::FormatInvalid);
}

TEST(Verify, OracleOutputsRoundTripAndMutationsFail) {
    std::mt19937_64 rng(17);
    for (const Problem &p : gen_arithmetic(99, 2000, 2)) {
        EXPECT_EQ(verify(oracle_output(p, PromptFormat::P1), p, PromptFormat::P1).label, Label::Correct);
        const std::string o2 = oracle_output(p, PromptFormat::P2);
        ASSERT_EQ(verify(o2, p, PromptFormat::P2).label, Label::Correct);

        auto j = nlohmann::ordered_json::parse(o2);
        std::string dropped = o2;
        dropped.erase(rng() % 2 == 0 ? 0 : dropped.size() - 1, 1);
        EXPECT_EQ(verify(dropped, p, PromptFormat::P2).label, Label::FormatInvalid);
        auto extra = j;
        extra["note"] = "x";
        EXPECT_EQ(verify(extra.dump(), p, PromptFormat::P2).label, Label::FormatInvalid);
        nlohmann::ordered_json swapped;
        swapped["final answer"] = j["final answer"];
        swapped["thought process"] = j["thought process"];
        EXPECT_EQ(verify(swapped.dump(), p, PromptFormat::P2).label, Label::FormatInvalid);
    }
}

TEST(Canonicalize, ExamplesAndIdempotence) {
    EXPECT_EQ(canonicalize("1,234"), "1234");
    EXPECT_EQ(canonicalize(" 007 "), "7");
    EXPECT_EQ(canonicalize("-0"), "0");
    EXPECT_EQ(canonicalize("+5"), "5");
    EXPECT_EQ(canonicalize("2.50"), "2.5");
    EXPECT_EQ(canonicalize("3.0"), "3");
    EXPECT_EQ(canonicalize("6/8"), "3/4");
    EXPECT_EQ(canonicalize("-6/3"), "-2");
    EXPECT_EQ(canonicalize("1/0"), std::nullopt);
    EXPECT_EQ(canonicalize("abc"), std::nullopt);
    EXPECT_EQ(canonicalize(""), std::nullopt);

    std::mt19937_64 rng(4);
    const std::string alphabet = "0123456789-+.,/ ";
    for (int i = 0; i < 20000; ++i) {
        std::string s;
        const std::size_t len = 1 + rng() % 8;
        for (std::size_t k = 0; k < len; ++k) s += alphabet[rng() % alphabet.size()];
        if (const auto c = canonicalize(s)) {
            EXPECT_EQ(canonicalize(*c), c) << "input '" << s << "'";
        }
    }
}

TEST(Canonicalize, NumericOrder) {
    EXPECT_TRUE(canonical_less("7", "42"));
    EXPECT_FALSE(canonical_less("42", "7"));
    EXPECT_TRUE(canonical_less("-3", "1/2"));
    EXPECT_TRUE(canonical_less("1/3", "0.5"));
}

TEST(Ingest, MarkerBlankAndMalformedLines) {
    const fs::path p = temp_file("mixed.jsonl",
                                 "{\"question\":\"Q\",\"answer\":\"reasoning #### 7\"}\n"
                                 "\n"
                                 "{not json}\n"
                                 "{\"question\":\"Q2\"}\n"
                                 "{\"question\":\"Q3\",\"answer\":\"1,250\",\"id\":\"x3\"}\n"
                                 "{\"question\":\"Q4\",\"answer\":\"#### many\"}\n");
    const IngestResult r = ingest_jsonl(p);
    ASSERT_EQ(r.problems.size(), 2u);
    EXPECT_EQ(r.problems[0].gold_answer, "7");
    EXPECT_EQ(r.problems[0].rationale, "reasoning");
    EXPECT_EQ(r.problems[1].gold_answer, "1250");
    EXPECT_EQ(r.problems[1].id, "x3");
    ASSERT_EQ(r.rejects.size(), 4u);
    EXPECT_EQ(r.rejects[0].line, 2u);
    EXPECT_EQ(r.rejects[1].line, 3u);
    EXPECT_EQ(r.rejects[2].line, 4u);
    EXPECT_EQ(r.rejects[3].line, 6u);

    const fs::path rej = fs::temp_directory_path() / "als_tasks_rejects.txt";
    write_rejects(r.rejects, rej);
    std::ifstream in(rej);
    std::string first;
    std::getline(in, first);
    EXPECT_EQ(first.rfind("line 2:", 0), 0u) << first;
}

TEST(Ingest, Errors) {
    try {
        ingest_jsonl(temp_file("empty.jsonl", "\n\n{bad}\n"));
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptyCorpus);
        EXPECT_EQ(exit_code_for(e.kind()), 4);
    }
    try {
        ingest_jsonl("/nonexistent/dir/corpus.jsonl");
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::IoFailure);
        EXPECT_EQ(exit_code_for(e.kind()), 3);
    }
}

TEST(Ingest, WriteJsonlRoundTripsWithDigest) {
    const auto probs = gen_arithmetic(5, 100, 3);
    const fs::path p = fs::temp_directory_path() / "als_tasks_roundtrip.jsonl";
    write_jsonl(probs, p);
    const IngestResult r = ingest_jsonl(p);
    ASSERT_TRUE(r.rejects.empty());
    ASSERT_EQ(r.problems.size(), probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        EXPECT_EQ(r.problems[i].id, probs[i].id);
        EXPECT_EQ(r.problems[i].question, probs[i].question);
        EXPECT_EQ(r.problems[i].gold_answer, probs[i].gold_answer);
        EXPECT_EQ(r.problems[i].rationale, probs[i].rationale);
    }
    EXPECT_EQ(corpus_digest(r.problems), corpus_digest(probs));
}
