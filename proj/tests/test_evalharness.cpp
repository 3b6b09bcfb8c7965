#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "als/error.hpp"
#include "als/evalharness.hpp"
#include "als/recipe.hpp"

using namespace als;

namespace {

template <typename F>
ErrorKind kind_of(F &&f) {
    try {
        f();
    } catch (const Error &e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an als::Error";
    return ErrorKind::IoFailure;
}

EvalRecord rec(std::string name, double acc, double t) {
    EvalRecord r;
    r.method = std::move(name);
    r.accuracy_pct = acc;
    r.mean_time_s = t;
    return r;
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.max_context = 96;
    cfg.seed = 5;
    return cfg;
}

const Model &random_model() {
    static const Model m(small_config());
    return m;
}

SteeringVector some_vector(int dim, int layer) {
    SteeringVector sv;
    std::mt19937_64 rng(8);
    std::normal_distribution<float> n;
    std::vector<float> v(dim);
    for (float &x : v) x = n(rng);
    sv.v = Vec32(v);
    sv.layer = layer;
    sv.n_good = sv.n_bad = 1;
    return sv;
}

// O(n^2) domination filter, sorted by time then input order.
std::vector<ParetoPoint> brute_pareto(const std::vector<ParetoPoint> &pts) {
    std::vector<std::pair<std::size_t, ParetoPoint>> keep;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        bool dominated = false;
        for (std::size_t j = 0; j < pts.size() && !dominated; ++j) {
            const bool le = pts[j].time_s <= pts[i].time_s && pts[j].accuracy_pct >= pts[i].accuracy_pct;
            const bool strict = pts[j].time_s < pts[i].time_s || pts[j].accuracy_pct > pts[i].accuracy_pct;
            dominated = le && strict;
        }
        if (!dominated) keep.emplace_back(i, pts[i]);
    }
    std::stable_sort(keep.begin(), keep.end(),
                     [](const auto &a, const auto &b) { return a.second.time_s < b.second.time_s; });
    std::vector<ParetoPoint> out;
    for (auto &[i, p] : keep) out.push_back(p);
    return out;
}

std::filesystem::path scratch_dir(const std::string &name) {
    auto d = std::filesystem::temp_directory_path() / ("als_eval_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(d);
    return d;
}

} // namespace

TEST(Tradeoff, Examples) {
    EXPECT_NEAR(tradeoff_score(76.0, 9.9, 48.6), 77.8, 0.1);
    EXPECT_DOUBLE_EQ(tradeoff_score(76.0, 48.6, 48.6), 38.0);
    EXPECT_DOUBLE_EQ(tradeoff_score(100.0, 3.0, 3.0), 50.0);
    EXPECT_DOUBLE_EQ(tradeoff_score(0.0, 1.0, 4.0), 37.5);
}

TEST(Tradeoff, InvalidTimes) {
    EXPECT_EQ(kind_of([] { tradeoff_score(50, 2.0, 1.0); }), ErrorKind::InvalidTime);
    EXPECT_EQ(kind_of([] { tradeoff_score(50, 0.0, 1.0); }), ErrorKind::InvalidTime);
    EXPECT_EQ(kind_of([] { tradeoff_score(50, -1.0, 1.0); }), ErrorKind::InvalidTime);
    EXPECT_EQ(kind_of([] { tradeoff_score(50, NAN, 1.0); }), ErrorKind::InvalidTime);
    EXPECT_EQ(exit_code_for(ErrorKind::InvalidTime), 2);
}

TEST(NormalizeGroup, Examples) {
    const auto one = normalize_group({rec("a", 64.0, 3.0)});
    EXPECT_EQ(one[0].normalized_time, 100.0);
    EXPECT_EQ(one[0].tradeoff, 32.0);

    const auto two = normalize_group({rec("a", 50, 10.0), rec("b", 50, 50.0)});
    EXPECT_EQ(two[0].normalized_time, 20.0);
    EXPECT_EQ(two[1].normalized_time, 100.0);

    const auto t1 = normalize_group({rec("latent", 75.4, 47.0), rec("cot", 76.0, 9.9), rec("sc", 76.0, 48.6)});
    EXPECT_NEAR(t1[0].tradeoff, 39.4, 0.1);
    EXPECT_NEAR(t1[1].tradeoff, 77.8, 0.1);
    EXPECT_NEAR(t1[2].tradeoff, 38.0, 0.1);

    EXPECT_EQ(kind_of([] { normalize_group({rec("a", 1, 0.0), rec("b", 1, 1.0)}); }), ErrorKind::InvalidTime);
}

TEST(NormalizeGroup, AnchorAndIdentityOnRandomGroups) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> t(1e-6, 100.0), a(0, 100);
    for (int g = 0; g < 2000; ++g) {
        std::vector<EvalRecord> group;
        const int n = 1 + g % 7;
        for (int i = 0; i < n; ++i) group.push_back(rec("m" + std::to_string(i), quantize3(a(rng)), t(rng)));
        if (g % 5 == 0) group.push_back(group.front()); // tied slowest sometimes
        const auto out = normalize_group(group);
        double mx = 0;
        for (const EvalRecord &r : out) {
            EXPECT_GT(r.normalized_time, 0.0);
            EXPECT_LE(r.normalized_time, 100.0);
            mx = std::max(mx, r.normalized_time);
            EXPECT_EQ(r.tradeoff, (r.accuracy_pct + (100.0 - r.normalized_time)) / 2.0);
            // The printed columns recompute the printed tradeoff.
            const double acc = std::stod(format_g6(r.accuracy_pct));
            const double norm = std::stod(format_g6(r.normalized_time));
            EXPECT_EQ(format_g6((acc + (100.0 - norm)) / 2.0), format_g6(r.tradeoff));
        }
        EXPECT_EQ(mx, 100.0);
    }
}

TEST(Pareto, Examples) {
    auto f = pareto_frontier({{5, 80, "a"}, {10, 90, "b"}});
    ASSERT_EQ(f.size(), 2u); // neither dominates
    EXPECT_EQ(f[0].label, "a");
    // Faster and more accurate dominates outright.
    f = pareto_frontier({{10, 80, "b"}, {5, 90, "a"}});
    ASSERT_EQ(f.size(), 1u);
    EXPECT_EQ(f[0].label, "a");
    f = pareto_frontier({{10, 90, "b"}, {5, 90, "a"}});
    ASSERT_EQ(f.size(), 1u);
    EXPECT_EQ(f[0].label, "a");
    f = pareto_frontier({{5, 90, "a"}, {5, 90, "a"}, {5, 80, "c"}});
    EXPECT_EQ(f.size(), 2u); // exact duplicates both survive
    f = pareto_frontier({{3, 95, "x"}, {1, 50, "y"}, {2, 70, "z"}});
    ASSERT_EQ(f.size(), 3u);
    EXPECT_EQ(f[0].label, "y");
    EXPECT_EQ(f[2].label, "x");
}

TEST(Pareto, MatchesBruteForceOracle) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = trial < 290 ? 1 + rng() % 100 : 1000;
        // Coarse grid for plenty of ties and duplicates.
        const int grid = trial % 2 ? 10 : 1000;
        std::vector<ParetoPoint> pts;
        for (std::size_t i = 0; i < n; ++i) {
            pts.push_back({double(1 + rng() % grid), double(rng() % grid), std::to_string(i)});
        }
        EXPECT_EQ(pareto_frontier(pts), brute_pareto(pts)) << "trial " << trial;
    }
}

TEST(RunEval, MemorizedCorpusScoresFullAccuracy) {
    // A model that has memorized its corpus emits the oracle output, so every
    // problem verifies Correct.
    const std::vector<Problem> corpus = gen_arithmetic(31, 3, 1);
    ModelConfig cfg = small_config();
    Model m(cfg);
    const auto data = make_training_set(corpus, 0.0, 1);
    TrainOptions opts;
    opts.batch_size = 3;
    opts.warmup_steps = 10;
    train(m, data, 400, 1e-2f, opts);

    MethodSpec cot;
    cot.name = "cot";
    cot.max_new = response_budget(corpus, PromptFormat::P1);
    const EvalRun run = run_eval(cot, corpus, m, PromptFormat::P1);
    EXPECT_EQ(run.record.accuracy_pct, 100.0);
    EXPECT_EQ(run.record.n_problems, 3u);
    for (const ProblemLog &l : run.log) EXPECT_EQ(l.label, Label::Correct) << l.output;
}

TEST(RunEval, LogRecountAndTiming) {
    const auto corpus = gen_arithmetic(2, 12, 1);
    MethodSpec cot;
    cot.name = "cot";
    cot.max_new = 20;
    for (unsigned workers : {1u, 3u}) {
        EvalOptions opts;
        opts.workers = workers;
        const EvalRun run = run_eval(cot, corpus, random_model(), PromptFormat::P1, opts);
        ASSERT_EQ(run.log.size(), corpus.size());
        std::size_t correct = 0;
        for (std::size_t i = 0; i < run.log.size(); ++i) {
            EXPECT_EQ(run.log[i].id, corpus[i].id);
            EXPECT_GT(run.log[i].time_s, 0.0);
            correct += run.log[i].label == Label::Correct;
        }
        EXPECT_EQ(run.record.accuracy_pct, quantize3(100.0 * correct / corpus.size()));
        EXPECT_FALSE(run.record.intervention_rate.has_value());
        EXPECT_EQ(run.record.dataset, "synthetic");
    }
    EXPECT_EQ(kind_of([&] { run_eval(cot, std::span<const Problem>{}, random_model(), PromptFormat::P1); }),
              ErrorKind::EmptyCorpus);
}

TEST(RunEval, RepeatRunsGiveIdenticalAccuracyAndOutputs) {
    const auto corpus = gen_arithmetic(6, 8, 1);
    MethodSpec sc;
    sc.name = "sc";
    sc.kind = MethodKind::SelfConsistency;
    sc.baseline.k = 3;
    sc.max_new = 20;
    const EvalRun a = run_eval(sc, corpus, random_model(), PromptFormat::P1);
    const EvalRun b = run_eval(sc, corpus, random_model(), PromptFormat::P1, {"synthetic", 4});
    EXPECT_EQ(a.record.accuracy_pct, b.record.accuracy_pct);
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].output, b.log[i].output);
    EXPECT_EQ(a.total.forward_passes, b.total.forward_passes);
}

TEST(RunEval, PerProblemFailureIsRecordedNotFatal) {
    // Context of 48 tokens: long questions overflow mid-decode.
    ModelConfig cfg = small_config();
    cfg.max_context = 48;
    const Model m(cfg);
    auto corpus = gen_arithmetic(3, 4, 1);
    MethodSpec cot;
    cot.name = "cot";
    cot.max_new = 40;
    const EvalRun run = run_eval(cot, corpus, m, PromptFormat::P1);
    ASSERT_EQ(run.log.size(), 4u);
    std::size_t errors = 0;
    for (const ProblemLog &l : run.log) {
        if (!l.error.empty()) {
            ++errors;
            EXPECT_EQ(l.label, Label::Incorrect);
        }
    }
    EXPECT_GT(errors, 0u);
}

TEST(RunEval, SteeredWithClosedGateMatchesCot) {
    const auto corpus = gen_arithmetic(9, 10, 1);
    const SteeringVector sv = some_vector(32, random_model().config().penultimate_layer());
    MethodSpec cot;
    cot.name = "cot";
    cot.max_new = 24;
    MethodSpec st = cot;
    st.name = "als";
    st.kind = MethodKind::Steered;
    st.vector = &sv;
    st.steer.tau = -1.0f;
    st.steer.alpha = 0.6f;
    const EvalRun a = run_eval(cot, corpus, random_model(), PromptFormat::P1);
    const EvalRun b = run_eval(st, corpus, random_model(), PromptFormat::P1);
    ASSERT_TRUE(b.record.intervention_rate.has_value());
    EXPECT_EQ(*b.record.intervention_rate, 0.0);
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].output, b.log[i].output);
    EXPECT_EQ(a.record.accuracy_pct, b.record.accuracy_pct);
    EXPECT_EQ(b.total.cosine_ops, a.total.forward_passes - a.total.prefill_passes);

    st.vector = nullptr;
    EXPECT_EQ(kind_of([&] { run_eval(st, corpus, random_model(), PromptFormat::P1); }), ErrorKind::InvalidConfig);
}

TEST(Sweep, SingleZeroAlphaEqualsRunEval) {
    const auto corpus = gen_arithmetic(10, 8, 1);
    const SteeringVector sv = some_vector(32, random_model().config().penultimate_layer());
    SteerConfig base;
    const std::vector<float> zero{0.0f};
    const auto sweep = sweep_alpha(zero, base, corpus, random_model(), sv, PromptFormat::P1, 24);
    ASSERT_EQ(sweep.size(), 1u);
    MethodSpec st;
    st.name = alpha_method_name(0.0f);
    st.kind = MethodKind::Steered;
    st.vector = &sv;
    st.steer.alpha = 0.0f;
    st.max_new = 24;
    const EvalRun direct = run_eval(st, corpus, random_model(), PromptFormat::P1);
    EXPECT_EQ(sweep[0].record.method, "als-a0");
    EXPECT_EQ(sweep[0].record.accuracy_pct, direct.record.accuracy_pct);
    EXPECT_EQ(sweep[0].record.normalized_time, 100.0);
    EXPECT_EQ(sweep[0].record.intervention_rate, direct.record.intervention_rate);
    MethodSpec cot;
    cot.max_new = 24;
    const EvalRun greedy = run_eval(cot, corpus, random_model(), PromptFormat::P1);
    for (std::size_t i = 0; i < direct.log.size(); ++i) {
        EXPECT_EQ(sweep[0].log[i].output, direct.log[i].output);
        EXPECT_EQ(sweep[0].log[i].output, greedy.log[i].output);
    }
}

TEST(Sweep, RowsRecomputeAndAnchor) {
    const auto corpus = gen_arithmetic(12, 6, 1);
    const SteeringVector sv = some_vector(32, random_model().config().penultimate_layer());
    const auto sweep = sweep_alpha(kDefaultAlphas, SteerConfig{}, corpus, random_model(), sv, PromptFormat::P1, 20);
    ASSERT_EQ(sweep.size(), 4u);
    double slowest = 0;
    for (const auto &r : sweep) slowest = std::max(slowest, r.record.mean_time_s);
    double mx = 0;
    for (const auto &r : sweep) {
        const double expect = tradeoff_score(r.record.accuracy_pct, r.record.mean_time_s, slowest);
        EXPECT_NEAR(r.record.tradeoff, expect, 1e-3);
        mx = std::max(mx, r.record.normalized_time);
    }
    EXPECT_EQ(mx, 100.0);
    EXPECT_EQ(kind_of([&] {
                  sweep_alpha(std::span<const float>{}, SteerConfig{}, corpus, random_model(), sv,
                              PromptFormat::P1, 20);
              }),
              ErrorKind::InvalidConfig);
}

TEST(Report, RoundTripAndManifest) {
    const auto corpus = gen_arithmetic(13, 5, 1);
    MethodSpec cot;
    cot.name = "cot, \"quoted\""; // exercises CSV quoting
    cot.max_new = 16;
    const SteeringVector sv = some_vector(32, random_model().config().penultimate_layer());
    MethodSpec st;
    st.name = "als";
    st.kind = MethodKind::Steered;
    st.vector = &sv;
    st.max_new = 16;
    std::vector<EvalRun> runs{run_eval(cot, corpus, random_model(), PromptFormat::P2),
                              run_eval(st, corpus, random_model(), PromptFormat::P2)};
    normalize_runs(runs);

    RunManifest man;
    man.seeds = {{"corpus", 13}, {"model", 5}};
    man.alpha = 0.3;
    man.tau = 0.1;
    man.gate = "always";
    man.format = "p2";
    man.dataset = "synthetic";
    man.methods = {runs[0].record.method, "als"};
    man.model_checksum = to_hex(random_model().checksum());
    man.vector_digest = "vd";
    man.corpus_digest = to_hex(corpus_digest(corpus));
    man.started_at = utc_timestamp();
    man.finished_at = utc_timestamp();

    const auto dir = scratch_dir("report");
    emit_report(runs, man, dir);
    const auto back = read_results_csv(dir / "results.csv");
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        const EvalRecord &a = runs[i].record, &b = back[i];
        EXPECT_EQ(a.method, b.method);
        EXPECT_EQ(a.dataset, b.dataset);
        EXPECT_EQ(a.format, b.format);
        EXPECT_EQ(a.accuracy_pct, b.accuracy_pct);
        EXPECT_EQ(format_g6(a.mean_time_s), format_g6(b.mean_time_s));
        EXPECT_EQ(a.normalized_time, b.normalized_time);
        EXPECT_EQ(format_g6(a.tradeoff), format_g6(b.tradeoff));
        EXPECT_EQ(a.n_problems, b.n_problems);
        EXPECT_EQ(a.intervention_rate.has_value(), b.intervention_rate.has_value());
        if (a.intervention_rate) {
            EXPECT_EQ(format_g6(*a.intervention_rate), format_g6(*b.intervention_rate));
        }
        EXPECT_EQ(format_g6((b.accuracy_pct + 100 - b.normalized_time) / 2), format_g6(b.tradeoff));
    }
    const RunManifest m2 = read_manifest(dir / "manifest.json");
    EXPECT_EQ(m2.seeds, man.seeds);
    EXPECT_EQ(m2.corpus_digest, to_hex(corpus_digest(corpus)));
    EXPECT_EQ(m2.model_checksum, man.model_checksum);
    EXPECT_EQ(m2.alpha, man.alpha);
    EXPECT_EQ(m2.methods, man.methods);
    EXPECT_TRUE(std::filesystem::exists(dir / "problems.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "pareto.csv"));
    std::filesystem::remove_all(dir);
}

TEST(Report, FailuresAreTyped) {
    const auto dir = scratch_dir("fail");
    std::filesystem::create_directories(dir);
    const auto blocker = dir / "file";
    std::ofstream(blocker) << "x";
    EXPECT_EQ(kind_of([&] { emit_report({}, RunManifest{}, blocker / "sub"); }), ErrorKind::IoFailure);
    EXPECT_EQ(kind_of([&] { read_results_csv(dir / "missing.csv"); }), ErrorKind::IoFailure);
    std::ofstream(dir / "bad.csv") << "method,acc\nx,1\n";
    EXPECT_EQ(kind_of([&] { read_results_csv(dir / "bad.csv"); }), ErrorKind::CorruptFile);
    std::ofstream(dir / "bad.json") << "{not json";
    EXPECT_EQ(kind_of([&] { read_manifest(dir / "bad.json"); }), ErrorKind::CorruptFile);
    std::filesystem::remove_all(dir);
}
