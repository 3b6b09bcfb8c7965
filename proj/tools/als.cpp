// als: train the toy model, build steering vectors, decode, evaluate and
// report. Exit codes: 0 ok, 2 invalid config, 3 I/O, 4 empty/invalid corpus.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "als/baselines.hpp"
#include "als/error.hpp"
#include "als/evalharness.hpp"
#include "als/recipe.hpp"
#include "als/steering.hpp"
#include "als/tasks.hpp"
#include "als/tinylm.hpp"

namespace fs = std::filesystem;
using namespace als;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    std::string model = "model.tlm";
    std::string vector;
    float alpha = kDefaultAlpha;
    float tau = kDefaultTau;
    std::string format = "p1";
    std::string gate = "always";
    std::string out;
    bool serial = false;
};

std::vector<Problem> load_corpus(const std::string &path, std::uint64_t seed, std::size_t n, int difficulty) {
    if (path.empty()) return gen_arithmetic(seed, n, difficulty);
    IngestResult r = ingest_jsonl(path);
    if (!r.rejects.empty()) {
        std::fprintf(stderr, "%zu line(s) rejected from %s\n", r.rejects.size(), path.c_str());
    }
    return std::move(r.problems);
}

SteerConfig steer_config(const Globals &g) {
    SteerConfig c;
    c.alpha = g.alpha;
    c.tau = g.tau;
    c.mode = parse_gate_mode(g.gate);
    c.validate();
    return c;
}

unsigned worker_count(const Globals &g) {
    if (g.serial) return 1;
    return std::max(1u, std::thread::hardware_concurrency());
}

void print_records(const std::vector<EvalRecord> &recs) {
    std::printf("%-22s %-6s %9s %10s %9s %9s %5s %8s\n", "method", "format", "acc", "time_s", "norm_time",
                "tradeoff", "n", "interv");
    for (const EvalRecord &r : recs) {
        std::printf("%-22s %-6s %9s %10s %9s %9s %5zu %8s\n", r.method.c_str(), to_string(r.format),
                    format_g6(r.accuracy_pct).c_str(), format_g6(r.mean_time_s).c_str(),
                    format_g6(r.normalized_time).c_str(), format_g6(r.tradeoff).c_str(), r.n_problems,
                    r.intervention_rate ? format_g6(*r.intervention_rate).c_str() : "-");
    }
}

RunManifest base_manifest(const Globals &g, const Model &model, std::span<const Problem> corpus,
                          const std::string &dataset) {
    RunManifest m;
    m.seeds = {{"seed", g.seed}, {"model_init", model.config().seed}};
    m.format = g.format;
    m.gate = g.gate;
    m.dataset = dataset;
    m.model_checksum = to_hex(model.checksum());
    m.corpus_digest = to_hex(corpus_digest(corpus));
    m.environment = "single process, " + std::to_string(worker_count(g)) + " worker(s)";
    m.started_at = utc_timestamp();
    return m;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Latent steering toolkit: train, steer, decode, evaluate"};
    app.require_subcommand(1);
    app.fallthrough();
    app.option_defaults()->always_capture_default();

    Globals g;
    app.add_option("--seed", g.seed, "RNG seed");
    app.add_option("--model", g.model, "model checkpoint path");
    app.add_option("--vector", g.vector, "steering vector path");
    app.add_option("--alpha", g.alpha, "steering strength");
    app.add_option("--tau", g.tau, "cosine gate threshold")->capture_default_str();
    app.add_option("--format", g.format, "prompt format p1|p2")->check(CLI::IsMember({"p1", "p2"}));
    app.add_option("--gate", g.gate, "always|structured")->check(CLI::IsMember({"always", "structured"}));
    app.add_option("--out", g.out, "output path or directory");
    app.add_flag("--serial", g.serial, "evaluate on a single worker");

    // gen-corpus
    auto *gen = app.add_subcommand("gen-corpus", "write a synthetic arithmetic corpus as JSONL");
    std::size_t gen_n = 1000;
    int gen_diff = 1;
    gen->add_option("-n,--count", gen_n, "number of problems");
    gen->add_option("--difficulty", gen_diff, "1..3");

    // train
    auto *tr = app.add_subcommand("train", "train the toy model");
    std::string tr_corpus;
    std::size_t tr_n = 20000;
    int tr_diff = 1, tr_steps = 4000, tr_layers = 3, tr_dmodel = 64, tr_heads = 4, tr_ctx = 192;
    float tr_lr = 3e-3f;
    double tr_p2 = 0.3;
    std::size_t tr_batch = 16;
    tr->add_option("--corpus", tr_corpus, "JSONL corpus (default: generate)");
    tr->add_option("-n,--count", tr_n, "generated problems when no corpus is given");
    tr->add_option("--difficulty", tr_diff, "difficulty of generated problems");
    tr->add_option("--steps", tr_steps, "optimizer steps");
    tr->add_option("--lr", tr_lr, "peak learning rate");
    tr->add_option("--batch", tr_batch, "sequences per step");
    tr->add_option("--p2-fraction", tr_p2, "share of sequences rendered as P2");
    tr->add_option("--layers", tr_layers);
    tr->add_option("--d-model", tr_dmodel);
    tr->add_option("--heads", tr_heads);
    tr->add_option("--context", tr_ctx);

    // build-vector
    auto *bv = app.add_subcommand("build-vector", "decode a corpus and build the steering vector");
    std::string bv_corpus;
    std::size_t bv_n = 1000;
    int bv_diff = 1;
    bv->add_option("--corpus", bv_corpus);
    bv->add_option("-n,--count", bv_n);
    bv->add_option("--difficulty", bv_diff);

    // decode
    auto *dec = app.add_subcommand("decode", "decode one question, optionally steered");
    std::string dec_q;
    std::size_t dec_max = 96;
    bool dec_trace = false;
    dec->add_option("question", dec_q, "question text, e.g. 7+5*3")->required();
    dec->add_option("--max-new", dec_max);
    dec->add_flag("--trace", dec_trace, "print per-token cosine and gate");

    // eval
    auto *ev = app.add_subcommand("eval", "compare methods on a corpus and write a report");
    std::string ev_corpus, ev_methods = "cot,sc,iterative,als";
    std::size_t ev_n = 100;
    int ev_diff = 1, ev_k = 5;
    float ev_temp = 0.7f, ev_step = 0.5f;
    ev->add_option("--corpus", ev_corpus);
    ev->add_option("-n,--count", ev_n);
    ev->add_option("--difficulty", ev_diff);
    ev->add_option("--methods", ev_methods, "comma list of cot,sc,iterative,als");
    ev->add_option("-k", ev_k, "SC samples / refinement iterations");
    ev->add_option("--temperature", ev_temp);
    ev->add_option("--step-size", ev_step);

    // sweep
    auto *sw = app.add_subcommand("sweep", "alpha sweep of the steered decoder");
    std::string sw_corpus;
    std::size_t sw_n = 100;
    int sw_diff = 1;
    std::vector<float> sw_alphas = kDefaultAlphas;
    sw->add_option("--corpus", sw_corpus);
    sw->add_option("-n,--count", sw_n);
    sw->add_option("--difficulty", sw_diff);
    sw->add_option("--alphas", sw_alphas)->delimiter(',');

    // pareto
    auto *pa = app.add_subcommand("pareto", "Pareto frontier of a results table");
    std::string pa_in;
    pa->add_option("results", pa_in, "results.csv")->required();

    // report
    auto *rep = app.add_subcommand("report", "print and check a report directory");
    std::string rep_in;
    rep->add_option("dir", rep_in, "report directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const PromptFormat fmt = parse_format(g.format);

        if (*gen) {
            const auto probs = gen_arithmetic(g.seed, gen_n, gen_diff);
            const fs::path out = g.out.empty() ? "corpus.jsonl" : g.out;
            write_jsonl(probs, out);
            std::printf("wrote %zu problems to %s (digest %s)\n", probs.size(), out.c_str(),
                        to_hex(corpus_digest(probs)).c_str());
            return 0;
        }

        if (*tr) {
            const auto probs = load_corpus(tr_corpus, g.seed, tr_n, tr_diff);
            const Split split = split_by_question(probs, 10);
            if (split.train.empty()) throw Error(ErrorKind::EmptyCorpus, "no training problems after split");
            const auto train_set = make_training_set(split.train, tr_p2, g.seed);
            const auto held_set = make_training_set(split.heldout, tr_p2, g.seed + 1);
            ModelConfig cfg;
            cfg.n_layers = tr_layers;
            cfg.d_model = tr_dmodel;
            cfg.n_heads = tr_heads;
            cfg.max_context = tr_ctx;
            cfg.seed = g.seed;
            Model model(cfg);
            TrainOptions opts;
            opts.batch_size = tr_batch;
            opts.seed = g.seed + 1;
            opts.heldout = std::span<const TrainSequence>(held_set).first(std::min<std::size_t>(held_set.size(), 256));
            opts.eval_every = 250;
            opts.on_step = [&](std::size_t step, float loss) {
                if (step % 100 == 0) std::printf("step %5zu  loss %.4f\n", step, loss);
                std::fflush(stdout);
            };
            std::printf("%zu params, %zu train / %zu held-out problems\n", model.param_count(),
                        split.train.size(), split.heldout.size());
            const TrainReport rep = train(model, train_set, tr_steps, tr_lr, opts);
            if (rep.final_heldout_loss) std::printf("held-out loss %.4f\n", *rep.final_heldout_loss);
            save_model(model, g.out.empty() ? g.model : g.out);
            std::printf("saved %s (%.1f s)\n", (g.out.empty() ? g.model : g.out).c_str(), rep.seconds);
            return 0;
        }

        if (*pa) {
            std::vector<ParetoPoint> pts;
            for (const EvalRecord &r : read_results_csv(pa_in)) pts.push_back({r.mean_time_s, r.accuracy_pct, r.method});
            std::printf("method,time_s,acc\n");
            for (const ParetoPoint &p : pareto_frontier(pts)) {
                std::printf("%s,%s,%s\n", p.label.c_str(), format_g6(p.time_s).c_str(),
                            format_g6(p.accuracy_pct).c_str());
            }
            return 0;
        }

        if (*rep) {
            const fs::path dir = rep_in;
            const auto recs = read_results_csv(dir / "results.csv");
            const RunManifest man = read_manifest(dir / "manifest.json");
            std::printf("dataset %s  format %s  model %s\ncorpus %s\n", man.dataset.c_str(), man.format.c_str(),
                        man.model_checksum.substr(0, 16).c_str(), man.corpus_digest.c_str());
            print_records(recs);
            int bad = 0;
            for (const EvalRecord &r : recs) {
                const double t = (r.accuracy_pct + (100.0 - r.normalized_time)) / 2.0;
                if (format_g6(t) != format_g6(r.tradeoff)) {
                    std::fprintf(stderr, "%s: tradeoff %s does not recompute (%s)\n", r.method.c_str(),
                                 format_g6(r.tradeoff).c_str(), format_g6(t).c_str());
                    ++bad;
                }
            }
            return bad == 0 ? 0 : 4;
        }

        const Model model = load_model(g.model);
        const std::size_t ctx = static_cast<std::size_t>(model.config().max_context);

        if (*bv) {
            const auto probs = load_corpus(bv_corpus, g.seed, bv_n, bv_diff);
            const std::size_t budget = std::min(response_budget(probs, fmt), ctx / 2);
            const auto pool = collect_trajectories(model, probs, fmt, budget);
            SteeringVector sv = build_vector(pool, model.config().penultimate_layer());
            sv.notes = "format " + g.format + ", " + std::to_string(probs.size()) + " problems, corpus " +
                       to_hex(corpus_digest(probs));
            const fs::path out = !g.out.empty() ? g.out : (!g.vector.empty() ? g.vector : "steer.alsv");
            save_vector(sv, out);
            std::printf("good %zu  bad %zu  |v| %.6g  -> %s\n", sv.n_good, sv.n_bad, l2_norm(sv.v.span()),
                        out.c_str());
            return 0;
        }

        if (*dec) {
            Problem p{"cli", dec_q, "0", ""};
            const auto prompt = render_prompt(p, fmt);
            DecodeTrace t;
            if (!g.vector.empty()) {
                const SteeringVector sv = load_vector(g.vector);
                t = steered_decode(model, prompt, sv, steer_config(g), dec_max, fmt);
            } else {
                t = decode_greedy(model, prompt, dec_max);
            }
            std::printf("%s\n", t.text().c_str());
            if (dec_trace) {
                for (std::size_t i = 0; i < t.tokens.size(); ++i) {
                    const auto c = Tokenizer::to_char(t.tokens[i]);
                    const auto &s = t.per_token[i];
                    std::printf("%3zu %-4s cos=%-9s fired=%d lp=%.4f\n", i,
                                c ? (*c == '\n' ? "\\n" : std::string(1, *c)).c_str() : "EOS",
                                s.cosine ? format_g6(*s.cosine).c_str() : "-", s.nudged ? 1 : 0, s.logprob);
                }
                std::printf("intervention rate %s, %llu forward passes\n", format_g6(t.intervention_rate()).c_str(),
                            static_cast<unsigned long long>(t.ops.forward_passes));
            }
            return 0;
        }

        if (*ev || *sw) {
            const bool sweeping = sw->parsed();
            const auto probs = sweeping ? load_corpus(sw_corpus, g.seed, sw_n, sw_diff)
                                        : load_corpus(ev_corpus, g.seed, ev_n, ev_diff);
            const std::string dataset = (sweeping ? sw_corpus : ev_corpus).empty()
                                            ? "synthetic-d" + std::to_string(sweeping ? sw_diff : ev_diff)
                                            : fs::path(sweeping ? sw_corpus : ev_corpus).stem().string();
            const std::size_t budget = std::min(response_budget(probs, fmt), ctx / 2);
            EvalOptions opts{dataset, worker_count(g)};
            RunManifest man = base_manifest(g, model, probs, dataset);

            std::optional<SteeringVector> sv;
            if (!g.vector.empty()) {
                sv = load_vector(g.vector);
                man.vector_digest = to_hex(sv->corpus_digest);
            }
            std::vector<EvalRun> runs;
            if (sweeping) {
                if (!sv) throw Error(ErrorKind::InvalidConfig, "sweep needs --vector");
                runs = sweep_alpha(sw_alphas, steer_config(g), probs, model, *sv, fmt, budget, opts);
                man.tau = g.tau;
            } else {
                std::stringstream ss(ev_methods);
                for (std::string name; std::getline(ss, name, ',');) {
                    MethodSpec m;
                    m.name = name;
                    m.max_new = budget;
                    m.baseline.k = ev_k;
                    m.baseline.temperature = ev_temp;
                    m.baseline.step_size = ev_step;
                    m.baseline.rng_seed = g.seed;
                    if (name == "cot") {
                        m.kind = MethodKind::CoT;
                    } else if (name == "sc") {
                        m.kind = MethodKind::SelfConsistency;
                    } else if (name == "iterative") {
                        m.kind = MethodKind::IterativeLatent;
                    } else if (name == "als") {
                        if (!sv) throw Error(ErrorKind::InvalidConfig, "method als needs --vector");
                        m.kind = MethodKind::Steered;
                        m.steer = steer_config(g);
                        m.vector = &*sv;
                        man.alpha = g.alpha;
                        man.tau = g.tau;
                    } else {
                        throw Error(ErrorKind::InvalidConfig, "unknown method '" + name + "'");
                    }
                    runs.push_back(run_eval(m, probs, model, fmt, opts));
                }
                normalize_runs(runs);
            }
            for (const EvalRun &r : runs) man.methods.push_back(r.record.method);
            man.finished_at = utc_timestamp();
            std::vector<EvalRecord> recs;
            for (const EvalRun &r : runs) recs.push_back(r.record);
            print_records(recs);
            const fs::path out = g.out.empty() ? fs::path(sweeping ? "sweep" : "report") : fs::path(g.out);
            emit_report(runs, man, out);
            std::printf("report written to %s\n", out.c_str());
            return 0;
        }
    } catch (const Error &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e.kind());
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
