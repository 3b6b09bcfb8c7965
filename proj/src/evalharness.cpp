#include "als/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>
#include <limits>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "als/error.hpp"

namespace als {

namespace {

using Clock = std::chrono::steady_clock;

MethodOutput run_one(const MethodSpec &m, const Problem &p, const Model &model, PromptFormat fmt) {
    switch (m.kind) {
    case MethodKind::CoT:
        return run_cot(model, p, fmt, m.max_new);
    case MethodKind::SelfConsistency: {
        BaselineConfig c = m.baseline;
        c.max_new = m.max_new;
        return run_self_consistency(model, p, fmt, c);
    }
    case MethodKind::IterativeLatent: {
        BaselineConfig c = m.baseline;
        c.max_new = m.max_new;
        return run_iterative_latent(model, p, fmt, c);
    }
    case MethodKind::Steered: {
        const auto t0 = Clock::now();
        DecodeTrace t = steered_decode(model, render_prompt(p, fmt), *m.vector, m.steer, m.max_new, fmt);
        MethodOutput out;
        out.text = t.text();
        out.fired = t.fired_count();
        out.tokens = std::move(t.tokens);
        out.ledger += t.ops;
        out.ledger.wall_ns = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count());
        return out;
    }
    }
    throw Error(ErrorKind::InvalidConfig, "unknown method kind");
}

ProblemLog eval_problem(const MethodSpec &m, const Problem &p, const Model &model, PromptFormat fmt) {
    ProblemLog log;
    log.id = p.id;
    const auto t0 = Clock::now();
    try {
        MethodOutput out = run_one(m, p, model, fmt);
        log.time_s = std::chrono::duration<double>(Clock::now() - t0).count();
        const VerifyResult v = verify(out.text, p, fmt);
        log.label = v.label;
        log.extracted = v.extracted;
        log.output = std::move(out.text);
        log.emitted = out.tokens.size();
        log.fired = out.fired;
        log.ledger = out.ledger;
    } catch (const std::exception &e) {
        log.time_s = std::chrono::duration<double>(Clock::now() - t0).count();
        log.label = Label::Incorrect;
        log.error = e.what();
    }
    return log;
}

} // namespace

double quantize3(double x) { return std::round(x * 1000.0) / 1000.0; }

double tradeoff_score(double accuracy_pct, double time_s, double slowest_s) {
    if (!(time_s > 0.0) || !(slowest_s > 0.0) || time_s > slowest_s) {
        throw Error(ErrorKind::InvalidTime, "need 0 < time <= slowest (time " + format_g6(time_s) +
                                                ", slowest " + format_g6(slowest_s) + ")");
    }
    return (accuracy_pct + (100.0 - 100.0 * time_s / slowest_s)) / 2.0;
}

double accuracy_from_log(std::span<const ProblemLog> log) {
    if (log.empty()) return 0.0;
    const auto correct = std::count_if(log.begin(), log.end(),
                                       [](const ProblemLog &l) { return l.label == Label::Correct; });
    return quantize3(100.0 * static_cast<double>(correct) / static_cast<double>(log.size()));
}

EvalRun run_eval(const MethodSpec &method, std::span<const Problem> corpus, const Model &model,
                 PromptFormat fmt, const EvalOptions &opts) {
    if (corpus.empty()) throw Error(ErrorKind::EmptyCorpus, "evaluation corpus is empty");
    if (method.kind == MethodKind::Steered && method.vector == nullptr) {
        throw Error(ErrorKind::InvalidConfig, "steered method needs a steering vector");
    }

    EvalRun run;
    run.log.resize(corpus.size());
    const unsigned workers = std::max(1u, std::min<unsigned>(opts.workers, static_cast<unsigned>(corpus.size())));
    if (workers == 1) {
        for (std::size_t i = 0; i < corpus.size(); ++i) run.log[i] = eval_problem(method, corpus[i], model, fmt);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i; (i = next.fetch_add(1)) < corpus.size();) {
                    run.log[i] = eval_problem(method, corpus[i], model, fmt);
                }
            });
        }
        for (auto &t : pool) t.join();
    }

    double time_sum = 0.0;
    std::size_t emitted = 0, fired = 0;
    for (const ProblemLog &l : run.log) {
        time_sum += l.time_s;
        emitted += l.emitted;
        fired += l.fired;
        run.total += l.ledger;
    }
    EvalRecord &r = run.record;
    r.method = method.name;
    r.dataset = opts.dataset;
    r.format = fmt;
    r.n_problems = corpus.size();
    r.accuracy_pct = accuracy_from_log(run.log);
    r.mean_time_s = time_sum / static_cast<double>(corpus.size());
    if (method.kind == MethodKind::Steered) {
        r.intervention_rate = emitted == 0 ? 0.0 : static_cast<double>(fired) / static_cast<double>(emitted);
    }
    r.normalized_time = 100.0;
    r.tradeoff = (r.accuracy_pct + (100.0 - r.normalized_time)) / 2.0;
    return run;
}

std::vector<EvalRecord> normalize_group(std::vector<EvalRecord> group) {
    if (group.empty()) return group;
    double slowest = 0.0;
    for (const EvalRecord &r : group) slowest = std::max(slowest, r.mean_time_s);
    for (EvalRecord &r : group) {
        if (!(slowest > 0.0) || !(r.mean_time_s > 0.0)) {
            throw Error(ErrorKind::InvalidTime, "method '" + r.method + "' has non-positive mean time");
        }
        // Floor at the quantum so a very fast method stays inside (0, 100].
        r.normalized_time = r.mean_time_s == slowest
                                ? 100.0
                                : std::max(0.001, quantize3(100.0 * r.mean_time_s / slowest));
        r.tradeoff = (r.accuracy_pct + (100.0 - r.normalized_time)) / 2.0;
    }
    return group;
}

void normalize_runs(std::vector<EvalRun> &runs) {
    std::vector<EvalRecord> recs;
    for (const EvalRun &r : runs) recs.push_back(r.record);
    recs = normalize_group(std::move(recs));
    for (std::size_t i = 0; i < runs.size(); ++i) runs[i].record = recs[i];
}

std::string alpha_method_name(float alpha) { return "als-a" + format_g6(alpha); }

std::vector<EvalRun> sweep_alpha(std::span<const float> alphas, const SteerConfig &base,
                                 std::span<const Problem> corpus, const Model &model,
                                 const SteeringVector &sv, PromptFormat fmt, std::size_t max_new,
                                 const EvalOptions &opts) {
    if (alphas.empty()) throw Error(ErrorKind::InvalidConfig, "alpha sweep needs at least one value");
    std::vector<EvalRun> runs;
    for (float a : alphas) {
        MethodSpec m;
        m.name = alpha_method_name(a);
        m.kind = MethodKind::Steered;
        m.steer = base;
        m.steer.alpha = a;
        m.steer.validate();
        m.vector = &sv;
        m.max_new = max_new;
        runs.push_back(run_eval(m, corpus, model, fmt, opts));
    }
    normalize_runs(runs);
    return runs;
}

std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint> points) {
    std::vector<std::size_t> order(points.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return points[a].time_s < points[b].time_s; });

    std::vector<ParetoPoint> front;
    double best_before = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        double group_best = -std::numeric_limits<double>::infinity();
        while (j < order.size() && points[order[j]].time_s == points[order[i]].time_s) {
            group_best = std::max(group_best, points[order[j]].accuracy_pct);
            ++j;
        }
        // Anything strictly faster with at least the same accuracy dominates
        // this whole group; within the group only the most accurate survive.
        for (std::size_t g = i; g < j; ++g) {
            const ParetoPoint &p = points[order[g]];
            if (p.accuracy_pct == group_best && p.accuracy_pct > best_before) front.push_back(p);
        }
        best_before = std::max(best_before, group_best);
        i = j;
    }
    return front;
}

std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string format_g6(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", x);
    return buf;
}

namespace {

std::string csv_field(const std::string &s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

// Splits one CSV record; quoted fields may span lines, so reads from the stream.
bool read_csv_record(std::istream &in, std::vector<std::string> &fields) {
    fields.clear();
    std::string line;
    if (!std::getline(in, line)) return false;
    std::string cur;
    bool quoted = false;
    for (;;) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            const char c = line[i];
            if (quoted) {
                if (c == '"') {
                    if (i + 1 < line.size() && line[i + 1] == '"') {
                        cur += '"';
                        ++i;
                    } else {
                        quoted = false;
                    }
                } else {
                    cur += c;
                }
            } else if (c == '"') {
                quoted = true;
            } else if (c == ',') {
                fields.push_back(std::move(cur));
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!quoted) break;
        cur += '\n';
        if (!std::getline(in, line)) throw Error(ErrorKind::CorruptFile, "unterminated quoted CSV field");
    }
    fields.push_back(std::move(cur));
    return true;
}

std::ofstream open_out(const std::filesystem::path &p) {
    std::ofstream out(p);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + p.string());
    return out;
}

void check_written(const std::ofstream &out, const std::filesystem::path &p) {
    if (!out) throw Error(ErrorKind::IoFailure, "write failed on " + p.string());
}

double parse_double(const std::string &s, const std::string &what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception &) {
        throw Error(ErrorKind::CorruptFile, "bad " + what + " value '" + s + "'");
    }
}

constexpr const char *kResultsHeader =
    "method,dataset,format,acc,time_s,norm_time,tradeoff,n,intervention_rate";

} // namespace

void emit_report(std::span<const EvalRun> runs, const RunManifest &manifest,
                 const std::filesystem::path &out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());

    const auto results = out_dir / "results.csv";
    {
        auto out = open_out(results);
        out << kResultsHeader << '\n';
        for (const EvalRun &run : runs) {
            const EvalRecord &r = run.record;
            out << csv_field(r.method) << ',' << csv_field(r.dataset) << ',' << to_string(r.format) << ','
                << format_g6(r.accuracy_pct) << ',' << format_g6(r.mean_time_s) << ','
                << format_g6(r.normalized_time) << ',' << format_g6(r.tradeoff) << ',' << r.n_problems
                << ',' << (r.intervention_rate ? format_g6(*r.intervention_rate) : std::string()) << '\n';
        }
        check_written(out, results);
    }

    const auto problems = out_dir / "problems.csv";
    {
        auto out = open_out(problems);
        out << "method,id,label,extracted,time_s,emitted,fired,forward_passes,cosine_ops,vector_adds,"
               "error,output\n";
        for (const EvalRun &run : runs) {
            for (const ProblemLog &l : run.log) {
                out << csv_field(run.record.method) << ',' << csv_field(l.id) << ',' << to_string(l.label)
                    << ',' << csv_field(l.extracted.value_or("")) << ',' << format_g6(l.time_s) << ','
                    << l.emitted << ',' << l.fired << ',' << l.ledger.forward_passes << ','
                    << l.ledger.cosine_ops << ',' << l.ledger.vector_adds << ',' << csv_field(l.error)
                    << ',' << csv_field(l.output) << '\n';
            }
        }
        check_written(out, problems);
    }

    const auto pareto = out_dir / "pareto.csv";
    {
        std::vector<ParetoPoint> pts;
        for (const EvalRun &run : runs) {
            pts.push_back({run.record.mean_time_s, run.record.accuracy_pct, run.record.method});
        }
        auto out = open_out(pareto);
        out << "method,time_s,acc,on_frontier\n";
        const auto front = pareto_frontier(pts);
        for (const ParetoPoint &p : pts) {
            const bool on = std::find(front.begin(), front.end(), p) != front.end();
            out << csv_field(p.label) << ',' << format_g6(p.time_s) << ',' << format_g6(p.accuracy_pct)
                << ',' << (on ? 1 : 0) << '\n';
        }
        check_written(out, pareto);
    }

    nlohmann::ordered_json j;
    auto &seeds = j["seeds"] = nlohmann::ordered_json::object();
    for (const auto &[k, v] : manifest.seeds) seeds[k] = v;
    j["alpha"] = manifest.alpha ? nlohmann::ordered_json(*manifest.alpha) : nlohmann::ordered_json();
    j["tau"] = manifest.tau ? nlohmann::ordered_json(*manifest.tau) : nlohmann::ordered_json();
    j["gate"] = manifest.gate;
    j["format"] = manifest.format;
    j["dataset"] = manifest.dataset;
    j["methods"] = manifest.methods;
    j["model_checksum"] = manifest.model_checksum;
    j["vector_digest"] = manifest.vector_digest;
    j["corpus_digest"] = manifest.corpus_digest;
    j["environment"] = manifest.environment;
    j["started_at"] = manifest.started_at;
    j["finished_at"] = manifest.finished_at;
    const auto mpath = out_dir / "manifest.json";
    auto out = open_out(mpath);
    out << j.dump(2) << '\n';
    check_written(out, mpath);
}

std::vector<EvalRecord> read_results_csv(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
    std::vector<std::string> f;
    if (!read_csv_record(in, f)) throw Error(ErrorKind::CorruptFile, path.string() + ": empty");
    std::string header;
    for (std::size_t i = 0; i < f.size(); ++i) header += (i ? "," : "") + f[i];
    if (header != kResultsHeader) throw Error(ErrorKind::CorruptFile, path.string() + ": unexpected header");

    std::vector<EvalRecord> out;
    while (read_csv_record(in, f)) {
        if (f.size() == 1 && f[0].empty()) continue;
        if (f.size() != 9) throw Error(ErrorKind::CorruptFile, path.string() + ": row with wrong field count");
        EvalRecord r;
        r.method = f[0];
        r.dataset = f[1];
        try {
            r.format = parse_format(f[2]);
        } catch (const Error &) {
            throw Error(ErrorKind::CorruptFile, path.string() + ": bad format '" + f[2] + "'");
        }
        r.accuracy_pct = parse_double(f[3], "acc");
        r.mean_time_s = parse_double(f[4], "time_s");
        r.normalized_time = parse_double(f[5], "norm_time");
        r.tradeoff = parse_double(f[6], "tradeoff");
        r.n_problems = static_cast<std::size_t>(parse_double(f[7], "n"));
        if (!f[8].empty()) r.intervention_rate = parse_double(f[8], "intervention_rate");
        out.push_back(std::move(r));
    }
    return out;
}

RunManifest read_manifest(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorKind::CorruptFile, path.string() + ": not JSON");
    RunManifest m;
    try {
        for (const auto &[k, v] : j.at("seeds").items()) m.seeds.emplace_back(k, v.get<std::uint64_t>());
        if (!j.at("alpha").is_null()) m.alpha = j["alpha"].get<double>();
        if (!j.at("tau").is_null()) m.tau = j["tau"].get<double>();
        m.gate = j.at("gate").get<std::string>();
        m.format = j.at("format").get<std::string>();
        m.dataset = j.at("dataset").get<std::string>();
        m.methods = j.at("methods").get<std::vector<std::string>>();
        m.model_checksum = j.at("model_checksum").get<std::string>();
        m.vector_digest = j.at("vector_digest").get<std::string>();
        m.corpus_digest = j.at("corpus_digest").get<std::string>();
        m.environment = j.at("environment").get<std::string>();
        m.started_at = j.at("started_at").get<std::string>();
        m.finished_at = j.at("finished_at").get<std::string>();
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorKind::CorruptFile, path.string() + ": " + e.what());
    }
    return m;
}

} // namespace als
