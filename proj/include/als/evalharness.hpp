#pragma once

// Running methods over a corpus, accuracy / time accounting, the
// accuracy-vs-time trade-off score, alpha sweeps, Pareto frontiers and
// report files.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "als/baselines.hpp"
#include "als/steering.hpp"
#include "als/tasks.hpp"
#include "als/tinylm.hpp"

namespace als {

struct EvalRecord {
    std::string method;
    std::string dataset;
    PromptFormat format = PromptFormat::P1;
    double accuracy_pct = 0.0;
    double mean_time_s = 0.0;
    double normalized_time = 100.0;
    double tradeoff = 0.0;
    std::size_t n_problems = 0;
    std::optional<double> intervention_rate;
};

struct ProblemLog {
    std::string id;
    std::string output;
    Label label = Label::Incorrect;
    std::optional<std::string> extracted;
    double time_s = 0.0;
    std::size_t emitted = 0;
    std::size_t fired = 0;
    CostLedger ledger;
    std::string error; // non-empty when the method threw
};

struct EvalRun {
    EvalRecord record;
    std::vector<ProblemLog> log;
    CostLedger total;
};

enum class MethodKind { CoT, SelfConsistency, IterativeLatent, Steered };

struct MethodSpec {
    std::string name;
    MethodKind kind = MethodKind::CoT;
    BaselineConfig baseline;
    SteerConfig steer;                  // Steered only
    const SteeringVector *vector = nullptr; // Steered only
    std::size_t max_new = 96;
};

struct EvalOptions {
    std::string dataset = "synthetic";
    unsigned workers = 1; // 1 = serial
};

// Accuracy and normalized time are carried at 3 decimals so that the
// trade-off printed at 6 significant digits recomputes exactly.
double quantize3(double x);

// (acc + 100 - 100*t/slowest) / 2. Throws InvalidTime unless 0 < t <= slowest.
double tradeoff_score(double accuracy_pct, double time_s, double slowest_s);

// 100 * correct / n, quantized.
double accuracy_from_log(std::span<const ProblemLog> log);

EvalRun run_eval(const MethodSpec &method, std::span<const Problem> corpus, const Model &model,
                 PromptFormat fmt, const EvalOptions &opts = {});

// normalized_time = 100 * t / max t in the group; tradeoff recomputed.
std::vector<EvalRecord> normalize_group(std::vector<EvalRecord> group);
void normalize_runs(std::vector<EvalRun> &runs);

inline const std::vector<float> kDefaultAlphas = {0.0f, 0.1f, 0.3f, 0.6f};

std::string alpha_method_name(float alpha);

// One steered run per alpha, normalized within the sweep.
std::vector<EvalRun> sweep_alpha(std::span<const float> alphas, const SteerConfig &base,
                                 std::span<const Problem> corpus, const Model &model,
                                 const SteeringVector &sv, PromptFormat fmt, std::size_t max_new,
                                 const EvalOptions &opts = {});

struct ParetoPoint {
    double time_s = 0.0;
    double accuracy_pct = 0.0;
    std::string label;

    bool operator==(const ParetoPoint &) const = default;
};

// Points not strictly dominated (another with <= time and >= accuracy, one of
// them strict), sorted by time then input order. Exact duplicates are kept.
std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint> points);

struct RunManifest {
    std::vector<std::pair<std::string, std::uint64_t>> seeds;
    std::optional<double> alpha;
    std::optional<double> tau;
    std::string gate;
    std::string format;
    std::string dataset;
    std::vector<std::string> methods;
    std::string model_checksum;
    std::string vector_digest;
    std::string corpus_digest;
    std::string environment;
    std::string started_at;
    std::string finished_at;
};

std::string utc_timestamp();

// results.csv, problems.csv, pareto.csv, manifest.json under out_dir.
void emit_report(std::span<const EvalRun> runs, const RunManifest &manifest,
                 const std::filesystem::path &out_dir);

std::vector<EvalRecord> read_results_csv(const std::filesystem::path &path);
RunManifest read_manifest(const std::filesystem::path &path);

// %.6g, the precision used for every float in a report.
std::string format_g6(double x);

} // namespace als
