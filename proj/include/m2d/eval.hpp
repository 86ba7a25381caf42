#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "m2d/tensor.hpp"

namespace m2d::eval {

struct ScoredSet {
    std::vector<double> in_scores;
    std::vector<double> out_scores;
};

// Probability that a random in-distribution score exceeds a random OOD score,
// ties at half credit. Rank-based, O(n log n), exact integer numerator.
double auroc(const ScoredSet& s);

struct DetAcc {
    double accuracy;   // max over thresholds of (TPR + TNR) / 2
    double threshold;  // smallest achieving threshold
};

// Candidate thresholds are the midpoints between adjacent distinct pooled
// scores plus +-infinity, so the result is always >= 0.5.
DetAcc detection_accuracy(const ScoredSet& s);

inline constexpr const char* kDetAccDefinition =
    "max over thresholds of (TPR + TNR) / 2, TPR = frac(in > t), TNR = frac(out <= t)";

struct EvalReport {
    double auroc = 0.0;
    double detection_accuracy = 0.0;
    double best_threshold = 0.0;
    std::size_t n_in = 0;
    std::size_t n_out = 0;
    // config fingerprint
    std::string dataset_pair;
    std::string method;
    long steps = -1;   // -1 when the method has no step count
    std::string taps;  // '+'-joined tap names, or "-"
    std::uint64_t seed = 0;
    std::int64_t wall_ms = 0;
};

using Scorer = std::function<double(const ad::Tensor&)>;

struct EvalContext {
    std::string dataset_pair;
    std::string method;
    long steps = -1;
    std::string taps = "-";
    std::uint64_t seed = 0;
};

// Scores every row of both sets and computes both metrics. Rows are fed to
// the scorer as single-sample [1,d] tensors in order.
EvalReport evaluate(const Scorer& scorer, const EvalContext& ctx, const ad::Tensor& in_data,
                    const ad::Tensor& out_data);

std::vector<double> score_rows(const Scorer& scorer, const ad::Tensor& rows);

struct GridCell {
    std::string id;  // used in error records
    std::function<EvalReport()> run;
};

struct GridResult {
    std::vector<EvalReport> reports;       // successful cells, grid order
    std::vector<std::string> cell_errors;  // "<id>: <what>" per failed cell
};

// Runs every cell; failures are recorded and the grid continues. Cells are
// independent; with threads > 1 they are fanned out to a worker pool and the
// results merged back in grid order.
GridResult ablation_grid(const std::vector<GridCell>& cells, unsigned threads = 1);

// Long-form CSV, one row per report. Column order is fixed:
// dataset_pair,method,steps,taps,auroc,det_acc,threshold,seed,wall_ms
std::string reports_csv(const std::vector<EvalReport>& reports);
// JSON mirror of the CSV with a metadata block naming the metric definitions.
std::string reports_json(const std::vector<EvalReport>& reports);
// Wide table: one row per dataset pair, one column per method/steps config,
// cells "AUROC/DetAcc" in percent.
std::string pivot_csv(const std::vector<EvalReport>& reports);

}  // namespace m2d::eval
