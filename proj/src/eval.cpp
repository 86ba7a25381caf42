#include "m2d/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace m2d::eval {

namespace {

void validate_scores(const ScoredSet& s, const char* who) {
    if (s.in_scores.empty() || s.out_scores.empty())
        throw std::invalid_argument(std::string(who) + ": both score lists must be nonempty");
    for (double v : s.in_scores)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite in-score");
    for (double v : s.out_scores)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite out-score");
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

double auroc(const ScoredSet& s) {
    validate_scores(s, "auroc");
    std::vector<double> ins = s.in_scores;
    std::vector<double> outs = s.out_scores;
    std::sort(ins.begin(), ins.end());
    std::sort(outs.begin(), outs.end());

    // numerator = 2*wins + ties, counted exactly
    std::uint64_t numerator = 0;
    std::size_t lo = 0, hi = 0;  // outs strictly below / at most equal to the current in
    for (double v : ins) {
        while (lo < outs.size() && outs[lo] < v) ++lo;
        if (hi < lo) hi = lo;
        while (hi < outs.size() && outs[hi] <= v) ++hi;
        numerator += 2 * static_cast<std::uint64_t>(lo) + static_cast<std::uint64_t>(hi - lo);
    }
    return static_cast<double>(numerator) /
           (2.0 * static_cast<double>(ins.size()) * static_cast<double>(outs.size()));
}

DetAcc detection_accuracy(const ScoredSet& s) {
    validate_scores(s, "detection_accuracy");
    std::vector<double> ins = s.in_scores;
    std::vector<double> outs = s.out_scores;
    std::sort(ins.begin(), ins.end());
    std::sort(outs.begin(), outs.end());

    std::vector<double> pooled;
    pooled.reserve(ins.size() + outs.size());
    pooled.insert(pooled.end(), ins.begin(), ins.end());
    pooled.insert(pooled.end(), outs.begin(), outs.end());
    std::sort(pooled.begin(), pooled.end());
    pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());

    std::vector<double> candidates;
    candidates.push_back(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i + 1 < pooled.size(); ++i)
        candidates.push_back((pooled[i] + pooled[i + 1]) / 2.0);
    candidates.push_back(std::numeric_limits<double>::infinity());

    double n_in = static_cast<double>(ins.size());
    double n_out = static_cast<double>(outs.size());
    DetAcc best{-1.0, 0.0};
    for (double t : candidates) {
        auto above = ins.end() - std::upper_bound(ins.begin(), ins.end(), t);
        auto leq = std::upper_bound(outs.begin(), outs.end(), t) - outs.begin();
        double acc = 0.5 * (static_cast<double>(above) / n_in + static_cast<double>(leq) / n_out);
        if (acc > best.accuracy) best = {acc, t};
    }
    return best;
}

std::vector<double> score_rows(const Scorer& scorer, const ad::Tensor& rows) {
    if (rows.shape.empty() || rows.shape[0] == 0)
        throw std::invalid_argument("score_rows: empty data");
    std::size_t n = rows.shape[0];
    std::size_t d = rows.numel() / n;
    std::vector<double> scores;
    scores.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ad::Tensor x({1, d}, std::vector<double>(rows.data.begin() + static_cast<long>(i * d),
                                                 rows.data.begin() + static_cast<long>((i + 1) * d)));
        scores.push_back(scorer(x));
    }
    return scores;
}

EvalReport evaluate(const Scorer& scorer, const EvalContext& ctx, const ad::Tensor& in_data,
                    const ad::Tensor& out_data) {
    auto t0 = std::chrono::steady_clock::now();
    ScoredSet s{score_rows(scorer, in_data), score_rows(scorer, out_data)};
    EvalReport r;
    r.auroc = auroc(s);
    DetAcc da = detection_accuracy(s);
    r.detection_accuracy = da.accuracy;
    r.best_threshold = da.threshold;
    r.n_in = s.in_scores.size();
    r.n_out = s.out_scores.size();
    r.dataset_pair = ctx.dataset_pair;
    r.method = ctx.method;
    r.steps = ctx.steps;
    r.taps = ctx.taps;
    r.seed = ctx.seed;
    auto t1 = std::chrono::steady_clock::now();
    r.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
    return r;
}

GridResult ablation_grid(const std::vector<GridCell>& cells, unsigned threads) {
    struct Slot {
        bool ok = false;
        EvalReport report;
        std::string error;
    };
    std::vector<Slot> slots(cells.size());

    auto run_cell = [&](std::size_t i) {
        try {
            slots[i].report = cells[i].run();
            slots[i].ok = true;
        } catch (const std::exception& e) {
            slots[i].error = cells[i].id + ": " + e.what();
        }
    };

    if (threads <= 1 || cells.size() <= 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= cells.size()) return;
                run_cell(i);
            }
        };
        std::vector<std::thread> pool;
        unsigned n = std::min<unsigned>(threads, static_cast<unsigned>(cells.size()));
        pool.reserve(n);
        for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    GridResult out;
    for (auto& s : slots) {
        if (s.ok)
            out.reports.push_back(std::move(s.report));
        else
            out.cell_errors.push_back(std::move(s.error));
    }
    return out;
}

std::string reports_csv(const std::vector<EvalReport>& reports) {
    std::string csv = "dataset_pair,method,steps,taps,auroc,det_acc,threshold,seed,wall_ms\n";
    for (const auto& r : reports) {
        csv += r.dataset_pair + ',' + r.method + ',';
        csv += r.steps < 0 ? std::string("-") : std::to_string(r.steps);
        csv += ',' + r.taps + ',' + fmt_double(r.auroc) + ',' + fmt_double(r.detection_accuracy) +
               ',' + fmt_double(r.best_threshold) + ',' + std::to_string(r.seed) + ',' +
               std::to_string(r.wall_ms) + '\n';
    }
    return csv;
}

std::string reports_json(const std::vector<EvalReport>& reports) {
    nlohmann::ordered_json j;
    j["metadata"] = {
        {"detection_accuracy_definition", kDetAccDefinition},
        {"auroc_definition", "P(in > out), ties at half credit"},
        {"columns", {"dataset_pair", "method", "steps", "taps", "auroc", "det_acc", "threshold",
                     "seed", "wall_ms"}},
    };
    j["reports"] = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json row;
        row["dataset_pair"] = r.dataset_pair;
        row["method"] = r.method;
        if (r.steps < 0)
            row["steps"] = nullptr;
        else
            row["steps"] = r.steps;
        row["taps"] = r.taps;
        row["auroc"] = r.auroc;
        row["det_acc"] = r.detection_accuracy;
        row["threshold"] = r.best_threshold;
        row["seed"] = r.seed;
        row["wall_ms"] = r.wall_ms;
        j["reports"].push_back(std::move(row));
    }
    return j.dump(2) + "\n";
}

std::string pivot_csv(const std::vector<EvalReport>& reports) {
    auto config_label = [](const EvalReport& r) {
        return r.steps < 0 ? r.method : r.method + " " + std::to_string(r.steps) + " step";
    };
    std::vector<std::string> rows_order, cols_order;
    for (const auto& r : reports) {
        if (std::find(rows_order.begin(), rows_order.end(), r.dataset_pair) == rows_order.end())
            rows_order.push_back(r.dataset_pair);
        std::string c = config_label(r);
        if (std::find(cols_order.begin(), cols_order.end(), c) == cols_order.end())
            cols_order.push_back(c);
    }
    std::string csv = "dataset_pair";
    for (const auto& c : cols_order) csv += ',' + c;
    csv += '\n';
    for (const auto& row : rows_order) {
        csv += row;
        for (const auto& col : cols_order) {
            csv += ',';
            for (const auto& r : reports) {
                if (r.dataset_pair == row && config_label(r) == col) {
                    char buf[48];
                    std::snprintf(buf, sizeof(buf), "%.2f/%.2f", 100.0 * r.auroc,
                                  100.0 * r.detection_accuracy);
                    csv += buf;
                    break;
                }
            }
        }
        csv += '\n';
    }
    return csv;
}

}  // namespace m2d::eval
