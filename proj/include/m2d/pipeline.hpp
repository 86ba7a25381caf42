#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "m2d/baselines.hpp"
#include "m2d/config.hpp"
#include "m2d/data.hpp"
#include "m2d/detector.hpp"
#include "m2d/eval.hpp"
#include "m2d/nets.hpp"

namespace m2d::pipeline {

// Everything a run needs on the data side: the in-distribution splits and
// the OOD evaluation set, consistently normalized.
struct DataBundle {
    data::Splits in;
    data::Dataset ood;
    std::string pair_name;
};

DataBundle prepare_data(const config::RunConfig& rc);

struct TrainResult {
    nets::Network classifier;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::vector<double> loss_trace;  // mean loss per epoch
};

// Plain SGD with softmax cross-entropy on shuffled mini-batches.
TrainResult train_classifier(const config::RunConfig& rc, const DataBundle& data);

double accuracy(const nets::Network& classifier, const data::Dataset& d);

// Builds the detector bundle per the config; steps/mode may be overridden
// for grid cells.
detector::BundleBuildResult convert_model(const config::RunConfig& rc,
                                          const nets::Network& classifier, const DataBundle& data,
                                          detector::EncoderMode mode,
                                          std::optional<std::size_t> steps_override = std::nullopt);

struct MethodOutcome {
    std::vector<eval::EvalReport> reports;
    std::vector<std::string> errors;
};

// One evaluation cell per configured method (and per steps-grid entry for
// the detector variants), all scored on test-vs-OOD.
MethodOutcome run_methods(const config::RunConfig& rc, const nets::Network& classifier,
                          const DataBundle& data);

// Scores samples with the Fig. 2 deployment contract: the classifier
// prediction and the detector confidence run as independent branches.
struct SampleVerdict {
    double score = 0.0;
    bool in_distribution = false;
    int predicted_class = -1;
};

std::vector<SampleVerdict> score_samples(const detector::DetectorBundle& bundle,
                                         const ad::Tensor& rows, double threshold);

}  // namespace m2d::pipeline
