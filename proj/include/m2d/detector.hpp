#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "m2d/autodiff.hpp"
#include "m2d/nets.hpp"

namespace m2d::detector {

enum class ReconLoss { mse, bce };

struct RetrainConfig {
    std::size_t steps = 10;        // reconstruction gradient steps
    double learning_rate = 0.01;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    ReconLoss loss = ReconLoss::mse;
};

// Class-conditional Gaussians with a tied covariance: per-class means, one
// shared covariance estimated over within-class deviations, and the lower
// Cholesky factor of (covariance + ridge*I) used for all solves.
struct GaussianHead {
    std::size_t dim = 0;
    std::vector<int> class_ids;                // ascending
    std::vector<std::vector<double>> means;    // parallel to class_ids
    std::vector<double> covariance;            // dim*dim, row-major, symmetric
    std::vector<double> chol;                  // dim*dim lower triangular
    double ridge = 0.0;
    std::vector<std::size_t> class_counts;     // parallel to class_ids
    std::size_t total = 0;

    // Validates, adds the ridge, and factorizes. Throws if the ridged
    // covariance is not positive definite.
    static GaussianHead from_moments(std::vector<int> class_ids,
                                     std::vector<std::vector<double>> means,
                                     std::vector<double> covariance, double ridge,
                                     std::vector<std::size_t> class_counts);

    // max over classes of -(f-mu)' (cov+ridge I)^-1 (f-mu); always <= 0.
    double confidence(const std::vector<double>& f) const;
    int closest_class(const std::vector<double>& f) const;
    // d(confidence)/df at f, through the arg-max class.
    std::vector<double> confidence_gradient(const std::vector<double>& f) const;
};

// Empirical fit: mu_c = class mean, Sigma = (1/N) sum of within-class outer
// products. If expected_classes is set, every class in [0, expected) must
// appear in the labels.
GaussianHead fit_head(const std::vector<std::vector<double>>& features,
                      const std::vector<int>& labels, double ridge,
                      std::optional<int> expected_classes = std::nullopt);

// lambda = 1e-6 * trace(Sigma) / d, the default when no ridge is configured.
double default_ridge(const std::vector<double>& covariance, std::size_t dim);

struct DetectorBundle {
    nets::Network frozen_classifier;
    nets::Network encoder;
    std::vector<std::string> taps;  // fixed order; heads and weights keyed by these
    std::map<std::string, GaussianHead> heads;
    std::map<std::string, double> ensemble_weights;
    std::optional<double> preprocess_epsilon;

    void validate() const;
};

struct RetrainResult {
    nets::Network encoder;
    std::vector<double> loss_trace;  // loss per step, before each update
};

// Duplicate -> sever -> attach decoder -> exactly cfg.steps reconstruction
// SGD steps on shuffled mini-batches. The classifier argument is never
// mutated. Returns the retrained encoder prefix and the per-step loss trace.
RetrainResult retrain_encoder(const nets::Network& classifier, const nets::SurgeryPlan& plan,
                              const RetrainConfig& cfg, const ad::Tensor& inputs);

// Raw ensemble confidence at x (batch of one): sum over taps of
// weight * head confidence on that tap's features. Always <= 0.
double confidence(const DetectorBundle& bundle, const ad::Tensor& x);

// x + eps * sign(grad_x confidence(x)): nudges the input toward higher
// confidence before scoring.
ad::Tensor preprocess_input(const DetectorBundle& bundle, const ad::Tensor& x, double eps);

// Confidence after the bundle's optional input preprocessing.
double score(const DetectorBundle& bundle, const ad::Tensor& x);

bool is_in_distribution(const DetectorBundle& bundle, const ad::Tensor& x, double threshold);

enum class EncoderMode { retrained, no_retrain, vanilla_ae };

std::string encoder_mode_name(EncoderMode m);

struct BundleConfig {
    RetrainConfig retrain;
    std::size_t sever_at = 1;
    std::vector<std::string> taps;                   // empty: single tap at the embedding layer
    double ridge = -1.0;                             // negative: default_ridge
    std::map<std::string, double> ensemble_weights;  // empty: uniform
    std::optional<double> preprocess_epsilon;
    EncoderMode mode = EncoderMode::retrained;
    std::optional<int> expected_classes;
};

struct BundleBuildResult {
    DetectorBundle bundle;
    std::vector<double> loss_trace;
};

// Full conversion: obtain the encoder per cfg.mode, then fit one Gaussian
// head per tap from the labelled in-distribution fit set.
BundleBuildResult build_bundle(const nets::Network& classifier, const BundleConfig& cfg,
                               const ad::Tensor& retrain_inputs, const ad::Tensor& fit_inputs,
                               const std::vector<int>& fit_labels);

void save_bundle(const DetectorBundle& bundle, const std::string& path);
DetectorBundle load_bundle(const std::string& path);

}  // namespace m2d::detector
