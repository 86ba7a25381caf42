#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2d/tensor.hpp"

namespace m2d::data {

// Per-dimension statistics computed on a training split and applied to all
// related splits. `clamped` marks zero-variance dimensions whose scale was
// forced to 1.
struct Normalization {
    std::vector<double> mean;
    std::vector<double> scale;
    std::vector<bool> clamped;
};

struct Dataset {
    ad::Tensor features;            // [N, d], row per sample
    std::vector<int> labels;        // empty for unlabeled sets
    std::vector<std::size_t> sample_dims;  // e.g. {2} or {28, 28}
    // provenance
    std::string name;
    std::string split;
    std::uint64_t seed = 0;
    bool normalized = false;
    Normalization norm;

    std::size_t size() const { return features.shape.empty() ? 0 : features.shape[0]; }
    std::size_t dim() const { return size() ? features.numel() / size() : 0; }
    bool labeled() const { return !labels.empty(); }
    ad::Tensor row(std::size_t i) const;
    void validate() const;
};

struct SplitPlan {
    double train_frac = 0.7;
    double fit_frac = 0.15;
    double test_frac = 0.15;
    std::size_t detector_subset = 0;  // drawn from the train split
};

struct Splits {
    Dataset train, fit, test, detector_subset;
};

// Isotropic Gaussian clusters, one center per class, deterministic per seed.
Dataset gen_blobs(int num_classes, std::size_t n_per_class,
                  const std::vector<std::vector<double>>& centers, double spread,
                  std::uint64_t seed);

// A single unlabeled far cluster used as the OOD side of a pair.
Dataset gen_ood_blob(const std::vector<double>& center, std::size_t n, double spread,
                     std::uint64_t seed);

// Synthetic grayscale corpora of identical shape: class-positioned bright
// bumps (in-distribution) and stripe textures (out-of-distribution).
Dataset gen_shape_images(int num_classes, std::size_t n_per_class, std::size_t side, double noise,
                         std::uint64_t seed);
Dataset gen_stripe_images(std::size_t n, std::size_t side, double noise, std::uint64_t seed);

// IDX ingestion (big-endian, magic 0x803 for images / 0x801 for labels);
// pixels are scaled to [0,1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
Dataset load_idx_images(const std::string& images_path);  // unlabeled
// Writes features (assumed in [0,1]) as u8 IDX files.
void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);
void write_idx_images(const Dataset& d, const std::string& images_path);

// CSV: header row, float feature columns, optional final integer `label`
// column, '.' decimal separator.
Dataset load_csv(const std::string& path);
void save_csv(const Dataset& d, const std::string& path);

// Mean-0/scale-1 statistics from `train` applied to train and every dataset
// in `others`. Zero-variance dimensions keep scale 1 and are flagged.
// Normalizing an already-normalized dataset is an error.
Normalization normalize(Dataset& train, const std::vector<Dataset*>& others);

// Seeded, label-stratified, disjoint train/fit/test plus a detector subset
// drawn from train.
Splits split(const Dataset& d, const SplitPlan& plan, std::uint64_t seed);

}  // namespace m2d::data
