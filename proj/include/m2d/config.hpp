#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "m2d/data.hpp"
#include "m2d/detector.hpp"
#include "m2d/nets.hpp"

namespace m2d::config {

// Raised for anything a user can fix in the config file or on the command
// line; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// INI-style sections of key = value lines; '#' starts a comment. Errors
// carry "<origin>:<line>:" prefixes.
class Config {
public:
    static Config parse_file(const std::string& path);
    static Config parse_text(const std::string& text, const std::string& origin);

    // "section.key=value" from --set
    void apply_override(const std::string& assignment);

    bool has(const std::string& section, const std::string& key) const;
    std::string require_str(const std::string& section, const std::string& key) const;
    std::string get_str(const std::string& section, const std::string& key,
                        const std::string& fallback) const;
    double require_double(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    long require_int(const std::string& section, const std::string& key) const;
    long get_int(const std::string& section, const std::string& key, long fallback) const;
    std::uint64_t require_seed(const std::string& section) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<std::string> get_list(const std::string& section, const std::string& key) const;

    const std::string& origin() const { return origin_; }

private:
    struct Entry {
        std::string value;
        int line = 0;
    };
    [[noreturn]] void fail(const Entry& e, const std::string& msg) const;
    const Entry* find(const std::string& section, const std::string& key) const;

    std::map<std::string, std::map<std::string, Entry>> sections_;
    std::string origin_;
};

struct DatasetBlock {
    std::string kind;  // blobs | images | csv | idx
    std::uint64_t seed = 0;
    // blobs
    int classes = 3;
    std::size_t per_class = 200;
    std::vector<std::vector<double>> centers;
    double spread = 0.5;
    std::vector<double> ood_center;
    std::size_t ood_n = 200;
    double ood_spread = 0.5;
    // images
    std::size_t image_side = 8;
    double image_noise = 0.05;
    // file-backed
    std::string in_path, labels_path, ood_path;
    // shared
    data::SplitPlan split;
    bool normalize = false;
};

struct ModelBlock {
    nets::ModelSpec spec;
    std::size_t epochs = 10;
    double learning_rate = 0.05;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
};

struct DetectorBlock {
    detector::RetrainConfig retrain;
    std::size_t sever_at = 1;
    std::vector<std::string> taps;
    double ridge = -1.0;  // negative: auto
    std::map<std::string, double> ensemble_weights;
    std::optional<double> preprocess_epsilon;
};

struct EvalBlock {
    std::vector<std::string> methods{"m2d", "msp", "odin"};
    std::vector<long> steps_grid;  // empty: just detector.steps
    double temperature = 1000.0;
    double odin_epsilon = 0.001;
    bool timings = false;  // off by default so artifacts stay byte-identical
    unsigned threads = 1;
};

struct RunConfig {
    DatasetBlock dataset;
    ModelBlock model;
    DetectorBlock det;
    EvalBlock eval;

    // Assembles and validates the typed blocks; seed_override, when given,
    // replaces every block seed (dataset = s, model = s + 1, detector = s + 2).
    static RunConfig from(const Config& c, std::optional<std::uint64_t> seed_override);
};

}  // namespace m2d::config
