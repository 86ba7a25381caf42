#include "m2d/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "m2d/serialize.hpp"

namespace m2d::config {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        std::size_t c = s.find(sep, pos);
        std::string piece = trim(c == std::string::npos ? s.substr(pos) : s.substr(pos, c - pos));
        if (!piece.empty()) out.push_back(piece);
        if (c == std::string::npos) break;
        pos = c + 1;
    }
    return out;
}

}  // namespace

Config Config::parse_text(const std::string& text, const std::string& origin) {
    Config cfg;
    cfg.origin_ = origin;
    std::string section;
    int line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string raw = text.substr(start, end - start);
        ++line_no;
        std::size_t hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        std::string line = trim(raw);
        if (!line.empty()) {
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(line_no) +
                                      ": unterminated section header");
                section = trim(line.substr(1, line.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty section name");
            } else {
                std::size_t eq = line.find('=');
                if (eq == std::string::npos)
                    throw ConfigError(origin + ":" + std::to_string(line_no) +
                                      ": expected 'key = value', got '" + line + "'");
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(line_no) +
                                      ": key outside any [section]");
                std::string key = trim(line.substr(0, eq));
                std::string value = trim(line.substr(eq + 1));
                if (key.empty())
                    throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
                cfg.sections_[section][key] = Entry{value, line_no};
            }
        }
        if (end == text.size()) break;
        start = end + 1;
    }
    return cfg;
}

Config Config::parse_file(const std::string& path) {
    std::vector<std::uint8_t> raw;
    try {
        raw = io::read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return parse_text(std::string(raw.begin(), raw.end()), path);
}

void Config::apply_override(const std::string& assignment) {
    std::size_t eq = assignment.find('=');
    std::size_t dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw ConfigError("--set wants 'section.key=value', got '" + assignment + "'");
    std::string section = trim(assignment.substr(0, dot));
    std::string key = trim(assignment.substr(dot + 1, eq - dot - 1));
    std::string value = trim(assignment.substr(eq + 1));
    if (section.empty() || key.empty())
        throw ConfigError("--set wants 'section.key=value', got '" + assignment + "'");
    sections_[section][key] = Entry{value, 0};
}

const Config::Entry* Config::find(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return nullptr;
    auto k = s->second.find(key);
    return k == s->second.end() ? nullptr : &k->second;
}

void Config::fail(const Entry& e, const std::string& msg) const {
    throw ConfigError(origin_ + ":" + std::to_string(e.line) + ": " + msg);
}

bool Config::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

std::string Config::require_str(const std::string& section, const std::string& key) const {
    const Entry* e = find(section, key);
    if (!e) throw ConfigError(origin_ + ": missing required key " + section + "." + key);
    return e->value;
}

std::string Config::get_str(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
    const Entry* e = find(section, key);
    return e ? e->value : fallback;
}

double Config::require_double(const std::string& section, const std::string& key) const {
    const Entry* e = find(section, key);
    if (!e) throw ConfigError(origin_ + ": missing required key " + section + "." + key);
    char* end = nullptr;
    double v = std::strtod(e->value.c_str(), &end);
    if (end == e->value.c_str() || *end != '\0' || !std::isfinite(v))
        fail(*e, section + "." + key + ": expected a number, got '" + e->value + "'");
    return v;
}

double Config::get_double(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? require_double(section, key) : fallback;
}

long Config::require_int(const std::string& section, const std::string& key) const {
    const Entry* e = find(section, key);
    if (!e) throw ConfigError(origin_ + ": missing required key " + section + "." + key);
    char* end = nullptr;
    long v = std::strtol(e->value.c_str(), &end, 10);
    if (end == e->value.c_str() || *end != '\0')
        fail(*e, section + "." + key + ": expected an integer, got '" + e->value + "'");
    return v;
}

long Config::get_int(const std::string& section, const std::string& key, long fallback) const {
    return has(section, key) ? require_int(section, key) : fallback;
}

std::uint64_t Config::require_seed(const std::string& section) const {
    const Entry* e = find(section, "seed");
    if (!e)
        throw ConfigError(origin_ + ": missing required key " + section +
                          ".seed (seeds are mandatory; there is no implicit randomness)");
    char* end = nullptr;
    unsigned long long v = std::strtoull(e->value.c_str(), &end, 10);
    if (end == e->value.c_str() || *end != '\0')
        fail(*e, section + ".seed: expected a non-negative integer, got '" + e->value + "'");
    return static_cast<std::uint64_t>(v);
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const Entry* e = find(section, key);
    if (!e) return fallback;
    std::string v = e->value;
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "off" || v == "no" || v == "0") return false;
    fail(*e, section + "." + key + ": expected a boolean, got '" + e->value + "'");
}

std::vector<std::string> Config::get_list(const std::string& section, const std::string& key) const {
    const Entry* e = find(section, key);
    if (!e) return {};
    return split_on(e->value, ',');
}

namespace {

std::vector<std::vector<double>> parse_centers(const Config& c, const std::string& key) {
    // "0,0 ; 4,0 ; 0,4"
    std::string raw = c.require_str("dataset", key);
    std::vector<std::vector<double>> centers;
    for (const std::string& group : split_on(raw, ';')) {
        std::vector<double> pt;
        for (const std::string& tok : split_on(group, ',')) {
            char* end = nullptr;
            double v = std::strtod(tok.c_str(), &end);
            if (end == tok.c_str() || *end != '\0')
                throw ConfigError(c.origin() + ": dataset." + key + ": bad coordinate '" + tok + "'");
            pt.push_back(v);
        }
        if (pt.empty()) throw ConfigError(c.origin() + ": dataset." + key + ": empty center");
        centers.push_back(std::move(pt));
    }
    if (centers.empty()) throw ConfigError(c.origin() + ": dataset." + key + ": no centers");
    return centers;
}

std::vector<double> parse_point(const Config& c, const std::string& key) {
    std::vector<double> pt;
    for (const std::string& tok : c.get_list("dataset", key)) {
        char* end = nullptr;
        double v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0')
            throw ConfigError(c.origin() + ": dataset." + key + ": bad coordinate '" + tok + "'");
        pt.push_back(v);
    }
    return pt;
}

nets::ModelSpec parse_model_spec(const Config& c) {
    nets::ModelSpec spec;
    std::string raw = c.require_str("model", "layers");
    for (const std::string& piece : split_on(raw, ';')) {
        try {
            spec.layers.push_back(nets::LayerDesc::parse(piece));
        } catch (const std::exception& e) {
            throw ConfigError(c.origin() + ": model.layers: " + e.what());
        }
    }
    for (const std::string& tap : c.get_list("model", "taps")) {
        std::size_t colon = tap.find(':');
        if (colon == std::string::npos)
            throw ConfigError(c.origin() + ": model.taps: expected 'name:layer', got '" + tap + "'");
        nets::TapPoint t;
        t.name = trim(tap.substr(0, colon));
        std::string where = trim(tap.substr(colon + 1));
        if (where == "input") {
            t.layer = -1;
        } else {
            char* end = nullptr;
            long v = std::strtol(where.c_str(), &end, 10);
            if (end == where.c_str() || *end != '\0')
                throw ConfigError(c.origin() + ": model.taps: bad layer '" + where + "'");
            t.layer = static_cast<int>(v);
        }
        spec.tap_points.push_back(std::move(t));
    }
    try {
        spec.validate();
    } catch (const std::exception& e) {
        throw ConfigError(c.origin() + ": model.layers: " + e.what());
    }
    return spec;
}

std::size_t require_positive(const Config& c, const std::string& section, const std::string& key,
                             long fallback) {
    long v = c.get_int(section, key, fallback);
    if (v < 1)
        throw ConfigError(c.origin() + ": " + section + "." + key + " must be a positive integer");
    return static_cast<std::size_t>(v);
}

}  // namespace

RunConfig RunConfig::from(const Config& c, std::optional<std::uint64_t> seed_override) {
    RunConfig rc;

    rc.dataset.kind = c.get_str("dataset", "kind", "blobs");
    if (rc.dataset.kind != "blobs" && rc.dataset.kind != "images" && rc.dataset.kind != "csv" &&
        rc.dataset.kind != "idx")
        throw ConfigError(c.origin() + ": dataset.kind must be blobs|images|csv|idx, got '" +
                          rc.dataset.kind + "'");
    rc.dataset.seed = seed_override ? *seed_override : c.require_seed("dataset");

    if (rc.dataset.kind == "blobs") {
        rc.dataset.classes = static_cast<int>(require_positive(c, "dataset", "classes", 3));
        rc.dataset.per_class = require_positive(c, "dataset", "per_class", 200);
        rc.dataset.centers = parse_centers(c, "centers");
        if (rc.dataset.centers.size() != static_cast<std::size_t>(rc.dataset.classes))
            throw ConfigError(c.origin() + ": dataset.centers: expected " +
                              std::to_string(rc.dataset.classes) + " centers");
        rc.dataset.spread = c.require_double("dataset", "spread");
        rc.dataset.ood_center = parse_point(c, "ood_center");
        if (rc.dataset.ood_center.empty())
            throw ConfigError(c.origin() + ": missing required key dataset.ood_center");
        for (const auto& ctr : rc.dataset.centers)
            if (ctr == rc.dataset.ood_center)
                throw ConfigError(c.origin() +
                                  ": dataset.ood_center coincides with an in-distribution center");
        rc.dataset.ood_n = require_positive(c, "dataset", "ood_n", 200);
        rc.dataset.ood_spread = c.get_double("dataset", "ood_spread", rc.dataset.spread);
    } else if (rc.dataset.kind == "images") {
        rc.dataset.classes = static_cast<int>(require_positive(c, "dataset", "classes", 3));
        rc.dataset.per_class = require_positive(c, "dataset", "per_class", 200);
        rc.dataset.image_side = require_positive(c, "dataset", "side", 8);
        rc.dataset.image_noise = c.get_double("dataset", "noise", 0.05);
        rc.dataset.ood_n = require_positive(c, "dataset", "ood_n", 200);
    } else if (rc.dataset.kind == "csv") {
        rc.dataset.in_path = c.require_str("dataset", "in_csv");
        rc.dataset.ood_path = c.require_str("dataset", "ood_csv");
    } else {  // idx
        rc.dataset.in_path = c.require_str("dataset", "images");
        rc.dataset.labels_path = c.require_str("dataset", "labels");
        rc.dataset.ood_path = c.require_str("dataset", "ood_images");
    }

    rc.dataset.split.train_frac = c.get_double("dataset", "train_frac", 0.7);
    rc.dataset.split.fit_frac = c.get_double("dataset", "fit_frac", 0.15);
    rc.dataset.split.test_frac = c.get_double("dataset", "test_frac", 0.15);
    long subset = c.get_int("dataset", "detector_subset", 0);
    if (subset < 0) throw ConfigError(c.origin() + ": dataset.detector_subset must be >= 0");
    rc.dataset.split.detector_subset = static_cast<std::size_t>(subset);
    rc.dataset.normalize = c.get_bool("dataset", "normalize", false);

    rc.model.spec = parse_model_spec(c);
    rc.model.epochs = static_cast<std::size_t>(c.get_int("model", "epochs", 10));
    rc.model.learning_rate = c.get_double("model", "learning_rate", 0.05);
    rc.model.batch_size = require_positive(c, "model", "batch_size", 32);
    rc.model.seed = seed_override ? *seed_override + 1 : c.require_seed("model");
    if (!(rc.model.learning_rate >= 0.0))
        throw ConfigError(c.origin() + ": model.learning_rate must be >= 0");

    rc.det.retrain.steps = require_positive(c, "detector", "steps", 10);
    rc.det.retrain.learning_rate = c.get_double("detector", "learning_rate", 0.01);
    rc.det.retrain.batch_size = require_positive(c, "detector", "batch_size", 32);
    rc.det.retrain.seed = seed_override ? *seed_override + 2 : c.require_seed("detector");
    std::string loss = c.get_str("detector", "recon_loss", "mse");
    if (loss == "mse")
        rc.det.retrain.loss = detector::ReconLoss::mse;
    else if (loss == "bce")
        rc.det.retrain.loss = detector::ReconLoss::bce;
    else
        throw ConfigError(c.origin() + ": detector.recon_loss must be mse|bce, got '" + loss + "'");
    rc.det.sever_at = require_positive(c, "detector", "sever_at", 1);
    if (rc.det.sever_at >= rc.model.spec.layers.size())
        throw ConfigError(c.origin() + ": detector.sever_at must leave at least one layer severed (" +
                          std::to_string(rc.model.spec.layers.size()) + " layers)");
    rc.det.taps = c.get_list("detector", "taps");
    if (c.has("detector", "ridge") && c.get_str("detector", "ridge", "") != "auto") {
        rc.det.ridge = c.require_double("detector", "ridge");
        if (rc.det.ridge < 0.0)
            throw ConfigError(c.origin() + ": detector.ridge must be >= 0 or 'auto'");
    }
    for (const std::string& w : c.get_list("detector", "ensemble")) {
        std::size_t colon = w.find(':');
        if (colon == std::string::npos)
            throw ConfigError(c.origin() + ": detector.ensemble: expected 'tap:weight', got '" + w +
                              "'");
        char* end = nullptr;
        double val = std::strtod(w.c_str() + colon + 1, &end);
        if (end == w.c_str() + colon + 1 || *end != '\0' || val < 0.0)
            throw ConfigError(c.origin() + ": detector.ensemble: bad weight in '" + w + "'");
        rc.det.ensemble_weights[trim(w.substr(0, colon))] = val;
    }
    double eps = c.get_double("detector", "preprocess_epsilon", 0.0);
    if (eps < 0.0) throw ConfigError(c.origin() + ": detector.preprocess_epsilon must be >= 0");
    if (eps > 0.0) rc.det.preprocess_epsilon = eps;

    auto methods = c.get_list("eval", "methods");
    if (!methods.empty()) rc.eval.methods = methods;
    for (const std::string& m : rc.eval.methods)
        if (m != "m2d" && m != "m2d-no-retrain" && m != "vanilla-ae" && m != "msp" && m != "odin")
            throw ConfigError(c.origin() + ": eval.methods: unknown method '" + m + "'");
    for (const std::string& s : c.get_list("eval", "steps_grid")) {
        char* end = nullptr;
        long v = std::strtol(s.c_str(), &end, 10);
        if (end == s.c_str() || *end != '\0' || v < 1)
            throw ConfigError(c.origin() + ": eval.steps_grid: bad step count '" + s + "'");
        rc.eval.steps_grid.push_back(v);
    }
    rc.eval.temperature = c.get_double("eval", "temperature", 1000.0);
    if (!(rc.eval.temperature > 0.0))
        throw ConfigError(c.origin() + ": eval.temperature must be > 0");
    rc.eval.odin_epsilon = c.get_double("eval", "odin_epsilon", 0.001);
    if (rc.eval.odin_epsilon < 0.0)
        throw ConfigError(c.origin() + ": eval.odin_epsilon must be >= 0");
    rc.eval.timings = c.get_bool("eval", "timings", false);
    long threads = c.get_int("eval", "threads", 1);
    if (threads < 1) throw ConfigError(c.origin() + ": eval.threads must be >= 1");
    rc.eval.threads = static_cast<unsigned>(threads);

    return rc;
}

}  // namespace m2d::config
