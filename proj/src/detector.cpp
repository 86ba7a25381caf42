#include "m2d/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "m2d/rng.hpp"
#include "m2d/serialize.hpp"

namespace m2d::detector {

namespace {

// Lower Cholesky of a symmetric positive definite matrix; throws when a
// pivot is not positive.
std::vector<double> cholesky_lower(const std::vector<double>& a, std::size_t d) {
    std::vector<double> l(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a[i * d + j];
            for (std::size_t k = 0; k < j; ++k) s -= l[i * d + k] * l[j * d + k];
            if (i == j) {
                if (!(s > 0.0))
                    throw std::runtime_error(
                        "covariance (plus ridge) is not positive definite; Cholesky failed at pivot " +
                        std::to_string(i));
                l[i * d + i] = std::sqrt(s);
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    return l;
}

void solve_lower(const std::vector<double>& l, std::size_t d, std::vector<double>& b) {
    for (std::size_t i = 0; i < d; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= l[i * d + k] * b[k];
        b[i] = s / l[i * d + i];
    }
}

void solve_upper_transposed(const std::vector<double>& l, std::size_t d, std::vector<double>& b) {
    for (std::size_t ii = d; ii-- > 0;) {
        double s = b[ii];
        for (std::size_t k = ii + 1; k < d; ++k) s -= l[k * d + ii] * b[k];
        b[ii] = s / l[ii * d + ii];
    }
}

struct Moments {
    std::vector<int> class_ids;
    std::vector<std::vector<double>> means;
    std::vector<double> covariance;
    std::vector<std::size_t> counts;
    std::size_t dim = 0;
};

Moments fit_moments(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                    std::optional<int> expected_classes) {
    if (features.empty()) throw std::invalid_argument("fit_head: no samples");
    if (features.size() != labels.size())
        throw std::invalid_argument("fit_head: " + std::to_string(features.size()) + " features vs " +
                                    std::to_string(labels.size()) + " labels");
    std::size_t d = features[0].size();
    if (d == 0) throw std::invalid_argument("fit_head: zero-dimensional features");
    for (const auto& f : features)
        if (f.size() != d) throw std::invalid_argument("fit_head: inconsistent feature dims");

    Moments m;
    m.dim = d;
    for (int lab : labels) {
        if (lab < 0) throw std::invalid_argument("fit_head: negative class label");
        if (std::find(m.class_ids.begin(), m.class_ids.end(), lab) == m.class_ids.end())
            m.class_ids.push_back(lab);
    }
    std::sort(m.class_ids.begin(), m.class_ids.end());
    if (expected_classes) {
        for (int c = 0; c < *expected_classes; ++c)
            if (std::find(m.class_ids.begin(), m.class_ids.end(), c) == m.class_ids.end())
                throw std::invalid_argument("fit_head: class " + std::to_string(c) +
                                            " has zero samples");
    }

    auto slot = [&](int lab) {
        return static_cast<std::size_t>(
            std::lower_bound(m.class_ids.begin(), m.class_ids.end(), lab) - m.class_ids.begin());
    };

    m.means.assign(m.class_ids.size(), std::vector<double>(d, 0.0));
    m.counts.assign(m.class_ids.size(), 0);
    for (std::size_t i = 0; i < features.size(); ++i) {
        std::size_t c = slot(labels[i]);
        m.counts[c] += 1;
        for (std::size_t j = 0; j < d; ++j) m.means[c][j] += features[i][j];
    }
    for (std::size_t c = 0; c < m.class_ids.size(); ++c)
        for (std::size_t j = 0; j < d; ++j) m.means[c][j] /= static_cast<double>(m.counts[c]);

    // tied covariance over within-class deviations; upper triangle mirrored
    // so the result is symmetric to the bit
    m.covariance.assign(d * d, 0.0);
    std::vector<double> delta(d);
    for (std::size_t i = 0; i < features.size(); ++i) {
        std::size_t c = slot(labels[i]);
        for (std::size_t j = 0; j < d; ++j) delta[j] = features[i][j] - m.means[c][j];
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t s = r; s < d; ++s) m.covariance[r * d + s] += delta[r] * delta[s];
    }
    double inv_n = 1.0 / static_cast<double>(features.size());
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t s = r; s < d; ++s) {
            m.covariance[r * d + s] *= inv_n;
            m.covariance[s * d + r] = m.covariance[r * d + s];
        }
    return m;
}

}  // namespace

GaussianHead GaussianHead::from_moments(std::vector<int> class_ids,
                                        std::vector<std::vector<double>> means,
                                        std::vector<double> covariance, double ridge,
                                        std::vector<std::size_t> class_counts) {
    GaussianHead h;
    if (class_ids.empty()) throw std::invalid_argument("gaussian head: no classes");
    if (means.size() != class_ids.size() || class_counts.size() != class_ids.size())
        throw std::invalid_argument("gaussian head: class table size mismatch");
    h.dim = means[0].size();
    for (const auto& mu : means)
        if (mu.size() != h.dim) throw std::invalid_argument("gaussian head: mean dim mismatch");
    if (covariance.size() != h.dim * h.dim)
        throw std::invalid_argument("gaussian head: covariance is not dim x dim");
    if (!(ridge >= 0.0)) throw std::invalid_argument("gaussian head: ridge must be >= 0");
    for (std::size_t r = 0; r < h.dim; ++r)
        for (std::size_t s = 0; s < h.dim; ++s)
            if (std::abs(covariance[r * h.dim + s] - covariance[s * h.dim + r]) > 1e-10)
                throw std::invalid_argument("gaussian head: covariance asymmetric beyond 1e-10");

    h.class_ids = std::move(class_ids);
    h.means = std::move(means);
    h.covariance = std::move(covariance);
    h.ridge = ridge;
    h.class_counts = std::move(class_counts);
    h.total = 0;
    for (std::size_t c : h.class_counts) {
        if (c == 0) throw std::invalid_argument("gaussian head: fitted class with zero samples");
        h.total += c;
    }

    std::vector<double> ridged = h.covariance;
    for (std::size_t i = 0; i < h.dim; ++i) ridged[i * h.dim + i] += ridge;
    h.chol = cholesky_lower(ridged, h.dim);
    return h;
}

double GaussianHead::confidence(const std::vector<double>& f) const {
    if (f.size() != dim) throw std::invalid_argument("confidence: feature dim mismatch");
    double best = -1.0;
    std::vector<double> y(dim);
    for (std::size_t c = 0; c < class_ids.size(); ++c) {
        for (std::size_t j = 0; j < dim; ++j) y[j] = f[j] - means[c][j];
        solve_lower(chol, dim, y);
        double q = 0.0;
        for (double v : y) q += v * v;
        if (c == 0 || q < best) best = q;
    }
    return 0.0 - best;
}

int GaussianHead::closest_class(const std::vector<double>& f) const {
    if (f.size() != dim) throw std::invalid_argument("closest_class: feature dim mismatch");
    double best = 0.0;
    std::size_t arg = 0;
    std::vector<double> y(dim);
    for (std::size_t c = 0; c < class_ids.size(); ++c) {
        for (std::size_t j = 0; j < dim; ++j) y[j] = f[j] - means[c][j];
        solve_lower(chol, dim, y);
        double q = 0.0;
        for (double v : y) q += v * v;
        if (c == 0 || q < best) {
            best = q;
            arg = c;
        }
    }
    return class_ids[arg];
}

std::vector<double> GaussianHead::confidence_gradient(const std::vector<double>& f) const {
    int cls = closest_class(f);
    std::size_t c = static_cast<std::size_t>(
        std::lower_bound(class_ids.begin(), class_ids.end(), cls) - class_ids.begin());
    std::vector<double> y(dim);
    for (std::size_t j = 0; j < dim; ++j) y[j] = f[j] - means[c][j];
    solve_lower(chol, dim, y);
    solve_upper_transposed(chol, dim, y);
    for (double& v : y) v *= -2.0;
    return y;
}

GaussianHead fit_head(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                      double ridge, std::optional<int> expected_classes) {
    Moments m = fit_moments(features, labels, expected_classes);
    return GaussianHead::from_moments(std::move(m.class_ids), std::move(m.means),
                                      std::move(m.covariance), ridge, std::move(m.counts));
}

double default_ridge(const std::vector<double>& covariance, std::size_t dim) {
    double tr = 0.0;
    for (std::size_t i = 0; i < dim; ++i) tr += covariance[i * dim + i];
    return 1e-6 * tr / static_cast<double>(dim);
}

void DetectorBundle::validate() const {
    if (taps.empty()) throw std::invalid_argument("detector bundle: no taps");
    double wsum = 0.0;
    for (const auto& t : taps) {
        const auto& tap = encoder.spec().find_tap(t);
        auto hit = heads.find(t);
        if (hit == heads.end()) throw std::invalid_argument("detector bundle: no head for tap " + t);
        if (hit->second.dim != encoder.spec().tap_dim(tap))
            throw std::invalid_argument("detector bundle: head dim mismatch at tap " + t);
        auto wit = ensemble_weights.find(t);
        if (wit == ensemble_weights.end())
            throw std::invalid_argument("detector bundle: no ensemble weight for tap " + t);
        if (!(wit->second >= 0.0))
            throw std::invalid_argument("detector bundle: negative ensemble weight at tap " + t);
        wsum += wit->second;
    }
    if (!(wsum > 0.0)) throw std::invalid_argument("detector bundle: ensemble weights are all zero");
    if (preprocess_epsilon && !(*preprocess_epsilon > 0.0))
        throw std::invalid_argument("detector bundle: preprocessing epsilon must be > 0");
}

RetrainResult retrain_encoder(const nets::Network& classifier, const nets::SurgeryPlan& plan,
                              const RetrainConfig& cfg, const ad::Tensor& inputs) {
    if (cfg.steps < 1) throw std::invalid_argument("retrain_encoder: steps must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("retrain_encoder: batch size must be >= 1");
    if (inputs.shape.empty() || inputs.shape[0] == 0)
        throw std::invalid_argument("retrain_encoder: empty data");

    std::size_t n = inputs.shape[0];
    std::size_t sample = inputs.numel() / n;

    nets::Network coupled = nets::sever_and_attach(nets::duplicate(classifier), plan, cfg.seed);

    // distinct stream from the decoder-init draws
    Rng batch_rng(cfg.seed ^ 0xA5A5A5A55A5A5A5Aull);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    batch_rng.shuffle(order);
    std::size_t cursor = 0;

    ad::OptimizerState opt{cfg.learning_rate, 0};
    std::vector<double> trace;
    trace.reserve(cfg.steps);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        if (cursor >= n) {
            batch_rng.shuffle(order);
            cursor = 0;
        }
        std::size_t take = std::min(cfg.batch_size, n - cursor);
        ad::Tensor batch = ad::Tensor::zeros({take, sample});
        for (std::size_t b = 0; b < take; ++b)
            std::memcpy(&batch.data[b * sample], &inputs.data[order[cursor + b] * sample],
                        sample * sizeof(double));
        cursor += take;

        nets::ForwardGraph g = coupled.forward(batch);
        ad::VarPtr target = ad::constant(batch);
        ad::VarPtr out = g.output;
        if (out->value.shape != target->value.shape)
            out = ad::reshape(out, target->value.shape);
        ad::VarPtr loss;
        if (cfg.loss == ReconLoss::mse) {
            loss = ad::mean_squared_error(out, target);
        } else {
            for (double v : batch.data)
                if (v < 0.0 || v > 1.0)
                    throw std::invalid_argument(
                        "retrain_encoder: bce reconstruction needs inputs in [0,1]");
            loss = ad::sigmoid_bce(out, target);
        }
        trace.push_back(loss->value.item());
        ad::backward(loss);
        ad::GradientMap grads = coupled.collect_gradients(g);
        ad::sgd_step(coupled.params(), grads, opt);
    }

    return {nets::encoder_prefix(coupled, plan.sever_at), std::move(trace)};
}

namespace {

// Scalar graph node for one head's confidence; the gradient is linearized at
// the forward point (solve against the stored Cholesky factor, arg-max class).
ad::VarPtr head_confidence_op(const ad::VarPtr& feat, const GaussianHead& head) {
    if (feat->value.shape.size() != 2 || feat->value.shape[0] != 1)
        throw std::invalid_argument("head confidence: want a single-sample [1,d] feature");
    const std::vector<double>& f = feat->value.data;
    double c = head.confidence(f);
    auto grad_f = std::make_shared<std::vector<double>>(head.confidence_gradient(f));
    ad::VarPtr fc = feat;
    return ad::make_op(ad::Tensor::scalar(c), {feat},
                       [fc, grad_f](ad::Var& self) {
                           fc->ensure_grad();
                           for (std::size_t i = 0; i < grad_f->size(); ++i)
                               fc->grad[i] += self.grad[0] * (*grad_f)[i];
                       },
                       "gaussian_confidence");
}

void require_single_sample(const ad::Tensor& x) {
    if (x.shape.empty() || x.shape[0] != 1)
        throw std::invalid_argument("scoring expects a single sample with leading batch dim 1, got " +
                                    ad::shape_str(x.shape));
}

}  // namespace

double confidence(const DetectorBundle& bundle, const ad::Tensor& x) {
    require_single_sample(x);
    auto feats = nets::extract_features(bundle.encoder, x, bundle.taps);
    double total = 0.0;
    for (const auto& t : bundle.taps) {
        auto hit = bundle.heads.find(t);
        if (hit == bundle.heads.end()) throw std::logic_error("unfitted head for tap " + t);
        total += bundle.ensemble_weights.at(t) * hit->second.confidence(feats.at(t).data);
    }
    return total;
}

ad::Tensor preprocess_input(const DetectorBundle& bundle, const ad::Tensor& x, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("preprocess_input: epsilon must be > 0");
    require_single_sample(x);
    nets::ForwardGraph g = bundle.encoder.forward(x, /*input_requires_grad=*/true);
    ad::VarPtr total;
    for (const auto& t : bundle.taps) {
        auto hit = bundle.heads.find(t);
        if (hit == bundle.heads.end()) throw std::logic_error("unfitted head for tap " + t);
        ad::VarPtr c = head_confidence_op(g.taps.at(t), hit->second);
        ad::VarPtr wc = ad::scale(c, bundle.ensemble_weights.at(t));
        total = total ? ad::add(total, wc) : wc;
    }
    ad::backward(total);
    const std::vector<double>& gin = g.input->grad;
    if (gin.size() != x.numel()) throw std::runtime_error("preprocess_input: missing input gradient");
    ad::Tensor out = x;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        double s = gin[i] > 0.0 ? 1.0 : (gin[i] < 0.0 ? -1.0 : 0.0);
        out.data[i] = x.data[i] + eps * s;
    }
    ad::check_finite(out, "preprocess_input");
    return out;
}

double score(const DetectorBundle& bundle, const ad::Tensor& x) {
    if (bundle.preprocess_epsilon) {
        ad::Tensor shifted = preprocess_input(bundle, x, *bundle.preprocess_epsilon);
        return confidence(bundle, shifted);
    }
    return confidence(bundle, x);
}

bool is_in_distribution(const DetectorBundle& bundle, const ad::Tensor& x, double threshold) {
    return score(bundle, x) > threshold;
}

std::string encoder_mode_name(EncoderMode m) {
    switch (m) {
        case EncoderMode::retrained: return "m2d";
        case EncoderMode::no_retrain: return "m2d-no-retrain";
        case EncoderMode::vanilla_ae: return "vanilla-ae";
    }
    throw std::logic_error("unknown encoder mode");
}

BundleBuildResult build_bundle(const nets::Network& classifier, const BundleConfig& cfg,
                               const ad::Tensor& retrain_inputs, const ad::Tensor& fit_inputs,
                               const std::vector<int>& fit_labels) {
    nets::SurgeryPlan plan;
    plan.sever_at = cfg.sever_at;
    plan.decoder_spec = nets::mirror_decoder_spec(classifier.spec(), cfg.sever_at);

    BundleBuildResult result{DetectorBundle{nets::duplicate(classifier), {}, {}, {}, {}, {}}, {}};

    switch (cfg.mode) {
        case EncoderMode::retrained: {
            RetrainResult r = retrain_encoder(classifier, plan, cfg.retrain, retrain_inputs);
            result.bundle.encoder = std::move(r.encoder);
            result.loss_trace = std::move(r.loss_trace);
            break;
        }
        case EncoderMode::no_retrain: {
            result.bundle.encoder = nets::encoder_prefix(classifier, cfg.sever_at);
            break;
        }
        case EncoderMode::vanilla_ae: {
            nets::Network fresh = nets::build(classifier.spec(), cfg.retrain.seed ^ 0xFEEDFACECAFEBEEFull);
            RetrainResult r = retrain_encoder(fresh, plan, cfg.retrain, retrain_inputs);
            result.bundle.encoder = std::move(r.encoder);
            result.loss_trace = std::move(r.loss_trace);
            break;
        }
    }

    // default tap: the embedding layer feeding the severed branch
    std::vector<std::string> taps = cfg.taps;
    if (taps.empty()) {
        int embed_layer = static_cast<int>(cfg.sever_at) - 1;
        std::string name;
        for (const auto& t : result.bundle.encoder.spec().tap_points)
            if (t.layer == embed_layer) name = t.name;
        if (name.empty()) {
            nets::ModelSpec enc_spec = result.bundle.encoder.spec();
            enc_spec.tap_points.push_back({"embed", embed_layer});
            enc_spec.validate();
            result.bundle.encoder =
                nets::Network(std::move(enc_spec), result.bundle.encoder.params(),
                              result.bundle.encoder.kind());
            name = "embed";
        }
        taps.push_back(name);
    }
    result.bundle.taps = taps;

    int expected = cfg.expected_classes
                       ? *cfg.expected_classes
                       : static_cast<int>(classifier.spec().layers.back().output_numel());

    auto feats = nets::extract_features(result.bundle.encoder, fit_inputs, taps);
    for (const auto& t : taps) {
        const ad::Tensor& ft = feats.at(t);
        std::size_t nf = ft.shape[0], d = ft.shape[1];
        if (nf != fit_labels.size())
            throw std::invalid_argument("build_bundle: fit labels do not match fit inputs");
        std::vector<std::vector<double>> rows(nf, std::vector<double>(d));
        for (std::size_t i = 0; i < nf; ++i)
            std::memcpy(rows[i].data(), &ft.data[i * d], d * sizeof(double));
        Moments m = fit_moments(rows, fit_labels, expected);
        double lambda = cfg.ridge >= 0.0 ? cfg.ridge : default_ridge(m.covariance, m.dim);
        result.bundle.heads.emplace(
            t, GaussianHead::from_moments(std::move(m.class_ids), std::move(m.means),
                                          std::move(m.covariance), lambda, std::move(m.counts)));
    }

    if (cfg.ensemble_weights.empty()) {
        double w = 1.0 / static_cast<double>(taps.size());
        for (const auto& t : taps) result.bundle.ensemble_weights[t] = w;
    } else {
        result.bundle.ensemble_weights = cfg.ensemble_weights;
    }
    result.bundle.preprocess_epsilon = cfg.preprocess_epsilon;
    result.bundle.validate();
    return result;
}

namespace {

constexpr const char* kTagClassifier = "CLSF";
constexpr const char* kTagHead = "GHEAD";
constexpr const char* kTagMeta = "BMETA";

void write_section(io::Writer& w, const std::string& tag, const std::vector<std::uint8_t>& payload) {
    std::size_t start = w.size();
    w.str(tag);
    w.u32(static_cast<std::uint32_t>(payload.size()));
    w.bytes(payload.data(), payload.size());
    w.append_crc_from(start);
}

}  // namespace

void save_bundle(const DetectorBundle& bundle, const std::string& path) {
    bundle.validate();
    io::Writer w;
    nets::container::write_header(w);
    nets::container::write_network(w, bundle.encoder, 0);

    {
        io::Writer nested;
        nets::container::write_network(nested, bundle.frozen_classifier, 0);
        write_section(w, kTagClassifier, nested.buffer());
    }
    for (const auto& t : bundle.taps) {
        const GaussianHead& h = bundle.heads.at(t);
        io::Writer p;
        p.str(t);
        p.u32(static_cast<std::uint32_t>(h.class_ids.size()));
        p.u32(static_cast<std::uint32_t>(h.dim));
        for (std::size_t c = 0; c < h.class_ids.size(); ++c) {
            p.u32(static_cast<std::uint32_t>(h.class_ids[c]));
            p.u64(h.class_counts[c]);
            for (double v : h.means[c]) p.f64(v);
        }
        for (double v : h.covariance) p.f64(v);
        p.f64(h.ridge);
        write_section(w, kTagHead, p.buffer());
    }
    {
        io::Writer p;
        p.u32(static_cast<std::uint32_t>(bundle.taps.size()));
        for (const auto& t : bundle.taps) {
            p.str(t);
            p.f64(bundle.ensemble_weights.at(t));
        }
        p.u8(bundle.preprocess_epsilon ? 1 : 0);
        p.f64(bundle.preprocess_epsilon.value_or(0.0));
        write_section(w, kTagMeta, p.buffer());
    }
    io::atomic_write_file(path, w.buffer());
}

DetectorBundle load_bundle(const std::string& path) {
    io::Reader r(io::read_file(path));
    nets::container::check_header(r);
    DetectorBundle bundle{nets::Network{}, nets::container::read_network(r, 0), {}, {}, {}, {}};

    bool have_classifier = false, have_meta = false;
    while (!r.at_end()) {
        std::size_t start = r.pos();
        std::string tag = r.str();
        std::uint32_t len = r.u32();
        std::vector<std::uint8_t> payload(len);
        r.raw(payload.data(), len);
        std::uint32_t want = r.crc_over(start);
        std::uint32_t got = r.u32();
        if (want != got) throw std::runtime_error("bundle section '" + tag + "' checksum mismatch");

        io::Reader p(std::move(payload));
        if (tag == kTagClassifier) {
            bundle.frozen_classifier = nets::container::read_network(p, 0);
            have_classifier = true;
        } else if (tag == kTagHead) {
            std::string tap = p.str();
            std::uint32_t n_classes = p.u32();
            std::uint32_t d = p.u32();
            std::vector<int> ids(n_classes);
            std::vector<std::size_t> counts(n_classes);
            std::vector<std::vector<double>> means(n_classes, std::vector<double>(d));
            for (std::uint32_t c = 0; c < n_classes; ++c) {
                ids[c] = static_cast<int>(p.u32());
                counts[c] = p.u64();
                for (std::uint32_t j = 0; j < d; ++j) means[c][j] = p.f64();
            }
            std::vector<double> cov(static_cast<std::size_t>(d) * d);
            for (auto& v : cov) v = p.f64();
            double ridge = p.f64();
            bundle.heads.emplace(tap, GaussianHead::from_moments(std::move(ids), std::move(means),
                                                                 std::move(cov), ridge,
                                                                 std::move(counts)));
            bundle.taps.push_back(tap);
        } else if (tag == kTagMeta) {
            std::uint32_t n = p.u32();
            for (std::uint32_t i = 0; i < n; ++i) {
                std::string tap = p.str();
                bundle.ensemble_weights[tap] = p.f64();
            }
            bool has_eps = p.u8() != 0;
            double eps = p.f64();
            if (has_eps) bundle.preprocess_epsilon = eps;
            have_meta = true;
        } else {
            throw std::runtime_error("bundle: unknown section '" + tag + "'");
        }
        if (!p.at_end()) throw std::runtime_error("bundle section '" + tag + "' has trailing bytes");
    }
    if (!have_classifier) throw std::runtime_error("bundle: missing classifier section");
    if (!have_meta) throw std::runtime_error("bundle: missing metadata section");
    bundle.validate();
    return bundle;
}

}  // namespace m2d::detector
