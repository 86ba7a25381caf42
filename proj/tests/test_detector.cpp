#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <thread>
#include <unistd.h>

#include "m2d/data.hpp"
#include "m2d/detector.hpp"
#include "m2d/nets.hpp"
#include "m2d/rng.hpp"
#include "oracles.hpp"

using namespace m2d;
using detector::DetectorBundle;
using detector::GaussianHead;
using nets::Activation;
using nets::LayerDesc;
using nets::ModelSpec;
using nets::Network;

namespace {

ModelSpec mlp(std::vector<std::size_t> widths, Activation hidden = Activation::relu) {
    ModelSpec spec;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        LayerDesc l;
        l.in_dim = widths[i];
        l.out_dim = widths[i + 1];
        l.act = (i + 2 < widths.size()) ? hidden : Activation::none;
        spec.layers.push_back(l);
    }
    return spec;
}

std::vector<double> identity_matrix(std::size_t d) {
    std::vector<double> m(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) m[i * d + i] = 1.0;
    return m;
}

// single-class identity-covariance head at the given mean
GaussianHead unit_head(std::vector<double> mean) {
    std::size_t d = mean.size();
    return GaussianHead::from_moments({0}, {std::move(mean)}, identity_matrix(d), 0.0, {1});
}

// 1-d identity encoder (f(x) = x) with tap "z", plus a throwaway classifier
DetectorBundle identity_bundle() {
    ModelSpec spec = mlp({1, 1});
    spec.tap_points.push_back({"z", 0});
    Network enc = nets::build(spec, 1);
    enc.params()[0].value = ad::Tensor({1, 1}, {1.0});
    enc.params()[1].value = ad::Tensor({1}, {0.0});
    enc.set_kind(nets::NetworkKind::encoder);
    DetectorBundle b{nets::build(mlp({1, 2}), 2), enc, {"z"}, {}, {}, {}};
    b.heads.emplace("z", unit_head({0.0}));
    b.ensemble_weights["z"] = 1.0;
    return b;
}

GaussianHead random_head(Rng& rng, std::size_t d, std::size_t classes, double ridge = 0.0) {
    std::vector<std::vector<double>> means(classes, std::vector<double>(d));
    for (auto& mu : means)
        for (double& v : mu) v = rng.uniform(-3, 3);
    // SPD covariance: R R^T + I, mirrored exactly
    std::vector<double> r(d * d);
    for (double& v : r) v = rng.uniform(-1, 1);
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            double s = i == j ? 1.0 : 0.0;
            for (std::size_t k = 0; k < d; ++k) s += r[i * d + k] * r[j * d + k];
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    std::vector<int> ids(classes);
    std::vector<std::size_t> counts(classes, 1);
    for (std::size_t c = 0; c < classes; ++c) ids[c] = static_cast<int>(c);
    return GaussianHead::from_moments(ids, means, cov, ridge, counts);
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int c = 0;
        path = std::filesystem::temp_directory_path() /
               ("m2d_det_" + std::to_string(::getpid()) + "_" + std::to_string(c++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("fit_head: arithmetic means and the worked covariance example") {
    // class 0: (1,0),(3,0) -> mean (2,0)
    auto h0 = detector::fit_head({{1, 0}, {3, 0}}, {0, 0}, 1e-9);
    CHECK(h0.means[0][0] == doctest::Approx(2.0));
    CHECK(h0.means[0][1] == doctest::Approx(0.0));

    // two classes, Sigma = 0.5 I by direct evaluation
    auto h = detector::fit_head({{0, 0}, {2, 0}, {0, 2}, {0, 4}}, {0, 0, 1, 1}, 0.0);
    CHECK(h.means[0] == std::vector<double>{1, 0});
    CHECK(h.means[1] == std::vector<double>{0, 3});
    CHECK(h.covariance[0] == doctest::Approx(0.5));
    CHECK(h.covariance[1] == doctest::Approx(0.0));
    CHECK(h.covariance[2] == doctest::Approx(0.0));
    CHECK(h.covariance[3] == doctest::Approx(0.5));
    CHECK(h.total == 4);
    CHECK(h.class_counts == std::vector<std::size_t>{2, 2});
}

TEST_CASE("fit_head: degenerate covariance needs the ridge") {
    // one sample per class: Sigma is the zero matrix
    CHECK_THROWS_WITH_AS((void)detector::fit_head({{1, 0}, {0, 1}}, {0, 1}, 0.0),
                         doctest::Contains("positive definite"), std::runtime_error);
    auto h = detector::fit_head({{1, 0}, {0, 1}}, {0, 1}, 1e-6);
    CHECK(h.ridge == 1e-6);
    for (std::size_t i = 0; i < 4; ++i) CHECK(h.covariance[i] == 0.0);
}

TEST_CASE("fit_head: referenced class with zero samples is an error") {
    CHECK_THROWS_WITH_AS((void)detector::fit_head({{1, 0}, {2, 0}}, {0, 0}, 1e-9, 2),
                         doctest::Contains("zero samples"), std::invalid_argument);
    CHECK_NOTHROW((void)detector::fit_head({{1, 0}, {2, 1}}, {0, 1}, 1e-9, 2));
}

TEST_CASE("fit_head matches the brute-force double loop on random data") {
    Rng rng(101);
    for (int inst = 0; inst < 30; ++inst) {
        std::size_t d = 1 + rng.below(8);
        std::size_t classes = 1 + rng.below(5);
        std::size_t n = classes + rng.below(200 - classes);
        std::vector<std::vector<double>> feats(n, std::vector<double>(d));
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = i < classes ? static_cast<int>(i)  // every class present
                                    : static_cast<int>(rng.below(classes));
            for (double& v : feats[i]) v = rng.uniform(-5, 5);
        }
        auto head = detector::fit_head(feats, labels, 1e-3);
        auto brute = oracles::brute_moments(feats, labels);
        REQUIRE(head.class_ids == brute.class_ids);
        for (std::size_t c = 0; c < brute.means.size(); ++c)
            for (std::size_t j = 0; j < d; ++j)
                CHECK(head.means[c][j] == doctest::Approx(brute.means[c][j]).epsilon(1e-10));
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t s = 0; s < d; ++s)
                CHECK(head.covariance[r * d + s] ==
                      doctest::Approx(brute.covariance[r][s]).epsilon(1e-10));
    }
}

TEST_CASE("confidence: worked examples") {
    auto h = unit_head({0.0, 0.0});
    CHECK(h.confidence({0.0, 0.0}) == 0.0);
    CHECK(h.confidence({3.0, 4.0}) == doctest::Approx(-25.0));

    // closest class wins the max
    auto two = GaussianHead::from_moments({1, 2}, {{0, 0}, {10, 0}}, identity_matrix(2), 0.0, {1, 1});
    CHECK(two.confidence({1.0, 0.0}) == doctest::Approx(-1.0));
    CHECK(two.closest_class({1.0, 0.0}) == 1);
    CHECK(two.closest_class({9.0, 0.0}) == 2);
}

TEST_CASE("confidence via Cholesky matches the explicit-inverse oracle") {
    Rng rng(202);
    for (int inst = 0; inst < 30; ++inst) {
        std::size_t d = 1 + rng.below(8);
        std::size_t classes = 1 + rng.below(5);
        auto head = random_head(rng, d, classes, 1e-8);
        std::vector<std::vector<double>> means_vec;
        for (const auto& m : head.means) means_vec.push_back(m);
        std::vector<std::vector<double>> cov(d, std::vector<double>(d));
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t s = 0; s < d; ++s) cov[r][s] = head.covariance[r * d + s];
        for (int k = 0; k < 5; ++k) {
            std::vector<double> f(d);
            for (double& v : f) v = rng.uniform(-4, 4);
            double got = head.confidence(f);
            double want = oracles::brute_confidence(f, means_vec, cov, head.ridge);
            CHECK(got == doctest::Approx(want).epsilon(1e-8));
        }
    }
}

TEST_CASE("confidence is never positive; zero exactly at a class mean") {
    Rng rng(303);
    for (int inst = 0; inst < 40; ++inst) {
        std::size_t d = 1 + rng.below(6);
        auto head = random_head(rng, d, 1 + rng.below(4));
        std::vector<double> f(d);
        for (double& v : f) v = rng.uniform(-10, 10);
        CHECK(head.confidence(f) < 0.0);  // almost surely off every mean
        CHECK(head.confidence(head.means[rng.below(head.means.size())]) == 0.0);
    }
}

TEST_CASE("confidence: translation equivariance") {
    Rng rng(404);
    for (int inst = 0; inst < 20; ++inst) {
        std::size_t d = 2 + rng.below(5);
        auto head = random_head(rng, d, 2);
        std::vector<double> t(d), f(d);
        for (double& v : t) v = rng.uniform(-5, 5);
        for (double& v : f) v = rng.uniform(-3, 3);

        auto shifted_means = head.means;
        for (auto& mu : shifted_means)
            for (std::size_t j = 0; j < d; ++j) mu[j] += t[j];
        auto shifted = GaussianHead::from_moments(head.class_ids, shifted_means, head.covariance,
                                                  head.ridge, head.class_counts);
        std::vector<double> fs(d);
        for (std::size_t j = 0; j < d; ++j) fs[j] = f[j] + t[j];
        CHECK(shifted.confidence(fs) == doctest::Approx(head.confidence(f)).epsilon(1e-10));
    }
}

TEST_CASE("covariance asymmetry beyond tolerance is rejected") {
    std::vector<double> cov = {1.0, 0.5, 0.5 + 1e-8, 1.0};
    CHECK_THROWS_WITH_AS(
        (void)GaussianHead::from_moments({0}, {{0, 0}}, cov, 0.0, {1}),
        doctest::Contains("asymmetric"), std::invalid_argument);
}

TEST_CASE("retrain_encoder: zero learning rate keeps the classifier prefix") {
    ModelSpec spec = mlp({2, 8, 3});
    Network classifier = nets::build(spec, 5);
    nets::SurgeryPlan plan{1, nets::mirror_decoder_spec(spec, 1)};
    detector::RetrainConfig cfg;
    cfg.steps = 1;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 4;
    cfg.seed = 9;

    ad::Tensor data = ad::Tensor({4, 2}, {0.1, 0.2, -0.3, 0.4, 0.9, -0.8, 0.0, 0.5});
    auto result = detector::retrain_encoder(classifier, plan, cfg, data);
    CHECK(result.encoder.kind() == nets::NetworkKind::encoder);
    CHECK(result.encoder.params()[0].value.data == classifier.params()[0].value.data);
    CHECK(result.encoder.params()[1].value.data == classifier.params()[1].value.data);
    CHECK(result.loss_trace.size() == 1);
}

TEST_CASE("retrain_encoder: the classifier is never mutated") {
    ModelSpec spec = mlp({2, 8, 3});
    Network classifier = nets::build(spec, 5);
    Network before = nets::duplicate(classifier);
    nets::SurgeryPlan plan{1, nets::mirror_decoder_spec(spec, 1)};
    detector::RetrainConfig cfg;
    cfg.steps = 25;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 3;
    cfg.seed = 9;
    Rng rng(77);
    ad::Tensor data = ad::Tensor::zeros({10, 2});
    for (double& v : data.data) v = rng.uniform(-1, 1);

    auto result = detector::retrain_encoder(classifier, plan, cfg, data);
    CHECK(classifier.params_equal(before));
    CHECK(result.loss_trace.size() == 25);
    // encoder did move
    CHECK(result.encoder.params()[0].value.data != classifier.params()[0].value.data);
}

TEST_CASE("retrain_encoder: empty data and bad steps rejected") {
    ModelSpec spec = mlp({2, 4, 2});
    Network classifier = nets::build(spec, 1);
    nets::SurgeryPlan plan{1, nets::mirror_decoder_spec(spec, 1)};
    detector::RetrainConfig cfg;
    cfg.steps = 0;
    ad::Tensor data = ad::Tensor::zeros({4, 2});
    CHECK_THROWS_AS((void)detector::retrain_encoder(classifier, plan, cfg, data),
                    std::invalid_argument);
    cfg.steps = 1;
    CHECK_THROWS_WITH_AS((void)detector::retrain_encoder(classifier, plan, cfg, ad::Tensor{}),
                         doctest::Contains("empty"), std::invalid_argument);
}

TEST_CASE("retrain_encoder: linear 1-d autoencoder matches hand-derived descent") {
    // classifier: 1 -> 1 -> 2, all linear; severed after the first layer the
    // coupled model is x_hat = v (w x + b1) + b2
    ModelSpec spec = mlp({1, 1, 2}, Activation::none);
    spec.layers[0].act = Activation::none;
    Network classifier = nets::build(spec, 42);
    nets::SurgeryPlan plan{1, nets::mirror_decoder_spec(spec, 1)};

    const std::size_t n = 6;
    ad::Tensor data({n, 1}, {0.5, -1.2, 0.8, 1.5, -0.3, 0.9});
    detector::RetrainConfig cfg;
    cfg.steps = 12;
    cfg.learning_rate = 0.05;
    cfg.batch_size = n;  // full batch: gradient independent of shuffling
    cfg.seed = 7;

    auto result = detector::retrain_encoder(classifier, plan, cfg, data);

    // independent recurrence: same init rule (documented), hand derivatives
    double w = classifier.params()[0].value.item();
    double b1 = classifier.params()[1].value.item();
    Rng init(7);  // decoder init stream: uniform(+-sqrt(6/(1+1)))
    double bound = std::sqrt(6.0 / 2.0);
    double v = init.uniform(-bound, bound);
    double b2 = 0.0;
    std::vector<double> trace;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        double loss = 0, gv = 0, gb2 = 0, gw = 0, gb1 = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double x = data.data[i];
            double hid = w * x + b1;
            double e = v * hid + b2 - x;
            loss += e * e;
            gv += 2 * e * hid;
            gb2 += 2 * e;
            gw += 2 * e * v * x;
            gb1 += 2 * e * v;
        }
        double m = static_cast<double>(n);
        trace.push_back(loss / m);
        v -= cfg.learning_rate * gv / m;
        b2 -= cfg.learning_rate * gb2 / m;
        w -= cfg.learning_rate * gw / m;
        b1 -= cfg.learning_rate * gb1 / m;
    }
    REQUIRE(result.loss_trace.size() == trace.size());
    for (std::size_t i = 0; i < trace.size(); ++i)
        CHECK(result.loss_trace[i] == doctest::Approx(trace[i]).epsilon(1e-9));
    // and the trace is non-increasing at this learning rate
    for (std::size_t i = 1; i < result.loss_trace.size(); ++i)
        CHECK(result.loss_trace[i] <= result.loss_trace[i - 1] + 1e-12);
    CHECK(result.encoder.params()[0].value.item() == doctest::Approx(w).epsilon(1e-9));
}

TEST_CASE("bundle confidence: worked 1-d example and thresholding") {
    DetectorBundle b = identity_bundle();
    ad::Tensor x0 = ad::Tensor::row({0.0});
    ad::Tensor x2 = ad::Tensor::row({2.0});

    CHECK(detector::confidence(b, x0) == 0.0);
    CHECK(detector::confidence(b, x2) == doctest::Approx(-4.0));

    CHECK(detector::is_in_distribution(b, x0, -1.0));
    CHECK_FALSE(detector::is_in_distribution(b, x2, -1.0));
    // score is bounded above by zero, so a positive threshold rejects everything
    CHECK_FALSE(detector::is_in_distribution(b, x0, 1.0));
}

TEST_CASE("is_in_distribution is monotone non-increasing in the threshold") {
    DetectorBundle b = identity_bundle();
    Rng rng(55);
    for (int i = 0; i < 20; ++i) {
        ad::Tensor x = ad::Tensor::row({rng.uniform(-3, 3)});
        bool prev = true;
        for (double t : {-9.0, -4.0, -1.0, -0.25, 0.0, 1.0}) {
            bool now = detector::is_in_distribution(b, x, t);
            CHECK((prev || !now));  // once false it stays false as t grows
            prev = now;
        }
    }
}

TEST_CASE("preprocess_input: analytic 1-d gradient") {
    DetectorBundle b = identity_bundle();
    // C(x) = -x^2, grad at x=2 is -4, so the step moves against x
    double eps = 0.125;
    ad::Tensor shifted = detector::preprocess_input(b, ad::Tensor::row({2.0}), eps);
    CHECK(shifted.data[0] == doctest::Approx(2.0 - eps));
    CHECK(detector::confidence(b, shifted) > detector::confidence(b, ad::Tensor::row({2.0})));

    CHECK_THROWS_AS((void)detector::preprocess_input(b, ad::Tensor::row({2.0}), 0.0),
                    std::invalid_argument);

    // continuity: the perturbed input stays within eps (plus rounding) of x
    for (double e : {1e-3, 1e-6, 1e-9}) {
        ad::Tensor x = detector::preprocess_input(b, ad::Tensor::row({2.0}), e);
        CHECK(std::abs(x.data[0] - 2.0) <= e + 1e-15);
    }
}

TEST_CASE("preprocess raises mean confidence on in-distribution blobs") {
    auto blobs = data::gen_blobs(2, 40, {{0, 0}, {3, 3}}, 0.4, 11);
    ModelSpec spec = mlp({2, 8, 2});
    Network classifier = nets::build(spec, 3);

    detector::BundleConfig cfg;
    cfg.retrain.steps = 10;
    cfg.retrain.learning_rate = 0.02;
    cfg.retrain.seed = 4;
    cfg.sever_at = 1;
    auto built = detector::build_bundle(classifier, cfg, blobs.features, blobs.features, blobs.labels);

    double plain = 0.0, shifted = 0.0;
    double eps = 0.01;
    for (std::size_t i = 0; i < blobs.size(); ++i) {
        ad::Tensor x = blobs.row(i);
        plain += detector::confidence(built.bundle, x);
        shifted += detector::confidence(built.bundle, detector::preprocess_input(built.bundle, x, eps));
    }
    CHECK(shifted >= plain);
}

TEST_CASE("build_bundle: structure, determinism, and mode variants") {
    auto blobs = data::gen_blobs(3, 30, {{0, 0}, {4, 0}, {0, 4}}, 0.5, 21);
    ModelSpec spec = mlp({2, 16, 8, 3});
    Network classifier = nets::build(spec, 31);
    Network before = nets::duplicate(classifier);

    detector::BundleConfig cfg;
    cfg.retrain.steps = 10;
    cfg.retrain.learning_rate = 0.01;
    cfg.retrain.seed = 41;
    cfg.sever_at = 2;

    auto r1 = detector::build_bundle(classifier, cfg, blobs.features, blobs.features, blobs.labels);
    CHECK(r1.bundle.taps == std::vector<std::string>{"embed"});
    CHECK(r1.bundle.heads.size() == 1);
    CHECK(r1.bundle.heads.at("embed").class_ids == std::vector<int>{0, 1, 2});
    CHECK(r1.bundle.ensemble_weights.at("embed") == 1.0);
    CHECK(r1.loss_trace.size() == 10);
    CHECK(classifier.params_equal(before));

    auto r2 = detector::build_bundle(classifier, cfg, blobs.features, blobs.features, blobs.labels);
    CHECK(r1.bundle.encoder.params_equal(r2.bundle.encoder));

    cfg.mode = detector::EncoderMode::no_retrain;
    auto r3 = detector::build_bundle(classifier, cfg, blobs.features, blobs.features, blobs.labels);
    CHECK(r3.loss_trace.empty());
    CHECK(r3.bundle.encoder.params()[0].value.data == classifier.params()[0].value.data);

    cfg.mode = detector::EncoderMode::vanilla_ae;
    auto r4 = detector::build_bundle(classifier, cfg, blobs.features, blobs.features, blobs.labels);
    CHECK(r4.bundle.encoder.params()[0].value.data != classifier.params()[0].value.data);
    CHECK(r4.loss_trace.size() == 10);
}

TEST_CASE("multi-tap ensemble: weighted sum of per-tap confidences") {
    ModelSpec spec = mlp({2, 4, 4, 2});
    spec.tap_points.push_back({"a", 0});
    spec.tap_points.push_back({"b", 1});
    auto blobs = data::gen_blobs(2, 25, {{0, 0}, {3, 0}}, 0.4, 1);
    Network classifier = nets::build(spec, 2);

    detector::BundleConfig cfg;
    cfg.retrain.steps = 5;
    cfg.retrain.seed = 3;
    cfg.sever_at = 2;
    cfg.taps = {"a", "b"};
    auto built = detector::build_bundle(classifier, cfg, blobs.features, blobs.features, blobs.labels);
    CHECK(built.bundle.ensemble_weights.at("a") == doctest::Approx(0.5));
    CHECK(built.bundle.ensemble_weights.at("b") == doctest::Approx(0.5));

    ad::Tensor x = blobs.row(0);
    auto feats = nets::extract_features(built.bundle.encoder, x, {"a", "b"});
    double expect = 0.5 * built.bundle.heads.at("a").confidence(feats.at("a").data) +
                    0.5 * built.bundle.heads.at("b").confidence(feats.at("b").data);
    CHECK(detector::confidence(built.bundle, x) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(detector::confidence(built.bundle, x) <= 0.0);
}

TEST_CASE("bundle: save/load round trip and integrity") {
    TempDir dir;
    auto blobs = data::gen_blobs(2, 20, {{0, 0}, {3, 3}}, 0.5, 7);
    ModelSpec spec = mlp({2, 8, 2});
    Network classifier = nets::build(spec, 8);
    detector::BundleConfig cfg;
    cfg.retrain.steps = 5;
    cfg.retrain.seed = 6;
    cfg.sever_at = 1;
    cfg.preprocess_epsilon = 0.005;
    auto built = detector::build_bundle(classifier, cfg, blobs.features, blobs.features, blobs.labels);

    std::string path = dir.file("bundle.bin");
    detector::save_bundle(built.bundle, path);
    auto loaded = detector::load_bundle(path);

    CHECK(loaded.encoder.params_equal(built.bundle.encoder));
    CHECK(loaded.frozen_classifier.params_equal(built.bundle.frozen_classifier));
    CHECK(loaded.taps == built.bundle.taps);
    CHECK(loaded.preprocess_epsilon == built.bundle.preprocess_epsilon);
    const auto& ha = built.bundle.heads.at("embed");
    const auto& hb = loaded.heads.at("embed");
    CHECK(ha.means == hb.means);
    CHECK(ha.covariance == hb.covariance);
    CHECK(ha.ridge == hb.ridge);
    CHECK(ha.class_counts == hb.class_counts);

    ad::Tensor x = blobs.row(3);
    CHECK(detector::score(loaded, x) == detector::score(built.bundle, x));

    auto bytes = io::read_file(path);
    bytes[bytes.size() - 6] ^= 0x55;
    io::atomic_write_file(dir.file("corrupt.bin"), bytes);
    CHECK_THROWS_WITH_AS((void)detector::load_bundle(dir.file("corrupt.bin")),
                         doctest::Contains("checksum"), std::runtime_error);
}

TEST_CASE("detector scoring is pure and thread-safe after fitting") {
    auto blobs = data::gen_blobs(2, 20, {{0, 0}, {3, 3}}, 0.5, 7);
    ModelSpec spec = mlp({2, 8, 2});
    Network classifier = nets::build(spec, 8);
    detector::BundleConfig cfg;
    cfg.retrain.steps = 5;
    cfg.retrain.seed = 6;
    cfg.sever_at = 1;
    auto built = detector::build_bundle(classifier, cfg, blobs.features, blobs.features, blobs.labels);
    const auto& bundle = built.bundle;

    std::vector<double> expected;
    for (std::size_t i = 0; i < 8; ++i) expected.push_back(detector::confidence(bundle, blobs.row(i)));

    std::vector<std::thread> threads;
    std::vector<int> ok(4, 0);
    for (int t = 0; t < 4; ++t)
        threads.emplace_back([&, t] {
            for (int rep = 0; rep < 25; ++rep)
                for (std::size_t i = 0; i < 8; ++i)
                    if (detector::confidence(bundle, blobs.row(i)) != expected[i]) return;
            ok[t] = 1;
        });
    for (auto& th : threads) th.join();
    for (int v : ok) CHECK(v == 1);
}
