#include <doctest.h>

#include <cmath>

#include "m2d/baselines.hpp"
#include "m2d/data.hpp"
#include "m2d/eval.hpp"
#include "m2d/nets.hpp"
#include "m2d/rng.hpp"

using namespace m2d;
using nets::Activation;
using nets::LayerDesc;
using nets::ModelSpec;
using nets::Network;

namespace {

// a net whose logits are fixed regardless of input: zero weights, bias = logits
Network fixed_logits(std::vector<double> logits) {
    std::size_t k = logits.size();
    ModelSpec spec;
    LayerDesc l;
    l.in_dim = 1;
    l.out_dim = k;
    l.act = Activation::none;
    spec.layers.push_back(l);
    Network net = nets::build(spec, 1);
    net.params()[0].value = ad::Tensor::zeros({k, 1});
    net.params()[1].value = ad::Tensor({k}, std::move(logits));
    return net;
}

Network random_net(std::uint64_t seed, std::size_t in, std::size_t k) {
    ModelSpec spec;
    LayerDesc a;
    a.in_dim = in;
    a.out_dim = 8;
    a.act = Activation::tanh;
    spec.layers.push_back(a);
    LayerDesc b;
    b.in_dim = 8;
    b.out_dim = k;
    b.act = Activation::none;
    spec.layers.push_back(b);
    return nets::build(spec, seed);
}

}  // namespace

TEST_CASE("msp_score: worked values") {
    ad::Tensor x = ad::Tensor::row({0.0});
    CHECK(baselines::msp_score(fixed_logits({1000, 0}), x, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(baselines::msp_score(fixed_logits({0, 0, 0, 0}), x, 1.0) == doctest::Approx(0.25));
    CHECK(baselines::msp_score(fixed_logits({0, 0, 0, 0}), x, 123.0) == doctest::Approx(0.25));
    // direct softmax evaluation oracle
    double expect = std::exp(2.0) / (std::exp(2.0) + std::exp(1.0));
    CHECK(baselines::msp_score(fixed_logits({2, 1}), x, 1.0) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.7311).epsilon(1e-4));

    CHECK_THROWS_AS((void)baselines::msp_score(fixed_logits({0, 1}), x, 0.0), std::invalid_argument);
}

TEST_CASE("msp_score: bounds and shift invariance on random instances") {
    Rng rng(61);
    for (int i = 0; i < 100; ++i) {
        std::size_t k = 2 + rng.below(6);
        Network net = random_net(1000 + i, 3, k);
        ad::Tensor x = ad::Tensor::zeros({1, 3});
        for (double& v : x.data) v = rng.uniform(-2, 2);
        double s = baselines::msp_score(net, x, 1.0);
        CHECK(s > 0.0);
        CHECK(s <= 1.0);
        CHECK(s >= 1.0 / static_cast<double>(k) - 1e-12);

        // shifting every logit by a constant (via the output bias) is a no-op
        double shift = rng.uniform(-50, 50);
        Network shifted = nets::duplicate(net);
        for (double& v : shifted.params()[3].value.data) v += shift;
        CHECK(baselines::msp_score(shifted, x, 1.0) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("msp_score approaches uniform as the temperature grows") {
    Rng rng(62);
    for (int i = 0; i < 20; ++i) {
        std::size_t k = 2 + rng.below(5);
        Network net = random_net(2000 + i, 2, k);
        ad::Tensor x = ad::Tensor::zeros({1, 2});
        for (double& v : x.data) v = rng.uniform(-2, 2);
        double s = baselines::msp_score(net, x, 1e6);
        CHECK(std::abs(s - 1.0 / static_cast<double>(k)) <= 1e-4);
    }
}

TEST_CASE("odin_score: epsilon 0 reduces to msp exactly") {
    Rng rng(63);
    for (int i = 0; i < 25; ++i) {
        Network net = random_net(3000 + i, 3, 4);
        ad::Tensor x = ad::Tensor::zeros({1, 3});
        for (double& v : x.data) v = rng.uniform(-2, 2);
        baselines::BaselineConfig cfg{1.0, 0.0};
        CHECK(baselines::odin_score(net, x, cfg) == baselines::msp_score(net, x, 1.0));
        cfg.temperature = 1000.0;
        CHECK(baselines::odin_score(net, x, cfg) == baselines::msp_score(net, x, 1000.0));
    }
}

TEST_CASE("odin_score: perturbation raises the top-class probability") {
    Rng rng(64);
    int raised = 0, total = 0;
    for (int i = 0; i < 30; ++i) {
        Network net = random_net(4000 + i, 4, 3);
        ad::Tensor x = ad::Tensor::zeros({1, 4});
        for (double& v : x.data) v = rng.uniform(-1, 1);
        baselines::BaselineConfig cfg{1.0, 0.01};
        double with = baselines::odin_score(net, x, cfg);
        double without = baselines::msp_score(net, x, 1.0);
        total += 1;
        if (with >= without - 1e-12) raised += 1;
    }
    // signed-gradient ascent on a smooth score: expect nearly all to rise
    CHECK(raised >= total - 2);
}

TEST_CASE("odin auroc is reproducible bit-for-bit per seed") {
    auto run = [] {
        auto in = data::gen_blobs(2, 30, {{0, 0}, {3, 0}}, 0.5, 5);
        auto out = data::gen_ood_blob({8, 8}, 30, 0.5, 6);
        Network net = random_net(77, 2, 2);
        baselines::BaselineConfig cfg{1000.0, 0.001};
        eval::Scorer scorer = [&](const ad::Tensor& x) { return baselines::odin_score(net, x, cfg); };
        eval::ScoredSet s{eval::score_rows(scorer, in.features), eval::score_rows(scorer, out.features)};
        return eval::auroc(s);
    };
    double a = run(), b = run();
    CHECK(a == b);
}
