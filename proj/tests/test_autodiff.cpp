#include <doctest.h>

#include <cmath>

#include "m2d/autodiff.hpp"
#include "m2d/rng.hpp"
#include "oracles.hpp"

using namespace m2d;
using ad::Tensor;
using ad::VarPtr;

namespace {

Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

std::vector<double> random_coeffs(std::size_t n, Rng& rng) {
    std::vector<double> c(n);
    for (double& v : c) v = rng.uniform(-1.0, 1.0);
    return c;
}

// keeps relu inputs away from the kink so finite differences are valid
Tensor random_tensor_off_zero(ad::Shape shape, Rng& rng) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (double& v : t.data)
        if (std::abs(v) < 1e-2) v += v >= 0.0 ? 2e-2 : -2e-2;
    return t;
}

}  // namespace

TEST_CASE("forward: identity and definition cases") {
    // identity dense: W = I, b = 0
    auto x = ad::leaf(Tensor::row({3, 4}));
    auto w = ad::leaf(Tensor({2, 2}, {1, 0, 0, 1}));
    auto b = ad::leaf(Tensor({2}, {0, 0}));
    auto y = ad::dense(x, w, b);
    CHECK(y->value.data[0] == doctest::Approx(3.0));
    CHECK(y->value.data[1] == doctest::Approx(4.0));

    auto r = ad::relu(ad::leaf(Tensor::row({-1, 2})));
    CHECK(r->value.data[0] == 0.0);
    CHECK(r->value.data[1] == 2.0);

    // identity graph: reshape only
    auto id = ad::reshape(ad::leaf(Tensor::row({1, 2})), {2});
    CHECK(id->value.data == std::vector<double>{1, 2});
}

TEST_CASE("forward: shape mismatch raises") {
    auto x = ad::leaf(Tensor::row({1, 2, 3}));
    auto w = ad::leaf(Tensor({2, 2}, {1, 0, 0, 1}));
    auto b = ad::leaf(Tensor({2}, {0, 0}));
    CHECK_THROWS_AS((void)ad::dense(x, w, b), std::invalid_argument);
    CHECK_THROWS_AS((void)ad::add(x, ad::leaf(Tensor::row({1, 2}))), std::invalid_argument);
}

TEST_CASE("forward: non-finite values are rejected") {
    auto x = ad::leaf(Tensor::row({1e308}));
    auto w = ad::leaf(Tensor({1, 1}, {1e308}));
    auto b = ad::leaf(Tensor({1}, {0}));
    CHECK_THROWS_WITH_AS((void)ad::dense(x, w, b), doctest::Contains("non-finite"),
                         std::runtime_error);
}

TEST_CASE("backward: analytic derivative of w^2") {
    auto w = ad::leaf(Tensor::scalar(3.0), true);
    auto w2d = ad::reshape(w, {1, 1});
    // w^2 via mse against 0 on a 1-element tensor: (w-0)^2
    auto loss = ad::mean_squared_error(w2d, ad::constant(Tensor({1, 1}, {0.0})));
    ad::backward(loss);
    CHECK(loss->value.item() == doctest::Approx(9.0));
    CHECK(w->grad[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: relu subgradient is 0 on the negative side") {
    auto w = ad::leaf(Tensor::row({-1, 2}), true);
    auto r = ad::relu(w);
    auto loss = oracles::project(r, {1.0, 1.0});  // sum
    ad::backward(loss);
    CHECK(w->grad[0] == 0.0);
    CHECK(w->grad[1] == 1.0);
}

TEST_CASE("backward: loss must be scalar and graphs check gradients finite") {
    auto x = ad::leaf(Tensor::row({1, 2}), true);
    CHECK_THROWS_AS(ad::backward(x), std::invalid_argument);
}

TEST_CASE("backward: random 2-layer mlp matches finite differences") {
    Rng rng(20240601);
    for (int inst = 0; inst < 5; ++inst) {
        Tensor x = random_tensor({2, 3}, rng);
        Tensor w1 = random_tensor({4, 3}, rng);
        Tensor b1 = random_tensor({4}, rng);
        Tensor w2 = random_tensor({2, 4}, rng);
        Tensor b2 = random_tensor({2}, rng);
        std::vector<int> labels = {static_cast<int>(rng.below(2)), static_cast<int>(rng.below(2))};
        auto fn = [&](const std::vector<VarPtr>& in) {
            auto h = ad::tanh_act(ad::dense(in[0], in[1], in[2]));
            auto logits = ad::dense(h, in[3], in[4]);
            return ad::softmax_cross_entropy(logits, labels);
        };
        CHECK_NOTHROW(oracles::check_gradients(fn, {x, w1, b1, w2, b2}));
    }
}

TEST_CASE("gradient check: every op against central differences") {
    Rng rng(7);
    const int instances = 10;

    for (int i = 0; i < instances; ++i) {
        auto coeffs6 = random_coeffs(6, rng);
        // dense
        {
            Tensor x = random_tensor({2, 4}, rng), w = random_tensor({3, 4}, rng),
                   b = random_tensor({3}, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return oracles::project(ad::dense(in[0], in[1], in[2]), coeffs6);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {x, w, b}));
        }
        // conv2d, stride 1 and 2
        for (std::size_t stride : {1u, 2u}) {
            Tensor x = random_tensor({1, 2, 5, 5}, rng), k = random_tensor({2, 2, 3, 3}, rng),
                   b = random_tensor({2}, rng);
            std::size_t ho = (5 - 3) / stride + 1;
            auto cs = random_coeffs(2 * ho * ho, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return oracles::project(ad::conv2d(in[0], in[1], in[2], stride), cs);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {x, k, b}));
        }
        // relu / tanh / scale / add / reshape / channel_mean_pool
        {
            Tensor x = random_tensor_off_zero({2, 3}, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return oracles::project(ad::relu(in[0]), coeffs6);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {x}));
        }
        {
            Tensor x = random_tensor({2, 3}, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return oracles::project(ad::tanh_act(in[0]), coeffs6);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {x}));
        }
        {
            Tensor x = random_tensor({2, 3}, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return oracles::project(ad::scale(in[0], -1.7), coeffs6);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {x}));
        }
        {
            Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return oracles::project(ad::add(in[0], in[1]), coeffs6);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {a, b}));
        }
        {
            Tensor x = random_tensor({2, 3}, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return oracles::project(ad::reshape(in[0], {6}), coeffs6);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {x}));
        }
        {
            Tensor x = random_tensor({1, 3, 2, 2}, rng);
            auto cs = random_coeffs(3, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return oracles::project(ad::channel_mean_pool(in[0]), cs);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {x}));
        }
        // losses
        {
            Tensor z = random_tensor({2, 4}, rng);
            std::vector<int> labels = {static_cast<int>(rng.below(4)), static_cast<int>(rng.below(4))};
            auto fn = [&](const std::vector<VarPtr>& in) {
                return ad::softmax_cross_entropy(in[0], labels);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {z}));
        }
        {
            Tensor p = random_tensor({2, 3}, rng), t = random_tensor({2, 3}, rng);
            auto fn = [&](const std::vector<VarPtr>& in) {
                return ad::mean_squared_error(in[0], in[1]);
            };
            CHECK_NOTHROW(oracles::check_gradients(fn, {p, t}));
        }
        {
            Tensor z = random_tensor({2, 3}, rng);
            Tensor t = random_tensor({2, 3}, rng, 0.0, 1.0);
            auto fn = [&](const std::vector<VarPtr>& in) { return ad::sigmoid_bce(in[0], in[1]); };
            CHECK_NOTHROW(oracles::check_gradients(fn, {z, t}));
        }
    }
}

TEST_CASE("cross_entropy: values from direct softmax evaluation") {
    auto ce = [](std::vector<double> logits, int label) {
        std::size_t k = logits.size();
        auto z = ad::leaf(Tensor({1, k}, std::move(logits)));
        return ad::softmax_cross_entropy(z, {label})->value.item();
    };
    CHECK(ce({1000, 0}, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(ce({0, 0}, 0) == doctest::Approx(std::log(2.0)));
    // independent direct evaluation: -log(e^3 / (e^1 + e^2 + e^3))
    double expect = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
    CHECK(ce({1, 2, 3}, 2) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.4076).epsilon(1e-4));

    auto z = ad::leaf(Tensor({1, 2}, {0.0, 0.0}));
    CHECK_THROWS_AS((void)ad::softmax_cross_entropy(z, {2}), std::out_of_range);
    CHECK_THROWS_AS((void)ad::softmax_cross_entropy(z, {0, 1}), std::invalid_argument);
}

TEST_CASE("cross_entropy is non-negative on random instances") {
    Rng rng(99);
    for (int i = 0; i < 50; ++i) {
        Tensor z = random_tensor({3, 5}, rng, -20.0, 20.0);
        auto loss = ad::softmax_cross_entropy(
            ad::leaf(z), {static_cast<int>(rng.below(5)), static_cast<int>(rng.below(5)),
                          static_cast<int>(rng.below(5))});
        CHECK(loss->value.item() >= 0.0);
    }
}

TEST_CASE("mse: definition cases") {
    auto mse = [](std::vector<double> p, std::vector<double> t) {
        std::size_t n = p.size();
        return ad::mean_squared_error(ad::leaf(Tensor({1, n}, std::move(p))),
                                      ad::leaf(Tensor({1, n}, std::move(t))))
            ->value.item();
    };
    CHECK(mse({1, 2, 3}, {1, 2, 3}) == 0.0);
    CHECK(mse({0, 0}, {1, 1}) == doctest::Approx(1.0));
    CHECK(mse({1, 2, 3}, {0, 0, 0}) == doctest::Approx(14.0 / 3.0));
    CHECK_THROWS_AS((void)ad::mean_squared_error(ad::leaf(Tensor::row({1})),
                                                 ad::leaf(Tensor::row({1, 2}))),
                    std::invalid_argument);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        std::vector<double> z(4);
        for (double& v : z) v = rng.uniform(-30.0, 30.0);
        auto p = ad::softmax(z);
        double sum = 0.0;
        for (double v : p) sum += v;
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("sgd_step: update rule and edge cases") {
    std::vector<ad::Parameter> params;
    params.push_back({"w", Tensor::scalar(1.0)});
    ad::GradientMap grads{{"w", {0.5}}};
    ad::OptimizerState st{0.1, 0};
    ad::sgd_step(params, grads, st);
    CHECK(params[0].value.item() == doctest::Approx(0.95));
    CHECK(st.step_count == 1);

    // zero gradient is a fixed point
    grads["w"] = {0.0};
    ad::sgd_step(params, grads, st);
    CHECK(params[0].value.item() == doctest::Approx(0.95));
    CHECK(st.step_count == 2);

    // direct evaluation on a vector
    std::vector<ad::Parameter> p2;
    p2.push_back({"v", Tensor({2}, {2.0, -2.0})});
    ad::GradientMap g2{{"v", {1.0, -1.0}}};
    ad::OptimizerState st2{1.0, 0};
    ad::sgd_step(p2, g2, st2);
    CHECK(p2[0].value.data[0] == doctest::Approx(1.0));
    CHECK(p2[0].value.data[1] == doctest::Approx(-1.0));

    // missing gradient
    std::vector<ad::Parameter> p3;
    p3.push_back({"a", Tensor::scalar(1.0)});
    ad::GradientMap g3;
    ad::OptimizerState st3{0.1, 0};
    CHECK_THROWS_AS(ad::sgd_step(p3, g3, st3), std::invalid_argument);
}

TEST_CASE("sgd_step with zero learning rate is the identity") {
    Rng rng(3);
    std::vector<ad::Parameter> params;
    params.push_back({"w", random_tensor({3, 3}, rng)});
    auto before = params[0].value.data;
    ad::GradientMap grads{{"w", random_tensor({3, 3}, rng).data}};
    ad::OptimizerState st{0.0, 0};
    ad::sgd_step(params, grads, st);
    CHECK(params[0].value.data == before);
}

TEST_CASE("determinism: identical seeds give bit-identical passes") {
    auto run = [] {
        Rng rng(42);
        Tensor x = random_tensor({4, 3}, rng);
        Tensor w = random_tensor({2, 3}, rng);
        Tensor b = random_tensor({2}, rng);
        auto xl = ad::leaf(x), wl = ad::leaf(w, true), bl = ad::leaf(b, true);
        auto out = ad::tanh_act(ad::dense(xl, wl, bl));
        auto loss = ad::mean_squared_error(out, ad::constant(Tensor::zeros({4, 2})));
        ad::backward(loss);
        std::vector<ad::Parameter> params;
        params.push_back({"w", w});
        ad::GradientMap grads{{"w", wl->grad}};
        ad::OptimizerState st{0.05, 0};
        ad::sgd_step(params, grads, st);
        auto result = params[0].value.data;
        result.push_back(loss->value.item());
        return result;
    };
    CHECK(run() == run());
}

TEST_CASE("backward: parameters outside the graph keep zero gradients") {
    auto used = ad::leaf(Tensor::scalar(2.0), true);
    auto unused = ad::leaf(Tensor::scalar(5.0), true);
    auto loss = ad::mean_squared_error(ad::reshape(used, {1, 1}),
                                       ad::constant(Tensor({1, 1}, {0.0})));
    ad::backward(loss);
    CHECK(used->grad[0] == doctest::Approx(4.0));
    CHECK(unused->grad.empty());  // never touched; callers report it as zero
}
