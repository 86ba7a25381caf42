#include "m2d/baselines.hpp"

#include <algorithm>
#include <stdexcept>

namespace m2d::baselines {

namespace {

void require_single_sample(const ad::Tensor& x) {
    if (x.shape.empty() || x.shape[0] != 1)
        throw std::invalid_argument("baseline scoring expects a single sample, got " +
                                    ad::shape_str(x.shape));
}

}  // namespace

double msp_score(const nets::Network& classifier, const ad::Tensor& x, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("msp_score: temperature must be > 0");
    require_single_sample(x);
    ad::Tensor logits = classifier.predict(x);
    std::vector<double> scaled(logits.data);
    for (double& v : scaled) v /= temperature;
    std::vector<double> probs = ad::softmax(scaled);
    return *std::max_element(probs.begin(), probs.end());
}

double odin_score(const nets::Network& classifier, const ad::Tensor& x, const BaselineConfig& cfg) {
    if (!(cfg.temperature > 0.0)) throw std::invalid_argument("odin_score: temperature must be > 0");
    if (cfg.epsilon < 0.0) throw std::invalid_argument("odin_score: epsilon must be >= 0");
    require_single_sample(x);
    if (cfg.epsilon == 0.0) return msp_score(classifier, x, cfg.temperature);

    // log max softmax_T(x) = -cross_entropy(logits/T, argmax); backprop gives
    // the input direction that raises the top-class probability.
    nets::ForwardGraph g = classifier.forward(x, /*input_requires_grad=*/true);
    ad::VarPtr scaled = ad::scale(g.output, 1.0 / cfg.temperature);
    const auto& z = scaled->value.data;
    int arg = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    ad::VarPtr nll = ad::softmax_cross_entropy(scaled, {arg});
    ad::VarPtr log_msp = ad::scale(nll, -1.0);
    ad::backward(log_msp);

    const std::vector<double>& gin = g.input->grad;
    if (gin.size() != x.numel()) throw std::runtime_error("odin_score: missing input gradient");
    ad::Tensor shifted = x;
    for (std::size_t i = 0; i < shifted.data.size(); ++i) {
        double s = gin[i] > 0.0 ? 1.0 : (gin[i] < 0.0 ? -1.0 : 0.0);
        shifted.data[i] = x.data[i] + cfg.epsilon * s;
    }
    ad::check_finite(shifted, "odin_score");
    return msp_score(classifier, shifted, cfg.temperature);
}

}  // namespace m2d::baselines
