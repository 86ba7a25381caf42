#pragma once

#include "m2d/nets.hpp"
#include "m2d/tensor.hpp"

namespace m2d::baselines {

struct BaselineConfig {
    double temperature = 1000.0;  // softmax temperature T
    double epsilon = 0.001;       // perturbation magnitude; 0 disables it
};

// max_c softmax(logits(x)/T)_c, in (0,1].
double msp_score(const nets::Network& classifier, const ad::Tensor& x, double temperature);

// Temperature-scaled max softmax after a signed-gradient input perturbation
// toward higher confidence. With epsilon 0 this is exactly msp_score.
double odin_score(const nets::Network& classifier, const ad::Tensor& x, const BaselineConfig& cfg);

}  // namespace m2d::baselines
