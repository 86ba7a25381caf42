#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "m2d/tensor.hpp"

namespace m2d::ad {

// One node of a define-by-run graph. Forward execution builds the node chain
// and keeps every intermediate activation alive; backward() replays it in
// reverse topological order. Graphs are single-threaded; independent graphs
// may live on different threads.
struct Var {
    Tensor value;
    std::vector<double> grad;  // lazily sized to value.numel()
    bool requires_grad = false;
    std::vector<std::shared_ptr<Var>> parents;
    std::function<void(Var&)> backprop;  // scatter this->grad into parents

    void ensure_grad() {
        if (grad.size() != value.numel()) grad.assign(value.numel(), 0.0);
    }
};

using VarPtr = std::shared_ptr<Var>;

VarPtr leaf(Tensor value, bool requires_grad = false);
inline VarPtr constant(Tensor value) { return leaf(std::move(value), false); }

// x:[B,in] w:[out,in] b:[out] -> [B,out]
VarPtr dense(const VarPtr& x, const VarPtr& w, const VarPtr& b);
// x:[B,C,H,W] k:[O,C,kh,kw] b:[O], valid padding -> [B,O,H',W']
VarPtr conv2d(const VarPtr& x, const VarPtr& k, const VarPtr& b, std::size_t stride);
VarPtr relu(const VarPtr& x);
VarPtr tanh_act(const VarPtr& x);
VarPtr reshape(const VarPtr& x, Shape target);
VarPtr add(const VarPtr& a, const VarPtr& b);
VarPtr scale(const VarPtr& x, double c);
// [B,C,H,W] -> [B,C], mean over the spatial extent of each channel
VarPtr channel_mean_pool(const VarPtr& x);
// Fused log-sum-exp softmax + negative log-likelihood, mean over the batch.
VarPtr softmax_cross_entropy(const VarPtr& logits, const std::vector<int>& labels);
// Mean squared difference over all elements.
VarPtr mean_squared_error(const VarPtr& pred, const VarPtr& target);
// Per-element binary cross-entropy on sigmoid(logits) against targets in [0,1],
// mean over all elements; evaluated in the numerically stable logit form.
VarPtr sigmoid_bce(const VarPtr& logits, const VarPtr& target);

// Extension point for composite ops (e.g. the Mahalanobis scoring head).
// Checks the value for non-finite entries and wires up the node.
VarPtr make_op(Tensor value, std::vector<VarPtr> parents, std::function<void(Var&)> backprop,
               const char* op_name);

// Reverse pass from a scalar loss. Gradients accumulate into every node of
// the graph; leaves keep theirs until the next backward.
void backward(const VarPtr& loss);

// Plain softmax for inference-time scoring (not a graph op).
std::vector<double> softmax(const std::vector<double>& logits);

struct Parameter {
    std::string name;
    Tensor value;
};

struct OptimizerState {
    double learning_rate;
    std::uint64_t step_count = 0;
};

// name -> flat gradient, same element count as the parameter
using GradientMap = std::map<std::string, std::vector<double>>;

// w' = w - lr * g, elementwise. Every parameter must have an entry in grads.
void sgd_step(std::vector<Parameter>& params, const GradientMap& grads, OptimizerState& state);

}  // namespace m2d::ad
