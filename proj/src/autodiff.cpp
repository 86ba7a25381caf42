#include "m2d/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace m2d::ad {

VarPtr leaf(Tensor value, bool requires_grad) {
    auto v = std::make_shared<Var>();
    v->value = std::move(value);
    v->requires_grad = requires_grad;
    return v;
}

VarPtr make_op(Tensor value, std::vector<VarPtr> parents, std::function<void(Var&)> backprop,
               const char* op_name) {
    check_finite(value, op_name);
    auto v = std::make_shared<Var>();
    v->value = std::move(value);
    v->parents = std::move(parents);
    v->backprop = std::move(backprop);
    return v;
}

VarPtr dense(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
    const Shape& xs = x->value.shape;
    const Shape& ws = w->value.shape;
    const Shape& bs = b->value.shape;
    if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1)
        throw std::invalid_argument("dense: want x [B,in], w [out,in], b [out], got x " +
                                    shape_str(xs) + " w " + shape_str(ws) + " b " + shape_str(bs));
    std::size_t batch = xs[0], in = xs[1], out = ws[0];
    if (ws[1] != in || bs[0] != out)
        throw std::invalid_argument("dense: shape mismatch, x " + shape_str(xs) + " w " +
                                    shape_str(ws) + " b " + shape_str(bs));

    Tensor y = Tensor::zeros({batch, out});
    const auto& xd = x->value.data;
    const auto& wd = w->value.data;
    const auto& bd = b->value.data;
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < out; ++o) {
            double acc = bd[o];
            for (std::size_t i = 0; i < in; ++i) acc += xd[n * in + i] * wd[o * in + i];
            y.data[n * out + o] = acc;
        }

    VarPtr xc = x, wc = w, bc = b;
    return make_op(std::move(y), {x, w, b},
                     [xc, wc, bc, batch, in, out](Var& self) {
                         xc->ensure_grad();
                         wc->ensure_grad();
                         bc->ensure_grad();
                         const auto& g = self.grad;
                         const auto& xd = xc->value.data;
                         const auto& wd = wc->value.data;
                         for (std::size_t n = 0; n < batch; ++n)
                             for (std::size_t o = 0; o < out; ++o) {
                                 double go = g[n * out + o];
                                 bc->grad[o] += go;
                                 for (std::size_t i = 0; i < in; ++i) {
                                     xc->grad[n * in + i] += go * wd[o * in + i];
                                     wc->grad[o * in + i] += go * xd[n * in + i];
                                 }
                             }
                     },
                     "dense");
}

VarPtr conv2d(const VarPtr& x, const VarPtr& k, const VarPtr& b, std::size_t stride) {
    const Shape& xs = x->value.shape;
    const Shape& ks = k->value.shape;
    if (xs.size() != 4 || ks.size() != 4 || b->value.shape.size() != 1)
        throw std::invalid_argument("conv2d: want x [B,C,H,W], k [O,C,kh,kw], b [O], got x " +
                                    shape_str(xs) + " k " + shape_str(ks));
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    std::size_t batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
    std::size_t cout = ks[0], kh = ks[2], kw = ks[3];
    if (ks[1] != cin || b->value.shape[0] != cout)
        throw std::invalid_argument("conv2d: channel mismatch, x " + shape_str(xs) + " k " + shape_str(ks));
    if (kh > h || kw > w) throw std::invalid_argument("conv2d: kernel larger than input");
    std::size_t ho = (h - kh) / stride + 1;
    std::size_t wo = (w - kw) / stride + 1;

    Tensor y = Tensor::zeros({batch, cout, ho, wo});
    const auto& xd = x->value.data;
    const auto& kd = k->value.data;
    const auto& bd = b->value.data;
    auto xi = [&](std::size_t n, std::size_t c, std::size_t i, std::size_t j) {
        return ((n * cin + c) * h + i) * w + j;
    };
    auto ki = [&](std::size_t o, std::size_t c, std::size_t p, std::size_t q) {
        return ((o * cin + c) * kh + p) * kw + q;
    };
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t i = 0; i < ho; ++i)
                for (std::size_t j = 0; j < wo; ++j) {
                    double acc = bd[o];
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t p = 0; p < kh; ++p)
                            for (std::size_t q = 0; q < kw; ++q)
                                acc += xd[xi(n, c, i * stride + p, j * stride + q)] * kd[ki(o, c, p, q)];
                    y.data[((n * cout + o) * ho + i) * wo + j] = acc;
                }

    VarPtr xc = x, kc = k, bc = b;
    return make_op(std::move(y), {x, k, b},
                     [xc, kc, bc, stride, batch, cin, h, w, cout, kh, kw, ho, wo](Var& self) {
                         xc->ensure_grad();
                         kc->ensure_grad();
                         bc->ensure_grad();
                         const auto& g = self.grad;
                         const auto& xd = xc->value.data;
                         const auto& kd = kc->value.data;
                         auto xi = [&](std::size_t n, std::size_t c, std::size_t i, std::size_t j) {
                             return ((n * cin + c) * h + i) * w + j;
                         };
                         auto ki = [&](std::size_t o, std::size_t c, std::size_t p, std::size_t q) {
                             return ((o * cin + c) * kh + p) * kw + q;
                         };
                         for (std::size_t n = 0; n < batch; ++n)
                             for (std::size_t o = 0; o < cout; ++o)
                                 for (std::size_t i = 0; i < ho; ++i)
                                     for (std::size_t j = 0; j < wo; ++j) {
                                         double go = g[((n * cout + o) * ho + i) * wo + j];
                                         bc->grad[o] += go;
                                         for (std::size_t c = 0; c < cin; ++c)
                                             for (std::size_t p = 0; p < kh; ++p)
                                                 for (std::size_t q = 0; q < kw; ++q) {
                                                     std::size_t xpos = xi(n, c, i * stride + p, j * stride + q);
                                                     xc->grad[xpos] += go * kd[ki(o, c, p, q)];
                                                     kc->grad[ki(o, c, p, q)] += go * xd[xpos];
                                                 }
                                     }
                     },
                     "conv2d");
}

VarPtr relu(const VarPtr& x) {
    Tensor y = x->value;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    VarPtr xc = x;
    return make_op(std::move(y), {x},
                     [xc](Var& self) {
                         xc->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                             if (xc->value.data[i] > 0.0) xc->grad[i] += self.grad[i];
                     },
                     "relu");
}

VarPtr tanh_act(const VarPtr& x) {
    Tensor y = x->value;
    for (double& v : y.data) v = std::tanh(v);
    VarPtr xc = x;
    return make_op(std::move(y), {x},
                     [xc](Var& self) {
                         xc->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             double t = self.value.data[i];
                             xc->grad[i] += self.grad[i] * (1.0 - t * t);
                         }
                     },
                     "tanh");
}

VarPtr reshape(const VarPtr& x, Shape target) {
    if (shape_numel(target) != x->value.numel())
        throw std::invalid_argument("reshape: " + shape_str(x->value.shape) + " to " +
                                    shape_str(target) + " changes element count");
    Tensor y(std::move(target), x->value.data);
    VarPtr xc = x;
    return make_op(std::move(y), {x},
                     [xc](Var& self) {
                         xc->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) xc->grad[i] += self.grad[i];
                     },
                     "reshape");
}

VarPtr add(const VarPtr& a, const VarPtr& b) {
    if (a->value.shape != b->value.shape)
        throw std::invalid_argument("add: shape mismatch " + shape_str(a->value.shape) + " vs " +
                                    shape_str(b->value.shape));
    Tensor y = a->value;
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += b->value.data[i];
    VarPtr ac = a, bc = b;
    return make_op(std::move(y), {a, b},
                     [ac, bc](Var& self) {
                         ac->ensure_grad();
                         bc->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             ac->grad[i] += self.grad[i];
                             bc->grad[i] += self.grad[i];
                         }
                     },
                     "add");
}

VarPtr scale(const VarPtr& x, double c) {
    Tensor y = x->value;
    for (double& v : y.data) v *= c;
    VarPtr xc = x;
    return make_op(std::move(y), {x},
                     [xc, c](Var& self) {
                         xc->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) xc->grad[i] += c * self.grad[i];
                     },
                     "scale");
}

VarPtr channel_mean_pool(const VarPtr& x) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4)
        throw std::invalid_argument("channel_mean_pool: want [B,C,H,W], got " + shape_str(xs));
    std::size_t batch = xs[0], c = xs[1], hw = xs[2] * xs[3];
    Tensor y = Tensor::zeros({batch, c});
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += x->value.data[(n * c + ch) * hw + i];
            y.data[n * c + ch] = acc / static_cast<double>(hw);
        }
    VarPtr xc = x;
    return make_op(std::move(y), {x},
                     [xc, batch, c, hw](Var& self) {
                         xc->ensure_grad();
                         double inv = 1.0 / static_cast<double>(hw);
                         for (std::size_t n = 0; n < batch; ++n)
                             for (std::size_t ch = 0; ch < c; ++ch) {
                                 double g = self.grad[n * c + ch] * inv;
                                 for (std::size_t i = 0; i < hw; ++i) xc->grad[(n * c + ch) * hw + i] += g;
                             }
                     },
                     "channel_mean_pool");
}

VarPtr softmax_cross_entropy(const VarPtr& logits, const std::vector<int>& labels) {
    const Shape& ls = logits->value.shape;
    if (ls.size() != 2)
        throw std::invalid_argument("cross_entropy: want logits [B,K], got " + shape_str(ls));
    std::size_t batch = ls[0], k = ls[1];
    if (labels.size() != batch)
        throw std::invalid_argument("cross_entropy: " + std::to_string(batch) + " logit rows vs " +
                                    std::to_string(labels.size()) + " labels");
    for (int lab : labels)
        if (lab < 0 || static_cast<std::size_t>(lab) >= k)
            throw std::out_of_range("cross_entropy: label " + std::to_string(lab) +
                                    " out of range for " + std::to_string(k) + " classes");

    // probs are cached for the backward pass
    auto probs = std::make_shared<std::vector<double>>(batch * k);
    double loss = 0.0;
    const auto& zd = logits->value.data;
    for (std::size_t n = 0; n < batch; ++n) {
        double m = zd[n * k];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, zd[n * k + j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(zd[n * k + j] - m);
        double lse = m + std::log(sum);
        for (std::size_t j = 0; j < k; ++j) (*probs)[n * k + j] = std::exp(zd[n * k + j] - lse);
        loss += lse - zd[n * k + static_cast<std::size_t>(labels[n])];
    }
    loss /= static_cast<double>(batch);

    VarPtr lc = logits;
    std::vector<int> labs = labels;
    return make_op(Tensor::scalar(loss), {logits},
                     [lc, probs, labs, batch, k](Var& self) {
                         lc->ensure_grad();
                         double g = self.grad[0] / static_cast<double>(batch);
                         for (std::size_t n = 0; n < batch; ++n)
                             for (std::size_t j = 0; j < k; ++j) {
                                 double ind = (j == static_cast<std::size_t>(labs[n])) ? 1.0 : 0.0;
                                 lc->grad[n * k + j] += g * ((*probs)[n * k + j] - ind);
                             }
                     },
                     "cross_entropy");
}

VarPtr mean_squared_error(const VarPtr& pred, const VarPtr& target) {
    if (pred->value.shape != target->value.shape)
        throw std::invalid_argument("mse: shape mismatch " + shape_str(pred->value.shape) + " vs " +
                                    shape_str(target->value.shape));
    std::size_t n = pred->value.numel();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = pred->value.data[i] - target->value.data[i];
        loss += d * d;
    }
    loss /= static_cast<double>(n);
    VarPtr pc = pred, tc = target;
    return make_op(Tensor::scalar(loss), {pred, target},
                     [pc, tc, n](Var& self) {
                         pc->ensure_grad();
                         tc->ensure_grad();
                         double g = self.grad[0] * 2.0 / static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                             double d = pc->value.data[i] - tc->value.data[i];
                             pc->grad[i] += g * d;
                             tc->grad[i] -= g * d;
                         }
                     },
                     "mse");
}

VarPtr sigmoid_bce(const VarPtr& logits, const VarPtr& target) {
    if (logits->value.shape != target->value.shape)
        throw std::invalid_argument("sigmoid_bce: shape mismatch " + shape_str(logits->value.shape) +
                                    " vs " + shape_str(target->value.shape));
    std::size_t n = logits->value.numel();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double z = logits->value.data[i];
        double t = target->value.data[i];
        // max(z,0) - z*t + log(1 + exp(-|z|))
        loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<double>(n);
    VarPtr lc = logits, tc = target;
    return make_op(Tensor::scalar(loss), {logits, target},
                     [lc, tc, n](Var& self) {
                         lc->ensure_grad();
                         tc->ensure_grad();
                         double g = self.grad[0] / static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                             double z = lc->value.data[i];
                             double sig = 1.0 / (1.0 + std::exp(-z));
                             lc->grad[i] += g * (sig - tc->value.data[i]);
                             tc->grad[i] += g * (-z);
                         }
                     },
                     "sigmoid_bce");
}

void backward(const VarPtr& loss) {
    if (!loss) throw std::invalid_argument("backward: null loss");
    if (loss->value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");

    // iterative post-order DFS
    std::vector<Var*> topo;
    std::unordered_set<Var*> visited;
    std::vector<std::pair<VarPtr, std::size_t>> stack;
    stack.emplace_back(loss, 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            VarPtr child = node->parents[next_child++];
            if (visited.insert(child.get()).second) stack.emplace_back(child, 0);
        } else {
            topo.push_back(node.get());
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Var* v = *it;
        if (v->grad.empty()) continue;  // never received gradient
        if (v->backprop) v->backprop(*v);
    }
    for (Var* v : topo)
        for (double g : v->grad)
            if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient in backward pass");
}

std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty input");
    double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

void sgd_step(std::vector<Parameter>& params, const GradientMap& grads, OptimizerState& state) {
    if (!std::isfinite(state.learning_rate) || state.learning_rate < 0.0)
        throw std::invalid_argument("sgd_step: learning rate must be finite and non-negative");
    for (auto& p : params) {
        auto it = grads.find(p.name);
        if (it == grads.end())
            throw std::invalid_argument("sgd_step: missing gradient for parameter " + p.name);
        const auto& g = it->second;
        if (g.size() != p.value.numel())
            throw std::invalid_argument("sgd_step: gradient size mismatch for " + p.name);
        for (std::size_t i = 0; i < g.size(); ++i) p.value.data[i] -= state.learning_rate * g[i];
        check_finite(p.value, "sgd_step");
    }
    state.step_count += 1;
}

}  // namespace m2d::ad
