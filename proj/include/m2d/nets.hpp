#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "m2d/autodiff.hpp"
#include "m2d/serialize.hpp"
#include "m2d/tensor.hpp"

namespace m2d::nets {

enum class LayerKind { dense, conv2d };
enum class Activation { none, relu, tanh };

std::string activation_name(Activation a);
Activation parse_activation(const std::string& s);

struct LayerDesc {
    LayerKind kind = LayerKind::dense;
    Activation act = Activation::none;
    // dense
    std::size_t in_dim = 0, out_dim = 0;
    // conv2d
    std::size_t in_c = 0, in_h = 0, in_w = 0, out_c = 0, kernel = 0, stride = 1;

    std::size_t output_numel() const;
    ad::Shape output_shape() const;  // without batch dim
    ad::Shape input_shape() const;   // without batch dim

    std::string descriptor() const;
    static LayerDesc parse(const std::string& line);

    bool operator==(const LayerDesc&) const = default;
};

// A named tap exposing a post-activation feature map. layer == -1 taps the
// input adapter (the flattened input itself).
struct TapPoint {
    std::string name;
    int layer = 0;
    bool operator==(const TapPoint&) const = default;
};

struct ModelSpec {
    std::vector<LayerDesc> layers;
    std::vector<TapPoint> tap_points;

    void validate() const;  // throws on incompatible consecutive dims or bad taps
    std::size_t input_numel() const;
    ad::Shape input_shape() const;
    // feature dimensionality seen at a tap (conv taps are pooled per channel)
    std::size_t tap_dim(const TapPoint& tap) const;
    const TapPoint& find_tap(const std::string& name) const;

    std::string descriptor() const;
    static ModelSpec parse(const std::string& text);

    bool operator==(const ModelSpec&) const = default;
};

enum class NetworkKind { classifier, encoder, decoder, encoder_decoder };

std::string network_kind_name(NetworkKind k);
NetworkKind parse_network_kind(const std::string& s);

// Result of running a network forward as a graph: final output plus the
// tap activations, and the parameter leaves for gradient extraction.
struct ForwardGraph {
    ad::VarPtr input;   // the (possibly reshaped) input leaf
    ad::VarPtr output;
    std::map<std::string, ad::VarPtr> taps;        // tap name -> pooled feature node [B,d]
    std::vector<std::pair<std::string, ad::VarPtr>> param_leaves;  // spec order
};

class Network {
public:
    Network() = default;
    Network(ModelSpec spec, std::vector<ad::Parameter> params, NetworkKind kind);

    const ModelSpec& spec() const { return spec_; }
    NetworkKind kind() const { return kind_; }
    void set_kind(NetworkKind k) { kind_ = k; }
    const std::vector<ad::Parameter>& params() const { return params_; }
    std::vector<ad::Parameter>& params() { return params_; }

    // Builds the op graph for a batch. x may be [B, ...] matching the input
    // shape, or [B, numel] for implicit flattening into a dense-first net.
    ForwardGraph forward(const ad::Tensor& x, bool input_requires_grad = false) const;

    // Inference-only forward, returns the output values.
    ad::Tensor predict(const ad::Tensor& x) const;
    // Argmax class per row of predict().
    std::vector<int> classify(const ad::Tensor& x) const;

    // Fills grads for every parameter from the leaves of a completed backward
    // pass; parameters that never entered the graph get zeros.
    ad::GradientMap collect_gradients(const ForwardGraph& g) const;

    bool params_equal(const Network& other) const;

private:
    ModelSpec spec_;
    std::vector<ad::Parameter> params_;
    NetworkKind kind_ = NetworkKind::classifier;
};

struct SurgeryPlan {
    std::size_t sever_at = 0;  // index of the first severed layer; [0, sever_at) is kept
    ModelSpec decoder_spec;
};

// Initialized network with uniform(+-sqrt(6/(fan_in+fan_out))) weights and
// zero biases, drawn from the counter-based generator.
Network build(const ModelSpec& spec, std::uint64_t seed);

// Deep copy; mutating the copy never touches the original.
Network duplicate(const Network& net);

// Mirror-of-the-encoder decoder spec: reversed layer widths, relu hidden
// activations, linear output back to the input dimensionality.
ModelSpec mirror_decoder_spec(const ModelSpec& spec, std::size_t sever_at);

// Keeps layers [0, plan.sever_at) of a classifier copy and attaches a freshly
// initialized decoder; the result maps inputs back to input space.
Network sever_and_attach(const Network& net, const SurgeryPlan& plan, std::uint64_t seed);

// First plan.sever_at layers of a network as a standalone encoder, taps
// restricted to the retained prefix.
Network encoder_prefix(const Network& net, std::size_t sever_at);

// Post-activation features at the named taps, conv taps mean-pooled per
// channel. Returns one [B,d] tensor per tap.
std::map<std::string, ad::Tensor> extract_features(const Network& net, const ad::Tensor& x,
                                                   const std::vector<std::string>& taps);

void save(const Network& net, const std::string& path);
Network load(const std::string& path);

// Versioned binary container primitives, shared with the detector bundle
// format. Each network block ends with a CRC-32 over the preceding bytes.
namespace container {
void write_header(io::Writer& w);
void check_header(io::Reader& r);
void write_network(io::Writer& w, const Network& net, std::size_t crc_from);
Network read_network(io::Reader& r, std::size_t crc_start);
}  // namespace container

}  // namespace m2d::nets
