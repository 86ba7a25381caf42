#include "m2d/nets.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "m2d/rng.hpp"
#include "m2d/serialize.hpp"

namespace m2d::nets {

namespace {

constexpr char kMagic[4] = {'M', '2', 'D', '1'};
constexpr std::uint16_t kFormatVersion = 1;

std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

std::size_t parse_dim(const std::string& tok, const std::string& what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad " + what + ": '" + tok + "'");
    }
    if (pos != tok.size() || v == 0)
        throw std::invalid_argument("bad " + what + ": '" + tok + "' (want positive integer)");
    return static_cast<std::size_t>(v);
}

}  // namespace

std::string activation_name(Activation a) {
    switch (a) {
        case Activation::none: return "none";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
    }
    throw std::logic_error("unknown activation");
}

Activation parse_activation(const std::string& s) {
    if (s == "none" || s == "linear") return Activation::none;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + s + "' (want none|relu|tanh)");
}

std::string network_kind_name(NetworkKind k) {
    switch (k) {
        case NetworkKind::classifier: return "classifier";
        case NetworkKind::encoder: return "encoder";
        case NetworkKind::decoder: return "decoder";
        case NetworkKind::encoder_decoder: return "encoder_decoder";
    }
    throw std::logic_error("unknown network kind");
}

NetworkKind parse_network_kind(const std::string& s) {
    if (s == "classifier") return NetworkKind::classifier;
    if (s == "encoder") return NetworkKind::encoder;
    if (s == "decoder") return NetworkKind::decoder;
    if (s == "encoder_decoder") return NetworkKind::encoder_decoder;
    throw std::invalid_argument("unknown network kind '" + s + "'");
}

std::size_t LayerDesc::output_numel() const { return ad::shape_numel(output_shape()); }

ad::Shape LayerDesc::output_shape() const {
    if (kind == LayerKind::dense) return {out_dim};
    std::size_t ho = (in_h - kernel) / stride + 1;
    std::size_t wo = (in_w - kernel) / stride + 1;
    return {out_c, ho, wo};
}

ad::Shape LayerDesc::input_shape() const {
    if (kind == LayerKind::dense) return {in_dim};
    return {in_c, in_h, in_w};
}

std::string LayerDesc::descriptor() const {
    std::ostringstream ss;
    if (kind == LayerKind::dense) {
        ss << "dense " << in_dim << ' ' << out_dim << ' ' << activation_name(act);
    } else {
        ss << "conv2 " << in_c << ' ' << in_h << ' ' << in_w << ' ' << out_c << ' ' << kernel << ' '
           << stride << ' ' << activation_name(act);
    }
    return ss.str();
}

LayerDesc LayerDesc::parse(const std::string& line) {
    auto tok = split_ws(line);
    if (tok.empty()) throw std::invalid_argument("empty layer descriptor");
    LayerDesc d;
    if (tok[0] == "dense") {
        if (tok.size() != 4)
            throw std::invalid_argument("dense layer wants 'dense <in> <out> <act>', got '" + line + "'");
        d.kind = LayerKind::dense;
        d.in_dim = parse_dim(tok[1], "input dim");
        d.out_dim = parse_dim(tok[2], "output dim");
        d.act = parse_activation(tok[3]);
    } else if (tok[0] == "conv2") {
        if (tok.size() != 8)
            throw std::invalid_argument(
                "conv layer wants 'conv2 <in_c> <in_h> <in_w> <out_c> <kernel> <stride> <act>', got '" +
                line + "'");
        d.kind = LayerKind::conv2d;
        d.in_c = parse_dim(tok[1], "input channels");
        d.in_h = parse_dim(tok[2], "input height");
        d.in_w = parse_dim(tok[3], "input width");
        d.out_c = parse_dim(tok[4], "output channels");
        d.kernel = parse_dim(tok[5], "kernel size");
        d.stride = parse_dim(tok[6], "stride");
        d.act = parse_activation(tok[7]);
        if (d.kernel > d.in_h || d.kernel > d.in_w)
            throw std::invalid_argument("conv kernel exceeds input extent: '" + line + "'");
    } else {
        throw std::invalid_argument("unknown layer kind '" + tok[0] + "' (want dense|conv2)");
    }
    return d;
}

void ModelSpec::validate() const {
    if (layers.empty()) throw std::invalid_argument("model spec has no layers");
    for (std::size_t i = 1; i < layers.size(); ++i) {
        std::size_t prev = layers[i - 1].output_numel();
        std::size_t want = ad::shape_numel(layers[i].input_shape());
        if (prev != want)
            throw std::invalid_argument("incompatible layer dims: layer " + std::to_string(i - 1) +
                                        " produces " + std::to_string(prev) + " values, layer " +
                                        std::to_string(i) + " expects " + std::to_string(want));
    }
    for (std::size_t i = 0; i < tap_points.size(); ++i) {
        const auto& t = tap_points[i];
        if (t.name.empty()) throw std::invalid_argument("tap with empty name");
        if (t.layer < -1 || t.layer >= static_cast<int>(layers.size()))
            throw std::invalid_argument("tap '" + t.name + "' refers to layer " +
                                        std::to_string(t.layer) + " of " +
                                        std::to_string(layers.size()));
        for (std::size_t j = 0; j < i; ++j)
            if (tap_points[j].name == t.name)
                throw std::invalid_argument("duplicate tap name '" + t.name + "'");
    }
}

std::size_t ModelSpec::input_numel() const { return ad::shape_numel(input_shape()); }

ad::Shape ModelSpec::input_shape() const {
    if (layers.empty()) throw std::logic_error("input_shape of empty spec");
    return layers.front().input_shape();
}

std::size_t ModelSpec::tap_dim(const TapPoint& tap) const {
    if (tap.layer < 0) return input_numel();
    const LayerDesc& l = layers.at(static_cast<std::size_t>(tap.layer));
    return l.kind == LayerKind::dense ? l.out_dim : l.out_c;
}

const TapPoint& ModelSpec::find_tap(const std::string& name) const {
    for (const auto& t : tap_points)
        if (t.name == name) return t;
    throw std::invalid_argument("unknown tap '" + name + "'");
}

std::string ModelSpec::descriptor() const {
    std::ostringstream ss;
    for (const auto& l : layers) ss << l.descriptor() << '\n';
    for (const auto& t : tap_points) {
        ss << "tap " << t.name << ' ';
        if (t.layer < 0)
            ss << "input";
        else
            ss << t.layer;
        ss << '\n';
    }
    return ss.str();
}

ModelSpec ModelSpec::parse(const std::string& text) {
    ModelSpec spec;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        auto tok = split_ws(line);
        if (tok.empty()) continue;
        if (tok[0] == "tap") {
            if (tok.size() != 3)
                throw std::invalid_argument("tap wants 'tap <name> <layer|input>', got '" + line + "'");
            TapPoint t;
            t.name = tok[1];
            if (tok[2] == "input") {
                t.layer = -1;
            } else {
                std::size_t pos = 0;
                unsigned long long v = 0;
                try {
                    v = std::stoull(tok[2], &pos);
                } catch (const std::exception&) {
                    pos = std::string::npos;
                }
                if (pos != tok[2].size())
                    throw std::invalid_argument("bad tap layer '" + tok[2] + "'");
                t.layer = static_cast<int>(v);
            }
            spec.tap_points.push_back(std::move(t));
        } else {
            spec.layers.push_back(LayerDesc::parse(line));
        }
    }
    spec.validate();
    return spec;
}

Network::Network(ModelSpec spec, std::vector<ad::Parameter> params, NetworkKind kind)
    : spec_(std::move(spec)), params_(std::move(params)), kind_(kind) {
    spec_.validate();
    if (params_.size() != spec_.layers.size() * 2)
        throw std::invalid_argument("parameter set does not cover the spec: " +
                                    std::to_string(params_.size()) + " params for " +
                                    std::to_string(spec_.layers.size()) + " layers");
}

ForwardGraph Network::forward(const ad::Tensor& x, bool input_requires_grad) const {
    if (x.shape.empty()) throw std::invalid_argument("forward: rank-0 input");
    std::size_t batch = x.shape[0];
    std::size_t per_sample = x.numel() / std::max<std::size_t>(batch, 1);
    if (per_sample != spec_.input_numel())
        throw std::invalid_argument("forward: input " + ad::shape_str(x.shape) + " does not match model input " +
                                    ad::shape_str(spec_.input_shape()));

    ForwardGraph g;
    g.input = ad::leaf(x, input_requires_grad);

    // parameter leaves, spec order
    std::vector<ad::VarPtr> leaves;
    leaves.reserve(params_.size());
    for (const auto& p : params_) {
        auto l = ad::leaf(p.value, true);
        leaves.push_back(l);
        g.param_leaves.emplace_back(p.name, l);
    }

    auto tap_feature = [&](const ad::VarPtr& node) {
        if (node->value.shape.size() == 4) return ad::channel_mean_pool(node);
        if (node->value.shape.size() == 2) return node;
        return ad::reshape(node, {batch, node->value.numel() / batch});
    };

    ad::VarPtr cur = g.input;
    for (const auto& t : spec_.tap_points)
        if (t.layer < 0) g.taps[t.name] = tap_feature(cur->value.shape.size() == 2
                                                          ? cur
                                                          : ad::reshape(cur, {batch, per_sample}));

    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const LayerDesc& l = spec_.layers[i];
        const ad::VarPtr& w = leaves[2 * i];
        const ad::VarPtr& b = leaves[2 * i + 1];
        if (l.kind == LayerKind::dense) {
            if (cur->value.shape.size() != 2 || cur->value.shape[1] != l.in_dim)
                cur = ad::reshape(cur, {batch, l.in_dim});
            cur = ad::dense(cur, w, b);
        } else {
            ad::Shape want = {batch, l.in_c, l.in_h, l.in_w};
            if (cur->value.shape != want) cur = ad::reshape(cur, want);
            cur = ad::conv2d(cur, w, b, l.stride);
        }
        switch (l.act) {
            case Activation::none: break;
            case Activation::relu: cur = ad::relu(cur); break;
            case Activation::tanh: cur = ad::tanh_act(cur); break;
        }
        for (const auto& t : spec_.tap_points)
            if (t.layer == static_cast<int>(i)) g.taps[t.name] = tap_feature(cur);
    }
    g.output = cur;
    return g;
}

ad::Tensor Network::predict(const ad::Tensor& x) const { return forward(x).output->value; }

std::vector<int> Network::classify(const ad::Tensor& x) const {
    ad::Tensor out = predict(x);
    if (out.shape.size() != 2) throw std::logic_error("classify: output is not [B,K]");
    std::size_t batch = out.shape[0], k = out.shape[1];
    std::vector<int> labels(batch, 0);
    for (std::size_t n = 0; n < batch; ++n) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (out.data[n * k + j] > out.data[n * k + best]) best = j;
        labels[n] = static_cast<int>(best);
    }
    return labels;
}

ad::GradientMap Network::collect_gradients(const ForwardGraph& g) const {
    ad::GradientMap grads;
    for (const auto& [name, var] : g.param_leaves) {
        if (var->grad.size() == var->value.numel())
            grads[name] = var->grad;
        else
            grads[name] = std::vector<double>(var->value.numel(), 0.0);
    }
    return grads;
}

bool Network::params_equal(const Network& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& a = params_[i];
        const auto& b = other.params_[i];
        if (a.name != b.name || a.value.shape != b.value.shape) return false;
        if (std::memcmp(a.value.data.data(), b.value.data.data(),
                        a.value.data.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

namespace {

ad::Parameter init_weight(const LayerDesc& l, std::size_t index, Rng& rng) {
    ad::Shape shape;
    std::size_t fan_in, fan_out;
    if (l.kind == LayerKind::dense) {
        shape = {l.out_dim, l.in_dim};
        fan_in = l.in_dim;
        fan_out = l.out_dim;
    } else {
        shape = {l.out_c, l.in_c, l.kernel, l.kernel};
        fan_in = l.in_c * l.kernel * l.kernel;
        fan_out = l.out_c * l.kernel * l.kernel;
    }
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    ad::Tensor t = ad::Tensor::zeros(shape);
    for (double& v : t.data) v = rng.uniform(-bound, bound);
    return {"L" + std::to_string(index) + ".W", std::move(t)};
}

ad::Parameter init_bias(const LayerDesc& l, std::size_t index) {
    std::size_t n = l.kind == LayerKind::dense ? l.out_dim : l.out_c;
    return {"L" + std::to_string(index) + ".b", ad::Tensor::zeros({n})};
}

}  // namespace

Network build(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    std::vector<ad::Parameter> params;
    params.reserve(spec.layers.size() * 2);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        params.push_back(init_weight(spec.layers[i], i, rng));
        params.push_back(init_bias(spec.layers[i], i));
    }
    return Network(spec, std::move(params), NetworkKind::classifier);
}

Network duplicate(const Network& net) { return net; }

ModelSpec mirror_decoder_spec(const ModelSpec& spec, std::size_t sever_at) {
    if (sever_at == 0 || sever_at >= spec.layers.size())
        throw std::invalid_argument("mirror_decoder_spec: sever_at " + std::to_string(sever_at) +
                                    " out of range (1.." + std::to_string(spec.layers.size() - 1) + ")");
    // widths crossing each retained boundary, innermost first
    std::vector<std::size_t> widths;
    widths.push_back(spec.layers[sever_at - 1].output_numel());
    for (std::size_t i = sever_at - 1; i > 0; --i) widths.push_back(spec.layers[i - 1].output_numel());
    widths.push_back(spec.input_numel());

    ModelSpec dec;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        LayerDesc l;
        l.kind = LayerKind::dense;
        l.in_dim = widths[i];
        l.out_dim = widths[i + 1];
        l.act = (i + 2 < widths.size()) ? Activation::relu : Activation::none;
        dec.layers.push_back(l);
    }
    dec.validate();
    return dec;
}

Network sever_and_attach(const Network& net, const SurgeryPlan& plan, std::uint64_t seed) {
    if (net.kind() != NetworkKind::classifier)
        throw std::invalid_argument("sever_and_attach: expected a classifier, got " +
                                    network_kind_name(net.kind()));
    const ModelSpec& spec = net.spec();
    std::size_t n_layers = spec.layers.size();
    if (plan.sever_at == 0 || plan.sever_at >= n_layers)
        throw std::invalid_argument("sever_and_attach: sever_at " + std::to_string(plan.sever_at) +
                                    " must keep at least one layer and sever at least one (valid range 1.." +
                                    std::to_string(n_layers - 1) + ")");
    plan.decoder_spec.validate();
    std::size_t embed = spec.layers[plan.sever_at - 1].output_numel();
    if (plan.decoder_spec.input_numel() != embed)
        throw std::invalid_argument("sever_and_attach: decoder expects " +
                                    std::to_string(plan.decoder_spec.input_numel()) +
                                    " inputs but the embedding has " + std::to_string(embed));
    if (plan.decoder_spec.layers.back().output_numel() != spec.input_numel())
        throw std::invalid_argument("sever_and_attach: decoder produces " +
                                    std::to_string(plan.decoder_spec.layers.back().output_numel()) +
                                    " values but the network input has " +
                                    std::to_string(spec.input_numel()));

    ModelSpec coupled;
    coupled.layers.assign(spec.layers.begin(), spec.layers.begin() + static_cast<long>(plan.sever_at));
    for (const auto& l : plan.decoder_spec.layers) coupled.layers.push_back(l);
    for (const auto& t : spec.tap_points)
        if (t.layer < static_cast<int>(plan.sever_at)) coupled.tap_points.push_back(t);

    Network fresh = build(plan.decoder_spec, seed);
    std::vector<ad::Parameter> params;
    for (std::size_t i = 0; i < plan.sever_at; ++i) {
        params.push_back(net.params()[2 * i]);
        params.push_back(net.params()[2 * i + 1]);
    }
    for (std::size_t i = 0; i < plan.decoder_spec.layers.size(); ++i) {
        ad::Parameter w = fresh.params()[2 * i];
        ad::Parameter b = fresh.params()[2 * i + 1];
        std::size_t idx = plan.sever_at + i;
        w.name = "L" + std::to_string(idx) + ".W";
        b.name = "L" + std::to_string(idx) + ".b";
        params.push_back(std::move(w));
        params.push_back(std::move(b));
    }
    return Network(std::move(coupled), std::move(params), NetworkKind::encoder_decoder);
}

Network encoder_prefix(const Network& net, std::size_t sever_at) {
    const ModelSpec& spec = net.spec();
    if (sever_at == 0 || sever_at > spec.layers.size())
        throw std::invalid_argument("encoder_prefix: sever_at out of range");
    ModelSpec enc;
    enc.layers.assign(spec.layers.begin(), spec.layers.begin() + static_cast<long>(sever_at));
    for (const auto& t : spec.tap_points)
        if (t.layer < static_cast<int>(sever_at)) enc.tap_points.push_back(t);
    std::vector<ad::Parameter> params;
    for (std::size_t i = 0; i < sever_at; ++i) {
        params.push_back(net.params()[2 * i]);
        params.push_back(net.params()[2 * i + 1]);
    }
    return Network(std::move(enc), std::move(params), NetworkKind::encoder);
}

std::map<std::string, ad::Tensor> extract_features(const Network& net, const ad::Tensor& x,
                                                   const std::vector<std::string>& taps) {
    for (const auto& name : taps) net.spec().find_tap(name);  // unknown tap -> throw
    ForwardGraph g = net.forward(x);
    std::map<std::string, ad::Tensor> out;
    for (const auto& name : taps) out[name] = g.taps.at(name)->value;
    return out;
}

namespace container {

void write_header(io::Writer& w) {
    w.bytes(kMagic, 4);
    w.u16(kFormatVersion);
}

void check_header(io::Reader& r) {
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("bad magic: not a model file");
    std::uint16_t version = r.u16();
    if (version != kFormatVersion)
        throw std::runtime_error("unsupported model file version " + std::to_string(version) +
                                 " (expected " + std::to_string(kFormatVersion) + ")");
}

void write_network(io::Writer& w, const Network& net, std::size_t crc_from) {
    std::string desc = "kind " + network_kind_name(net.kind()) + "\n" + net.spec().descriptor();
    w.str(desc);
    w.u32(static_cast<std::uint32_t>(net.params().size()));
    for (const auto& p : net.params()) {
        w.u32(static_cast<std::uint32_t>(p.value.shape.size()));
        for (std::size_t d : p.value.shape) w.u32(static_cast<std::uint32_t>(d));
        for (double v : p.value.data) w.f64(v);
    }
    w.append_crc_from(crc_from);
}

// Reads one network block (descriptor + params + trailing CRC) starting at
// the reader position; crc_start marks where the CRC coverage begins.
Network read_network(io::Reader& r, std::size_t crc_start) {
    std::string desc = r.str();
    std::uint32_t n_params = r.u32();
    std::vector<std::pair<ad::Shape, std::vector<double>>> raw;
    raw.reserve(n_params);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        std::uint32_t ndim = r.u32();
        if (ndim > 8) throw std::runtime_error("corrupt model file: parameter rank " + std::to_string(ndim));
        ad::Shape shape(ndim);
        for (auto& d : shape) d = r.u32();
        std::size_t n = ad::shape_numel(shape);
        if (n > (1u << 26)) throw std::runtime_error("corrupt model file: oversized parameter");
        std::vector<double> data(n);
        for (auto& v : data) v = r.f64();
        raw.emplace_back(std::move(shape), std::move(data));
    }
    std::uint32_t want = r.crc_over(crc_start);
    std::uint32_t got = r.u32();
    if (want != got) throw std::runtime_error("model file checksum mismatch");

    // first descriptor line is the kind
    auto nl = desc.find('\n');
    if (nl == std::string::npos || desc.substr(0, 5) != "kind ")
        throw std::runtime_error("corrupt model file: missing kind line");
    NetworkKind kind = parse_network_kind(desc.substr(5, nl - 5));
    ModelSpec spec = ModelSpec::parse(desc.substr(nl + 1));

    if (raw.size() != spec.layers.size() * 2)
        throw std::runtime_error("corrupt model file: parameter count does not match the spec");
    std::vector<ad::Parameter> params;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        params.push_back({"L" + std::to_string(i) + ".W",
                          ad::Tensor(std::move(raw[2 * i].first), std::move(raw[2 * i].second))});
        params.push_back({"L" + std::to_string(i) + ".b",
                          ad::Tensor(std::move(raw[2 * i + 1].first), std::move(raw[2 * i + 1].second))});
    }
    return Network(std::move(spec), std::move(params), kind);
}

}  // namespace container

void save(const Network& net, const std::string& path) {
    io::Writer w;
    container::write_header(w);
    container::write_network(w, net, 0);
    io::atomic_write_file(path, w.buffer());
}

Network load(const std::string& path) {
    io::Reader r(io::read_file(path));
    container::check_header(r);
    Network net = container::read_network(r, 0);
    if (!r.at_end()) throw std::runtime_error("trailing bytes after model data");
    return net;
}

}  // namespace m2d::nets
