#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tbnet/ops.hpp"
#include "tbnet/tensor.hpp"

namespace tbnet {

enum class LayerKind { ConvBlock, MaxPool, GlobalAvgPool, Dense, ResidualAdd };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::ConvBlock: return "conv_block";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::GlobalAvgPool: return "global_avgpool";
        case LayerKind::Dense: return "dense";
        case LayerKind::ResidualAdd: return "residual_add";
    }
    return "?";
}

/// One layer of a branch. conv_block bundles conv -> BN -> ReLU; its
/// channel_count tracks the surviving output channels across pruning.
struct LayerSpec {
    LayerKind kind = LayerKind::ConvBlock;
    int64_t channel_count = 0; // conv_block out channels / dense units
    int64_t kernel = 3;
    int64_t stride = 1;
    int64_t padding = 1;
    int64_t from = -1;         // residual_add: index of the far input layer
    bool prunable = false;

    static LayerSpec conv_block(int64_t out_channels, int64_t kernel = 3, int64_t stride = 1,
                                int64_t padding = 1) {
        LayerSpec s;
        s.kind = LayerKind::ConvBlock;
        s.channel_count = out_channels;
        s.kernel = kernel;
        s.stride = stride;
        s.padding = padding;
        s.prunable = true;
        return s;
    }
    static LayerSpec maxpool() {
        LayerSpec s;
        s.kind = LayerKind::MaxPool;
        return s;
    }
    static LayerSpec global_avgpool() {
        LayerSpec s;
        s.kind = LayerKind::GlobalAvgPool;
        return s;
    }
    static LayerSpec dense(int64_t units) {
        LayerSpec s;
        s.kind = LayerKind::Dense;
        s.channel_count = units;
        return s;
    }
    static LayerSpec residual_add(int64_t from) {
        LayerSpec s;
        s.kind = LayerKind::ResidualAdd;
        s.from = from;
        return s;
    }
};

/// Weight arrays of one layer. Pool/residual layers own nothing.
template <typename S>
struct LayerParams {
    TensorPtr<S> weight;       // conv: OIHW, dense: (O,I)
    TensorPtr<S> bias;         // O
    TensorPtr<S> gamma;        // conv_block BN scale
    TensorPtr<S> beta;         // conv_block BN shift
    TensorPtr<S> running_mean; // BN buffer
    TensorPtr<S> running_var;  // BN buffer

    LayerParams<S> clone() const {
        LayerParams<S> p;
        auto cp = [](const TensorPtr<S>& t) { return t ? t->clone_detached() : nullptr; };
        p.weight = cp(weight);
        p.bias = cp(bias);
        p.gamma = cp(gamma);
        p.beta = cp(beta);
        p.running_mean = cp(running_mean);
        p.running_var = cp(running_var);
        return p;
    }
};

/// A single branch: an ordered layer chain ending in one dense classifier.
template <typename S>
struct BranchGraph {
    std::vector<LayerSpec> layers;
    std::vector<LayerParams<S>> params;
    Shape input_shape; // {C, H, W}
    int64_t num_classes = 0;

    BranchGraph<S> clone() const {
        BranchGraph<S> g;
        g.layers = layers;
        g.input_shape = input_shape;
        g.num_classes = num_classes;
        g.params.reserve(params.size());
        for (const auto& p : params) g.params.push_back(p.clone());
        return g;
    }

    /// Trainable tensors in declaration order.
    std::vector<TensorPtr<S>> parameters() const {
        std::vector<TensorPtr<S>> out;
        for (const auto& p : params)
            for (const auto& t : {p.weight, p.bias, p.gamma, p.beta})
                if (t) out.push_back(t);
        return out;
    }

    /// All value tensors in serialization order (trainables then BN buffers
    /// per layer).
    std::vector<TensorPtr<S>> value_tensors() const {
        std::vector<TensorPtr<S>> out;
        for (const auto& p : params)
            for (const auto& t : {p.weight, p.bias, p.gamma, p.beta, p.running_mean, p.running_var})
                if (t) out.push_back(t);
        return out;
    }

    void set_requires_grad(bool rg) {
        for (const auto& t : parameters()) t->requires_grad = rg;
    }
};

/// Output shape of each layer given the branch input, as {C,H,W} (or {K}
/// after flattening). Also validates shape compatibility along the chain.
template <typename S>
std::vector<Shape> layer_output_shapes(const BranchGraph<S>& g) {
    std::vector<Shape> shapes;
    Shape cur = g.input_shape; // {C,H,W}
    bool flattened = false;
    for (size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        switch (l.kind) {
            case LayerKind::ConvBlock: {
                if (flattened)
                    throw ShapeError(strcat_msg("layer ", i, ": conv_block after flatten"));
                const int64_t oh = (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1;
                const int64_t ow = (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1;
                if (oh < 1 || ow < 1)
                    throw ShapeError(strcat_msg("layer ", i, ": conv output ", oh, "x", ow));
                cur = {l.channel_count, oh, ow};
                break;
            }
            case LayerKind::MaxPool:
                if (flattened || cur[1] < 2 || cur[2] < 2)
                    throw ShapeError(strcat_msg("layer ", i, ": maxpool needs >=2x2 input"));
                cur = {cur[0], cur[1] / 2, cur[2] / 2};
                break;
            case LayerKind::GlobalAvgPool:
                if (flattened)
                    throw ShapeError(strcat_msg("layer ", i, ": duplicate flatten"));
                cur = {cur[0]};
                flattened = true;
                break;
            case LayerKind::Dense:
                if (!flattened)
                    throw ShapeError(
                        strcat_msg("layer ", i, ": dense requires global_avgpool before it"));
                cur = {l.channel_count};
                break;
            case LayerKind::ResidualAdd: {
                if (l.from < 0 || l.from >= static_cast<int64_t>(i))
                    throw ValidationError(strcat_msg("layer ", i, ": residual_add from ", l.from));
                if (shapes[l.from] != cur)
                    throw ShapeError(strcat_msg("layer ", i,
                                                     ": residual_add endpoints disagree: ",
                                                     shape_to_string(shapes[l.from]), " vs ",
                                                     shape_to_string(cur)));
                break;
            }
        }
        shapes.push_back(cur);
    }
    return shapes;
}

template <typename S>
void validate_graph(const BranchGraph<S>& g) {
    if (g.layers.empty()) throw ValidationError("graph has no layers");
    if (g.layers.size() != g.params.size())
        throw ValidationError("layer/parameter list length mismatch");
    if (g.input_shape.size() != 3)
        throw ValidationError(strcat_msg("input shape must be {C,H,W}, got ",
                                         shape_to_string(g.input_shape)));
    int dense_count = 0;
    for (size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        if (l.kind == LayerKind::ConvBlock && l.channel_count < 1)
            throw ValidationError(strcat_msg("layer ", i, ": conv_block with ", l.channel_count,
                                             " channels"));
        if (l.kind == LayerKind::Dense) ++dense_count;
    }
    if (dense_count != 1 || g.layers.back().kind != LayerKind::Dense)
        throw ValidationError("graph must end in exactly one dense classifier");
    if (g.layers.back().channel_count != g.num_classes)
        throw ValidationError(strcat_msg("classifier has ", g.layers.back().channel_count,
                                         " units for ", g.num_classes, " classes"));
    layer_output_shapes(g); // throws on chain incompatibilities
}

/// Walk backwards to the conv_block(s) producing the value seen at `idx`,
/// looking through pools and residual adds.
template <typename S>
void producing_conv_blocks(const BranchGraph<S>& g, int64_t idx, std::vector<int64_t>& out) {
    while (idx >= 0) {
        const LayerSpec& l = g.layers[idx];
        if (l.kind == LayerKind::ConvBlock) {
            out.push_back(idx);
            return;
        }
        if (l.kind == LayerKind::ResidualAdd) {
            producing_conv_blocks(g, l.from, out);
            --idx;
            continue;
        }
        --idx; // pools pass channels through
    }
}

/// Channels feeding a residual join must keep their width; mark their
/// producing conv blocks unprunable.
template <typename S>
void mark_residual_endpoints_unprunable(BranchGraph<S>& g) {
    for (size_t i = 0; i < g.layers.size(); ++i) {
        if (g.layers[i].kind != LayerKind::ResidualAdd) continue;
        std::vector<int64_t> producers;
        producing_conv_blocks(g, static_cast<int64_t>(i) - 1, producers);
        producing_conv_blocks(g, g.layers[i].from, producers);
        for (int64_t p : producers) g.layers[p].prunable = false;
    }
}

/// Seed fresh parameters for every layer (fan-in scaled normal weights,
/// zero bias, identity BN).
template <typename S>
void init_params(BranchGraph<S>& g, Rng& rng, const std::string& name_prefix = "") {
    auto shapes = layer_output_shapes(g);
    g.params.assign(g.layers.size(), LayerParams<S>{});
    Shape cur = g.input_shape;
    int64_t in_c = g.input_shape[0];
    int64_t in_features = 0;
    for (size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        LayerParams<S>& p = g.params[i];
        const std::string base = strcat_msg(name_prefix, "layer", i, ".");
        if (l.kind == LayerKind::ConvBlock) {
            const int64_t fan_in = in_c * l.kernel * l.kernel;
            const S std_dev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(fan_in)));
            p.weight = Tensor<S>::randn({l.channel_count, in_c, l.kernel, l.kernel}, rng, std_dev,
                                        true);
            p.bias = Tensor<S>::zeros({l.channel_count}, true);
            p.gamma = Tensor<S>::ones({l.channel_count}, true);
            p.beta = Tensor<S>::zeros({l.channel_count}, true);
            p.running_mean = Tensor<S>::zeros({l.channel_count});
            p.running_var = Tensor<S>::ones({l.channel_count});
            p.weight->name = base + "conv.weight";
            p.bias->name = base + "conv.bias";
            p.gamma->name = base + "bn.gamma";
            p.beta->name = base + "bn.beta";
            in_c = l.channel_count;
        } else if (l.kind == LayerKind::Dense) {
            const S std_dev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(in_features)));
            p.weight = Tensor<S>::randn({l.channel_count, in_features}, rng, std_dev, true);
            p.bias = Tensor<S>::zeros({l.channel_count}, true);
            p.weight->name = base + "dense.weight";
            p.bias->name = base + "dense.bias";
        } else if (l.kind == LayerKind::GlobalAvgPool) {
            in_features = shapes[i][0];
        }
        if (shapes[i].size() == 3) in_c = shapes[i][0];
    }
}

/// Single-branch forward. When `trace` is non-null every layer output is
/// recorded (residual layers and merge extraction need them).
template <typename S>
TensorPtr<S> forward_single(const BranchGraph<S>& g, const TensorPtr<S>& x, Mode mode,
                            std::vector<TensorPtr<S>>* trace = nullptr) {
    if (x->rank() != 4)
        throw ShapeError(strcat_msg("forward: input must be NCHW, got ",
                                    shape_to_string(x->shape)));
    if (Shape{x->dim(1), x->dim(2), x->dim(3)} != g.input_shape)
        throw ShapeError(strcat_msg("forward: input ", shape_to_string(x->shape),
                                    " does not match graph input ",
                                    shape_to_string(g.input_shape)));
    std::vector<TensorPtr<S>> outputs;
    outputs.reserve(g.layers.size());
    TensorPtr<S> cur = x;
    for (size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        const LayerParams<S>& p = g.params[i];
        switch (l.kind) {
            case LayerKind::ConvBlock:
                cur = conv2d(cur, p.weight, p.bias, l.stride, l.padding);
                cur = batchnorm(cur, p.gamma, p.beta, p.running_mean, p.running_var, mode);
                cur = relu(cur);
                break;
            case LayerKind::MaxPool:
                cur = maxpool2x2(cur);
                break;
            case LayerKind::GlobalAvgPool:
                cur = global_avgpool(cur);
                break;
            case LayerKind::Dense:
                cur = dense(cur, p.weight, p.bias);
                break;
            case LayerKind::ResidualAdd:
                cur = elementwise_add(cur, outputs[l.from]);
                break;
        }
        outputs.push_back(cur);
    }
    if (trace) *trace = std::move(outputs);
    return cur;
}

// ---------------------------------------------------------------------------
// resource accounting
// ---------------------------------------------------------------------------

struct ResourceCount {
    int64_t param_count = 0;
    int64_t param_bytes = 0; // 32-bit storage
    int64_t macs_per_inference = 0;
};

inline int64_t conv_param_count(int64_t in_c, int64_t out_c, int64_t kernel) {
    return out_c * in_c * kernel * kernel + out_c;
}

inline int64_t bn_param_count(int64_t channels) { return 4 * channels; }

inline int64_t dense_param_count(int64_t in_f, int64_t out_f) { return in_f * out_f + out_f; }

inline int64_t conv_macs(int64_t in_c, int64_t out_c, int64_t kernel, int64_t oh, int64_t ow) {
    return oh * ow * out_c * in_c * kernel * kernel;
}

inline int64_t dense_macs(int64_t in_f, int64_t out_f) { return in_f * out_f; }

/// Named architectures. "tiny4" is the desk-scale workhorse; "tinyres"
/// adds a residual join to exercise skip-connection handling.
template <typename S>
BranchGraph<S> make_architecture(const std::string& name, Shape input_shape,
                                 int64_t num_classes) {
    BranchGraph<S> g;
    g.input_shape = std::move(input_shape);
    g.num_classes = num_classes;
    if (name == "tiny4") {
        g.layers = {LayerSpec::conv_block(8),  LayerSpec::maxpool(),
                    LayerSpec::conv_block(16), LayerSpec::maxpool(),
                    LayerSpec::conv_block(24), LayerSpec::conv_block(32),
                    LayerSpec::global_avgpool(), LayerSpec::dense(num_classes)};
    } else if (name == "tinyres") {
        g.layers = {LayerSpec::conv_block(8),        LayerSpec::maxpool(),
                    LayerSpec::conv_block(16),       LayerSpec::conv_block(16),
                    LayerSpec::residual_add(2),      LayerSpec::maxpool(),
                    LayerSpec::conv_block(24),       LayerSpec::global_avgpool(),
                    LayerSpec::dense(num_classes)};
    } else {
        throw ValidationError(strcat_msg("unknown architecture '", name,
                                         "' (known: tiny4, tinyres)"));
    }
    mark_residual_endpoints_unprunable(g);
    g.params.assign(g.layers.size(), LayerParams<S>{});
    validate_graph(g);
    return g;
}

/// Exact parameter/MAC accounting from layer hyperparameters. MACs count
/// conv and dense multiply-accumulates for a single input; BN, activations
/// and pooling contribute none.
template <typename S>
ResourceCount count_resources(const BranchGraph<S>& g) {
    auto shapes = layer_output_shapes(g);
    ResourceCount rc;
    int64_t in_c = g.input_shape[0];
    int64_t in_features = 0;
    for (size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        if (l.kind == LayerKind::ConvBlock) {
            rc.param_count += conv_param_count(in_c, l.channel_count, l.kernel);
            rc.param_count += bn_param_count(l.channel_count);
            rc.macs_per_inference +=
                conv_macs(in_c, l.channel_count, l.kernel, shapes[i][1], shapes[i][2]);
        } else if (l.kind == LayerKind::Dense) {
            rc.param_count += dense_param_count(in_features, l.channel_count);
            rc.macs_per_inference += dense_macs(in_features, l.channel_count);
        } else if (l.kind == LayerKind::GlobalAvgPool) {
            in_features = shapes[i][0];
        }
        if (shapes[i].size() == 3) in_c = shapes[i][0];
    }
    rc.param_bytes = rc.param_count * 4;
    return rc;
}

} // namespace tbnet
