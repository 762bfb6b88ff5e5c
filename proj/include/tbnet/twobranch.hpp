#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tbnet/graph.hpp"

namespace tbnet {

enum class Branch { Ree, Tee };

inline const char* branch_name(Branch b) { return b == Branch::Ree ? "ree" : "tee"; }

/// A one-way feature-map edge. src_layer/dst_layer index into the owning
/// branch's layer list; the merge adds the src output into the dst output.
struct MergePoint {
    Branch src_branch = Branch::Ree;
    int64_t src_layer = -1;
    Branch dst_branch = Branch::Tee;
    int64_t dst_layer = -1;
};

/// Substitution model: an unsecured branch (full victim architecture and
/// weights), a confidential branch (same architecture, independently
/// trained and later pruned), and merge edges flowing only ree -> tee.
/// alignment_maps stay empty until finalization; afterwards map[m][j] is
/// the ree channel added into tee channel j at merge point m.
template <typename S>
struct TwoBranchModel {
    BranchGraph<S> ree;
    BranchGraph<S> tee;
    std::vector<MergePoint> merge_points;
    std::vector<std::vector<int64_t>> alignment_maps;
    bool finalized = false;
    bool merge_logits = true;

    TwoBranchModel<S> clone() const {
        TwoBranchModel<S> m;
        m.ree = ree.clone();
        m.tee = tee.clone();
        m.merge_points = merge_points;
        m.alignment_maps = alignment_maps;
        m.finalized = finalized;
        m.merge_logits = merge_logits;
        return m;
    }
};

template <typename S>
std::vector<int64_t> layer_indices_of_kind(const BranchGraph<S>& g, LayerKind kind) {
    std::vector<int64_t> out;
    for (size_t i = 0; i < g.layers.size(); ++i)
        if (g.layers[i].kind == kind) out.push_back(static_cast<int64_t>(i));
    return out;
}

/// Conv blocks paired across the branches, in chain order. Pairs share the
/// prune decision, so a pair is prunable only if both sides are.
struct ConvPair {
    int64_t ree_layer = -1;
    int64_t tee_layer = -1;
    bool prunable = false;
};

template <typename S>
std::vector<ConvPair> paired_conv_layers(const TwoBranchModel<S>& model) {
    auto r = layer_indices_of_kind(model.ree, LayerKind::ConvBlock);
    auto t = layer_indices_of_kind(model.tee, LayerKind::ConvBlock);
    if (r.size() != t.size())
        throw ValidationError(strcat_msg("branches disagree on conv block count: ", r.size(),
                                         " vs ", t.size()));
    std::vector<ConvPair> pairs;
    pairs.reserve(r.size());
    for (size_t k = 0; k < r.size(); ++k) {
        bool pr = model.ree.layers[r[k]].prunable && model.tee.layers[t[k]].prunable;
        pairs.push_back({r[k], t[k], pr});
    }
    return pairs;
}

template <typename S>
void validate_twobranch(const TwoBranchModel<S>& model) {
    validate_graph(model.ree);
    validate_graph(model.tee);
    if (model.merge_points.empty()) throw ValidationError("model has no merge points");

    auto tee_convs = layer_indices_of_kind(model.tee, LayerKind::ConvBlock);
    std::unordered_set<int64_t> merged_dsts;
    int64_t prev_dst = -1;
    for (size_t m = 0; m < model.merge_points.size(); ++m) {
        const MergePoint& mp = model.merge_points[m];
        if (mp.src_branch != Branch::Ree || mp.dst_branch != Branch::Tee)
            throw ValidationError(strcat_msg("merge point ", m, ": dataflow must be ree->tee, got ",
                                             branch_name(mp.src_branch), "->",
                                             branch_name(mp.dst_branch)));
        if (mp.src_layer < 0 || mp.src_layer >= static_cast<int64_t>(model.ree.layers.size()))
            throw ValidationError(strcat_msg("merge point ", m, ": src layer ", mp.src_layer,
                                             " out of range"));
        if (mp.dst_layer < 0 || mp.dst_layer >= static_cast<int64_t>(model.tee.layers.size()))
            throw ValidationError(strcat_msg("merge point ", m, ": dst layer ", mp.dst_layer,
                                             " out of range"));
        if (mp.dst_layer <= prev_dst)
            throw ValidationError(strcat_msg("merge point ", m, ": dst layers must increase"));
        prev_dst = mp.dst_layer;
        const LayerKind sk = model.ree.layers[mp.src_layer].kind;
        const LayerKind dk = model.tee.layers[mp.dst_layer].kind;
        if (sk != dk || (sk != LayerKind::ConvBlock && sk != LayerKind::Dense))
            throw ValidationError(strcat_msg("merge point ", m, ": endpoints must be matching conv",
                                             " blocks or classifiers, got ", layer_kind_name(sk),
                                             "/", layer_kind_name(dk)));
        merged_dsts.insert(mp.dst_layer);

        const int64_t src_c = model.ree.layers[mp.src_layer].channel_count;
        const int64_t dst_c = model.tee.layers[mp.dst_layer].channel_count;
        if (!model.finalized) {
            if (src_c != dst_c)
                throw ValidationError(strcat_msg("merge point ", m, ": channel mismatch ", src_c,
                                                 " vs ", dst_c));
        } else {
            if (model.alignment_maps.size() != model.merge_points.size())
                throw ValidationError(strcat_msg("finalized model has ", model.alignment_maps.size(),
                                                 " alignment maps for ", model.merge_points.size(),
                                                 " merge points"));
            const auto& map = model.alignment_maps[m];
            if (static_cast<int64_t>(map.size()) != dst_c)
                throw ValidationError(strcat_msg("merge point ", m, ": map has ", map.size(),
                                                 " entries for ", dst_c, " channels"));
            std::unordered_set<int64_t> seen;
            for (int64_t idx : map) {
                if (idx < 0 || idx >= src_c)
                    throw ValidationError(strcat_msg("merge point ", m, ": map entry ", idx,
                                                     " outside source width ", src_c));
                if (!seen.insert(idx).second)
                    throw ValidationError(strcat_msg("merge point ", m, ": map entry ", idx,
                                                     " repeats"));
            }
        }
    }
    for (int64_t c : tee_convs)
        if (!merged_dsts.count(c))
            throw ValidationError(strcat_msg("conv block ", c, " in tee has no merge point"));
}

template <typename S>
void name_params(BranchGraph<S>& g, const std::string& prefix) {
    for (size_t i = 0; i < g.layers.size(); ++i) {
        LayerParams<S>& p = g.params[i];
        const std::string base = strcat_msg(prefix, "layer", i, ".");
        if (p.weight) p.weight->name = base + (g.layers[i].kind == LayerKind::Dense
                                                   ? "dense.weight"
                                                   : "conv.weight");
        if (p.bias) p.bias->name = base + (g.layers[i].kind == LayerKind::Dense ? "dense.bias"
                                                                                : "conv.bias");
        if (p.gamma) p.gamma->name = base + "bn.gamma";
        if (p.beta) p.beta->name = base + "bn.beta";
        if (p.running_mean) p.running_mean->name = base + "bn.running_mean";
        if (p.running_var) p.running_var->name = base + "bn.running_var";
    }
}

/// Build the substitution model from a trained victim. The unsecured branch
/// copies the victim verbatim, dropping residual joins so its exported file
/// is a plain chain. The confidential branch keeps the full architecture
/// with freshly seeded weights. One merge point follows every tee conv
/// block, plus the classifier logits when merge_logits is set.
template <typename S>
TwoBranchModel<S> init_twobranch(const BranchGraph<S>& victim, uint64_t seed,
                                 bool merge_logits = true) {
    validate_graph(victim);
    TwoBranchModel<S> model;
    model.merge_logits = merge_logits;

    model.ree.input_shape = victim.input_shape;
    model.ree.num_classes = victim.num_classes;
    for (size_t i = 0; i < victim.layers.size(); ++i) {
        if (victim.layers[i].kind == LayerKind::ResidualAdd) continue;
        model.ree.layers.push_back(victim.layers[i]);
        model.ree.params.push_back(victim.params[i].clone());
    }
    name_params(model.ree, "ree.");

    model.tee.layers = victim.layers;
    model.tee.input_shape = victim.input_shape;
    model.tee.num_classes = victim.num_classes;
    Rng rng(derive_seed(seed, "tee-init"));
    init_params(model.tee, rng, "tee.");
    mark_residual_endpoints_unprunable(model.tee);

    auto ree_convs = layer_indices_of_kind(model.ree, LayerKind::ConvBlock);
    auto tee_convs = layer_indices_of_kind(model.tee, LayerKind::ConvBlock);
    for (size_t k = 0; k < tee_convs.size(); ++k)
        model.merge_points.push_back({Branch::Ree, ree_convs[k], Branch::Tee, tee_convs[k]});
    if (merge_logits) {
        const int64_t rd = static_cast<int64_t>(model.ree.layers.size()) - 1;
        const int64_t td = static_cast<int64_t>(model.tee.layers.size()) - 1;
        model.merge_points.push_back({Branch::Ree, rd, Branch::Tee, td});
    }

    for (const ConvPair& pc : paired_conv_layers(model)) {
        model.ree.layers[pc.ree_layer].prunable = pc.prunable;
        model.tee.layers[pc.tee_layer].prunable = pc.prunable;
    }

    validate_twobranch(model);
    return model;
}

template <typename S>
struct TwoBranchOutput {
    TensorPtr<S> logits;                    // merged classifier output
    std::vector<TensorPtr<S>> ree_outputs;  // per-layer unsecured branch
    std::vector<TensorPtr<S>> tee_outputs;  // per-layer, post-merge values

    TensorPtr<S> ree_logits() const { return ree_outputs.back(); }
};

/// Joint forward pass. The unsecured branch runs untouched; each merge adds
/// its (aligned) output into the confidential branch, and the merged value
/// is what flows onward there, residual paths included. ree_mode lets a
/// frozen unsecured branch run with inference-time normalization while the
/// confidential branch trains.
template <typename S>
TwoBranchOutput<S> forward_twobranch(const TwoBranchModel<S>& model, const TensorPtr<S>& x,
                                     Mode mode, Mode ree_mode) {
    TwoBranchOutput<S> out;
    forward_single(model.ree, x, ree_mode, &out.ree_outputs);

    std::unordered_map<int64_t, size_t> merge_at;
    for (size_t m = 0; m < model.merge_points.size(); ++m)
        merge_at[model.merge_points[m].dst_layer] = m;

    const BranchGraph<S>& g = model.tee;
    std::vector<TensorPtr<S>>& outputs = out.tee_outputs;
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
        auto it = merge_at.find(static_cast<int64_t>(i));
        if (it != merge_at.end()) {
            const size_t m = it->second;
            TensorPtr<S> r = out.ree_outputs[model.merge_points[m].src_layer];
            if (model.finalized) r = gather_channels(r, model.alignment_maps[m]);
            if (r->shape != cur->shape)
                throw ValidationError(strcat_msg("merge point ", m, ": shape mismatch ",
                                                 shape_to_string(r->shape), " vs ",
                                                 shape_to_string(cur->shape)));
            cur = elementwise_add(cur, r);
        }
        outputs.push_back(cur);
    }
    out.logits = cur;
    return out;
}

template <typename S>
TwoBranchOutput<S> forward_twobranch(const TwoBranchModel<S>& model, const TensorPtr<S>& x,
                                     Mode mode) {
    return forward_twobranch(model, x, mode, mode);
}

} // namespace tbnet
