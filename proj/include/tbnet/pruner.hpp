#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "tbnet/trainer.hpp"
#include "tbnet/twobranch.hpp"

namespace tbnet {

/// Keep/prune decision per channel of every prunable conv pair, in pair
/// order. bit 1 = keep.
struct ChannelMask {
    std::vector<ConvPair> pairs;
    std::vector<std::vector<uint8_t>> layer_bits;
    int64_t forced_retained = 0;

    bool empty() const { return pairs.empty(); }
    int64_t total_channels() const {
        int64_t n = 0;
        for (const auto& b : layer_bits) n += static_cast<int64_t>(b.size());
        return n;
    }
    int64_t popcount() const {
        int64_t n = 0;
        for (const auto& b : layer_bits)
            for (uint8_t v : b) n += v;
        return n;
    }
};

struct ChannelIndexEntry {
    int64_t pair = 0;    // index into BnCollection::pairs
    int64_t channel = 0; // channel within that layer
};

/// Flat |gamma| magnitudes over all prunable channels, plus the table
/// mapping flat index back to (pair, channel).
struct BnCollection {
    std::vector<double> bn_r;
    std::vector<double> bn_t;
    std::vector<ChannelIndexEntry> table;
    std::vector<ConvPair> pairs;

    int64_t size() const { return static_cast<int64_t>(table.size()); }
};

template <typename S>
BnCollection collect_bn_weights(const TwoBranchModel<S>& model) {
    BnCollection col;
    for (const ConvPair& pc : paired_conv_layers(model)) {
        if (!pc.prunable) continue;
        const auto& gr = model.ree.params[pc.ree_layer].gamma;
        const auto& gt = model.tee.params[pc.tee_layer].gamma;
        if (gr->data.size() != gt->data.size())
            throw ValidationError(strcat_msg("pairing error: ree layer ", pc.ree_layer, " has ",
                                             gr->data.size(), " channels, tee layer ",
                                             pc.tee_layer, " has ", gt->data.size()));
        const int64_t pair_idx = static_cast<int64_t>(col.pairs.size());
        col.pairs.push_back(pc);
        for (size_t c = 0; c < gr->data.size(); ++c) {
            col.bn_r.push_back(std::abs(static_cast<double>(gr->data[c])));
            col.bn_t.push_back(std::abs(static_cast<double>(gt->data[c])));
            col.table.push_back({pair_idx, static_cast<int64_t>(c)});
        }
    }
    return col;
}

inline std::vector<double> composite_weights(const std::vector<double>& bn_r,
                                             const std::vector<double>& bn_t) {
    if (bn_r.size() != bn_t.size())
        throw ValidationError(strcat_msg("composite: length mismatch ", bn_r.size(), " vs ",
                                         bn_t.size()));
    std::vector<double> bn(bn_r.size());
    for (size_t i = 0; i < bn.size(); ++i) bn[i] = bn_r[i] + bn_t[i];
    return bn;
}

/// Ascending sort, element at floor(N*p).
inline double compute_threshold(const std::vector<double>& bn, double p) {
    const int64_t n = static_cast<int64_t>(bn.size());
    if (n < 2) throw ValidationError(strcat_msg("threshold needs >= 2 channels, got ", n));
    if (!(p > 0) || !(p < 1)) throw ValidationError(strcat_msg("prune ratio ", p, " outside (0,1)"));
    std::vector<double> sorted = bn;
    std::sort(sorted.begin(), sorted.end());
    return sorted[static_cast<size_t>(static_cast<double>(n) * p)];
}

/// Keep channels strictly above T; ties prune. A layer that would lose all
/// channels keeps its single largest-composite channel (first index on a
/// tie).
inline ChannelMask build_mask(const std::vector<double>& bn, double T, const BnCollection& col) {
    if (bn.size() != col.table.size())
        throw ValidationError(strcat_msg("mask: ", bn.size(), " composites for ",
                                         col.table.size(), " channels"));
    ChannelMask mask;
    mask.pairs = col.pairs;
    mask.layer_bits.resize(col.pairs.size());
    std::vector<std::vector<double>> layer_bn(col.pairs.size());
    for (size_t i = 0; i < bn.size(); ++i) {
        const auto& e = col.table[i];
        mask.layer_bits[e.pair].push_back(bn[i] > T ? 1 : 0);
        layer_bn[e.pair].push_back(bn[i]);
    }
    for (size_t p = 0; p < mask.layer_bits.size(); ++p) {
        auto& bits = mask.layer_bits[p];
        if (std::find(bits.begin(), bits.end(), uint8_t(1)) != bits.end()) continue;
        const size_t best = static_cast<size_t>(
            std::max_element(layer_bn[p].begin(), layer_bn[p].end()) - layer_bn[p].begin());
        bits[best] = 1;
        ++mask.forced_retained;
    }
    return mask;
}

namespace detail {

template <typename S>
TensorPtr<S> slice_rows(const TensorPtr<S>& t, const std::vector<int64_t>& keep) {
    Shape s = t->shape;
    const int64_t row = shape_numel(s) / s[0];
    s[0] = static_cast<int64_t>(keep.size());
    auto out = Tensor<S>::zeros(s, t->requires_grad);
    out->name = t->name;
    for (size_t i = 0; i < keep.size(); ++i)
        std::copy(t->data.begin() + keep[i] * row, t->data.begin() + (keep[i] + 1) * row,
                  out->data.begin() + static_cast<int64_t>(i) * row);
    return out;
}

/// Keep input slices (dim 1) of a conv weight OIHW.
template <typename S>
TensorPtr<S> slice_conv_inputs(const TensorPtr<S>& w, const std::vector<int64_t>& keep) {
    Shape s = w->shape;
    const int64_t o = s[0], in_c = s[1], k2 = s[2] * s[3];
    s[1] = static_cast<int64_t>(keep.size());
    auto out = Tensor<S>::zeros(s, w->requires_grad);
    out->name = w->name;
    for (int64_t oc = 0; oc < o; ++oc)
        for (size_t i = 0; i < keep.size(); ++i)
            std::copy(w->data.begin() + (oc * in_c + keep[i]) * k2,
                      w->data.begin() + (oc * in_c + keep[i] + 1) * k2,
                      out->data.begin() + (oc * static_cast<int64_t>(keep.size()) +
                                           static_cast<int64_t>(i)) * k2);
    return out;
}

/// Keep columns of a dense weight (O,I).
template <typename S>
TensorPtr<S> slice_dense_inputs(const TensorPtr<S>& w, const std::vector<int64_t>& keep) {
    Shape s = w->shape;
    const int64_t o = s[0], in_f = s[1];
    s[1] = static_cast<int64_t>(keep.size());
    auto out = Tensor<S>::zeros(s, w->requires_grad);
    out->name = w->name;
    for (int64_t r = 0; r < o; ++r)
        for (size_t i = 0; i < keep.size(); ++i)
            out->data[r * static_cast<int64_t>(keep.size()) + static_cast<int64_t>(i)] =
                w->data[r * in_f + keep[i]];
    return out;
}

/// Remove a conv layer's pruned output channels and the matching input
/// slices of the next conv or dense layer downstream.
template <typename S>
void prune_layer(BranchGraph<S>& g, int64_t layer, const std::vector<int64_t>& keep) {
    LayerParams<S>& p = g.params[layer];
    p.weight = slice_rows(p.weight, keep);
    p.bias = slice_rows(p.bias, keep);
    p.gamma = slice_rows(p.gamma, keep);
    p.beta = slice_rows(p.beta, keep);
    p.running_mean = slice_rows(p.running_mean, keep);
    p.running_var = slice_rows(p.running_var, keep);
    g.layers[layer].channel_count = static_cast<int64_t>(keep.size());

    for (size_t j = layer + 1; j < g.layers.size(); ++j) {
        switch (g.layers[j].kind) {
            case LayerKind::MaxPool:
            case LayerKind::GlobalAvgPool:
                continue; // channels pass through
            case LayerKind::ConvBlock:
                g.params[j].weight = slice_conv_inputs(g.params[j].weight, keep);
                return;
            case LayerKind::Dense:
                g.params[j].weight = slice_dense_inputs(g.params[j].weight, keep);
                return;
            case LayerKind::ResidualAdd:
                throw ValidationError(strcat_msg("layer ", layer,
                                                 " feeds a residual join and cannot be pruned"));
        }
    }
    throw ValidationError(strcat_msg("layer ", layer, " has no downstream consumer"));
}

} // namespace detail

/// Structurally remove masked-off channels from BOTH branches. Merge-point
/// pairing is preserved because the same keep set applies to each side.
template <typename S>
TwoBranchModel<S> apply_mask(const TwoBranchModel<S>& model, const ChannelMask& mask) {
    auto pairs = paired_conv_layers(model);
    std::vector<ConvPair> prunable;
    for (const ConvPair& pc : pairs)
        if (pc.prunable) prunable.push_back(pc);
    if (mask.pairs.size() != prunable.size())
        throw ValidationError(strcat_msg("mask covers ", mask.pairs.size(), " layers, model has ",
                                         prunable.size(), " prunable pairs"));

    TwoBranchModel<S> out = model.clone();
    for (size_t p = 0; p < prunable.size(); ++p) {
        const ConvPair& pc = prunable[p];
        if (mask.pairs[p].ree_layer != pc.ree_layer || mask.pairs[p].tee_layer != pc.tee_layer)
            throw ValidationError(strcat_msg("mask drift at pair ", p, ": expected layers (",
                                             pc.ree_layer, ",", pc.tee_layer, "), mask has (",
                                             mask.pairs[p].ree_layer, ",",
                                             mask.pairs[p].tee_layer, ")"));
        const auto& bits = mask.layer_bits[p];
        if (static_cast<int64_t>(bits.size()) != model.tee.layers[pc.tee_layer].channel_count)
            throw ValidationError(strcat_msg("mask drift at pair ", p, ": ", bits.size(),
                                             " bits for ",
                                             model.tee.layers[pc.tee_layer].channel_count,
                                             " channels"));
        std::vector<int64_t> keep;
        for (size_t c = 0; c < bits.size(); ++c)
            if (bits[c]) keep.push_back(static_cast<int64_t>(c));
        if (keep.empty())
            throw ValidationError(strcat_msg("mask drift at pair ", p, ": no surviving channels"));
        if (keep.size() == bits.size()) continue;
        detail::prune_layer(out.ree, pc.ree_layer, keep);
        detail::prune_layer(out.tee, pc.tee_layer, keep);
    }
    validate_twobranch(out);
    return out;
}

template <typename S>
struct PruneCheckpoint {
    int64_t iteration = 0;     // 0 is the unpruned post-transfer state
    TwoBranchModel<S> model;   // snapshot after this iteration's retrain
    double accuracy = 0;       // two-branch test accuracy of the snapshot
    ChannelMask mask;          // mask applied entering this iteration
};

enum class PruneStatus { Ok, BudgetNeverMet, Exhausted };

inline const char* prune_status_name(PruneStatus s) {
    switch (s) {
        case PruneStatus::Ok: return "ok";
        case PruneStatus::BudgetNeverMet: return "budget_never_met";
        case PruneStatus::Exhausted: return "exhausted";
    }
    return "?";
}

template <typename S>
struct PruneResult {
    TwoBranchModel<S> model;
    std::vector<PruneCheckpoint<S>> history;
    PruneStatus status = PruneStatus::Ok;
    int64_t accepted_iterations = 0;
};

struct PruneConfig {
    double prune_ratio = 0.10;   // p
    double theta_drop = 0.02;    // budget against the victim, in accuracy
    int64_t retrain_epochs = 2;
    int64_t max_iterations = 16;
    TrainConfig retrain;         // lr etc. for the per-iteration retrain
};

/// The prune/retrain loop: composite BN magnitudes pick the weakest
/// floor(N*p) channels globally, both branches lose them, the model
/// retrains, and the iteration is kept while two-branch accuracy stays
/// within theta_drop of the fixed victim accuracy. On a budget violation
/// the last accepted state is restored.
template <typename S>
PruneResult<S> iterative_prune(const TwoBranchModel<S>& input, const Dataset& train,
                               const Dataset& test, const PruneConfig& cfg,
                               double victim_accuracy) {
    if (input.finalized) throw StageError("pruning requires a pre-finalization model");
    if (cfg.max_iterations < 1) throw ValidationError("max_iterations must be positive");

    PruneResult<S> result;
    PruneCheckpoint<S> base;
    base.iteration = 0;
    base.model = input.clone();
    base.accuracy = evaluate_twobranch(input, test);
    result.history.push_back(std::move(base));

    TwoBranchModel<S> current = input.clone();
    for (int64_t k = 1; k <= cfg.max_iterations; ++k) {
        auto col = collect_bn_weights(current);
        if (col.size() < 2) {
            result.status = PruneStatus::Exhausted;
            break;
        }
        auto bn = composite_weights(col.bn_r, col.bn_t);
        const double T = compute_threshold(bn, cfg.prune_ratio);
        ChannelMask mask = build_mask(bn, T, col);
        if (mask.popcount() == mask.total_channels()) {
            result.status = PruneStatus::Exhausted;
            break;
        }

        TwoBranchModel<S> candidate = apply_mask(current, mask);
        TrainConfig retrain = cfg.retrain;
        retrain.epochs = cfg.retrain_epochs;
        retrain.seed = derive_seed(cfg.retrain.seed, strcat_msg("prune-retrain-", k));
        train_transfer(candidate, train, test, retrain);
        const double acc = evaluate_twobranch(candidate, test);
        const double drop = victim_accuracy - acc;
        if (drop > cfg.theta_drop) break; // budget exceeded; keep last accepted state

        PruneCheckpoint<S> ck;
        ck.iteration = k;
        ck.model = candidate.clone();
        ck.accuracy = acc;
        ck.mask = std::move(mask);
        result.history.push_back(std::move(ck));
        current = std::move(candidate);
        ++result.accepted_iterations;
    }

    if (result.accepted_iterations == 0 && result.status != PruneStatus::Exhausted)
        result.status = PruneStatus::BudgetNeverMet;
    result.model = std::move(current);
    return result;
}

} // namespace tbnet
