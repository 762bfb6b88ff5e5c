#pragma once

#include <cstdint>
#include <vector>

#include "tbnet/pruner.hpp"
#include "tbnet/trainer.hpp"
#include "tbnet/twobranch.hpp"

namespace tbnet {

/// Alignment maps for every merge point from the mask the last accepted
/// iteration applied: a pruned pair maps tee channel order to the set-bit
/// positions in the pre-prune ordering, everything else is identity.
template <typename S>
std::vector<std::vector<int64_t>> build_alignment_maps(const ChannelMask& mask,
                                                       const TwoBranchModel<S>& model) {
    std::vector<std::vector<int64_t>> maps;
    maps.reserve(model.merge_points.size());
    for (size_t m = 0; m < model.merge_points.size(); ++m) {
        const MergePoint& mp = model.merge_points[m];
        const int64_t src_c = model.ree.layers[mp.src_layer].channel_count;
        const int64_t dst_c = model.tee.layers[mp.dst_layer].channel_count;

        const std::vector<uint8_t>* bits = nullptr;
        for (size_t p = 0; p < mask.pairs.size(); ++p)
            if (mask.pairs[p].tee_layer == mp.dst_layer) {
                bits = &mask.layer_bits[p];
                break;
            }

        std::vector<int64_t> map;
        if (bits) {
            if (static_cast<int64_t>(bits->size()) != src_c)
                throw ValidationError(strcat_msg("merge point ", m, ": mask has ", bits->size(),
                                                 " bits but the unsecured side kept ", src_c,
                                                 " channels"));
            for (size_t c = 0; c < bits->size(); ++c)
                if ((*bits)[c]) map.push_back(static_cast<int64_t>(c));
            if (static_cast<int64_t>(map.size()) != dst_c)
                throw ValidationError(strcat_msg("merge point ", m, ": mask keeps ", map.size(),
                                                 " channels but the confidential side has ",
                                                 dst_c));
        } else {
            if (src_c != dst_c)
                throw ValidationError(strcat_msg("merge point ", m, ": unmasked layer widths ",
                                                 "disagree, ", src_c, " vs ", dst_c));
            map.resize(dst_c);
            for (int64_t c = 0; c < dst_c; ++c) map[c] = c;
        }
        maps.push_back(std::move(map));
    }
    return maps;
}

/// Final assembly: the confidential branch comes from the last accepted
/// checkpoint k, the unsecured branch from the retrained checkpoint k-1, so
/// the public model misses the channels iteration k removed. Alignment maps
/// let the confidential branch extract exactly its surviving channels.
template <typename S>
TwoBranchModel<S> rollback_mr(const std::vector<PruneCheckpoint<S>>& history) {
    if (history.size() < 2)
        throw StageError(strcat_msg("rollback needs the post-transfer state plus at least one ",
                                    "accepted pruning iteration; history has ", history.size(),
                                    " checkpoints. Run pruning first."));
    const PruneCheckpoint<S>& prev = history[history.size() - 2];
    const PruneCheckpoint<S>& last = history.back();

    TwoBranchModel<S> out;
    out.ree = prev.model.ree.clone();
    out.tee = last.model.tee.clone();
    out.merge_points = last.model.merge_points;
    out.merge_logits = last.model.merge_logits;
    out.finalized = true;
    out.alignment_maps = build_alignment_maps(last.mask, out);
    for (size_t m = 0; m < out.merge_points.size(); ++m) {
        const MergePoint& mp = out.merge_points[m];
        if (out.ree.layers[mp.src_layer].channel_count <
            out.tee.layers[mp.dst_layer].channel_count)
            throw ValidationError(strcat_msg("merge point ", m,
                                             ": rolled-back unsecured side is narrower than the ",
                                             "confidential side"));
    }
    validate_twobranch(out);
    return out;
}

/// Recover accuracy after rollback by training the confidential branch
/// against the now-fixed unsecured branch. The unsecured branch stays
/// bit-identical: its parameters take no updates and its normalization
/// runs in inference mode.
template <typename S>
std::vector<EpochMetrics> posthoc_finetune(TwoBranchModel<S>& model, const Dataset& train,
                                           const Dataset& test, const TrainConfig& cfg) {
    cfg.validate();
    if (!model.finalized) throw StageError("posthoc finetune requires a finalized model");
    if (train.size() == 0) throw ValidationError("cannot finetune on an empty dataset");

    model.ree.set_requires_grad(false);
    auto params = model.tee.parameters();
    Sgd<S> opt(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.lr_schedule_period);
    Rng shuffle_rng(derive_seed(cfg.seed, "posthoc-shuffle"));
    std::vector<EpochMetrics> metrics;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        auto order = detail::epoch_order(train.size(), shuffle_rng);
        double loss_sum = 0;
        int64_t batches = 0;
        for (int64_t start = 0; start < train.size(); start += cfg.batch_size) {
            const int64_t count = std::min(cfg.batch_size, train.size() - start);
            std::vector<int64_t> labels;
            auto x = detail::gather_batch<S>(train, order, start, count, labels);
            opt.zero_grad(params);
            auto fwd = forward_twobranch(model, x, Mode::Train, Mode::Eval);
            auto loss = softmax_cross_entropy(fwd.logits, labels);
            const double lv = static_cast<double>(loss->data[0]);
            if (!std::isfinite(lv))
                throw NumericError(strcat_msg("posthoc finetune diverged at epoch ", epoch,
                                              " batch ", batches, ": loss ", lv));
            backward(loss);
            opt.step(params);
            loss_sum += lv;
            ++batches;
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.train_loss = loss_sum / static_cast<double>(batches);
        m.eval_accuracy = evaluate_twobranch(model, test);
        m.ree_accuracy = evaluate_single(model.ree, test);
        m.tee_accuracy = evaluate_single(model.tee, test);
        metrics.push_back(m);
    }
    model.ree.set_requires_grad(true);
    return metrics;
}

} // namespace tbnet
