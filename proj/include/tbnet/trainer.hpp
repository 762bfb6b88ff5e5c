#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tbnet/dataset.hpp"
#include "tbnet/optim.hpp"
#include "tbnet/twobranch.hpp"

namespace tbnet {

/// How the sparsity penalty reads its argument: L1 of the per-channel sum
/// of paired BN scales (the default reading), or the sum of separate L1
/// terms per branch.
enum class SparsityMode { CompositeSum, SeparateL1 };

inline SparsityMode sparsity_mode_from_string(const std::string& s) {
    if (s == "composite") return SparsityMode::CompositeSum;
    if (s == "separate") return SparsityMode::SeparateL1;
    throw ValidationError(strcat_msg("unknown sparsity mode '", s,
                                     "' (expected composite or separate)"));
}

struct TrainConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int64_t epochs = 10;
    int64_t batch_size = 64;
    int64_t lr_schedule_period = 5; // lr/10 every period; full-scale runs use 100
    double lambda_sparsity = 1e-4;
    SparsityMode sparsity_mode = SparsityMode::CompositeSum;
    uint64_t seed = 1;

    void validate() const {
        if (!(lr > 0) || !std::isfinite(lr)) throw ValidationError("lr must be finite positive");
        if (momentum < 0 || momentum >= 1) throw ValidationError("momentum must be in [0,1)");
        if (weight_decay < 0 || !std::isfinite(weight_decay))
            throw ValidationError("weight_decay must be finite nonnegative");
        if (epochs < 0) throw ValidationError("epochs must be nonnegative");
        if (batch_size < 1) throw ValidationError("batch_size must be positive");
        if (lr_schedule_period < 0) throw ValidationError("lr_schedule_period must be nonnegative");
        if (lambda_sparsity < 0 || !std::isfinite(lambda_sparsity))
            throw ValidationError("lambda_sparsity must be finite nonnegative");
    }
};

struct EpochMetrics {
    int64_t epoch = 0;
    double train_loss = 0;
    double eval_accuracy = 0;       // two-branch (or single branch for victim runs)
    double ree_accuracy = 0;        // unsecured branch alone
    double tee_accuracy = 0;        // confidential branch alone
};

/// Mean cross-entropy of the merged logits plus the sparsity penalty on
/// paired BN scales. Cross-entropy gradients flow through the graph; the
/// penalty subgradient is added directly onto the gamma gradients, with
/// sign(0) = 0.
template <typename S>
double loss_eq1(TwoBranchModel<S>& model, const TensorPtr<S>& x,
                const std::vector<int64_t>& labels, double lambda,
                SparsityMode mode = SparsityMode::CompositeSum) {
    if (model.finalized) throw StageError("loss requires a pre-finalization model");
    auto fwd = forward_twobranch(model, x, Mode::Train);
    auto loss = softmax_cross_entropy(fwd.logits, labels);
    double total = static_cast<double>(loss->data[0]);
    backward(loss);

    if (lambda != 0) {
        for (const ConvPair& pc : paired_conv_layers(model)) {
            auto& gr = model.ree.params[pc.ree_layer].gamma;
            auto& gt = model.tee.params[pc.tee_layer].gamma;
            gr->ensure_grad();
            gt->ensure_grad();
            for (size_t c = 0; c < gr->data.size(); ++c) {
                if (mode == SparsityMode::CompositeSum) {
                    const double s = static_cast<double>(gr->data[c]) +
                                     static_cast<double>(gt->data[c]);
                    total += lambda * std::abs(s);
                    const S sg = static_cast<S>(lambda * (s > 0 ? 1.0 : (s < 0 ? -1.0 : 0.0)));
                    gr->grad[c] += sg;
                    gt->grad[c] += sg;
                } else {
                    const double vr = static_cast<double>(gr->data[c]);
                    const double vt = static_cast<double>(gt->data[c]);
                    total += lambda * (std::abs(vr) + std::abs(vt));
                    gr->grad[c] += static_cast<S>(lambda * (vr > 0 ? 1.0 : (vr < 0 ? -1.0 : 0.0)));
                    gt->grad[c] += static_cast<S>(lambda * (vt > 0 ? 1.0 : (vt < 0 ? -1.0 : 0.0)));
                }
            }
        }
    }
    if (!std::isfinite(total)) throw NumericError(strcat_msg("loss is not finite: ", total));
    return total;
}

/// Accuracy of argmax predictions under eval-mode normalization. The
/// forward function maps a batch to logits.
template <typename S>
double evaluate(const std::function<TensorPtr<S>(const TensorPtr<S>&)>& forward_fn,
                const Dataset& ds, int64_t batch_size = 256) {
    if (ds.size() == 0) throw ValidationError("cannot evaluate on an empty dataset");
    NoGradGuard guard;
    int64_t correct = 0;
    for (int64_t start = 0; start < ds.size(); start += batch_size) {
        const int64_t count = std::min(batch_size, ds.size() - start);
        auto logits = forward_fn(ds.batch_images(start, count));
        const int64_t k = logits->dim(1);
        for (int64_t i = 0; i < count; ++i) {
            int64_t best = 0;
            for (int64_t j = 1; j < k; ++j)
                if (logits->data[i * k + j] > logits->data[i * k + best]) best = j;
            if (best == ds.labels[start + i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

template <typename S>
double evaluate_single(const BranchGraph<S>& g, const Dataset& ds, int64_t batch_size = 256) {
    return evaluate<S>([&](const TensorPtr<S>& x) { return forward_single(g, x, Mode::Eval); },
                       ds, batch_size);
}

template <typename S>
double evaluate_twobranch(const TwoBranchModel<S>& m, const Dataset& ds,
                          int64_t batch_size = 256) {
    return evaluate<S>(
        [&](const TensorPtr<S>& x) { return forward_twobranch(m, x, Mode::Eval).logits; }, ds,
        batch_size);
}

namespace detail {

inline std::vector<int64_t> epoch_order(int64_t n, Rng& rng) {
    std::vector<int64_t> order(n);
    for (int64_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    return order;
}

template <typename S>
TensorPtr<S> gather_batch(const Dataset& ds, const std::vector<int64_t>& order, int64_t start,
                          int64_t count, std::vector<int64_t>& labels) {
    auto x = Tensor<S>::zeros({count, ds.channels, ds.height, ds.width});
    labels.resize(count);
    const int64_t n = ds.image_numel();
    for (int64_t i = 0; i < count; ++i) {
        const int64_t row = order[start + i];
        for (int64_t j = 0; j < n; ++j)
            x->data[i * n + j] = static_cast<S>(ds.images[row * n + j]);
        labels[i] = ds.labels[row];
    }
    return x;
}

} // namespace detail

/// Supervised training of a single branch with plain cross-entropy.
template <typename S>
std::vector<EpochMetrics> train_victim(BranchGraph<S>& g, const Dataset& train,
                                       const Dataset& test, const TrainConfig& cfg) {
    cfg.validate();
    if (train.size() == 0) throw ValidationError("cannot train on an empty dataset");
    validate_graph(g);
    auto params = g.parameters();
    Sgd<S> opt(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.lr_schedule_period);
    Rng shuffle_rng(derive_seed(cfg.seed, "victim-shuffle"));
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
            try {
                auto logits = forward_single(g, x, Mode::Train);
                auto loss = softmax_cross_entropy(logits, labels);
                const double lv = static_cast<double>(loss->data[0]);
                if (!std::isfinite(lv)) throw NumericError(strcat_msg("loss ", lv));
                backward(loss);
                opt.step(params);
                loss_sum += lv;
            } catch (const NumericError& e) {
                throw NumericError(strcat_msg("victim training diverged at epoch ", epoch,
                                              " batch ", batches, ": ", e.what()));
            }
            ++batches;
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.train_loss = loss_sum / static_cast<double>(batches);
        m.eval_accuracy = evaluate_single(g, test);
        metrics.push_back(m);
    }
    return metrics;
}

/// Knowledge transfer: both branches update concurrently against the
/// penalized objective each mini-batch.
template <typename S>
std::vector<EpochMetrics> train_transfer(TwoBranchModel<S>& model, const Dataset& train,
                                         const Dataset& test, const TrainConfig& cfg) {
    cfg.validate();
    if (train.size() == 0) throw ValidationError("cannot train on an empty dataset");
    if (model.finalized) throw StageError("transfer requires a pre-finalization model");
    validate_twobranch(model);

    std::vector<TensorPtr<S>> params = model.ree.parameters();
    for (const auto& t : model.tee.parameters()) params.push_back(t);
    Sgd<S> opt(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.lr_schedule_period);
    Rng shuffle_rng(derive_seed(cfg.seed, "transfer-shuffle"));
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
            try {
                const double lv =
                    loss_eq1(model, x, labels, cfg.lambda_sparsity, cfg.sparsity_mode);
                opt.step(params);
                loss_sum += lv;
            } catch (const NumericError& e) {
                throw NumericError(strcat_msg("transfer diverged at epoch ", epoch, " batch ",
                                              batches, ": ", e.what()));
            }
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
    return metrics;
}

} // namespace tbnet
