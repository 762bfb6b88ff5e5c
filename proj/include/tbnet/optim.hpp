#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "tbnet/tensor.hpp"

namespace tbnet {

/// SGD with momentum, weight decay and a step learning-rate schedule
/// (rate divided by 10 every schedule_period epochs).
template <typename S>
class Sgd {
public:
    Sgd(S lr, S momentum, S weight_decay, int schedule_period = 0)
        : base_lr_(lr), momentum_(momentum), weight_decay_(weight_decay),
          schedule_period_(schedule_period) {}

    void set_epoch(int epoch) { epoch_ = epoch; }
    int epoch() const { return epoch_; }

    S effective_lr() const {
        if (schedule_period_ <= 0) return base_lr_;
        int drops = epoch_ / schedule_period_;
        S lr = base_lr_;
        for (int i = 0; i < drops; ++i) lr /= S(10);
        return lr;
    }

    /// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    void step(const std::vector<TensorPtr<S>>& params) {
        const S lr = effective_lr();
        for (const auto& p : params) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            auto& v = velocity_[p.get()];
            if (v.size() != p->data.size()) v.assign(p->data.size(), S(0));
            for (size_t i = 0; i < p->data.size(); ++i) {
                const S g = p->grad[i];
                if (!std::isfinite(g))
                    throw NumericError(strcat_msg("non-finite gradient in parameter '",
                                                  p->name.empty() ? "<unnamed>" : p->name,
                                                  "' at index ", i));
                v[i] = momentum_ * v[i] + g + weight_decay_ * p->data[i];
                p->data[i] -= lr * v[i];
            }
        }
    }

    void zero_grad(const std::vector<TensorPtr<S>>& params) {
        for (const auto& p : params) {
            p->ensure_grad();
            p->zero_grad();
        }
    }

    /// Momentum buffers are deliberately dropped on checkpoint restore;
    /// retraining restarts them from zero.
    void reset_state() { velocity_.clear(); }

private:
    S base_lr_;
    S momentum_;
    S weight_decay_;
    int schedule_period_;
    int epoch_ = 0;
    std::unordered_map<Tensor<S>*, std::vector<S>> velocity_;
};

} // namespace tbnet
