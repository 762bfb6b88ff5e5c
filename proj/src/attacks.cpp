#include "tbnet/attacks.hpp"

#include <cmath>

#include "tbnet/serialize.hpp"

namespace tbnet {

double attack_direct_use(const std::string& ree_file, const Dataset& test) {
    const auto graph = load_ree(ree_file);
    return evaluate_single(graph, test);
}

std::vector<FinetunePoint> attack_finetune(const std::string& ree_file,
                                           const std::vector<double>& fractions,
                                           const Dataset& train, const Dataset& test,
                                           const TrainConfig& cfg) {
    cfg.validate();
    for (double q : fractions)
        if (!(q > 0) || q > 1)
            throw ValidationError(strcat_msg("fraction ", q, " outside (0,1]"));

    const auto base = load_ree(ree_file);
    std::vector<FinetunePoint> curve;
    curve.reserve(fractions.size());
    for (double q : fractions) {
        const int64_t n = static_cast<int64_t>(std::floor(q * static_cast<double>(train.size())));
        if (n < 1)
            throw ValidationError(strcat_msg("fraction ", q, " of ", train.size(),
                                             " training rows is empty"));
        TrainConfig run = cfg;
        run.seed = derive_seed(cfg.seed, strcat_msg("attack-finetune-", q));
        const Dataset part =
            n == train.size() ? train : subset(train, n, derive_seed(run.seed, "attack-subset"));
        BranchGraph<float> copy = base.clone();
        train_victim(copy, part, test, run);
        curve.push_back({q, evaluate_single(copy, test)});
    }
    return curve;
}

double tee_only_retrain(const TwoBranchModel<float>& model, const Dataset& train,
                        const Dataset& test, const TrainConfig& cfg) {
    cfg.validate();
    BranchGraph<float> tee = model.tee.clone();
    TrainConfig run = cfg;
    run.seed = derive_seed(cfg.seed, "tee-only-retrain");
    const auto metrics = train_victim(tee, train, test, run);
    double best = evaluate_single(tee, test);
    for (const EpochMetrics& m : metrics) best = std::max(best, m.eval_accuracy);
    return best;
}

} // namespace tbnet
