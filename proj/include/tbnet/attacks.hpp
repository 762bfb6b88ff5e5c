#pragma once

#include <string>
#include <vector>

#include "tbnet/dataset.hpp"
#include "tbnet/trainer.hpp"
#include "tbnet/twobranch.hpp"

namespace tbnet {

/// Attacker lifts the unsecured branch and uses it as-is. Takes only the
/// REE file path: the confidential file is not an input by design.
double attack_direct_use(const std::string& ree_file, const Dataset& test);

struct FinetunePoint {
    double fraction = 0;
    double accuracy = 0;
};

/// Attacker fine-tunes a fresh copy of the lifted branch per data
/// fraction; fractions must lie in (0,1].
std::vector<FinetunePoint> attack_finetune(const std::string& ree_file,
                                           const std::vector<double>& fractions,
                                           const Dataset& train, const Dataset& test,
                                           const TrainConfig& cfg);

/// Attacker keeps only the confidential branch (merge inputs become zero)
/// and retrains it from its current weights; returns the best epoch's test
/// accuracy.
double tee_only_retrain(const TwoBranchModel<float>& model, const Dataset& train,
                        const Dataset& test, const TrainConfig& cfg);

} // namespace tbnet
