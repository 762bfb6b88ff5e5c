#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "tbnet/config.hpp"

namespace tbnet {

/// Workflow commands in stage order. Each reads the artifacts of the
/// previous stage out of the work directory, verifies they were produced
/// under the same configuration, and writes its own artifacts plus a JSON
/// summary for the final report.
inline const std::vector<std::string>& pipeline_commands() {
    static const std::vector<std::string> cmds = {"train-victim", "init",     "transfer",
                                                  "prune",        "finalize", "export",
                                                  "simulate",     "attack",   "report"};
    return cmds;
}

void run_command(const std::string& command, const std::string& workdir, const Config& cfg,
                 std::ostream& out);

// Artifact names inside the work directory.
namespace artifact {
inline constexpr const char* kVictim = "victim.tbnt";
inline constexpr const char* kVictimSummary = "victim.json";
inline constexpr const char* kInit = "twobranch_init.tbnt";
inline constexpr const char* kTransfer = "twobranch_transfer.tbnt";
inline constexpr const char* kTransferMetrics = "transfer_metrics.jsonl";
inline constexpr const char* kTransferSummary = "transfer.json";
inline constexpr const char* kPruneDir = "prune";
inline constexpr const char* kPruned = "twobranch_pruned.tbnt";
inline constexpr const char* kPruneSummary = "prune.json";
inline constexpr const char* kFinalized = "finalized.tbnt";
inline constexpr const char* kPosthocMetrics = "posthoc_metrics.jsonl";
inline constexpr const char* kFinalizeSummary = "finalize.json";
inline constexpr const char* kRee = "model.ree.tbnt";
inline constexpr const char* kTee = "model.tee.tbnt";
inline constexpr const char* kSimulateSummary = "simulate.json";
inline constexpr const char* kAuditLog = "audit.jsonl";
inline constexpr const char* kAttackSummary = "attack.json";
inline constexpr const char* kReport = "report.json";
} // namespace artifact

} // namespace tbnet
