#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tbnet/serialize.hpp"
#include "tbnet/tensor.hpp"

namespace tbnet {

enum class Direction { ReeToTee, TeeToUser, TeeToRee };

inline const char* direction_name(Direction d) {
    switch (d) {
        case Direction::ReeToTee: return "ree_to_tee";
        case Direction::TeeToUser: return "tee_to_user";
        case Direction::TeeToRee: return "tee_to_ree";
    }
    return "?";
}

/// Fixed per-message framing cost: sequence number, merge-point id, and
/// element count, 8 bytes each.
inline constexpr int64_t kMessageHeaderBytes = 24;

/// One feature-map transmission on the REE->TEE channel.
struct Message {
    int64_t sequence = 0;
    int64_t merge_point = 0;
    Shape shape;
    std::vector<float> payload;

    int64_t byte_size() const {
        return static_cast<int64_t>(payload.size()) * 4 + kMessageHeaderBytes;
    }
};

struct AuditRecord {
    int64_t ordinal = 0; // monotone per log, stands in for a timestamp
    Direction direction = Direction::ReeToTee;
    int64_t merge_point = -1; // -1 for the user-output port
    int64_t bytes = 0;
    bool tensor_payload = false;
};

/// Append-only traffic record, owned by the harness; neither context holds
/// a handle to it.
class AuditLog {
  public:
    void append(Direction direction, int64_t merge_point, int64_t bytes, bool tensor_payload) {
        records_.push_back({static_cast<int64_t>(records_.size()), direction, merge_point, bytes,
                            tensor_payload});
    }
    const std::vector<AuditRecord>& records() const { return records_; }
    bool empty() const { return records_.empty(); }

  private:
    std::vector<AuditRecord> records_;
};

struct AuditViolation {
    int64_t record = -1; // ordinal, or -1 for a log-wide rule
    std::string reason;
};

struct AuditResult {
    bool pass = false;
    std::vector<AuditViolation> violations;
};

/// Verifies one inference's traffic: no tensor-bearing TEE->REE record,
/// exactly one user-output record, and one merge message per merge point.
AuditResult audit_check(const AuditLog& log, int64_t expected_merge_messages);

struct ResourceReport {
    int64_t ree_param_bytes = 0;
    int64_t tee_param_bytes = 0;
    int64_t ree_macs = 0;
    int64_t tee_macs = 0;
    int64_t message_bytes_per_inference = 0;
    int64_t baseline_tee_param_bytes = 0; // victim held fully in the TEE
    int64_t baseline_tee_macs = 0;
    double memory_reduction_ratio = 0;    // baseline / tee bytes
    double mac_reduction_ratio = 0;       // baseline / tee MACs
};

/// Unsecured-side executor. Loads only the REE file (a confidential file
/// is refused) and pushes designated layer outputs onto the one-way
/// channel. It never sees alignment maps.
class ReeContext {
  public:
    explicit ReeContext(const std::string& ree_file);

    /// Runs the chain and emits one message per entry of send_layers (the
    /// protocol's transmission schedule), in order.
    std::vector<Message> run(const TensorPtr<float>& x,
                             const std::vector<int64_t>& send_layers) const;

    int64_t alignment_map_count() const { return 0; } // introspection: none exist here
    const BranchGraph<float>& graph() const { return graph_; }

  private:
    BranchGraph<float> graph_;
};

/// Confidential-side executor. Constructed with no channel handle or any
/// other REE-directed send capability: its only output is the return value
/// of run(), the user port.
class TeeContext {
  public:
    explicit TeeContext(const std::string& tee_file);

    struct Output {
        std::vector<float> logits;
        int64_t predicted = -1;
    };

    /// Consumes the ordered inbox; every merge point must find its message
    /// next in line.
    Output run(const TensorPtr<float>& x, const std::vector<Message>& inbox) const;

    const BranchGraph<float>& graph() const { return bundle_.graph; }
    const std::vector<MergePoint>& merge_points() const { return bundle_.merge_points; }
    const std::vector<std::vector<int64_t>>& alignment_maps() const {
        return bundle_.alignment_maps;
    }

  private:
    TeeBundle bundle_;
};

struct SplitPrediction {
    int64_t predicted = -1;
    std::vector<float> logits;
    AuditLog audit;
    ResourceReport report;
};

/// Harness joining the two contexts with an ordered one-way channel and
/// the audit log.
class SplitRuntime {
  public:
    static SplitRuntime deploy(const std::string& ree_file, const std::string& tee_file);

    SplitPrediction infer(const TensorPtr<float>& x);

    /// Accounting against a victim file held fully inside the TEE.
    ResourceReport resource_report(const std::string& victim_file) const;

    const AuditLog& session_audit() const { return session_audit_; }
    const ReeContext& ree() const { return ree_; }
    const TeeContext& tee() const { return tee_; }

    /// Layer indices of the unsecured chain whose outputs cross the
    /// channel, in merge order.
    const std::vector<int64_t>& send_schedule() const { return send_schedule_; }

  private:
    SplitRuntime(ReeContext ree, TeeContext tee);

    ReeContext ree_;
    TeeContext tee_;
    std::vector<int64_t> send_schedule_;
    AuditLog session_audit_;
};

} // namespace tbnet
