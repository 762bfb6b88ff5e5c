#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbnet/graph.hpp"
#include "tbnet/pruner.hpp"
#include "tbnet/twobranch.hpp"

namespace tbnet {

inline constexpr uint32_t kTbntVersion = 1;
inline constexpr char kTbntMagic[4] = {'T', 'B', 'N', 'T'};

/// Parsed container header: magic "TBNT", version, then a UTF-8 JSON
/// document describing the payload, then 32-bit little-endian weights.
struct TbntInfo {
    std::string kind;        // victim | twobranch | checkpoint | ree | tee
    std::string stage;       // pipeline stage that produced the file
    std::string config_hash;
    nlohmann::json header;
};

/// Header only; stops before the weight sections.
TbntInfo peek_info(const std::string& path);

void save_victim(const std::string& path, const BranchGraph<float>& graph,
                 const std::string& stage, const std::string& config_hash,
                 const nlohmann::json& extra = {});
BranchGraph<float> load_victim(const std::string& path, TbntInfo* info = nullptr);

void save_twobranch(const std::string& path, const TwoBranchModel<float>& model,
                    const std::string& stage, const std::string& config_hash,
                    const nlohmann::json& extra = {});
TwoBranchModel<float> load_twobranch(const std::string& path, TbntInfo* info = nullptr);

void save_checkpoint(const std::string& path, const PruneCheckpoint<float>& ck,
                     const std::string& config_hash);
PruneCheckpoint<float> load_checkpoint(const std::string& path, TbntInfo* info = nullptr);

/// Writes the prune history as one checkpoint file per iteration plus a
/// manifest index, into `dir`.
void save_history(const std::string& dir, const PruneResult<float>& result,
                  const std::string& config_hash);

struct HistoryBundle {
    std::vector<PruneCheckpoint<float>> history;
    PruneStatus status = PruneStatus::Ok;
    int64_t accepted_iterations = 0;
};
HistoryBundle load_history(const std::string& dir);

/// Deployable pair: the REE file carries only the unsecured branch; the
/// TEE file carries the confidential branch, merge topology, and every
/// alignment map.
void export_split(const TwoBranchModel<float>& model, const std::string& ree_path,
                  const std::string& tee_path, const std::string& config_hash);

BranchGraph<float> load_ree(const std::string& path, TbntInfo* info = nullptr);

struct TeeBundle {
    BranchGraph<float> graph;
    std::vector<MergePoint> merge_points;
    std::vector<std::vector<int64_t>> alignment_maps;
    bool merge_logits = true;
};
TeeBundle load_tee(const std::string& path, TbntInfo* info = nullptr);

/// Byte length of the weight sections a graph serializes to.
int64_t weight_section_bytes(const BranchGraph<float>& graph);

nlohmann::json graph_to_json(const BranchGraph<float>& graph);
BranchGraph<float> graph_from_json(const nlohmann::json& j);

nlohmann::json mask_to_json(const ChannelMask& mask);
ChannelMask mask_from_json(const nlohmann::json& j);

} // namespace tbnet
