#include "tbnet/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace tbnet {

using nlohmann::json;

namespace {

void write_u32_le(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<char*>(b), 4);
}

uint32_t read_u32_le(std::istream& in, const std::string& path, size_t offset) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(strcat_msg(path, ": truncated at byte ", offset));
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
           (uint32_t(b[3]) << 24);
}

void write_f32_le(std::ostream& out, const std::vector<float>& values) {
    static_assert(sizeof(float) == 4);
    for (float f : values) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        write_u32_le(out, bits);
    }
}

void read_f32_le(std::istream& in, float* dst, size_t count, const std::string& path,
                 size_t offset) {
    std::vector<unsigned char> buf(count * 4);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw FormatError(strcat_msg(path, ": weight section truncated at byte ",
                                     offset + static_cast<size_t>(in.gcount())));
    for (size_t i = 0; i < count; ++i) {
        const uint32_t bits = uint32_t(buf[i * 4]) | (uint32_t(buf[i * 4 + 1]) << 8) |
                              (uint32_t(buf[i * 4 + 2]) << 16) | (uint32_t(buf[i * 4 + 3]) << 24);
        std::memcpy(dst + i, &bits, 4);
    }
}

void write_container(const std::string& path, const json& header,
                     const std::vector<TensorPtr<float>>& sections) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(strcat_msg(path, ": cannot open for writing"));
    out.write(kTbntMagic, 4);
    write_u32_le(out, kTbntVersion);
    const std::string h = header.dump();
    write_u32_le(out, static_cast<uint32_t>(h.size()));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& t : sections) write_f32_le(out, t->data);
    if (!out) throw FormatError(strcat_msg(path, ": write failed"));
}

struct OpenContainer {
    std::ifstream in;
    json header;
    size_t weight_offset = 0;
    std::string path;
};

OpenContainer open_container(const std::string& path) {
    OpenContainer c;
    c.path = path;
    c.in.open(path, std::ios::binary);
    if (!c.in) throw FormatError(strcat_msg(path, ": cannot open"));
    char magic[4];
    if (!c.in.read(magic, 4)) throw FormatError(strcat_msg(path, ": truncated at byte 0"));
    if (std::memcmp(magic, kTbntMagic, 4) != 0)
        throw FormatError(strcat_msg(path, ": bad magic at byte 0 (not a model container)"));
    const uint32_t version = read_u32_le(c.in, path, 4);
    if (version != kTbntVersion)
        throw FormatError(strcat_msg(path, ": unsupported container version ", version));
    const uint32_t hlen = read_u32_le(c.in, path, 8);
    std::string h(hlen, '\0');
    if (!c.in.read(h.data(), hlen))
        throw FormatError(strcat_msg(path, ": header truncated at byte ",
                                     12 + static_cast<size_t>(c.in.gcount())));
    try {
        c.header = json::parse(h);
    } catch (const json::exception& e) {
        throw FormatError(strcat_msg(path, ": header is not valid JSON: ", e.what()));
    }
    c.weight_offset = 12 + hlen;
    return c;
}

TbntInfo info_from_header(const json& h) {
    TbntInfo info;
    info.kind = h.value("kind", "");
    info.stage = h.value("stage", "");
    info.config_hash = h.value("config_hash", "");
    info.header = h;
    return info;
}

/// Read one graph's weight sections in declaration order; shapes come from
/// the layer specs.
void read_graph_weights(OpenContainer& c, BranchGraph<float>& g) {
    auto shapes = layer_output_shapes(g);
    g.params.assign(g.layers.size(), LayerParams<float>{});
    int64_t in_c = g.input_shape[0];
    int64_t in_features = 0;
    size_t offset = c.weight_offset;
    auto read_tensor = [&](Shape s, bool rg) {
        auto t = Tensor<float>::zeros(std::move(s), rg);
        read_f32_le(c.in, t->data.data(), t->data.size(), c.path, offset);
        offset += t->data.size() * 4;
        return t;
    };
    for (size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        LayerParams<float>& p = g.params[i];
        if (l.kind == LayerKind::ConvBlock) {
            p.weight = read_tensor({l.channel_count, in_c, l.kernel, l.kernel}, true);
            p.bias = read_tensor({l.channel_count}, true);
            p.gamma = read_tensor({l.channel_count}, true);
            p.beta = read_tensor({l.channel_count}, true);
            p.running_mean = read_tensor({l.channel_count}, false);
            p.running_var = read_tensor({l.channel_count}, false);
            in_c = l.channel_count;
        } else if (l.kind == LayerKind::Dense) {
            p.weight = read_tensor({l.channel_count, in_features}, true);
            p.bias = read_tensor({l.channel_count}, true);
        } else if (l.kind == LayerKind::GlobalAvgPool) {
            in_features = shapes[i][0];
        }
        if (shapes[i].size() == 3) in_c = shapes[i][0];
    }
    c.weight_offset = offset;
}

void expect_end(OpenContainer& c) {
    char extra;
    if (c.in.read(&extra, 1))
        throw FormatError(strcat_msg(c.path, ": trailing bytes after weight sections at byte ",
                                     c.weight_offset));
}

void expect_kind(const TbntInfo& info, const std::string& want, const std::string& path) {
    if (info.kind != want)
        throw FormatError(strcat_msg(path, ": container holds '", info.kind, "', expected '",
                                     want, "'"));
}

json merge_point_to_json(const MergePoint& mp) {
    return json{{"src_branch", branch_name(mp.src_branch)},
                {"src_layer", mp.src_layer},
                {"dst_branch", branch_name(mp.dst_branch)},
                {"dst_layer", mp.dst_layer}};
}

MergePoint merge_point_from_json(const json& j) {
    MergePoint mp;
    const std::string src = j.at("src_branch").get<std::string>();
    const std::string dst = j.at("dst_branch").get<std::string>();
    if ((src != "ree" && src != "tee") || (dst != "ree" && dst != "tee"))
        throw FormatError(strcat_msg("merge point names unknown branch '", src, "'/'", dst, "'"));
    mp.src_branch = src == "ree" ? Branch::Ree : Branch::Tee;
    mp.dst_branch = dst == "ree" ? Branch::Ree : Branch::Tee;
    mp.src_layer = j.at("src_layer").get<int64_t>();
    mp.dst_layer = j.at("dst_layer").get<int64_t>();
    return mp;
}

json base_header(const std::string& kind, const std::string& stage,
                 const std::string& config_hash, const json& extra) {
    json h;
    if (extra.is_object()) h = extra;
    h["kind"] = kind;
    h["stage"] = stage;
    h["config_hash"] = config_hash;
    return h;
}

} // namespace

json graph_to_json(const BranchGraph<float>& g) {
    json layers = json::array();
    for (const LayerSpec& l : g.layers) {
        json j{{"kind", layer_kind_name(l.kind)}};
        switch (l.kind) {
            case LayerKind::ConvBlock:
                j["channels"] = l.channel_count;
                j["kernel"] = l.kernel;
                j["stride"] = l.stride;
                j["padding"] = l.padding;
                j["prunable"] = l.prunable;
                break;
            case LayerKind::Dense:
                j["channels"] = l.channel_count;
                break;
            case LayerKind::ResidualAdd:
                j["from"] = l.from;
                break;
            default:
                break;
        }
        layers.push_back(std::move(j));
    }
    return json{{"input_shape", g.input_shape}, {"num_classes", g.num_classes},
                {"layers", std::move(layers)}};
}

BranchGraph<float> graph_from_json(const json& j) {
    BranchGraph<float> g;
    g.input_shape = j.at("input_shape").get<Shape>();
    g.num_classes = j.at("num_classes").get<int64_t>();
    for (const json& lj : j.at("layers")) {
        const std::string kind = lj.at("kind").get<std::string>();
        LayerSpec l;
        if (kind == "conv_block") {
            l = LayerSpec::conv_block(lj.at("channels").get<int64_t>(),
                                      lj.at("kernel").get<int64_t>(),
                                      lj.at("stride").get<int64_t>(),
                                      lj.at("padding").get<int64_t>());
            l.prunable = lj.value("prunable", true);
        } else if (kind == "maxpool") {
            l = LayerSpec::maxpool();
        } else if (kind == "global_avgpool") {
            l = LayerSpec::global_avgpool();
        } else if (kind == "dense") {
            l = LayerSpec::dense(lj.at("channels").get<int64_t>());
        } else if (kind == "residual_add") {
            l = LayerSpec::residual_add(lj.at("from").get<int64_t>());
        } else {
            throw FormatError(strcat_msg("unknown layer kind '", kind, "'"));
        }
        g.layers.push_back(l);
    }
    return g;
}

json mask_to_json(const ChannelMask& mask) {
    json pairs = json::array();
    for (const ConvPair& pc : mask.pairs)
        pairs.push_back(json{{"ree_layer", pc.ree_layer},
                             {"tee_layer", pc.tee_layer},
                             {"prunable", pc.prunable}});
    json bits = json::array();
    for (const auto& b : mask.layer_bits) bits.push_back(std::vector<int>(b.begin(), b.end()));
    return json{{"pairs", std::move(pairs)},
                {"layer_bits", std::move(bits)},
                {"forced_retained", mask.forced_retained}};
}

ChannelMask mask_from_json(const json& j) {
    ChannelMask mask;
    for (const json& pj : j.at("pairs")) {
        ConvPair pc;
        pc.ree_layer = pj.at("ree_layer").get<int64_t>();
        pc.tee_layer = pj.at("tee_layer").get<int64_t>();
        pc.prunable = pj.value("prunable", true);
        mask.pairs.push_back(pc);
    }
    for (const json& bj : j.at("layer_bits")) {
        std::vector<uint8_t> bits;
        for (const json& v : bj) bits.push_back(static_cast<uint8_t>(v.get<int>()));
        mask.layer_bits.push_back(std::move(bits));
    }
    mask.forced_retained = j.value("forced_retained", int64_t(0));
    if (mask.pairs.size() != mask.layer_bits.size())
        throw FormatError("mask pairs and bit vectors disagree in length");
    return mask;
}

TbntInfo peek_info(const std::string& path) {
    auto c = open_container(path);
    return info_from_header(c.header);
}

int64_t weight_section_bytes(const BranchGraph<float>& g) {
    int64_t n = 0;
    for (const auto& t : g.value_tensors()) n += static_cast<int64_t>(t->data.size());
    return n * 4;
}

void save_victim(const std::string& path, const BranchGraph<float>& g, const std::string& stage,
                 const std::string& config_hash, const json& extra) {
    validate_graph(g);
    json h = base_header("victim", stage, config_hash, extra);
    h["graph"] = graph_to_json(g);
    write_container(path, h, g.value_tensors());
}

BranchGraph<float> load_victim(const std::string& path, TbntInfo* info) {
    auto c = open_container(path);
    auto i = info_from_header(c.header);
    expect_kind(i, "victim", path);
    auto g = graph_from_json(c.header.at("graph"));
    read_graph_weights(c, g);
    expect_end(c);
    name_params(g, "");
    validate_graph(g);
    if (info) *info = std::move(i);
    return g;
}

namespace {

json twobranch_header(const TwoBranchModel<float>& model) {
    json mps = json::array();
    for (const MergePoint& mp : model.merge_points) mps.push_back(merge_point_to_json(mp));
    json h;
    h["ree"] = graph_to_json(model.ree);
    h["tee"] = graph_to_json(model.tee);
    h["merge_points"] = std::move(mps);
    h["merge_logits"] = model.merge_logits;
    h["finalized"] = model.finalized;
    if (model.finalized) h["alignment_maps"] = model.alignment_maps;
    return h;
}

TwoBranchModel<float> twobranch_from_container(OpenContainer& c) {
    TwoBranchModel<float> model;
    model.ree = graph_from_json(c.header.at("ree"));
    model.tee = graph_from_json(c.header.at("tee"));
    for (const json& mj : c.header.at("merge_points"))
        model.merge_points.push_back(merge_point_from_json(mj));
    model.merge_logits = c.header.value("merge_logits", true);
    model.finalized = c.header.value("finalized", false);
    if (model.finalized)
        model.alignment_maps =
            c.header.at("alignment_maps").get<std::vector<std::vector<int64_t>>>();
    read_graph_weights(c, model.ree);
    read_graph_weights(c, model.tee);
    expect_end(c);
    name_params(model.ree, "ree.");
    name_params(model.tee, "tee.");
    validate_twobranch(model);
    return model;
}

std::vector<TensorPtr<float>> twobranch_sections(const TwoBranchModel<float>& model) {
    auto sections = model.ree.value_tensors();
    for (const auto& t : model.tee.value_tensors()) sections.push_back(t);
    return sections;
}

} // namespace

void save_twobranch(const std::string& path, const TwoBranchModel<float>& model,
                    const std::string& stage, const std::string& config_hash, const json& extra) {
    validate_twobranch(model);
    json h = base_header("twobranch", stage, config_hash, extra);
    h.update(twobranch_header(model));
    write_container(path, h, twobranch_sections(model));
}

TwoBranchModel<float> load_twobranch(const std::string& path, TbntInfo* info) {
    auto c = open_container(path);
    auto i = info_from_header(c.header);
    expect_kind(i, "twobranch", path);
    auto model = twobranch_from_container(c);
    if (info) *info = std::move(i);
    return model;
}

void save_checkpoint(const std::string& path, const PruneCheckpoint<float>& ck,
                     const std::string& config_hash) {
    validate_twobranch(ck.model);
    json h = base_header("checkpoint", "prune", config_hash, {});
    h.update(twobranch_header(ck.model));
    h["iteration"] = ck.iteration;
    h["accuracy"] = ck.accuracy;
    h["mask"] = mask_to_json(ck.mask);
    write_container(path, h, twobranch_sections(ck.model));
}

PruneCheckpoint<float> load_checkpoint(const std::string& path, TbntInfo* info) {
    auto c = open_container(path);
    auto i = info_from_header(c.header);
    expect_kind(i, "checkpoint", path);
    PruneCheckpoint<float> ck;
    ck.iteration = c.header.at("iteration").get<int64_t>();
    ck.accuracy = c.header.at("accuracy").get<double>();
    ck.mask = mask_from_json(c.header.at("mask"));
    ck.model = twobranch_from_container(c);
    if (info) *info = std::move(i);
    return ck;
}

void save_history(const std::string& dir, const PruneResult<float>& result,
                  const std::string& config_hash) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json entries = json::array();
    for (const auto& ck : result.history) {
        char name[32];
        std::snprintf(name, sizeof(name), "checkpoint_%03lld.tbnt",
                      static_cast<long long>(ck.iteration));
        save_checkpoint((fs::path(dir) / name).string(), ck, config_hash);
        entries.push_back(json{{"iteration", ck.iteration},
                               {"file", name},
                               {"accuracy", ck.accuracy},
                               {"kept_channels", ck.mask.popcount()},
                               {"total_channels", ck.mask.total_channels()}});
    }
    json manifest{{"config_hash", config_hash},
                  {"status", prune_status_name(result.status)},
                  {"accepted_iterations", result.accepted_iterations},
                  {"checkpoints", std::move(entries)}};
    std::ofstream out(fs::path(dir) / "history.json");
    if (!out) throw FormatError(strcat_msg(dir, "/history.json: cannot open for writing"));
    out << manifest.dump(2) << "\n";
}

HistoryBundle load_history(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest_path = fs::path(dir) / "history.json";
    std::ifstream in(manifest_path);
    if (!in) throw FormatError(strcat_msg(manifest_path.string(), ": cannot open"));
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw FormatError(strcat_msg(manifest_path.string(), ": not valid JSON: ", e.what()));
    }
    HistoryBundle bundle;
    const std::string status = manifest.value("status", "ok");
    if (status == "ok") bundle.status = PruneStatus::Ok;
    else if (status == "budget_never_met") bundle.status = PruneStatus::BudgetNeverMet;
    else if (status == "exhausted") bundle.status = PruneStatus::Exhausted;
    else throw FormatError(strcat_msg(manifest_path.string(), ": unknown status '", status, "'"));
    bundle.accepted_iterations = manifest.value("accepted_iterations", int64_t(0));
    for (const json& e : manifest.at("checkpoints")) {
        const std::string file = e.at("file").get<std::string>();
        bundle.history.push_back(load_checkpoint((fs::path(dir) / file).string()));
    }
    return bundle;
}

void export_split(const TwoBranchModel<float>& model, const std::string& ree_path,
                  const std::string& tee_path, const std::string& config_hash) {
    if (!model.finalized) throw StageError("split export requires a finalized model");
    validate_twobranch(model);

    json rh = base_header("ree", "export", config_hash, {});
    rh["graph"] = graph_to_json(model.ree);
    write_container(ree_path, rh, model.ree.value_tensors());

    json mps = json::array();
    for (const MergePoint& mp : model.merge_points) mps.push_back(merge_point_to_json(mp));
    json th = base_header("tee", "export", config_hash, {});
    th["graph"] = graph_to_json(model.tee);
    th["merge_points"] = std::move(mps);
    th["merge_logits"] = model.merge_logits;
    th["alignment_maps"] = model.alignment_maps;
    write_container(tee_path, th, model.tee.value_tensors());
}

BranchGraph<float> load_ree(const std::string& path, TbntInfo* info) {
    auto c = open_container(path);
    auto i = info_from_header(c.header);
    if (i.kind == "tee")
        throw ValidationError(strcat_msg(path, ": refusing to load a confidential-branch file ",
                                         "into the unsecured context"));
    expect_kind(i, "ree", path);
    auto g = graph_from_json(c.header.at("graph"));
    read_graph_weights(c, g);
    expect_end(c);
    name_params(g, "ree.");
    validate_graph(g);
    if (info) *info = std::move(i);
    return g;
}

TeeBundle load_tee(const std::string& path, TbntInfo* info) {
    auto c = open_container(path);
    auto i = info_from_header(c.header);
    expect_kind(i, "tee", path);
    TeeBundle bundle;
    bundle.graph = graph_from_json(c.header.at("graph"));
    for (const json& mj : c.header.at("merge_points"))
        bundle.merge_points.push_back(merge_point_from_json(mj));
    bundle.merge_logits = c.header.value("merge_logits", true);
    bundle.alignment_maps = c.header.at("alignment_maps").get<std::vector<std::vector<int64_t>>>();
    read_graph_weights(c, bundle.graph);
    expect_end(c);
    name_params(bundle.graph, "tee.");
    validate_graph(bundle.graph);
    if (info) *info = std::move(i);
    return bundle;
}

} // namespace tbnet
