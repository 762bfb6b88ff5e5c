#include "tbnet/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

#include "tbnet/attacks.hpp"
#include "tbnet/finalizer.hpp"
#include "tbnet/serialize.hpp"
#include "tbnet/split_runtime.hpp"
#include "tbnet/trainer.hpp"

namespace tbnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Stage {
    std::string workdir;
    const Config& cfg;
    std::ostream& out;
    std::string hash;

    std::string path(const char* name) const { return (fs::path(workdir) / name).string(); }
};

Normalization norm_from_config(const Config& cfg, int64_t channels) {
    const auto mean = cfg.get_double_list("data.norm_mean");
    const auto sd = cfg.get_double_list("data.norm_std");
    if (static_cast<int64_t>(mean.size()) != channels ||
        static_cast<int64_t>(sd.size()) != channels)
        throw ValidationError(strcat_msg("normalization lists must have ", channels,
                                         " entries (data has ", channels, " channels)"));
    Normalization n;
    n.mean.assign(mean.begin(), mean.end());
    n.stddev.assign(sd.begin(), sd.end());
    for (float s : n.stddev)
        if (s <= 0) throw ValidationError("data.norm_std entries must be positive");
    return n;
}

Dataset load_split(const Config& cfg, bool train_split) {
    const std::string format = cfg.get("data.format");
    const int64_t classes = cfg.get_int("data.num_classes");
    Dataset ds;
    if (format == "idx") {
        ds = load_idx(cfg.get(train_split ? "data.train_images" : "data.test_images"),
                      cfg.get(train_split ? "data.train_labels" : "data.test_labels"),
                      norm_from_config(cfg, 1), classes);
    } else if (format == "cifar") {
        ds = load_cifar_binary(cfg.get(train_split ? "data.cifar_train" : "data.cifar_test"),
                               norm_from_config(cfg, 3), classes);
    } else {
        throw ValidationError(strcat_msg("data.format '", format, "' (expected idx or cifar)"));
    }
    ds.split = train_split ? "train" : "test";
    const int64_t size = cfg.get_int(train_split ? "data.train_size" : "data.test_size");
    if (size > 0 && size < ds.size())
        ds = subset(ds, size, derive_seed(cfg.get_u64("seed"), ds.split + "-subset"));
    return ds;
}

TrainConfig train_config(const Config& cfg, const std::string& prefix, uint64_t seed_tag_salt) {
    TrainConfig t;
    t.lr = cfg.get_double(prefix + ".lr");
    t.momentum = cfg.get_double(prefix + ".momentum");
    t.weight_decay = cfg.get_double(prefix + ".weight_decay");
    t.epochs = cfg.get_int(prefix + ".epochs");
    t.batch_size = cfg.get_int(prefix + ".batch_size");
    t.lr_schedule_period = cfg.get_int(prefix + ".lr_schedule_period");
    t.seed = derive_seed(cfg.get_u64("seed"), strcat_msg(prefix, "-", seed_tag_salt));
    t.validate();
    return t;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw FormatError(strcat_msg(path, ": cannot open for writing"));
    out << j.dump(2) << "\n";
}

json read_json(const std::string& path, const char* needed_by) {
    std::ifstream in(path);
    if (!in)
        throw StageError(strcat_msg(path, " not found; run `", needed_by, "` first"));
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError(strcat_msg(path, ": not valid JSON: ", e.what()));
    }
    return j;
}

void check_hash(const std::string& artifact_hash, const Stage& s, const std::string& what) {
    if (artifact_hash != s.hash)
        throw StageError(strcat_msg(what, " was produced under a different configuration (hash ",
                                    artifact_hash, ", current ", s.hash,
                                    "); re-run the pipeline from the changed stage"));
}

TbntInfo require_artifact(const Stage& s, const char* name, const std::string& kind,
                          const std::string& producing_command) {
    const std::string p = s.path(name);
    if (!fs::exists(p))
        throw StageError(strcat_msg(p, " not found; run `", producing_command, "` first"));
    TbntInfo info = peek_info(p);
    if (info.kind != kind)
        throw FormatError(strcat_msg(p, ": holds '", info.kind, "', expected '", kind, "'"));
    check_hash(info.config_hash, s, p);
    return info;
}

json metrics_to_json(const EpochMetrics& m) {
    return json{{"epoch", m.epoch},
                {"train_loss", m.train_loss},
                {"eval_accuracy", m.eval_accuracy},
                {"ree_accuracy", m.ree_accuracy},
                {"tee_accuracy", m.tee_accuracy}};
}

void write_metrics_lines(const std::string& path, const std::vector<EpochMetrics>& metrics) {
    std::ofstream out(path);
    if (!out) throw FormatError(strcat_msg(path, ": cannot open for writing"));
    for (const EpochMetrics& m : metrics) out << metrics_to_json(m).dump() << "\n";
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

void cmd_train_victim(Stage& s) {
    const Dataset train = load_split(s.cfg, true);
    const Dataset test = load_split(s.cfg, false);
    Shape input_shape{train.channels, train.height, train.width};
    auto graph = make_architecture<float>(s.cfg.get("arch"), input_shape, train.num_classes);
    Rng rng(derive_seed(s.cfg.get_u64("seed"), "victim-init"));
    init_params(graph, rng);

    const auto metrics = train_victim(graph, train, test, train_config(s.cfg, "victim", 0));
    const double acc = evaluate_single(graph, test);
    const auto rc = count_resources(graph);

    save_victim(s.path(artifact::kVictim), graph, "train-victim", s.hash,
                json{{"test_accuracy", acc}});
    write_json(s.path(artifact::kVictimSummary),
               json{{"config_hash", s.hash},
                    {"victim_accuracy", acc},
                    {"param_count", rc.param_count},
                    {"param_bytes", rc.param_bytes},
                    {"macs_per_inference", rc.macs_per_inference},
                    {"epochs", static_cast<int64_t>(metrics.size())}});
    s.out << "victim accuracy " << acc << " (" << rc.param_count << " params)\n";
}

void cmd_init(Stage& s) {
    require_artifact(s, artifact::kVictim, "victim", "train-victim");
    const auto victim = load_victim(s.path(artifact::kVictim));
    auto model = init_twobranch(victim, s.cfg.get_u64("seed"),
                                s.cfg.get_bool("transfer.merge_logits"));
    save_twobranch(s.path(artifact::kInit), model, "init", s.hash);
    s.out << "two-branch model initialized (" << model.merge_points.size()
          << " merge points)\n";
}

void cmd_transfer(Stage& s) {
    require_artifact(s, artifact::kInit, "twobranch", "init");
    auto model = load_twobranch(s.path(artifact::kInit));
    const Dataset train = load_split(s.cfg, true);
    const Dataset test = load_split(s.cfg, false);

    TrainConfig tc = train_config(s.cfg, "transfer", 0);
    tc.lambda_sparsity = s.cfg.get_double("transfer.lambda");
    tc.sparsity_mode = sparsity_mode_from_string(s.cfg.get("transfer.sparsity_mode"));
    const auto metrics = train_transfer(model, train, test, tc);

    const double acc = metrics.empty() ? evaluate_twobranch(model, test)
                                       : metrics.back().eval_accuracy;
    save_twobranch(s.path(artifact::kTransfer), model, "transfer", s.hash,
                   json{{"test_accuracy", acc}});
    write_metrics_lines(s.path(artifact::kTransferMetrics), metrics);
    write_json(s.path(artifact::kTransferSummary),
               json{{"config_hash", s.hash},
                    {"twobranch_accuracy", acc},
                    {"ree_accuracy", metrics.empty() ? 0.0 : metrics.back().ree_accuracy},
                    {"tee_accuracy", metrics.empty() ? 0.0 : metrics.back().tee_accuracy},
                    {"epochs", static_cast<int64_t>(metrics.size())}});
    s.out << "transfer done, two-branch accuracy " << acc << "\n";
}

void cmd_prune(Stage& s) {
    require_artifact(s, artifact::kTransfer, "twobranch", "transfer");
    const TbntInfo victim_info = require_artifact(s, artifact::kVictim, "victim", "train-victim");
    auto model = load_twobranch(s.path(artifact::kTransfer));
    const Dataset train = load_split(s.cfg, true);
    const Dataset test = load_split(s.cfg, false);

    PruneConfig pc;
    pc.prune_ratio = s.cfg.get_double("prune.ratio");
    pc.theta_drop = s.cfg.get_double("prune.theta_drop");
    pc.retrain_epochs = s.cfg.get_int("prune.retrain_epochs");
    pc.max_iterations = s.cfg.get_int("prune.max_iterations");
    pc.retrain = train_config(s.cfg, "transfer", 1);
    pc.retrain.lambda_sparsity = s.cfg.get_double("transfer.lambda");
    pc.retrain.sparsity_mode = sparsity_mode_from_string(s.cfg.get("transfer.sparsity_mode"));

    const double victim_accuracy = victim_info.header.at("test_accuracy").get<double>();
    auto result = iterative_prune(model, train, test, pc, victim_accuracy);

    save_history(s.path(artifact::kPruneDir), result, s.hash);
    save_twobranch(s.path(artifact::kPruned), result.model, "prune", s.hash);
    json history = json::array();
    for (const auto& ck : result.history)
        history.push_back(json{{"iteration", ck.iteration},
                               {"accuracy", ck.accuracy},
                               {"kept_channels", ck.mask.popcount()},
                               {"total_channels", ck.mask.total_channels()}});
    write_json(s.path(artifact::kPruneSummary),
               json{{"config_hash", s.hash},
                    {"status", prune_status_name(result.status)},
                    {"accepted_iterations", result.accepted_iterations},
                    {"victim_accuracy", victim_accuracy},
                    {"history", std::move(history)}});
    s.out << "prune status " << prune_status_name(result.status) << ", "
          << result.accepted_iterations << " accepted iterations\n";
}

void cmd_finalize(Stage& s) {
    const std::string manifest = (fs::path(s.path(artifact::kPruneDir)) / "history.json").string();
    if (!fs::exists(manifest))
        throw StageError(strcat_msg(manifest, " not found; run `prune` first"));
    const json mj = read_json(manifest, "prune");
    check_hash(mj.value("config_hash", ""), s, manifest);
    auto bundle = load_history(s.path(artifact::kPruneDir));

    auto model = rollback_mr(bundle.history);
    const Dataset train = load_split(s.cfg, true);
    const Dataset test = load_split(s.cfg, false);
    const double pre = evaluate_twobranch(model, test);

    std::vector<EpochMetrics> metrics;
    if (s.cfg.get_bool("finalize.posthoc")) {
        TrainConfig tc = train_config(s.cfg, "transfer", 2);
        tc.lr = s.cfg.get_double("finalize.posthoc_lr");
        tc.epochs = s.cfg.get_int("finalize.posthoc_epochs");
        metrics = posthoc_finetune(model, train, test, tc);
    }
    const double acc = evaluate_twobranch(model, test);

    save_twobranch(s.path(artifact::kFinalized), model, "finalize", s.hash,
                   json{{"test_accuracy", acc}, {"pre_finetune_accuracy", pre}});
    write_metrics_lines(s.path(artifact::kPosthocMetrics), metrics);
    write_json(s.path(artifact::kFinalizeSummary),
               json{{"config_hash", s.hash},
                    {"tbnet_accuracy", acc},
                    {"pre_finetune_accuracy", pre},
                    {"ree_accuracy", evaluate_single(model.ree, test)},
                    {"tee_accuracy", evaluate_single(model.tee, test)},
                    {"posthoc_epochs", static_cast<int64_t>(metrics.size())}});
    s.out << "finalized, accuracy " << acc << " (pre-finetune " << pre << ")\n";
}

void cmd_export(Stage& s) {
    require_artifact(s, artifact::kFinalized, "twobranch", "finalize");
    const auto model = load_twobranch(s.path(artifact::kFinalized));
    export_split(model, s.path(artifact::kRee), s.path(artifact::kTee), s.hash);
    s.out << "exported " << artifact::kRee << " and " << artifact::kTee << "\n";
}

void cmd_simulate(Stage& s) {
    require_artifact(s, artifact::kRee, "ree", "export");
    require_artifact(s, artifact::kTee, "tee", "export");
    require_artifact(s, artifact::kVictim, "victim", "train-victim");
    const Dataset test = load_split(s.cfg, false);
    const int64_t n = std::min<int64_t>(s.cfg.get_int("simulate.num_inputs"), test.size());
    if (n < 1) throw ValidationError("simulate.num_inputs must be positive");

    auto runtime = SplitRuntime::deploy(s.path(artifact::kRee), s.path(artifact::kTee));
    const int64_t merges = static_cast<int64_t>(runtime.send_schedule().size());

    std::ofstream audit_out(s.path(artifact::kAuditLog));
    if (!audit_out)
        throw FormatError(strcat_msg(s.path(artifact::kAuditLog), ": cannot open for writing"));
    int64_t correct = 0;
    bool all_pass = true;
    int64_t message_bytes = 0;
    for (int64_t i = 0; i < n; ++i) {
        auto pred = runtime.infer(test.batch_images(i, 1));
        if (pred.predicted == test.labels[i]) ++correct;
        const auto audit = audit_check(pred.audit, merges);
        all_pass = all_pass && audit.pass;
        message_bytes = pred.report.message_bytes_per_inference;
        for (const AuditRecord& r : pred.audit.records())
            audit_out << json{{"inference", i},
                              {"ordinal", r.ordinal},
                              {"direction", direction_name(r.direction)},
                              {"merge_point", r.merge_point},
                              {"bytes", r.bytes},
                              {"tensor_payload", r.tensor_payload}}
                             .dump()
                      << "\n";
    }
    const auto report = runtime.resource_report(s.path(artifact::kVictim));

    write_json(s.path(artifact::kSimulateSummary),
               json{{"config_hash", s.hash},
                    {"num_inputs", n},
                    {"split_accuracy", static_cast<double>(correct) / static_cast<double>(n)},
                    {"audit_pass", all_pass},
                    {"merge_messages_per_inference", merges},
                    {"message_bytes_per_inference", message_bytes},
                    {"ree_param_bytes", report.ree_param_bytes},
                    {"tee_param_bytes", report.tee_param_bytes},
                    {"ree_macs", report.ree_macs},
                    {"tee_macs", report.tee_macs},
                    {"baseline_tee_param_bytes", report.baseline_tee_param_bytes},
                    {"baseline_tee_macs", report.baseline_tee_macs},
                    {"memory_reduction_ratio", report.memory_reduction_ratio},
                    {"mac_reduction_ratio", report.mac_reduction_ratio}});
    s.out << "simulated " << n << " inferences, audit " << (all_pass ? "pass" : "FAIL")
          << ", memory reduction " << report.memory_reduction_ratio << "x\n";
}

void cmd_attack(Stage& s) {
    require_artifact(s, artifact::kRee, "ree", "export");
    require_artifact(s, artifact::kFinalized, "twobranch", "finalize");
    const json finalize_summary = read_json(s.path(artifact::kFinalizeSummary), "finalize");
    check_hash(finalize_summary.value("config_hash", ""), s, s.path(artifact::kFinalizeSummary));

    const Dataset train = load_split(s.cfg, true);
    const Dataset test = load_split(s.cfg, false);

    const double direct = attack_direct_use(s.path(artifact::kRee), test);

    TrainConfig ft = train_config(s.cfg, "transfer", 3);
    ft.lr = s.cfg.get_double("attack.finetune_lr");
    ft.epochs = s.cfg.get_int("attack.finetune_epochs");
    ft.lambda_sparsity = 0;
    const auto curve = attack_finetune(s.path(artifact::kRee),
                                       s.cfg.get_double_list("attack.fractions"), train, test, ft);

    const auto model = load_twobranch(s.path(artifact::kFinalized));
    TrainConfig tr = train_config(s.cfg, "transfer", 4);
    tr.lr = s.cfg.get_double("attack.tee_retrain_lr");
    tr.epochs = s.cfg.get_int("attack.tee_retrain_epochs");
    tr.lambda_sparsity = 0;
    const double tee_alone = tee_only_retrain(model, train, test, tr);

    json curve_json = json::array();
    for (const FinetunePoint& p : curve)
        curve_json.push_back(json{{"fraction", p.fraction}, {"accuracy", p.accuracy}});
    write_json(s.path(artifact::kAttackSummary),
               json{{"config_hash", s.hash},
                    {"direct_use_accuracy", direct},
                    {"finetune_curve", std::move(curve_json)},
                    {"tee_only_retrain_accuracy", tee_alone},
                    {"tbnet_accuracy", finalize_summary.at("tbnet_accuracy").get<double>()}});
    s.out << "attacks: direct use " << direct << ", tee-only retrain " << tee_alone << "\n";
}

void cmd_report(Stage& s) {
    json report;
    report["config_hash"] = s.hash;
    const struct {
        const char* file;
        const char* key;
        const char* command;
    } inputs[] = {
        {artifact::kVictimSummary, "victim", "train-victim"},
        {artifact::kTransferSummary, "transfer", "transfer"},
        {artifact::kPruneSummary, "prune", "prune"},
        {artifact::kFinalizeSummary, "finalize", "finalize"},
        {artifact::kSimulateSummary, "simulate", "simulate"},
        {artifact::kAttackSummary, "attack", "attack"},
    };
    for (const auto& in : inputs) {
        json j = read_json(s.path(in.file), in.command);
        check_hash(j.value("config_hash", ""), s, s.path(in.file));
        j.erase("config_hash");
        report[in.key] = std::move(j);
    }

    json headline;
    headline["victim_accuracy"] = report["victim"]["victim_accuracy"];
    headline["tbnet_accuracy"] = report["finalize"]["tbnet_accuracy"];
    headline["direct_use_attack_accuracy"] = report["attack"]["direct_use_accuracy"];
    headline["tee_only_retrain_accuracy"] = report["attack"]["tee_only_retrain_accuracy"];
    headline["memory_reduction_ratio"] = report["simulate"]["memory_reduction_ratio"];
    headline["mac_reduction_ratio"] = report["simulate"]["mac_reduction_ratio"];
    report["headline"] = headline;

    write_json(s.path(artifact::kReport), report);
    s.out << "victim " << headline["victim_accuracy"] << ", tbnet "
          << headline["tbnet_accuracy"] << ", direct-use attack "
          << headline["direct_use_attack_accuracy"] << ", memory reduction "
          << headline["memory_reduction_ratio"] << "x\n";
}

} // namespace

void run_command(const std::string& command, const std::string& workdir, const Config& cfg,
                 std::ostream& out) {
    fs::create_directories(workdir);
    Stage s{workdir, cfg, out, cfg.hash()};
    if (command == "train-victim") cmd_train_victim(s);
    else if (command == "init") cmd_init(s);
    else if (command == "transfer") cmd_transfer(s);
    else if (command == "prune") cmd_prune(s);
    else if (command == "finalize") cmd_finalize(s);
    else if (command == "export") cmd_export(s);
    else if (command == "simulate") cmd_simulate(s);
    else if (command == "attack") cmd_attack(s);
    else if (command == "report") cmd_report(s);
    else {
        std::string names;
        for (const auto& c : pipeline_commands()) names += " " + c;
        throw ValidationError(strcat_msg("unknown command '", command, "' (known:", names, ")"));
    }
}

} // namespace tbnet
