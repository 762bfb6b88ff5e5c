#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tbnet/common.hpp"
#include "tbnet/config.hpp"
#include "tbnet/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"two-branch split-model protection toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string workdir = ".";
    std::string seed;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--workdir", workdir, "artifact directory (default .)");
    app.add_option("--seed", seed, "override the config seed");
    app.add_option("--set", overrides, "config override key=value (repeatable)");

    const struct {
        const char* name;
        const char* desc;
    } commands[] = {
        {"train-victim", "train the victim model on the configured dataset"},
        {"init", "build the two-branch model from the trained victim"},
        {"transfer", "jointly train both branches under the penalized objective"},
        {"prune", "iteratively prune paired channels within the accuracy budget"},
        {"finalize", "roll the unsecured branch back one iteration and align"},
        {"export", "write the deployable REE/TEE file pair"},
        {"simulate", "run split inference across isolated contexts with auditing"},
        {"attack", "evaluate direct-use, fine-tune, and branch-only attacks"},
        {"report", "aggregate all stage summaries into one report"},
    };
    for (const auto& c : commands) app.add_subcommand(c.name, c.desc)->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        tbnet::Config cfg =
            config_path.empty() ? tbnet::Config() : tbnet::Config::from_file(config_path);
        for (const std::string& ov : overrides) cfg.set_line(ov);
        if (!seed.empty()) cfg.set("seed", seed);
        tbnet::run_command(app.get_subcommands().front()->get_name(), workdir, cfg, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
