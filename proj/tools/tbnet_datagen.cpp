#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tbnet/dataset.hpp"

int main(int argc, char** argv) {
    CLI::App app{"synthetic IDX dataset generator"};

    std::string out_dir = ".";
    int64_t train = 10000;
    int64_t test = 2000;
    uint64_t seed = 1;
    tbnet::SyntheticConfig cfg;
    app.add_option("--out", out_dir, "output directory (default .)");
    app.add_option("--train", train, "training images (default 10000)");
    app.add_option("--test", test, "test images (default 2000)");
    app.add_option("--seed", seed, "generation seed (default 1)");
    app.add_option("--classes", cfg.num_classes, "class count (default 10)");
    app.add_option("--rows", cfg.rows, "image rows (default 28)");
    app.add_option("--cols", cfg.cols, "image cols (default 28)");
    app.add_option("--variants", cfg.variants_per_class, "texture variants per class (default 3)");
    app.add_option("--shift", cfg.max_shift, "max translation in pixels (default 3)");
    app.add_option("--jitter", cfg.brightness_jitter, "brightness jitter (default 0.15)");
    app.add_option("--noise", cfg.noise_stddev, "pixel noise stddev (default 0.08)");

    CLI11_PARSE(app, argc, argv);

    try {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        const auto train_set = tbnet::generate_synthetic(train, seed, cfg, "train-samples");
        const auto test_set = tbnet::generate_synthetic(test, seed, cfg, "test-samples");
        tbnet::write_idx((fs::path(out_dir) / "train-images.idx").string(),
                         (fs::path(out_dir) / "train-labels.idx").string(), train_set);
        tbnet::write_idx((fs::path(out_dir) / "test-images.idx").string(),
                         (fs::path(out_dir) / "test-labels.idx").string(), test_set);
        std::cout << "wrote " << train << " train and " << test << " test images to " << out_dir
                  << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
