#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tbnet/tensor.hpp"

namespace tbnet {

/// Per-channel standardization applied after scaling bytes to [0,1].
struct Normalization {
    std::vector<float> mean;
    std::vector<float> stddev;

    static Normalization uniform(int64_t channels, float mean = 0.5f, float stddev = 0.5f);
};

/// Labeled images, already normalized, in NCHW order.
struct Dataset {
    int64_t channels = 0;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<float> images; // N*C*H*W
    std::vector<int64_t> labels;
    int64_t num_classes = 0;
    std::string split;          // "train" / "test"
    uint64_t subset_seed = 0;   // 0 when the set is unsampled
    int64_t subset_size = 0;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    int64_t image_numel() const { return channels * height * width; }

    /// Rows [start, start+count) as a {count,C,H,W} tensor.
    TensorPtr<float> batch_images(int64_t start, int64_t count) const;
    std::vector<int64_t> batch_labels(int64_t start, int64_t count) const;
};

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const Normalization& norm, int64_t num_classes);

Dataset load_cifar_binary(const std::string& path, const Normalization& norm,
                          int64_t num_classes = 10);

/// Seeded uniform sample without replacement; size == N permutes the set.
Dataset subset(const Dataset& ds, int64_t size, uint64_t seed);

/// Unnormalized byte images, the unit the IDX writer and the synthetic
/// generator trade in.
struct RawImageSet {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<uint8_t> pixels; // N*rows*cols, single channel
    std::vector<uint8_t> labels;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

void write_idx(const std::string& images_path, const std::string& labels_path,
               const RawImageSet& set);

/// Knobs of the synthetic task: smooth per-class textures, a few style
/// variants each, then shift/brightness/noise corruption per sample.
struct SyntheticConfig {
    int64_t rows = 28;
    int64_t cols = 28;
    int64_t num_classes = 10;
    int64_t variants_per_class = 3;
    int64_t max_shift = 3;
    float brightness_jitter = 0.15f;
    float noise_stddev = 0.08f;
};

/// Class textures derive from `seed` alone, so sets generated with
/// different `sample_tag`s (train vs test) share classes but not samples.
RawImageSet generate_synthetic(int64_t count, uint64_t seed, const SyntheticConfig& cfg = {},
                               const std::string& sample_tag = "synthetic-samples");

} // namespace tbnet
