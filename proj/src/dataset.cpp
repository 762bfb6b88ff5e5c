#include "tbnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "tbnet/common.hpp"

namespace tbnet {

Normalization Normalization::uniform(int64_t channels, float mean, float stddev) {
    Normalization n;
    n.mean.assign(channels, mean);
    n.stddev.assign(channels, stddev);
    return n;
}

TensorPtr<float> Dataset::batch_images(int64_t start, int64_t count) const {
    if (start < 0 || count < 1 || start + count > size())
        throw ValidationError(strcat_msg("batch [", start, ", ", start + count,
                                         ") outside dataset of ", size()));
    auto t = Tensor<float>::zeros({count, channels, height, width});
    const int64_t n = image_numel();
    std::copy(images.begin() + start * n, images.begin() + (start + count) * n, t->data.begin());
    return t;
}

std::vector<int64_t> Dataset::batch_labels(int64_t start, int64_t count) const {
    if (start < 0 || count < 1 || start + count > size())
        throw ValidationError(strcat_msg("batch [", start, ", ", start + count,
                                         ") outside dataset of ", size()));
    return {labels.begin() + start, labels.begin() + start + count};
}

namespace {

uint32_t read_u32_be(std::istream& in, const std::string& path, size_t offset) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(strcat_msg(path, ": truncated at byte ", offset));
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

std::vector<uint8_t> read_bytes(std::istream& in, size_t count, const std::string& path,
                                size_t offset) {
    std::vector<uint8_t> buf(count);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count)))
        throw FormatError(strcat_msg(path, ": truncated at byte ",
                                     offset + static_cast<size_t>(in.gcount())));
    return buf;
}

void check_labels(const std::vector<int64_t>& labels, int64_t num_classes,
                  const std::string& path) {
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ValidationError(strcat_msg(path, ": label ", labels[i], " at record ", i,
                                             " outside ", num_classes, " classes"));
}

constexpr uint32_t kIdxImagesMagic = 0x00000803u;
constexpr uint32_t kIdxLabelsMagic = 0x00000801u;

} // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const Normalization& norm, int64_t num_classes) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw FormatError(strcat_msg(images_path, ": cannot open"));
    uint32_t magic = read_u32_be(img, images_path, 0);
    if (magic != kIdxImagesMagic)
        throw FormatError(strcat_msg(images_path, ": bad image magic 0x", std::hex, magic,
                                     " at byte 0"));
    const uint32_t n = read_u32_be(img, images_path, 4);
    const uint32_t rows = read_u32_be(img, images_path, 8);
    const uint32_t cols = read_u32_be(img, images_path, 12);
    auto pixels = read_bytes(img, size_t(n) * rows * cols, images_path, 16);

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw FormatError(strcat_msg(labels_path, ": cannot open"));
    magic = read_u32_be(lab, labels_path, 0);
    if (magic != kIdxLabelsMagic)
        throw FormatError(strcat_msg(labels_path, ": bad label magic 0x", std::hex, magic,
                                     " at byte 0"));
    const uint32_t ln = read_u32_be(lab, labels_path, 4);
    if (ln != n)
        throw FormatError(strcat_msg(labels_path, ": ", ln, " labels for ", n, " images"));
    auto label_bytes = read_bytes(lab, ln, labels_path, 8);

    if (norm.mean.size() != 1 || norm.stddev.size() != 1)
        throw ValidationError("IDX images are single-channel; normalization must match");

    Dataset ds;
    ds.channels = 1;
    ds.height = rows;
    ds.width = cols;
    ds.num_classes = num_classes;
    ds.images.resize(pixels.size());
    const float mean = norm.mean[0], sd = norm.stddev[0];
    for (size_t i = 0; i < pixels.size(); ++i)
        ds.images[i] = (float(pixels[i]) / 255.0f - mean) / sd;
    ds.labels.assign(label_bytes.begin(), label_bytes.end());
    check_labels(ds.labels, num_classes, labels_path);
    return ds;
}

Dataset load_cifar_binary(const std::string& path, const Normalization& norm,
                          int64_t num_classes) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw FormatError(strcat_msg(path, ": cannot open"));
    const auto bytes = static_cast<size_t>(in.tellg());
    constexpr size_t kRecord = 3073; // label byte + 3*32*32 pixels
    if (bytes == 0 || bytes % kRecord != 0)
        throw FormatError(strcat_msg(path, ": size ", bytes, " is not a multiple of ", kRecord));
    in.seekg(0);
    const size_t n = bytes / kRecord;

    if (norm.mean.size() != 3 || norm.stddev.size() != 3)
        throw ValidationError("CIFAR records are 3-channel; normalization must match");

    Dataset ds;
    ds.channels = 3;
    ds.height = 32;
    ds.width = 32;
    ds.num_classes = num_classes;
    ds.images.resize(n * 3072);
    ds.labels.resize(n);
    for (size_t r = 0; r < n; ++r) {
        auto rec = read_bytes(in, kRecord, path, r * kRecord);
        ds.labels[r] = rec[0];
        for (int64_t c = 0; c < 3; ++c) {
            const float mean = norm.mean[c], sd = norm.stddev[c];
            for (int64_t px = 0; px < 1024; ++px)
                ds.images[r * 3072 + c * 1024 + px] =
                    (float(rec[1 + c * 1024 + px]) / 255.0f - mean) / sd;
        }
    }
    check_labels(ds.labels, num_classes, path);
    return ds;
}

Dataset subset(const Dataset& ds, int64_t size, uint64_t seed) {
    if (size < 1 || size > ds.size())
        throw ValidationError(strcat_msg("subset of ", size, " from dataset of ", ds.size()));
    std::vector<int64_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "dataset-subset"));
    rng.shuffle(order);
    order.resize(size);

    Dataset out;
    out.channels = ds.channels;
    out.height = ds.height;
    out.width = ds.width;
    out.num_classes = ds.num_classes;
    out.split = ds.split;
    out.subset_seed = seed;
    out.subset_size = size;
    const int64_t n = ds.image_numel();
    out.images.resize(size * n);
    out.labels.resize(size);
    for (int64_t i = 0; i < size; ++i) {
        std::copy(ds.images.begin() + order[i] * n, ds.images.begin() + (order[i] + 1) * n,
                  out.images.begin() + i * n);
        out.labels[i] = ds.labels[order[i]];
    }
    return out;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const RawImageSet& set) {
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw FormatError(strcat_msg(images_path, ": cannot open for writing"));
    write_u32_be(img, kIdxImagesMagic);
    write_u32_be(img, static_cast<uint32_t>(set.size()));
    write_u32_be(img, static_cast<uint32_t>(set.rows));
    write_u32_be(img, static_cast<uint32_t>(set.cols));
    img.write(reinterpret_cast<const char*>(set.pixels.data()),
              static_cast<std::streamsize>(set.pixels.size()));
    if (!img) throw FormatError(strcat_msg(images_path, ": write failed"));

    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) throw FormatError(strcat_msg(labels_path, ": cannot open for writing"));
    write_u32_be(lab, kIdxLabelsMagic);
    write_u32_be(lab, static_cast<uint32_t>(set.size()));
    lab.write(reinterpret_cast<const char*>(set.labels.data()),
              static_cast<std::streamsize>(set.labels.size()));
    if (!lab) throw FormatError(strcat_msg(labels_path, ": write failed"));
}

namespace {

/// Smooth class texture: a small sum of 2D sinusoids with seeded
/// frequencies and phases, squashed to [0,1].
struct Texture {
    struct Wave {
        float fy, fx, phase, amp;
    };
    std::vector<Wave> waves;

    float at(float y, float x) const {
        float v = 0;
        for (const Wave& w : waves)
            v += w.amp * std::sin(w.fy * y + w.fx * x + w.phase);
        return 0.5f + 0.5f * std::tanh(v);
    }
};

Texture make_texture(Rng& rng) {
    Texture t;
    const int waves = 3 + static_cast<int>(rng.below(3));
    for (int i = 0; i < waves; ++i) {
        Texture::Wave w;
        w.fy = static_cast<float>(0.15 + 0.55 * rng.uniform());
        w.fx = static_cast<float>(0.15 + 0.55 * rng.uniform());
        w.phase = static_cast<float>(2.0 * 3.14159265358979 * rng.uniform());
        w.amp = static_cast<float>(0.5 + 0.7 * rng.uniform());
        t.waves.push_back(w);
    }
    return t;
}

} // namespace

RawImageSet generate_synthetic(int64_t count, uint64_t seed, const SyntheticConfig& cfg,
                               const std::string& sample_tag) {
    if (count < 1) throw ValidationError(strcat_msg("cannot generate ", count, " images"));
    Rng tex_rng(derive_seed(seed, "synthetic-textures"));
    std::vector<Texture> textures;
    textures.reserve(cfg.num_classes * cfg.variants_per_class);
    for (int64_t k = 0; k < cfg.num_classes; ++k) {
        Texture base = make_texture(tex_rng);
        for (int64_t v = 0; v < cfg.variants_per_class; ++v) {
            Texture t = base;
            for (auto& w : t.waves) {
                w.phase += static_cast<float>(0.35 * tex_rng.normal());
                w.amp *= static_cast<float>(1.0 + 0.15 * tex_rng.normal());
            }
            textures.push_back(t);
        }
    }

    Rng rng(derive_seed(seed, sample_tag));
    RawImageSet set;
    set.rows = cfg.rows;
    set.cols = cfg.cols;
    set.pixels.resize(count * cfg.rows * cfg.cols);
    set.labels.resize(count);
    for (int64_t i = 0; i < count; ++i) {
        const int64_t label = static_cast<int64_t>(rng.below(static_cast<uint64_t>(cfg.num_classes)));
        const int64_t variant = static_cast<int64_t>(
            rng.below(static_cast<uint64_t>(cfg.variants_per_class)));
        const Texture& tex = textures[label * cfg.variants_per_class + variant];
        const float dy = static_cast<float>(rng.below(2 * cfg.max_shift + 1)) - cfg.max_shift;
        const float dx = static_cast<float>(rng.below(2 * cfg.max_shift + 1)) - cfg.max_shift;
        const float bright =
            cfg.brightness_jitter * static_cast<float>(2.0 * rng.uniform() - 1.0);
        set.labels[i] = static_cast<uint8_t>(label);
        uint8_t* px = set.pixels.data() + i * cfg.rows * cfg.cols;
        for (int64_t y = 0; y < cfg.rows; ++y)
            for (int64_t x = 0; x < cfg.cols; ++x) {
                float v = tex.at(static_cast<float>(y) - dy, static_cast<float>(x) - dx);
                v += bright + cfg.noise_stddev * static_cast<float>(rng.normal());
                v = std::clamp(v, 0.0f, 1.0f);
                px[y * cfg.cols + x] = static_cast<uint8_t>(std::lround(v * 255.0f));
            }
    }
    return set;
}

} // namespace tbnet
