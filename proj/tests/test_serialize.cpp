#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tbnet/finalizer.hpp"
#include "tbnet/serialize.hpp"

using namespace tbnet;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
    static fs::path dir = [] {
        auto d = fs::temp_directory_path() / "tbnet-serialize-tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string path_of(const std::string& name) { return (work_dir() / name).string(); }

BranchGraph<float> victim_2conv(uint64_t seed = 17) {
    BranchGraph<float> g;
    g.input_shape = {1, 6, 6};
    g.num_classes = 2;
    g.layers = {LayerSpec::conv_block(3), LayerSpec::conv_block(4), LayerSpec::global_avgpool(),
                LayerSpec::dense(2)};
    g.params.assign(g.layers.size(), LayerParams<float>{});
    validate_graph(g);
    Rng rng(seed);
    init_params(g, rng, "victim.");
    return g;
}

Dataset blob_dataset(int64_t n) {
    Dataset ds;
    ds.channels = 1;
    ds.height = 6;
    ds.width = 6;
    ds.num_classes = 2;
    for (int64_t i = 0; i < n; ++i) {
        ds.labels.push_back(i % 2);
        for (int64_t p = 0; p < 36; ++p) ds.images.push_back(i % 2 ? 1.0f : -1.0f);
    }
    return ds;
}

PruneResult<float> small_history() {
    auto model = init_twobranch(victim_2conv(), 23);
    for (auto* g : {&model.ree, &model.tee}) {
        g->params[0].gamma->data = {0.1f, 0.5f, 0.9f};
        g->params[1].gamma->data = {0.2f, 0.4f, 0.6f, 0.8f};
    }
    auto ds = blob_dataset(8);
    PruneConfig cfg;
    cfg.prune_ratio = 0.25;
    cfg.theta_drop = 1.0;
    cfg.retrain_epochs = 0;
    cfg.max_iterations = 2;
    cfg.retrain.epochs = 0;
    return iterative_prune(model, ds, ds, cfg, 0.0);
}

void check_graph_equal(const BranchGraph<float>& a, const BranchGraph<float>& b) {
    REQUIRE(a.layers.size() == b.layers.size());
    CHECK(a.input_shape == b.input_shape);
    CHECK(a.num_classes == b.num_classes);
    for (size_t i = 0; i < a.layers.size(); ++i) {
        CHECK(a.layers[i].kind == b.layers[i].kind);
        CHECK(a.layers[i].channel_count == b.layers[i].channel_count);
        CHECK(a.layers[i].kernel == b.layers[i].kernel);
        CHECK(a.layers[i].stride == b.layers[i].stride);
        CHECK(a.layers[i].padding == b.layers[i].padding);
        CHECK(a.layers[i].from == b.layers[i].from);
        CHECK(a.layers[i].prunable == b.layers[i].prunable);
    }
    auto ta = a.value_tensors();
    auto tb = b.value_tensors();
    REQUIRE(ta.size() == tb.size());
    for (size_t i = 0; i < ta.size(); ++i) {
        CHECK(ta[i]->shape == tb[i]->shape);
        CHECK(ta[i]->data == tb[i]->data); // bitwise
    }
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST_CASE("victim container round trips bitwise") {
    auto g = victim_2conv();
    const auto path = path_of("victim.tbnt");
    save_victim(path, g, "train-victim", "cafe0123", {{"test_accuracy", 0.97}});

    TbntInfo info;
    auto loaded = load_victim(path, &info);
    check_graph_equal(g, loaded);
    CHECK(info.kind == "victim");
    CHECK(info.stage == "train-victim");
    CHECK(info.config_hash == "cafe0123");
    CHECK(info.header.at("test_accuracy").get<double>() == doctest::Approx(0.97));

    auto peeked = peek_info(path);
    CHECK(peeked.kind == "victim");
    CHECK(peeked.header.at("test_accuracy").get<double>() == doctest::Approx(0.97));
}

TEST_CASE("two-branch container round trips bitwise") {
    auto model = init_twobranch(victim_2conv(), 23);
    const auto path = path_of("twobranch.tbnt");
    save_twobranch(path, model, "init", "beef");
    auto loaded = load_twobranch(path);
    check_graph_equal(model.ree, loaded.ree);
    check_graph_equal(model.tee, loaded.tee);
    REQUIRE(loaded.merge_points.size() == model.merge_points.size());
    for (size_t i = 0; i < model.merge_points.size(); ++i) {
        CHECK(loaded.merge_points[i].src_layer == model.merge_points[i].src_layer);
        CHECK(loaded.merge_points[i].dst_layer == model.merge_points[i].dst_layer);
        CHECK(loaded.merge_points[i].src_branch == model.merge_points[i].src_branch);
    }
    CHECK(loaded.finalized == model.finalized);
    CHECK(loaded.merge_logits == model.merge_logits);
    CHECK(loaded.alignment_maps.empty());
}

TEST_CASE("checkpoint container keeps iteration, accuracy, and mask") {
    auto result = small_history();
    const auto& ck = result.history.back();
    const auto path = path_of("checkpoint.tbnt");
    save_checkpoint(path, ck, "f00d");
    auto loaded = load_checkpoint(path);
    CHECK(loaded.iteration == ck.iteration);
    CHECK(loaded.accuracy == doctest::Approx(ck.accuracy));
    REQUIRE(loaded.mask.layer_bits.size() == ck.mask.layer_bits.size());
    CHECK(loaded.mask.layer_bits == ck.mask.layer_bits);
    CHECK(loaded.mask.forced_retained == ck.mask.forced_retained);
    REQUIRE(loaded.mask.pairs.size() == ck.mask.pairs.size());
    for (size_t i = 0; i < ck.mask.pairs.size(); ++i) {
        CHECK(loaded.mask.pairs[i].ree_layer == ck.mask.pairs[i].ree_layer);
        CHECK(loaded.mask.pairs[i].tee_layer == ck.mask.pairs[i].tee_layer);
        CHECK(loaded.mask.pairs[i].prunable == ck.mask.pairs[i].prunable);
    }
    check_graph_equal(ck.model.tee, loaded.model.tee);
}

TEST_CASE("history directory round trips") {
    auto result = small_history();
    const auto dir = (work_dir() / "history").string();
    fs::create_directories(dir);
    save_history(dir, result, "0123");
    CHECK(fs::exists(fs::path(dir) / "history.json"));

    auto bundle = load_history(dir);
    CHECK(bundle.status == result.status);
    CHECK(bundle.accepted_iterations == result.accepted_iterations);
    REQUIRE(bundle.history.size() == result.history.size());
    for (size_t i = 0; i < bundle.history.size(); ++i) {
        CHECK(bundle.history[i].iteration == result.history[i].iteration);
        CHECK(bundle.history[i].accuracy == doctest::Approx(result.history[i].accuracy));
        CHECK(bundle.history[i].mask.layer_bits == result.history[i].mask.layer_bits);
        check_graph_equal(bundle.history[i].model.tee, result.history[i].model.tee);
        check_graph_equal(bundle.history[i].model.ree, result.history[i].model.ree);
    }
}

TEST_CASE("split export separates public and confidential knowledge") {
    auto result = small_history();
    auto model = rollback_mr(result.history);
    const auto ree_path = path_of("model.ree.tbnt");
    const auto tee_path = path_of("model.tee.tbnt");
    export_split(model, ree_path, tee_path, "abcd");

    TbntInfo rinfo;
    auto ree = load_ree(ree_path, &rinfo);
    check_graph_equal(model.ree, ree);
    CHECK(rinfo.kind == "ree");

    TbntInfo tinfo;
    auto tee = load_tee(tee_path, &tinfo);
    check_graph_equal(model.tee, tee.graph);
    CHECK(tinfo.kind == "tee");
    CHECK(tee.merge_points.size() == model.merge_points.size());
    CHECK(tee.alignment_maps == model.alignment_maps);
    CHECK(tee.merge_logits == model.merge_logits);

    // The public file carries no alignment knowledge, not even the key.
    auto ree_bytes = slurp(ree_path);
    CHECK(ree_bytes.find("alignment") == std::string::npos);
    auto tee_bytes = slurp(tee_path);
    CHECK(tee_bytes.find("alignment_maps") != std::string::npos);

    // A confidential file cannot enter the unsecured context.
    try {
        load_ree(tee_path);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("refusing") != std::string::npos);
    }
}

TEST_CASE("split export refuses a pre-finalization model") {
    auto model = init_twobranch(victim_2conv(), 23);
    CHECK_THROWS_AS(
        export_split(model, path_of("r.tbnt"), path_of("t.tbnt"), "abcd"), StageError);
}

TEST_CASE("weight sections count every value tensor") {
    auto g = victim_2conv();
    // conv0: 27+3+4*3 = 42, conv1: 108+4+4*4 = 128, dense: 8+2 = 10 floats
    CHECK(weight_section_bytes(g) == 4 * (42 + 128 + 10));
}

TEST_CASE("container rejects corruption with byte offsets") {
    auto g = victim_2conv();
    const auto path = path_of("corrupt.tbnt");
    save_victim(path, g, "train-victim", "cafe");
    const std::string good = slurp(path);

    SUBCASE("bad magic") {
        auto bad = good;
        bad[0] = 'X';
        spit(path, bad);
        try {
            load_victim(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("magic") != std::string::npos);
        }
    }
    SUBCASE("unsupported version") {
        auto bad = good;
        bad[4] = 99;
        spit(path, bad);
        CHECK_THROWS_AS(load_victim(path), FormatError);
    }
    SUBCASE("truncated weights") {
        spit(path, good.substr(0, good.size() - 10));
        try {
            load_victim(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("truncated") != std::string::npos);
        }
    }
    SUBCASE("trailing bytes") {
        spit(path, good + "junk");
        try {
            load_victim(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("trailing") != std::string::npos);
        }
    }
    SUBCASE("wrong kind") {
        CHECK_THROWS_AS(load_twobranch(path), FormatError);
    }
}

TEST_CASE("graph json survives a round trip") {
    auto g = make_architecture<float>("tinyres", {1, 16, 16}, 4);
    auto j = graph_to_json(g);
    auto back = graph_from_json(j);
    REQUIRE(back.layers.size() == g.layers.size());
    for (size_t i = 0; i < g.layers.size(); ++i) {
        CHECK(back.layers[i].kind == g.layers[i].kind);
        CHECK(back.layers[i].from == g.layers[i].from);
        CHECK(back.layers[i].prunable == g.layers[i].prunable);
    }
    CHECK(back.input_shape == g.input_shape);
}

TEST_CASE("mask json survives a round trip") {
    ChannelMask mask;
    mask.pairs = {{0, 0, true}, {2, 3, true}};
    mask.layer_bits = {{1, 0, 1}, {0, 1, 1, 1}};
    mask.forced_retained = 1;
    auto back = mask_from_json(mask_to_json(mask));
    CHECK(back.layer_bits == mask.layer_bits);
    CHECK(back.forced_retained == 1);
    CHECK(back.pairs[1].tee_layer == 3);
}
