#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tbnet/graph.hpp"

using namespace tbnet;

TEST_CASE("tiny4 registry entry builds and validates") {
    auto g = make_architecture<float>("tiny4", {1, 28, 28}, 10);
    REQUIRE(g.layers.size() == 8);
    CHECK(g.layers[0].kind == LayerKind::ConvBlock);
    CHECK(g.layers[7].kind == LayerKind::Dense);
    CHECK(g.layers[7].channel_count == 10);

    auto shapes = layer_output_shapes(g);
    CHECK(shapes[0] == Shape{8, 28, 28});
    CHECK(shapes[1] == Shape{8, 14, 14});
    CHECK(shapes[2] == Shape{16, 14, 14});
    CHECK(shapes[3] == Shape{16, 7, 7});
    CHECK(shapes[4] == Shape{24, 7, 7});
    CHECK(shapes[5] == Shape{32, 7, 7});
    CHECK(shapes[6] == Shape{32});
    CHECK(shapes[7] == Shape{10});
}

TEST_CASE("tinyres marks residual endpoint convs unprunable") {
    auto g = make_architecture<float>("tinyres", {1, 28, 28}, 10);
    REQUIRE(g.layers.size() == 9);
    CHECK(g.layers[4].kind == LayerKind::ResidualAdd);
    CHECK(g.layers[4].from == 2);
    // The convs on both sides of the join keep their widths.
    CHECK_FALSE(g.layers[2].prunable);
    CHECK_FALSE(g.layers[3].prunable);
    // Convs away from the join stay prunable.
    CHECK(g.layers[0].prunable);
    CHECK(g.layers[6].prunable);
}

TEST_CASE("unknown architecture names the known ones") {
    try {
        make_architecture<float>("resnet152", {3, 32, 32}, 10);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("tiny4") != std::string::npos);
    }
}

TEST_CASE("graph validation rejects broken chains") {
    BranchGraph<float> g;
    g.input_shape = {1, 8, 8};
    g.num_classes = 4;

    SUBCASE("no classifier at the end") {
        g.layers = {LayerSpec::conv_block(4), LayerSpec::global_avgpool()};
        g.params.assign(g.layers.size(), LayerParams<float>{});
        CHECK_THROWS_AS(validate_graph(g), ValidationError);
    }
    SUBCASE("classifier width disagrees with num_classes") {
        g.layers = {LayerSpec::conv_block(4), LayerSpec::global_avgpool(), LayerSpec::dense(7)};
        g.params.assign(g.layers.size(), LayerParams<float>{});
        CHECK_THROWS_AS(validate_graph(g), ValidationError);
    }
    SUBCASE("conv after flattening") {
        g.layers = {LayerSpec::conv_block(4), LayerSpec::global_avgpool(),
                    LayerSpec::conv_block(4), LayerSpec::dense(4)};
        g.params.assign(g.layers.size(), LayerParams<float>{});
        CHECK_THROWS_AS(validate_graph(g), ShapeError);
    }
    SUBCASE("pooling below 2x2") {
        g.input_shape = {1, 2, 2};
        g.layers = {LayerSpec::maxpool(), LayerSpec::maxpool(), LayerSpec::global_avgpool(),
                    LayerSpec::dense(4)};
        g.params.assign(g.layers.size(), LayerParams<float>{});
        CHECK_THROWS_AS(validate_graph(g), ShapeError);
    }
    SUBCASE("residual joining different widths") {
        g.layers = {LayerSpec::conv_block(4), LayerSpec::conv_block(8),
                    LayerSpec::residual_add(0), LayerSpec::global_avgpool(), LayerSpec::dense(4)};
        g.params.assign(g.layers.size(), LayerParams<float>{});
        CHECK_THROWS_AS(validate_graph(g), ShapeError);
    }
}

TEST_CASE("init_params shapes and batchnorm identity state") {
    auto g = make_architecture<float>("tiny4", {1, 28, 28}, 10);
    Rng rng(7);
    init_params(g, rng, "v.");

    REQUIRE(g.params[0].weight);
    CHECK(g.params[0].weight->shape == Shape{8, 1, 3, 3});
    CHECK(g.params[2].weight->shape == Shape{16, 8, 3, 3});
    CHECK(g.params[7].weight->shape == Shape{10, 32});
    CHECK(g.params[7].bias->shape == Shape{10});
    CHECK_FALSE(g.params[1].weight); // pools own nothing

    for (float v : g.params[2].gamma->data) CHECK(v == 1.0f);
    for (float v : g.params[2].beta->data) CHECK(v == 0.0f);
    for (float v : g.params[2].running_mean->data) CHECK(v == 0.0f);
    for (float v : g.params[2].running_var->data) CHECK(v == 1.0f);
    CHECK(g.params[0].weight->name == "v.layer0.conv.weight");
    CHECK(g.params[0].weight->requires_grad);
    CHECK_FALSE(g.params[0].running_mean->requires_grad);
}

TEST_CASE("init_params scales weights by fan-in") {
    auto g = make_architecture<float>("tiny4", {1, 28, 28}, 10);
    Rng rng(13);
    init_params(g, rng);
    // conv at layer 5: fan-in 24*9, expected stddev sqrt(2/216).
    const auto& w = g.params[5].weight->data;
    double sq = 0;
    for (float v : w) sq += double(v) * double(v);
    const double stddev = std::sqrt(sq / double(w.size()));
    const double expected = std::sqrt(2.0 / (24.0 * 9.0));
    CHECK(stddev == doctest::Approx(expected).epsilon(0.15));
}

TEST_CASE("forward_single produces logits and a full trace") {
    auto g = make_architecture<float>("tiny4", {1, 28, 28}, 10);
    Rng rng(3);
    init_params(g, rng);
    auto x = Tensor<float>::randn({2, 1, 28, 28}, rng);
    std::vector<TensorPtr<float>> trace;
    auto logits = forward_single(g, x, Mode::Eval, &trace);
    CHECK(logits->shape == Shape{2, 10});
    CHECK(trace.size() == g.layers.size());
    CHECK(trace.back() == logits);

    auto bad = Tensor<float>::randn({2, 1, 27, 28}, rng);
    CHECK_THROWS_AS(forward_single(g, bad, Mode::Eval), ShapeError);
}

TEST_CASE("residual graph forward matches the explicit sum") {
    auto g = make_architecture<float>("tinyres", {1, 16, 16}, 4);
    Rng rng(5);
    init_params(g, rng);
    auto x = Tensor<float>::randn({1, 1, 16, 16}, rng);
    std::vector<TensorPtr<float>> trace;
    forward_single(g, x, Mode::Eval, &trace);
    // Layer 4 adds layer 3 (its input) and layer 2 (the join's far side).
    const auto& a = trace[3]->data;
    const auto& b = trace[2]->data;
    const auto& s = trace[4]->data;
    REQUIRE(a.size() == s.size());
    for (size_t i = 0; i < s.size(); ++i)
        CHECK(s[i] == doctest::Approx(a[i] + b[i]).epsilon(1e-6));
}

TEST_CASE("layer cost helpers") {
    CHECK(conv_param_count(3, 16, 3) == 448);
    CHECK(bn_param_count(16) == 64);
    CHECK(dense_param_count(10, 10) == 110);
    CHECK(conv_macs(3, 16, 3, 8, 8) == 8 * 8 * 16 * 3 * 9);
    CHECK(dense_macs(32, 10) == 320);
}

TEST_CASE("resource accounting over tiny4 matches hand arithmetic") {
    auto g = make_architecture<float>("tiny4", {1, 28, 28}, 10);
    auto rc = count_resources(g);
    // conv1 80+32, conv2 1168+64, conv3 3480+96, conv4 6944+128, dense 330
    CHECK(rc.param_count == 12322);
    CHECK(rc.param_bytes == 49288);
    // 56448 + 225792 + 169344 + 338688 + 320
    CHECK(rc.macs_per_inference == 790592);
}

TEST_CASE("resource accounting over a minimal chain") {
    BranchGraph<float> g;
    g.input_shape = {1, 4, 4};
    g.num_classes = 3;
    g.layers = {LayerSpec::conv_block(2), LayerSpec::global_avgpool(), LayerSpec::dense(3)};
    g.params.assign(g.layers.size(), LayerParams<float>{});
    auto rc = count_resources(g);
    CHECK(rc.param_count == 20 + 8 + 9);
    CHECK(rc.param_bytes == 4 * 37);
    CHECK(rc.macs_per_inference == 288 + 6);
}
