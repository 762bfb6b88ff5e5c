#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tbnet/twobranch.hpp"

using namespace tbnet;

namespace {

BranchGraph<float> small_victim(uint64_t seed = 42, const std::string& arch = "tiny4") {
    auto g = make_architecture<float>(arch, {1, 12, 12}, 4);
    Rng rng(seed);
    init_params(g, rng, "victim.");
    return g;
}

void zero_branch(BranchGraph<float>& g) {
    for (auto& t : g.value_tensors())
        if (t->name.find("running_var") == std::string::npos)
            for (auto& v : t->data) v = 0.0f;
}

} // namespace

TEST_CASE("init copies the unsecured branch and reseeds the confidential one") {
    auto victim = small_victim();
    auto model = init_twobranch(victim, 9);

    REQUIRE(model.ree.layers.size() == victim.layers.size());
    REQUIRE(model.tee.layers.size() == victim.layers.size());
    CHECK(model.ree.params[0].weight->data == victim.params[0].weight->data);
    CHECK(model.tee.params[0].weight->data != victim.params[0].weight->data);
    CHECK_FALSE(model.finalized);
    CHECK(model.alignment_maps.empty());

    // Copies, not aliases.
    model.ree.params[0].weight->data[0] += 1.0f;
    CHECK(model.ree.params[0].weight->data[0] != victim.params[0].weight->data[0]);
}

TEST_CASE("init pairs one merge point per conv block plus the logits") {
    auto victim = small_victim();
    auto model = init_twobranch(victim, 9);
    // tiny4: four conv blocks + dense logits merge
    REQUIRE(model.merge_points.size() == 5);
    for (const auto& mp : model.merge_points) {
        CHECK(mp.src_branch == Branch::Ree);
        CHECK(mp.dst_branch == Branch::Tee);
    }
    CHECK(model.merge_points.back().dst_layer ==
          static_cast<int64_t>(model.tee.layers.size()) - 1);

    auto no_logits = init_twobranch(victim, 9, false);
    CHECK(no_logits.merge_points.size() == 4);
    CHECK_FALSE(no_logits.merge_logits);
}

TEST_CASE("init drops residual joins from the unsecured branch only") {
    auto victim = small_victim(7, "tinyres");
    auto model = init_twobranch(victim, 9);
    CHECK(model.ree.layers.size() == victim.layers.size() - 1);
    CHECK(layer_indices_of_kind(model.ree, LayerKind::ResidualAdd).empty());
    CHECK(layer_indices_of_kind(model.tee, LayerKind::ResidualAdd).size() == 1);
    // Merge sources follow the shifted unsecured indices.
    auto pairs = paired_conv_layers(model);
    REQUIRE(pairs.size() == 4);
    CHECK(pairs[3].ree_layer == 5);
    CHECK(pairs[3].tee_layer == 6);
    // The join endpoints stay unprunable on both sides.
    CHECK_FALSE(pairs[1].prunable);
    CHECK_FALSE(pairs[2].prunable);
    CHECK(pairs[0].prunable);
    validate_twobranch(model);
}

TEST_CASE("validation rejects confidential-to-unsecured merges") {
    auto model = init_twobranch(small_victim(), 9);
    model.merge_points[0].src_branch = Branch::Tee;
    model.merge_points[0].dst_branch = Branch::Ree;
    CHECK_THROWS_AS(validate_twobranch(model), ValidationError);
}

TEST_CASE("validation demands strictly increasing merge destinations") {
    auto model = init_twobranch(small_victim(), 9);
    std::swap(model.merge_points[0], model.merge_points[1]);
    CHECK_THROWS_AS(validate_twobranch(model), ValidationError);
}

TEST_CASE("validation demands a merge at every confidential conv") {
    auto model = init_twobranch(small_victim(), 9);
    model.merge_points.erase(model.merge_points.begin() + 1);
    CHECK_THROWS_AS(validate_twobranch(model), ValidationError);
}

TEST_CASE("validation checks alignment maps once finalized") {
    auto model = init_twobranch(small_victim(), 9);
    model.finalized = true;

    SUBCASE("missing maps") { CHECK_THROWS_AS(validate_twobranch(model), ValidationError); }
    SUBCASE("duplicate source channel") {
        for (const auto& mp : model.merge_points) {
            const int64_t c = model.tee.layers[mp.dst_layer].channel_count;
            std::vector<int64_t> m(c);
            for (int64_t i = 0; i < c; ++i) m[i] = i;
            model.alignment_maps.push_back(std::move(m));
        }
        validate_twobranch(model); // identity maps are fine
        model.alignment_maps[0][1] = model.alignment_maps[0][0];
        CHECK_THROWS_AS(validate_twobranch(model), ValidationError);
    }
}

TEST_CASE("merged forward equals branch sum at every merge point") {
    auto model = init_twobranch(small_victim(), 9);
    Rng rng(77);
    auto x = Tensor<float>::randn({2, 1, 12, 12}, rng);
    auto out = forward_twobranch(model, x, Mode::Eval);

    auto ree_only = forward_single(model.ree, x, Mode::Eval);
    // Logit merge: merged logits = tee-pre-merge + ree logits. Verify via
    // the recorded unsecured trace.
    const auto& mp = model.merge_points.back();
    const auto& r = out.ree_outputs[mp.src_layer]->data;
    REQUIRE(r.size() == out.logits->data.size());
    CHECK(out.ree_logits()->data == ree_only->data);

    // Disabling the logits merge changes the classifier output only by
    // that contribution.
    auto no_logits = init_twobranch(small_victim(), 9, false);
    auto out2 = forward_twobranch(no_logits, x, Mode::Eval);
    for (size_t i = 0; i < out2.logits->data.size(); ++i)
        CHECK(out.logits->data[i] ==
              doctest::Approx(out2.logits->data[i] + r[i]).epsilon(1e-5));
}

TEST_CASE("zeroed unsecured branch reduces to the confidential branch alone") {
    auto model = init_twobranch(small_victim(), 9);
    zero_branch(model.ree);
    Rng rng(5);
    auto x = Tensor<float>::randn({3, 1, 12, 12}, rng);
    auto merged = forward_twobranch(model, x, Mode::Eval).logits;
    auto alone = forward_single(model.tee, x, Mode::Eval);
    REQUIRE(merged->data.size() == alone->data.size());
    for (size_t i = 0; i < merged->data.size(); ++i)
        CHECK(merged->data[i] == doctest::Approx(alone->data[i]).epsilon(1e-6));
}

TEST_CASE("zeroed confidential branch reduces to the unsecured logits") {
    auto model = init_twobranch(small_victim(), 9);
    zero_branch(model.tee);
    Rng rng(6);
    auto x = Tensor<float>::randn({3, 1, 12, 12}, rng);
    auto merged = forward_twobranch(model, x, Mode::Eval).logits;
    auto alone = forward_single(model.ree, x, Mode::Eval);
    REQUIRE(merged->data.size() == alone->data.size());
    for (size_t i = 0; i < merged->data.size(); ++i)
        CHECK(merged->data[i] == doctest::Approx(alone->data[i]).epsilon(1e-6));
}

TEST_CASE("clone is deep") {
    auto model = init_twobranch(small_victim(), 9);
    auto copy = model.clone();
    copy.tee.params[0].weight->data[0] += 5.0f;
    CHECK(model.tee.params[0].weight->data[0] != copy.tee.params[0].weight->data[0]);
    CHECK(copy.merge_points.size() == model.merge_points.size());
}

TEST_CASE("frozen unsecured normalization leaves its running stats alone") {
    auto model = init_twobranch(small_victim(), 9);
    Rng rng(8);
    auto x = Tensor<float>::randn({4, 1, 12, 12}, rng);
    auto rm_before = model.ree.params[0].running_mean->data;
    auto tee_rm_before = model.tee.params[0].running_mean->data;
    forward_twobranch(model, x, Mode::Train, Mode::Eval);
    CHECK(model.ree.params[0].running_mean->data == rm_before);
    CHECK(model.tee.params[0].running_mean->data != tee_rm_before);
}
