#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "tbnet/ops.hpp"

using namespace tbnet;

// Gradient checks run on Tensor<double>: central differences in float lose
// most of their significant digits to rounding of the reduction sum.
namespace {

TensorPtr<double> random_tensor(Shape s, Rng& rng, bool rg = true, double stddev = 1.0) {
    return Tensor<double>::randn(std::move(s), rng, stddev, rg);
}

std::vector<double> random_coeffs(size_t n, Rng& rng) {
    std::vector<double> c(n);
    for (auto& v : c) v = rng.normal();
    return c;
}

} // namespace

TEST_CASE("conv2d forward matches the nested-loop reference") {
    Rng rng(11);
    for (int trial = 0; trial < 6; ++trial) {
        const int64_t stride = 1 + trial % 2;
        const int64_t pad = trial % 3;
        auto x = random_tensor({2, 3, 7, 6}, rng);
        auto w = random_tensor({4, 3, 3, 3}, rng);
        auto b = random_tensor({4}, rng);
        auto out = conv2d(x, w, b, stride, pad);
        Shape ref_shape;
        auto ref = oracle::conv2d_reference(x->data, x->shape, w->data, w->shape, b->data, stride,
                                            pad, ref_shape);
        REQUIRE(out->shape == ref_shape);
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(out->data[i] == doctest::Approx(ref[i]).epsilon(1e-6));
    }
}

TEST_CASE("conv2d shape errors are descriptive") {
    Rng rng(1);
    auto x = random_tensor({1, 3, 5, 5}, rng);
    auto w = random_tensor({2, 4, 3, 3}, rng); // channel mismatch
    auto b = random_tensor({2}, rng);
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), ShapeError);
    auto w2 = random_tensor({2, 3, 9, 9}, rng); // kernel larger than padded input
    auto b2 = random_tensor({2}, rng);
    CHECK_THROWS_AS(conv2d(x, w2, b2, 1, 1), ShapeError);
}

TEST_CASE("gradient check: conv2d wrt input, weight, bias") {
    Rng rng(21);
    for (int trial = 0; trial < 4; ++trial) {
        auto x = random_tensor({2, 2, 5, 5}, rng);
        auto w = random_tensor({3, 2, 3, 3}, rng);
        auto b = random_tensor({3}, rng);
        auto coeffs = random_coeffs(2 * 3 * 5 * 5, rng);
        auto loss_fn = [&] { return weighted_sum(conv2d(x, w, b, 1, 1), coeffs); };
        for (const auto& p : {x, w, b}) {
            auto r = oracle::finite_difference_check<double>(loss_fn, p);
            CHECK(r.max_rel_error < 1e-3);
        }
    }
}

TEST_CASE("gradient check: strided padded conv") {
    Rng rng(22);
    auto x = random_tensor({1, 3, 8, 8}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    auto coeffs = random_coeffs(1 * 4 * 4 * 4, rng);
    auto loss_fn = [&] { return weighted_sum(conv2d(x, w, b, 2, 1), coeffs); };
    for (const auto& p : {x, w, b}) {
        auto r = oracle::finite_difference_check<double>(loss_fn, p);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("gradient check: batchnorm train mode wrt input, gamma, beta") {
    Rng rng(23);
    for (int trial = 0; trial < 4; ++trial) {
        auto x = random_tensor({3, 4, 3, 3}, rng);
        auto gamma = random_tensor({4}, rng);
        auto beta = random_tensor({4}, rng);
        auto coeffs = random_coeffs(3 * 4 * 3 * 3, rng);
        auto loss_fn = [&] {
            // Fresh running stats per evaluation so the loss is a pure
            // function of the checked parameters.
            auto rm = Tensor<double>::zeros({4});
            auto rv = Tensor<double>::ones({4});
            return weighted_sum(batchnorm(x, gamma, beta, rm, rv, Mode::Train), coeffs);
        };
        for (const auto& p : {x, gamma, beta}) {
            auto r = oracle::finite_difference_check<double>(loss_fn, p);
            CHECK(r.max_rel_error < 1e-3);
        }
    }
}

TEST_CASE("gradient check: batchnorm eval mode") {
    Rng rng(24);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    auto gamma = random_tensor({3}, rng);
    auto beta = random_tensor({3}, rng);
    auto rm = Tensor<double>::zeros({3});
    auto rv = Tensor<double>::ones({3});
    rv->data = {0.5, 1.5, 2.0};
    rm->data = {0.1, -0.2, 0.3};
    auto coeffs = random_coeffs(2 * 3 * 4 * 4, rng);
    auto loss_fn = [&] {
        return weighted_sum(batchnorm(x, gamma, beta, rm, rv, Mode::Eval), coeffs);
    };
    for (const auto& p : {x, gamma, beta}) {
        auto r = oracle::finite_difference_check<double>(loss_fn, p);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("batchnorm identity when stats match the affine identity") {
    Rng rng(25);
    auto x = random_tensor({2, 3, 2, 2}, rng, false);
    auto gamma = Tensor<double>::ones({3}, true);
    auto beta = Tensor<double>::zeros({3}, true);
    auto rm = Tensor<double>::zeros({3});
    auto rv = Tensor<double>::ones({3});
    auto out = batchnorm(x, gamma, beta, rm, rv, Mode::Eval, 0.1, 0.0);
    for (size_t i = 0; i < x->data.size(); ++i)
        CHECK(out->data[i] == doctest::Approx(x->data[i]).epsilon(1e-6));
}

TEST_CASE("batchnorm running stats update with configured momentum") {
    auto x = Tensor<double>::from({2, 1, 1, 1}, {1.0, 3.0});
    auto gamma = Tensor<double>::ones({1});
    auto beta = Tensor<double>::zeros({1});
    auto rm = Tensor<double>::zeros({1});
    auto rv = Tensor<double>::ones({1});
    batchnorm(x, gamma, beta, rm, rv, Mode::Train, 0.1);
    // batch mean 2, unbiased var 2: rm = 0.9*0 + 0.1*2, rv = 0.9*1 + 0.1*2
    CHECK(rm->data[0] == doctest::Approx(0.2));
    CHECK(rv->data[0] == doctest::Approx(1.1));
}

TEST_CASE("gradient check: relu away from the kink") {
    Rng rng(26);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    for (auto& v : x->data)
        if (std::abs(v) < 0.1) v = 0.5; // keep clear of the nondifferentiable point
    auto coeffs = random_coeffs(x->data.size(), rng);
    auto loss_fn = [&] { return weighted_sum(relu(x), coeffs); };
    auto r = oracle::finite_difference_check<double>(loss_fn, x);
    CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("gradient check: maxpool with distinct entries") {
    Rng rng(27);
    auto x = random_tensor({2, 2, 6, 6}, rng);
    // Separate entries so eps-perturbation cannot flip the argmax.
    for (size_t i = 0; i < x->data.size(); ++i) x->data[i] += 0.05 * double(i % 97);
    auto coeffs = random_coeffs(2 * 2 * 3 * 3, rng);
    auto loss_fn = [&] { return weighted_sum(maxpool2x2(x), coeffs); };
    auto r = oracle::finite_difference_check<double>(loss_fn, x);
    CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("maxpool rejects tiny spatial input") {
    Rng rng(28);
    auto x = random_tensor({1, 1, 1, 4}, rng);
    CHECK_THROWS_AS(maxpool2x2(x), ShapeError);
}

TEST_CASE("gradient check: global average pool") {
    Rng rng(29);
    auto x = random_tensor({2, 5, 3, 3}, rng);
    auto coeffs = random_coeffs(2 * 5, rng);
    auto loss_fn = [&] { return weighted_sum(global_avgpool(x), coeffs); };
    auto r = oracle::finite_difference_check<double>(loss_fn, x);
    CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("gradient check: dense wrt input, weight, bias") {
    Rng rng(30);
    for (int trial = 0; trial < 4; ++trial) {
        auto x = random_tensor({3, 6}, rng);
        auto w = random_tensor({4, 6}, rng);
        auto b = random_tensor({4}, rng);
        auto coeffs = random_coeffs(3 * 4, rng);
        auto loss_fn = [&] { return weighted_sum(dense(x, w, b), coeffs); };
        for (const auto& p : {x, w, b}) {
            auto r = oracle::finite_difference_check<double>(loss_fn, p);
            CHECK(r.max_rel_error < 1e-3);
        }
    }
}

TEST_CASE("gradient check: elementwise add both sides") {
    Rng rng(31);
    auto a = random_tensor({2, 3, 2, 2}, rng);
    auto b = random_tensor({2, 3, 2, 2}, rng);
    auto coeffs = random_coeffs(a->data.size(), rng);
    auto loss_fn = [&] { return weighted_sum(elementwise_add(a, b), coeffs); };
    for (const auto& p : {a, b}) {
        auto r = oracle::finite_difference_check<double>(loss_fn, p);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("gradient check: gather_channels rank 4 and rank 2") {
    Rng rng(32);
    auto x4 = random_tensor({2, 5, 3, 3}, rng);
    std::vector<int64_t> map{4, 0, 2};
    auto coeffs4 = random_coeffs(2 * 3 * 3 * 3, rng);
    auto loss4 = [&]() -> TensorPtr<double> {
        return weighted_sum(gather_channels(x4, map), coeffs4);
    };
    CHECK(oracle::finite_difference_check<double>(loss4, x4).max_rel_error < 1e-3);

    auto x2 = random_tensor({3, 5}, rng);
    auto coeffs2 = random_coeffs(3 * 3, rng);
    auto loss2 = [&]() -> TensorPtr<double> {
        return weighted_sum(gather_channels(x2, map), coeffs2);
    };
    CHECK(oracle::finite_difference_check<double>(loss2, x2).max_rel_error < 1e-3);
}

TEST_CASE("gather_channels validates indices") {
    Rng rng(33);
    auto x = random_tensor({1, 3, 2, 2}, rng, false);
    CHECK_THROWS_AS(gather_channels(x, std::vector<int64_t>{3}), ValidationError);
    CHECK_THROWS_AS(gather_channels(x, std::vector<int64_t>{-1}), ValidationError);
}

TEST_CASE("gradient check: softmax cross entropy") {
    Rng rng(34);
    for (int trial = 0; trial < 4; ++trial) {
        auto logits = random_tensor({5, 7}, rng);
        std::vector<int64_t> labels;
        for (int i = 0; i < 5; ++i)
            labels.push_back(static_cast<int64_t>(rng.below(7)));
        auto loss_fn = [&] { return softmax_cross_entropy(logits, labels); };
        auto r = oracle::finite_difference_check<double>(loss_fn, logits);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("gradient check: composed conv-bn-relu-pool-dense chain") {
    Rng rng(35);
    auto x = random_tensor({2, 2, 6, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng, true, 0.5);
    auto b = random_tensor({3}, rng);
    auto gamma = random_tensor({3}, rng);
    auto beta = random_tensor({3}, rng);
    auto dw = random_tensor({4, 3}, rng);
    auto db = random_tensor({4}, rng);
    std::vector<int64_t> labels{1, 3};
    auto loss_fn = [&] {
        auto rm = Tensor<double>::zeros({3});
        auto rv = Tensor<double>::ones({3});
        auto h = conv2d(x, w, b, 1, 1);
        h = batchnorm(h, gamma, beta, rm, rv, Mode::Train);
        h = relu(h);
        h = maxpool2x2(h);
        h = global_avgpool(h);
        h = dense(h, dw, db);
        return softmax_cross_entropy(h, labels);
    };
    for (const auto& p : {w, b, gamma, beta, dw, db, x}) {
        auto r = oracle::finite_difference_check<double>(loss_fn, p, 1e-5, 24);
        CHECK(r.max_rel_error < 1e-3);
    }
}
