#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "nsp/tensor.hpp"

using namespace nsp;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -3.0, double hi = 3.0,
                   bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("conv2d identity kernel is the identity map", "[tensor]") {
    Rng rng(11);
    Tensor x = rand_tensor({1, 2, 5, 7}, rng);
    std::vector<double> k(2 * 2 * 9, 0.0);
    // identity: center tap of the matching channel
    k[(0 * 2 + 0) * 9 + 4] = 1.0;
    k[(1 * 2 + 1) * 9 + 4] = 1.0;
    Tensor kernel = Tensor::from({2, 2, 3, 3}, k);
    Tensor y = conv2d(x, kernel);
    REQUIRE(y.shape() == Shape{1, 2, 5, 7});
    for (std::size_t i = 0; i < x.numel(); ++i)
        REQUIRE(y.values()[i] == Catch::Approx(x.values()[i]).margin(1e-15));
}

TEST_CASE("conv2d all-ones kernel on all-ones input", "[tensor]") {
    Tensor x = Tensor::full({1, 1, 5, 5}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, k);
    // interior cell sums the full 3x3 neighborhood
    REQUIRE(y.values()[2 * 5 + 2] == Catch::Approx(9.0));
    // corner only sees the in-grid 2x2 part
    REQUIRE(y.values()[0] == Catch::Approx(4.0));
}

TEST_CASE("conv2d stride 2 halves spatial dims with ceil", "[tensor]") {
    Rng rng(12);
    Tensor x = rand_tensor({1, 3, 7, 9}, rng);
    Tensor k = rand_tensor({4, 3, 3, 3}, rng);
    Tensor y = conv2d(x, k, 2);
    REQUIRE(y.shape() == Shape{1, 4, 4, 5});
}

TEST_CASE("conv2d rejects channel mismatch", "[tensor]") {
    Tensor x = Tensor::zeros({1, 3, 4, 4});
    Tensor k = Tensor::zeros({2, 4, 3, 3});
    REQUIRE_THROWS_AS(conv2d(x, k), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences", "[tensor]") {
    Rng rng(13);
    Tensor x = rand_tensor({1, 2, 6, 6}, rng, -1.0, 1.0, true);
    Tensor k = rand_tensor({3, 2, 3, 3}, rng, -1.0, 1.0, true);
    Tensor b = rand_tensor({3}, rng, -0.5, 0.5, true);
    auto f = [&]() { return sum(conv2d(x, k, b)); };
    Rng coord_rng(1);
    auto res = grad_check(f, {x, k, b}, 1e-5, coord_rng, 64);
    REQUIRE(res.checked > 0);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("strided conv gradients match finite differences", "[tensor]") {
    Rng rng(14);
    Tensor x = rand_tensor({1, 2, 5, 7}, rng, -1.0, 1.0, true);
    Tensor k = rand_tensor({2, 2, 3, 3}, rng, -1.0, 1.0, true);
    Tensor b = rand_tensor({2}, rng, -0.5, 0.5, true);
    auto f = [&]() { return sum(square(conv2d(x, k, b, 2))); };
    Rng coord_rng(2);
    auto res = grad_check(f, {x, k, b}, 1e-5, coord_rng, 64);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("softplus values", "[tensor]") {
    Tensor x = Tensor::from({3}, {0.0, 100.0, -3.0});
    Tensor y = softplus(x);
    REQUIRE(y.values()[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    REQUIRE(std::fabs(y.values()[1] - 100.0) < 1e-12);
    REQUIRE(y.values()[2] == Catch::Approx(std::log1p(std::exp(-3.0))).epsilon(1e-12));
}

TEST_CASE("relu of negative input is zero", "[tensor]") {
    Tensor y = relu(Tensor::from({2}, {-3.0, 2.5}));
    REQUIRE(y.values()[0] == 0.0);
    REQUIRE(y.values()[1] == 2.5);
}

TEST_CASE("trailing-dim broadcast add", "[tensor]") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({3}, {10, 20, 30});
    Tensor y = add(a, b);
    REQUIRE(y.values() == std::vector<double>{11, 22, 33, 14, 25, 36});
    Tensor bad = Tensor::from({2}, {1, 2});
    REQUIRE_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("broadcast gradients accumulate over leading dims", "[tensor]") {
    Rng rng(15);
    Tensor a = rand_tensor({2, 4}, rng, -2.0, 2.0, true);
    Tensor b = rand_tensor({4}, rng, -2.0, 2.0, true);
    auto f = [&]() { return sum(square(mul(a, b))); };
    Rng coord_rng(5);
    auto res = grad_check(f, {a, b}, 1e-5, coord_rng);
    REQUIRE(res.max_rel_err < 1e-8);
}

TEST_CASE("log of nonpositive raises", "[tensor]") {
    REQUIRE_THROWS_AS(log_op(Tensor::from({1}, {0.0})), NumericError);
    REQUIRE_THROWS_AS(log1p_op(Tensor::from({1}, {-1.0})), NumericError);
}

TEST_CASE("upsample_nearest replicates cells", "[tensor]") {
    Tensor x = Tensor::from({1, 1, 1, 1}, {7.0});
    Tensor y = upsample_nearest(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    for (double v : y.values()) REQUIRE(v == 7.0);

    Tensor z = upsample_nearest(x, 1);
    REQUIRE(z.shape() == x.shape());
    REQUIRE(z.values()[0] == 7.0);
}

TEST_CASE("upsample gradient sums replica gradients", "[tensor]") {
    Rng rng(16);
    Tensor x = rand_tensor({1, 2, 3, 3}, rng, -1.0, 1.0, true);
    auto f = [&]() { return sum(square(upsample_nearest(x, 2))); };
    Rng coord_rng(6);
    auto res = grad_check(f, {x}, 1e-5, coord_rng);
    REQUIRE(res.max_rel_err < 1e-8);
}

TEST_CASE("masked_reduce", "[tensor]") {
    Tensor v = Tensor::from({3}, {1, 2, 3});
    Tensor m = Tensor::from({3}, {1, 0, 1});
    REQUIRE(masked_reduce(v, m, ReduceKind::Sum).item() == Catch::Approx(4.0));
    REQUIRE(masked_reduce(v, m, ReduceKind::Mean).item() == Catch::Approx(2.0));
    Tensor none = Tensor::from({3}, {0, 0, 0});
    REQUIRE(masked_reduce(v, none, ReduceKind::Sum).item() == 0.0);
    REQUIRE_THROWS_AS(masked_reduce(v, none, ReduceKind::Mean), NumericError);
}

TEST_CASE("backward on simple quadratic", "[tensor]") {
    Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor loss = sum(mul(w, w));
    backward(loss);
    REQUIRE(w.grad()[0] == Catch::Approx(2.0));
    REQUIRE(w.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("backward requires scalar loss", "[tensor]") {
    Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
    REQUIRE_THROWS_AS(backward(mul(w, w)), NumericError);
}

TEST_CASE("detach blocks gradient flow", "[tensor]") {
    Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor loss = add(sum(square(w)), sum(square(detach(w))));
    backward(loss);
    // only the live branch contributes: d/dw sum(w^2) = 2w
    REQUIRE(w.grad()[0] == Catch::Approx(2.0));
    REQUIRE(w.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("diamond graph visits each node once", "[tensor]") {
    Tensor w = Tensor::from({1}, {3.0}, true);
    Tensor a = scale(w, 2.0);
    Tensor loss = sum(add(a, a));  // loss = 4w
    backward(loss);
    REQUIRE(w.grad()[0] == Catch::Approx(4.0));
}

TEST_CASE("three-layer conv net gradients vs finite differences", "[tensor]") {
    Rng rng(17);
    Tensor x = rand_tensor({1, 2, 8, 8}, rng, -1.0, 1.0, false);
    Tensor k1 = rand_tensor({4, 2, 3, 3}, rng, -0.5, 0.5, true);
    Tensor b1 = rand_tensor({4}, rng, -0.2, 0.2, true);
    Tensor k2 = rand_tensor({4, 4, 3, 3}, rng, -0.5, 0.5, true);
    Tensor b2 = rand_tensor({4}, rng, -0.2, 0.2, true);
    Tensor k3 = rand_tensor({1, 4, 3, 3}, rng, -0.5, 0.5, true);
    Tensor b3 = rand_tensor({1}, rng, -0.2, 0.2, true);
    auto f = [&]() {
        Tensor h = softplus(conv2d(x, k1, b1));
        h = softplus(conv2d(h, k2, b2, 2));
        h = conv2d(h, k3, b3);
        return mean(square(h));
    };
    Rng coord_rng(7);
    auto res = grad_check(f, {k1, b1, k2, b2, k3, b3}, 1e-5, coord_rng, 64);
    REQUIRE(res.checked >= 64);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("grad_check on a linear map is exact to roundoff", "[tensor]") {
    Rng rng(18);
    Tensor w = rand_tensor({16}, rng, -2.0, 2.0, true);
    Tensor c = rand_tensor({16}, rng, -2.0, 2.0, false);
    auto f = [&]() { return sum(mul(w, c)); };
    Rng coord_rng(8);
    auto res = grad_check(f, {w}, 1e-5, coord_rng);
    REQUIRE(res.max_rel_err < 1e-10);
}

TEST_CASE("grad_check skips the ReLU kink at exact zero", "[tensor]") {
    Tensor w = Tensor::from({3}, {0.0, 1.0, -1.0}, true);
    auto f = [&]() { return sum(relu(w)); };
    Rng coord_rng(9);
    auto res = grad_check(f, {w}, 1e-5, coord_rng);
    REQUIRE(res.skipped_kinks == 1);
    REQUIRE(res.max_rel_err < 1e-10);
}

TEST_CASE("dropout is deterministic per stream and scales kept values", "[tensor]") {
    Tensor x = Tensor::full({1000}, 1.0);
    Rng r1(5), r2(5);
    Tensor y1 = dropout(x, 0.25, r1);
    Tensor y2 = dropout(x, 0.25, r2);
    REQUIRE(y1.values() == y2.values());
    int kept = 0;
    for (double v : y1.values()) {
        REQUIRE((v == 0.0 || v == Catch::Approx(1.0 / 0.75)));
        if (v != 0.0) ++kept;
    }
    REQUIRE(kept > 650);
    REQUIRE(kept < 850);
}

TEST_CASE("backward is bitwise deterministic", "[tensor]") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor x = rand_tensor({1, 3, 6, 6}, rng, -1.0, 1.0, false);
        Tensor k = rand_tensor({3, 3, 3, 3}, rng, -1.0, 1.0, true);
        Tensor loss = mean(square(softplus(conv2d(x, k))));
        backward(loss);
        return k.grad();
    };
    REQUIRE(run(21) == run(21));
}

TEST_CASE("elementwise gradients on composed analytic ops", "[tensor]") {
    Rng rng(19);
    Tensor w = rand_tensor({12}, rng, 0.1, 2.0, true);
    auto f = [&]() {
        Tensor a = log1p_op(exp_op(scale(w, 0.5)));
        Tensor b = div(a, add_scalar(square(w), 1.0));
        return sum(mul(b, expm1_op(neg(w))));
    };
    Rng coord_rng(10);
    auto res = grad_check(f, {w}, 1e-5, coord_rng);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("clamp passes gradient only inside the interval", "[tensor]") {
    Tensor w = Tensor::from({3}, {-7.0, 0.5, 9.0}, true);
    Tensor loss = sum(clamp(w, -6.0, 2.0));
    backward(loss);
    REQUIRE(w.grad() == std::vector<double>{0.0, 1.0, 0.0});
    Tensor y = clamp(Tensor::from({1}, {5.0}), -6.0, -0.18);
    REQUIRE(y.values()[0] == -0.18);
}

TEST_CASE("gather_cells forward and scatter-add backward", "[tensor]") {
    Tensor x = Tensor::from({4}, {10, 20, 30, 40}, true);
    Tensor g = gather_cells(x, {2, 0, 2});
    REQUIRE(g.values() == std::vector<double>{30, 10, 30});
    backward(sum(g));
    REQUIRE(x.grad() == std::vector<double>{1, 0, 2, 0});
    REQUIRE_THROWS_AS(gather_cells(x, {4}), ShapeError);
}

TEST_CASE("pad and crop round-trip", "[tensor]") {
    Rng rng(20);
    Tensor x = rand_tensor({1, 2, 5, 6}, rng, -1.0, 1.0, true);
    Tensor padded = pad2d(x, 3, 2);
    REQUIRE(padded.shape() == Shape{1, 2, 8, 8});
    Tensor back = crop2d(padded, 5, 6);
    REQUIRE(back.values() == x.values());
    auto f = [&]() { return sum(square(crop2d(pad2d(x, 3, 2), 5, 6))); };
    Rng coord_rng(11);
    auto res = grad_check(f, {x}, 1e-5, coord_rng);
    REQUIRE(res.max_rel_err < 1e-8);
}

TEST_CASE("concat_channels splits gradients", "[tensor]") {
    Rng rng(22);
    Tensor a = rand_tensor({1, 2, 4, 4}, rng, -1.0, 1.0, true);
    Tensor b = rand_tensor({1, 1, 4, 4}, rng, -1.0, 1.0, true);
    Tensor y = concat_channels({a, b});
    REQUIRE(y.shape() == Shape{1, 3, 4, 4});
    auto f = [&]() { return sum(square(concat_channels({a, b}))); };
    Rng coord_rng(12);
    auto res = grad_check(f, {a, b}, 1e-5, coord_rng);
    REQUIRE(res.max_rel_err < 1e-8);
}

TEST_CASE("forward ops keep finite inputs finite", "[tensor]") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = rand_tensor({1, 2, 4, 4}, rng, -3.0, 3.0);
        Tensor k = rand_tensor({2, 2, 3, 3}, rng, -3.0, 3.0);
        Tensor y = softplus(conv2d(relu(x), k));
        for (double v : y.values()) REQUIRE(std::isfinite(v));
    }
}
