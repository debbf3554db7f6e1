#include <catch2/catch.hpp>

#include "lvit/gradcheck.hpp"
#include "lvit/image_ops.hpp"

using lvit::PadMode;
using lvit::Shape;
using lvit::Tape;
using lvit::Tensor;

namespace {

Tensor<double> randn(Shape shape, lvit::Rng& rng) {
    Tensor<double> t(shape);
    for (auto& v : t.values()) v = rng.normal();
    return t;
}

// Cyclic shift of the spatial plane, test-side helper for the invariance check.
Tensor<double> roll(const Tensor<double>& x, int dy, int dx) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<double> out(x.shape());
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const int sy = ((y - dy) % h + h) % h;
                    const int sx = ((xx - dx) % w + w) % w;
                    out.data()[((b * c + ch) * h + y) * w + xx] = x.data()[((b * c + ch) * h + sy) * w + sx];
                }
    return out;
}

}  // namespace

TEST_CASE("conv2d hand-worked cases", "[image_ops]") {
    // 1x1 kernel is pure scaling
    auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto k1 = Tensor<double>::from({1, 1, 1, 1}, {2});
    CHECK(lvit::conv2d(x, k1).values() == std::vector<double>{2, 4, 6, 8});

    // 3x3 delta kernel with padding 1 is the identity
    auto kd = Tensor<double>(Shape{1, 1, 3, 3});
    kd.data()[4] = 1.0;
    CHECK(lvit::conv2d(x, kd, 1, 1).values() == std::vector<double>{1, 2, 3, 4});

    // valid 2x2 kernel [[1,0],[0,1]]: 1*1 + 4*1 = 5
    auto k2 = Tensor<double>::from({1, 1, 2, 2}, {1, 0, 0, 1});
    auto y = lvit::conv2d(x, k2);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == Approx(5.0));
}

TEST_CASE("conv2d rejects bad geometry", "[image_ops]") {
    auto x = Tensor<double>(Shape{1, 1, 2, 2});
    auto k = Tensor<double>(Shape{1, 1, 3, 3});
    CHECK_THROWS_AS(lvit::conv2d(x, k), std::invalid_argument);          // kernel larger than input
    CHECK_THROWS_AS(lvit::conv2d(x, k, 0, 1), std::invalid_argument);    // non-positive stride
    auto kc = Tensor<double>(Shape{1, 2, 1, 1});
    CHECK_THROWS_AS(lvit::conv2d(x, kc), std::invalid_argument);         // channel mismatch
}

TEST_CASE("conv2d gradients pass finite differences", "[image_ops]") {
    lvit::Rng rng(41);
    auto x = randn({2, 2, 5, 5}, rng);
    auto k = randn({3, 2, 3, 3}, rng);

    const double ex = lvit::finite_diff_check<double>(
        [&](const Tensor<double>& t) { return lvit::sum_all(lvit::mul(lvit::conv2d(t, k, 1, 1), lvit::conv2d(t, k, 1, 1))); },
        x, 1e-5);
    CHECK(ex < 1e-6);

    const double ew = lvit::finite_diff_check<double>(
        [&](const Tensor<double>& t) {
            auto y = lvit::conv2d(x, t, 2, 1);
            return lvit::sum_all(lvit::mul(y, y));
        },
        k, 1e-5);
    CHECK(ew < 1e-6);

    const double ec = lvit::finite_diff_check<double>(
        [&](const Tensor<double>& t) {
            auto y = lvit::conv2d(t, k, 1, 1, PadMode::Circular);
            return lvit::sum_all(lvit::mul(y, y));
        },
        x, 1e-5);
    CHECK(ec < 1e-6);
}

TEST_CASE("circular-padded conv commutes with every cyclic shift", "[image_ops]") {
    lvit::Rng rng(4242);
    auto x = randn({1, 1, 16, 16}, rng);
    auto k = randn({1, 1, 3, 3}, rng);
    for (int dy = 0; dy < 16; ++dy)
        for (int dx = 0; dx < 16; ++dx) {
            auto lhs = lvit::conv2d(roll(x, dy, dx), k, 1, 1, PadMode::Circular);
            auto rhs = roll(lvit::conv2d(x, k, 1, 1, PadMode::Circular), dy, dx);
            REQUIRE(lhs.values() == rhs.values());  // exact, bit for bit
        }
}

TEST_CASE("maxpool2d forward, ties and gradient routing", "[image_ops]") {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(lvit::maxpool2d(x, 2).item() == Approx(4.0));

    auto c = Tensor<double>(Shape{1, 1, 4, 4}, 7.5);
    auto pc = lvit::maxpool2d(c, 2);
    CHECK(pc.shape() == Shape{1, 1, 2, 2});
    for (const double v : pc.values()) CHECK(v == 7.5);

    auto xg = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    {
        Tape<double> tape;
        tape.backward(lvit::sum_all(lvit::maxpool2d(xg, 2)));
    }
    CHECK(xg.grad().values() == std::vector<double>{0, 0, 0, 1});

    // tie in a window routes to the first element in row-major order
    auto xt = Tensor<double>::from({1, 1, 2, 2}, {4, 4, 4, 4}, true);
    {
        Tape<double> tape;
        tape.backward(lvit::sum_all(lvit::maxpool2d(xt, 2)));
    }
    CHECK(xt.grad().values() == std::vector<double>{1, 0, 0, 0});

    auto odd = Tensor<double>(Shape{1, 1, 3, 3});
    CHECK_THROWS_AS(lvit::maxpool2d(odd, 2), std::invalid_argument);

    lvit::Rng rng(5);
    auto xr = randn({1, 2, 4, 4}, rng);
    const double err = lvit::finite_diff_check<double>(
        [](const Tensor<double>& t) { return lvit::sum_all(lvit::maxpool2d(t, 2)); }, xr, 1e-6);
    CHECK(err < 1e-8);
}

TEST_CASE("avgpool2d averages and differentiates", "[image_ops]") {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(lvit::avgpool2d(x, 2).item() == Approx(2.5));
    lvit::Rng rng(6);
    auto xr = randn({2, 2, 4, 4}, rng);
    const double err = lvit::finite_diff_check<double>(
        [](const Tensor<double>& t) {
            auto y = lvit::avgpool2d(t, 2);
            return lvit::sum_all(lvit::mul(y, y));
        },
        xr, 1e-5);
    CHECK(err < 1e-7);
}

TEST_CASE("bilinear upsampling identities", "[image_ops]") {
    lvit::Rng rng(8);
    auto x = randn({1, 2, 3, 3}, rng);
    auto same = lvit::upsample_bilinear(x, 1);
    CHECK(same.values() == x.values());

    auto c = Tensor<double>(Shape{1, 1, 3, 3}, 2.25);
    auto up = lvit::upsample_bilinear(c, 2);
    CHECK(up.shape() == Shape{1, 1, 6, 6});
    for (const double v : up.values()) CHECK(v == Approx(2.25));

    auto one = Tensor<double>::from({1, 1, 1, 1}, {3.5});
    auto two = lvit::upsample_bilinear(one, 2);
    CHECK(two.shape() == Shape{1, 1, 2, 2});
    for (const double v : two.values()) CHECK(v == Approx(3.5));

    CHECK_THROWS_AS(lvit::upsample_bilinear(x, 0), std::invalid_argument);

    const double err = lvit::finite_diff_check<double>(
        [](const Tensor<double>& t) {
            auto y = lvit::upsample_bilinear(t, 2);
            return lvit::sum_all(lvit::mul(y, y));
        },
        x, 1e-5);
    CHECK(err < 1e-7);
}

TEST_CASE("nearest upsampling repeats pixels and differentiates", "[image_ops]") {
    auto x = Tensor<double>::from({1, 1, 1, 2}, {1, 2});
    auto y = lvit::upsample_nearest(x, 2);
    CHECK(y.values() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2});
    lvit::Rng rng(10);
    auto xr = randn({1, 2, 2, 2}, rng);
    const double err = lvit::finite_diff_check<double>(
        [](const Tensor<double>& t) {
            auto u = lvit::upsample_nearest(t, 3);
            return lvit::sum_all(lvit::mul(u, u));
        },
        xr, 1e-5);
    CHECK(err < 1e-7);
}

TEST_CASE("maxpool of an upsampled constant is the identity at reduced scale", "[image_ops]") {
    auto c = Tensor<double>(Shape{1, 1, 4, 4}, 0.75);
    auto round_trip = lvit::maxpool2d(lvit::upsample_bilinear(c, 2), 2);
    CHECK(round_trip.shape() == c.shape());
    for (const double v : round_trip.values()) CHECK(v == Approx(0.75));
}
