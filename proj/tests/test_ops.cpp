#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fsdm/ops.hpp"
#include "fsdm/rng.hpp"
#include "oracles.hpp"

using fsdm::Tensor;

namespace {

std::vector<double> randn(fsdm::Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * (2.0 * rng.uniform() - 1.0);
    return v;
}

}  // namespace

TEST_CASE("conv2d matches the direct six-loop form") {
    fsdm::Rng rng(101);
    struct Cfg {
        int N, C, H, W, K, k, stride, pad;
    };
    for (const Cfg& c : {Cfg{2, 3, 8, 8, 4, 3, 1, 1}, Cfg{1, 2, 9, 7, 3, 3, 2, 1},
                         Cfg{2, 1, 5, 5, 2, 1, 1, 0}, Cfg{1, 4, 11, 11, 5, 5, 2, 2}}) {
        auto in = randn(rng, static_cast<std::size_t>(c.N * c.C * c.H * c.W));
        auto w = randn(rng, static_cast<std::size_t>(c.K * c.C * c.k * c.k));
        auto b = randn(rng, static_cast<std::size_t>(c.K));
        auto got = fsdm::conv2d(Tensor<double>::from_data({c.N, c.C, c.H, c.W}, in),
                                Tensor<double>::from_data({c.K, c.C, c.k, c.k}, w),
                                Tensor<double>::from_data({c.K}, b), c.stride, c.pad);
        auto want = oracle::conv2d(in, c.N, c.C, c.H, c.W, w, c.K, c.k, c.k, b, c.stride, c.pad);
        REQUIRE(got.numel() == static_cast<std::int64_t>(want.size()));
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(std::abs(got.data()[i] - want[i]) < 1e-9);
        }
    }
}

TEST_CASE("conv2d shape validation names the offending axis") {
    auto x = Tensor<float>::zeros({1, 3, 8, 8});
    auto w = Tensor<float>::zeros({4, 2, 3, 3});
    auto b = Tensor<float>::zeros({4});
    CHECK_THROWS_AS(fsdm::conv2d(x, w, b, 1, 1), fsdm::DimensionError);
    CHECK_THROWS_AS(fsdm::conv2d(x, Tensor<float>::zeros({4, 3, 2, 2}), b, 1, 1), fsdm::DimensionError);
    CHECK_THROWS_AS(fsdm::conv2d(x, Tensor<float>::zeros({4, 3, 3, 3}), Tensor<float>::zeros({5}), 1, 1),
                    fsdm::DimensionError);
    CHECK_THROWS_AS(fsdm::conv2d(x, Tensor<float>::zeros({4, 3, 3, 3}), b, 3, 0), fsdm::DimensionError);
}

TEST_CASE("maxpool2d matches window scan exactly") {
    fsdm::Rng rng(102);
    auto in = randn(rng, 2 * 3 * 8 * 8);
    auto got = fsdm::maxpool2d(Tensor<double>::from_data({2, 3, 8, 8}, in), 2, 2);
    auto want = oracle::maxpool2d(in, 2, 3, 8, 8, 2, 2);
    CHECK(got.values() == want);
}

TEST_CASE("global_maxpool picks plane maxima") {
    auto x = Tensor<float>::from_data({1, 2, 2, 2}, {1, 7, 3, 2, -5, -1, -9, -2});
    auto y = fsdm::global_maxpool(x);
    CHECK(y.shape() == std::vector<int>{1, 2});
    CHECK(y.data()[0] == 7.f);
    CHECK(y.data()[1] == -1.f);
}

TEST_CASE("softmax matches extended-precision oracle") {
    fsdm::Rng rng(103);
    for (int trial = 0; trial < 5; ++trial) {
        auto row = randn(rng, 11, 8.0);
        auto got = fsdm::softmax(Tensor<double>::from_data({11}, row), 0);
        auto want = oracle::softmax_row(row);
        double s = 0;
        for (int i = 0; i < 11; ++i) {
            CHECK(std::abs(got.data()[i] - want[static_cast<std::size_t>(i)]) < 1e-12);
            s += got.data()[i];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax normalizes over the requested axis only") {
    fsdm::Rng rng(104);
    auto v = randn(rng, 2 * 3 * 4);
    auto y = fsdm::softmax(Tensor<double>::from_data({2, 3, 4}, v), 1);
    for (int o = 0; o < 2; ++o) {
        for (int i = 0; i < 4; ++i) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += y.data()[(o * 3 + k) * 4 + i];
            CHECK(s == doctest::Approx(1.0));
        }
    }
}

TEST_CASE("log_softmax equals log of softmax") {
    fsdm::Rng rng(105);
    auto v = randn(rng, 3 * 7, 5.0);
    auto t = Tensor<double>::from_data({3, 7}, v);
    auto a = fsdm::log_softmax(t, 1);
    auto b = fsdm::softmax(t, 1);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a.data()[i] == doctest::Approx(std::log(b.data()[i])).epsilon(1e-10));
    }
}

TEST_CASE("sigmoid is stable at extremes") {
    auto y = fsdm::sigmoid(Tensor<double>::from_data({4}, {-80.0, 0.0, 80.0, 2.0}));
    CHECK(y.data()[0] > 0.0);
    CHECK(y.data()[0] < 1e-30);
    CHECK(y.data()[1] == doctest::Approx(0.5));
    CHECK(y.data()[2] == doctest::Approx(1.0));
    CHECK(y.data()[3] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
}

TEST_CASE("structural ops roundtrip") {
    fsdm::Rng rng(106);
    auto va = randn(rng, 1 * 2 * 4 * 4);
    auto vb = randn(rng, 1 * 3 * 4 * 4);
    auto a = Tensor<double>::from_data({1, 2, 4, 4}, va);
    auto b = Tensor<double>::from_data({1, 3, 4, 4}, vb);
    auto cat = fsdm::concat_channels(a, b);
    CHECK(cat.shape() == std::vector<int>{1, 5, 4, 4});
    CHECK(fsdm::slice_channels(cat, 0, 2).values() == va);
    CHECK(fsdm::slice_channels(cat, 2, 5).values() == vb);

    auto up = fsdm::upsample_nearest2x(a);
    CHECK(up.shape() == std::vector<int>{1, 2, 8, 8});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                CHECK(up.data()[(c * 8 + y) * 8 + x] == va[static_cast<std::size_t>((c * 4 + y / 2) * 4 + x / 2)]);

    auto stacked = fsdm::concat_batch({a, a});
    CHECK(stacked.shape() == std::vector<int>{2, 2, 4, 4});

    auto r = fsdm::reshape(a, {2, 16});
    CHECK(r.values() == va);
    CHECK_THROWS_AS(fsdm::reshape(a, {3, 5}), fsdm::DimensionError);

    auto m = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(fsdm::select_row(m, 1).values() == std::vector<double>{4, 5, 6});
    CHECK_THROWS_AS(fsdm::select_row(m, 2), fsdm::DimensionError);
}

TEST_CASE("gather and clamp behave on edges") {
    auto x = Tensor<double>::from_data({5}, {10, 20, 30, 40, 50});
    auto g = fsdm::gather(x, {4, 0, 0, 2});
    CHECK(g.values() == std::vector<double>{50, 10, 10, 30});
    CHECK_THROWS_AS(fsdm::gather(x, {5}), fsdm::DimensionError);

    auto c = fsdm::clamp(x, 15.0, 45.0);
    CHECK(c.values() == std::vector<double>{15, 20, 30, 40, 45});
}

TEST_CASE("channelwise_scale multiplies whole planes") {
    auto f = Tensor<double>::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto v = Tensor<double>::from_data({2}, {2.0, -1.0});
    auto y = fsdm::channelwise_scale(f, v);
    CHECK(y.values() == std::vector<double>{2, 4, 6, 8, -5, -6, -7, -8});
    CHECK_THROWS_AS(fsdm::channelwise_scale(f, Tensor<double>::from_data({3}, {1, 2, 3})),
                    fsdm::DimensionError);
}

TEST_CASE("sgd_step follows the velocity recurrence") {
    // v <- m v - lr (g + wd p); p <- p + v, checked by hand for two steps.
    auto p = Tensor<double>::from_data({2}, {1.0, -2.0}, true);
    std::vector<fsdm::Parameter<double>> params{{"p", p}};
    fsdm::SgdState<double> st;

    const double lr = 0.1, m = 0.9, wd = 0.01;
    auto run_step = [&]() {
        auto loss = fsdm::sum(fsdm::mul(p, p));  // g = 2p
        auto grads = fsdm::backward(loss);
        fsdm::sgd_step(params, grads, st, lr, m, wd);
    };

    double pv[2] = {1.0, -2.0}, vel[2] = {0.0, 0.0};
    for (int step = 0; step < 2; ++step) {
        run_step();
        for (int i = 0; i < 2; ++i) {
            const double g = 2.0 * pv[i];
            vel[i] = m * vel[i] - lr * (g + wd * pv[i]);
            pv[i] += vel[i];
            CHECK(p.data()[i] == doctest::Approx(pv[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("sgd_step skips parameters without gradients") {
    auto used = Tensor<double>::from_data({1}, {1.0}, true);
    auto frozen = Tensor<double>::from_data({1}, {5.0}, true);
    std::vector<fsdm::Parameter<double>> params{{"used", used}, {"frozen", frozen}};
    fsdm::SgdState<double> st;
    auto grads = fsdm::backward(fsdm::sum(fsdm::mul(used, used)));
    fsdm::sgd_step(params, grads, st, 0.1, 0.9, 0.0);
    CHECK(used.data()[0] == doctest::Approx(0.8));
    CHECK(frozen.data()[0] == 5.0);
}
