#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "fsdm/loss.hpp"
#include "fsdm/matching.hpp"
#include "fsdm/rng.hpp"
#include "oracles.hpp"

using fsdm::Box;
using fsdm::BoxAnnotation;
using fsdm::Tensor;
namespace fl = fsdm::loss;

namespace {

oracle::Corners corners(const Box& b) { return {b.x1(), b.y1(), b.x2(), b.y2()}; }

// Anchor boxes flattened in the library's scan order (scale, row, col, anchor).
std::vector<oracle::Corners> flatten_anchors(const fl::AnchorSet& a, int image_size) {
    std::vector<oracle::Corners> out;
    for (int s = 0; s < 3; ++s) {
        const int g = image_size / fl::kStrides[static_cast<std::size_t>(s)];
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x)
                for (int k = 0; k < 3; ++k) out.push_back(corners(a.anchor_box(s, y, x, k)));
    }
    return out;
}

std::vector<BoxAnnotation> random_layout(fsdm::Rng& rng, int image_size, int max_boxes) {
    std::vector<BoxAnnotation> gts;
    const int n = rng.uniform_int(0, max_boxes);
    for (int i = 0; i < n; ++i) {
        BoxAnnotation b;
        b.w = rng.uniform(2.0, image_size * 0.45);
        b.h = rng.uniform(2.0, image_size * 0.45);
        b.cx = rng.uniform(b.w / 2, image_size - b.w / 2);
        b.cy = rng.uniform(b.h / 2, image_size - b.h / 2);
        b.category_id = rng.uniform_int(0, 2);
        gts.push_back(b);
    }
    return gts;
}

}  // namespace

TEST_CASE("iou hand cases") {
    Box a{0.5, 0.5, 1, 1};
    CHECK(fsdm::iou(a, a) == 1.0);
    CHECK(fsdm::iou(a, Box{5, 5, 1, 1}) == 0.0);
    // unit squares at (0,0) and (0.5,0): overlap 0.5, union 1.5
    CHECK(fsdm::iou(Box{0.5, 0.5, 1, 1}, Box{1.0, 0.5, 1, 1}) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("default anchors reproduce the scaled reference table at 128") {
    const auto a = fl::AnchorSet::defaults(128);
    const double want[3][3][2] = {{{19, 14}, {25, 32}, {60, 52}},
                                  {{5, 10}, {10, 7}, {9, 19}},
                                  {{2, 2}, {3, 5}, {5, 4}}};
    for (int s = 0; s < 3; ++s)
        for (int k = 0; k < 3; ++k)
            for (int d = 0; d < 2; ++d) CHECK(a.sizes[s][k][d] == want[s][k][d]);
}

TEST_CASE("anchor boxes sit at cell centers and rescale proportionally") {
    const auto a = fl::AnchorSet::defaults(128);
    const Box b = a.anchor_box(0, 1, 2, 0);  // stride 32
    CHECK(b.cx == 80.0);
    CHECK(b.cy == 48.0);
    CHECK(b.w == 19.0);
    const auto r = a.rescaled(128, 96);
    CHECK(r.sizes[0][0][0] == doctest::Approx(19.0 * 0.75));
}

TEST_CASE("no ground truth: every anchor negative") {
    const auto m = fl::match_anchors({}, fl::AnchorSet::defaults(64), 64);
    for (int s = 0; s < 3; ++s)
        for (const auto& l : m.labels[static_cast<std::size_t>(s)])
            CHECK(l.label == fl::AnchorLabel::negative);
    CHECK(m.forced.empty());
}

TEST_CASE("gt equal to an anchor box is positive with IoU 1") {
    const auto anchors = fl::AnchorSet::defaults(64);
    const Box ab = anchors.anchor_box(1, 2, 1, 0);
    std::vector<BoxAnnotation> gts{{ab.cx, ab.cy, ab.w, ab.h, 0}};
    const auto m = fl::match_anchors(gts, anchors, 64);
    CHECK(m.at(1, 2, 1, 0).label == fl::AnchorLabel::positive);
    CHECK(m.at(1, 2, 1, 0).gt_index == 0);
    CHECK(m.forced[0] == std::array<int, 4>{1, 2, 1, 0});
}

TEST_CASE("matching agrees with the brute-force rule application") {
    const int image_size = 64;
    const auto anchors = fl::AnchorSet::defaults(image_size);
    const auto flat = flatten_anchors(anchors, image_size);
    fsdm::Rng rng(301);
    for (int trial = 0; trial < 60; ++trial) {
        const auto gts = random_layout(rng, image_size, 5);
        std::vector<oracle::Corners> gtc;
        for (const auto& g : gts) gtc.push_back(corners(g.box()));
        const auto want = oracle::brute_assign(flat, gtc, 0.7, 0.3);
        const auto got = fl::match_anchors(gts, anchors, image_size);

        std::size_t i = 0;
        for (int s = 0; s < 3; ++s) {
            const int g = image_size / fl::kStrides[static_cast<std::size_t>(s)];
            for (int y = 0; y < g; ++y)
                for (int x = 0; x < g; ++x)
                    for (int a = 0; a < 3; ++a, ++i) {
                        const auto& m = got.at(s, y, x, a);
                        const int lab = m.label == fl::AnchorLabel::positive ? 1
                                        : m.label == fl::AnchorLabel::ignored ? 0
                                                                              : -1;
                        REQUIRE(lab == want.labels[i]);
                        if (lab == 1) REQUIRE(m.gt_index == want.gt_of[i]);
                    }
        }
        if (!gts.empty()) {
            for (const auto& f : got.forced) CHECK(f[0] >= 0);
        }
    }
}

TEST_CASE("every ground truth owns at least one positive anchor") {
    fsdm::Rng rng(302);
    const auto anchors = fl::AnchorSet::defaults(128);
    for (int trial = 0; trial < 20; ++trial) {
        auto gts = random_layout(rng, 128, 5);
        const auto m = fl::match_anchors(gts, anchors, 128);
        std::vector<int> hits(gts.size(), 0);
        for (int s = 0; s < 3; ++s)
            for (const auto& l : m.labels[static_cast<std::size_t>(s)])
                if (l.label == fl::AnchorLabel::positive) ++hits[static_cast<std::size_t>(l.gt_index)];
        for (int h : hits) CHECK(h >= 1);
    }
}

TEST_CASE("encode hand cases") {
    // gt identical to the anchor, centered in cell (2,1) at stride 16
    Box gt{16 * 2.5, 16 * 1.5, 24, 12};
    auto e = fl::encode_targets(gt, 24, 12, 2, 1, 16);
    for (double v : e) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
    // width = anchor * e -> w_t = 1
    auto e2 = fl::encode_targets(Box{40, 24, 24 * std::exp(1.0), 12}, 24, 12, 2, 1, 16);
    CHECK(e2[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("decode(encode) roundtrip closes for 1000 random boxes") {
    fsdm::Rng rng(303);
    const auto anchors = fl::AnchorSet::defaults(128);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
        const int s = rng.uniform_int(0, 2);
        const int stride = fl::kStrides[static_cast<std::size_t>(s)];
        const int g = 128 / stride;
        const int cx = rng.uniform_int(0, g - 1), cy = rng.uniform_int(0, g - 1);
        const int a = rng.uniform_int(0, 2);
        const auto& an = anchors.sizes[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
        Box gt;
        gt.cx = (cx + rng.uniform(0.001, 0.999)) * stride;
        gt.cy = (cy + rng.uniform(0.001, 0.999)) * stride;
        gt.w = an[0] * std::exp(rng.uniform(-1.5, 1.5));
        gt.h = an[1] * std::exp(rng.uniform(-1.5, 1.5));
        const auto e = fl::encode_targets(gt, an[0], an[1], cx, cy, stride);
        const Box d = fl::decode_box(e[0], e[1], e[2], e[3], an[0], an[1], cx, cy, stride);
        for (auto [got, want] : {std::pair{d.cx, gt.cx}, {d.cy, gt.cy}, {d.w, gt.w}, {d.h, gt.h}}) {
            worst = std::max(worst, std::abs(got - want) / std::max(1e-9, std::abs(want)));
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("decode geometry: centers stay inside the cell, extents positive") {
    fsdm::Rng rng(304);
    const auto anchors = fl::AnchorSet::defaults(128);
    for (int i = 0; i < 200; ++i) {
        const int s = rng.uniform_int(0, 2);
        const int stride = fl::kStrides[static_cast<std::size_t>(s)];
        const int cx = rng.uniform_int(0, 128 / stride - 1);
        const auto& an = anchors.sizes[static_cast<std::size_t>(s)][0];
        const Box d = fl::decode_box(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-2, 2),
                                     rng.uniform(-2, 2), an[0], an[1], cx, 0, stride);
        CHECK(d.cx >= cx * stride);
        CHECK(d.cx <= (cx + 1) * stride);
        CHECK(d.w > 0);
        CHECK(d.h > 0);
    }
}

namespace {

struct LossFixture {
    int image_size = 64;
    std::vector<int> active{0, 1, 2};
    fl::AnchorSet anchors = fl::AnchorSet::defaults(64);
    std::vector<BoxAnnotation> gts;
    fl::MatchResult match;
    std::array<Tensor<double>, 3> raw;

    explicit LossFixture(fsdm::Rng& rng, bool with_objects = true) {
        if (with_objects) {
            gts = {{18, 22, 12, 14, 1}, {44, 40, 20, 16, 0}};
        }
        match = fl::match_anchors(gts, anchors, image_size);
        for (int s = 0; s < 3; ++s) {
            const int g = match.grid[static_cast<std::size_t>(s)];
            std::vector<double> v(static_cast<std::size_t>(3 * 18 * g * g));
            for (auto& x : v) x = rng.uniform(-2.0, 2.0);
            raw[static_cast<std::size_t>(s)] =
                Tensor<double>::from_data({3, 18, g, g}, std::move(v), true);
        }
    }
};

// Direct-formula recomputation of all four loss terms in double.
struct LossOracle {
    double loc = 0, obj = 0, noobj = 0, cls = 0;
    int n_pos = 0, n_neg = 0;
};

LossOracle loss_oracle(const LossFixture& f) {
    LossOracle o;
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    auto clampp = [](double p) { return std::min(1.0 - 1e-7, std::max(1e-7, p)); };
    for (int s = 0; s < 3; ++s) {
        const int g = f.match.grid[static_cast<std::size_t>(s)];
        const int stride = fl::kStrides[static_cast<std::size_t>(s)];
        const double* d = f.raw[static_cast<std::size_t>(s)].data();
        auto at = [&](int map, int ch, int y, int x) {
            return d[((map * 18 + ch) * g + y) * g + x];
        };
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x)
                for (int a = 0; a < 3; ++a) {
                    const auto& m = f.match.at(s, y, x, a);
                    if (m.label == fl::AnchorLabel::positive) {
                        ++o.n_pos;
                        const auto& gt = f.gts[static_cast<std::size_t>(m.gt_index)];
                        const int j = gt.category_id;  // active ids are 0..2
                        const auto& an = f.anchors.sizes[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
                        const double fx = std::min(1 - 1e-6, std::max(1e-6, gt.cx / stride - x));
                        const double fy = std::min(1 - 1e-6, std::max(1e-6, gt.cy / stride - y));
                        const double t[4] = {std::log(fx / (1 - fx)), std::log(fy / (1 - fy)),
                                             std::log(gt.w / an[0]), std::log(gt.h / an[1])};
                        for (int l = 0; l < 4; ++l) {
                            const double diff = at(j, a * 6 + l, y, x) - t[l];
                            o.loc += diff * diff;
                        }
                        o.obj += -std::log(clampp(sig(at(j, a * 6 + 4, y, x))));
                        std::vector<double> logits(3);
                        for (int jj = 0; jj < 3; ++jj) logits[static_cast<std::size_t>(jj)] = at(jj, a * 6 + 5, y, x);
                        const auto sm = oracle::softmax_row(logits);
                        o.cls += -std::log(sm[static_cast<std::size_t>(j)]);
                    } else if (m.label == fl::AnchorLabel::negative) {
                        for (int jj = 0; jj < 3; ++jj) {
                            ++o.n_neg;
                            o.noobj += -std::log(clampp(1.0 - sig(at(jj, a * 6 + 4, y, x))));
                        }
                    }
                }
    }
    if (o.n_pos > 0) {
        o.loc /= o.n_pos;
        o.obj /= o.n_pos;
        o.cls /= o.n_pos;
    }
    if (o.n_neg > 0) o.noobj /= o.n_neg;
    return o;
}

}  // namespace

TEST_CASE("loss terms match the direct-formula oracle") {
    fsdm::Rng rng(305);
    for (int trial = 0; trial < 5; ++trial) {
        LossFixture f(rng);
        const auto got = fl::total_loss(f.raw, f.gts, f.active, f.match, f.anchors);
        const auto want = loss_oracle(f);
        REQUIRE(got.n_pos == want.n_pos);
        REQUIRE(got.n_neg == want.n_neg);
        CHECK(got.loc.item() == doctest::Approx(want.loc).epsilon(1e-9));
        CHECK(got.obj.item() == doctest::Approx(want.obj).epsilon(1e-9));
        CHECK(got.noobj.item() == doctest::Approx(want.noobj).epsilon(1e-9));
        CHECK(got.cls.item() == doctest::Approx(want.cls).epsilon(1e-9));
        CHECK(got.total.item() ==
              doctest::Approx(want.loc + 1.0 * want.obj + 0.5 * want.noobj + want.cls).epsilon(1e-9));
    }
}

TEST_CASE("empty image: only the no-object term is active") {
    fsdm::Rng rng(306);
    LossFixture f(rng, false);
    const auto got = fl::total_loss(f.raw, f.gts, f.active, f.match, f.anchors);
    CHECK(got.n_pos == 0);
    CHECK(got.loc.item() == 0.0);
    CHECK(got.obj.item() == 0.0);
    CHECK(got.cls.item() == 0.0);
    CHECK(got.noobj.item() > 0.0);
    CHECK(got.n_neg == 3 * 3 * (2 * 2 + 4 * 4 + 8 * 8));
}

TEST_CASE("hand-computed loss values") {
    // single gt equal to an anchor box: its cell is the only positive
    const int image_size = 64;
    fl::AnchorSet anchors = fl::AnchorSet::defaults(image_size);
    const Box ab = anchors.anchor_box(0, 1, 1, 1);
    std::vector<BoxAnnotation> gts{{ab.cx, ab.cy, ab.w, ab.h, 0}};
    auto match = fl::match_anchors(gts, anchors, image_size);

    std::array<Tensor<double>, 3> raw;
    for (int s = 0; s < 3; ++s) {
        const int g = match.grid[static_cast<std::size_t>(s)];
        raw[static_cast<std::size_t>(s)] = Tensor<double>::zeros({1, 18, g, g});
    }
    // P_o = 1/e at the positive: o_p = logit(1/e)
    const double p = 1.0 / std::exp(1.0);
    const int g0 = match.grid[0];
    raw[0].mutable_data()[((1 * 6 + 4) * g0 + 1) * g0 + 1] = std::log(p / (1 - p));

    // offsets off by one -> loc = 4; single category -> cls = ln 1 = 0
    for (int l = 0; l < 4; ++l) {
        raw[0].mutable_data()[((1 * 6 + l) * g0 + 1) * g0 + 1] += 1.0;
    }
    const auto got = fl::total_loss(raw, gts, {0}, match, anchors);
    CHECK(got.n_pos == 1);
    CHECK(got.obj.item() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(got.loc.item() == doctest::Approx(4.0).epsilon(1e-9));
    CHECK(got.cls.item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("uniform logits give ln N classification loss") {
    fsdm::Rng rng(307);
    LossFixture f(rng);
    for (auto& t : f.raw) {
        double* d = t.mutable_data();
        const int g = t.dim(2);
        for (int j = 0; j < 3; ++j)
            for (int a = 0; a < 3; ++a)
                for (int i = 0; i < g * g; ++i) d[(j * 18 + a * 6 + 5) * g * g + i] = 0.7;
    }
    const auto got = fl::total_loss(f.raw, f.gts, f.active, f.match, f.anchors);
    CHECK(got.cls.item() == doctest::Approx(std::log(3.0)).epsilon(1e-9));
}

TEST_CASE("dominant true logit drives classification loss to zero") {
    fsdm::Rng rng(308);
    LossFixture f(rng);
    for (int s = 0; s < 3; ++s) {
        const int g = f.match.grid[static_cast<std::size_t>(s)];
        double* d = f.raw[static_cast<std::size_t>(s)].mutable_data();
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x)
                for (int a = 0; a < 3; ++a) {
                    const auto& m = f.match.at(s, y, x, a);
                    if (m.label != fl::AnchorLabel::positive) continue;
                    const int j = f.gts[static_cast<std::size_t>(m.gt_index)].category_id;
                    for (int jj = 0; jj < 3; ++jj)
                        d[((jj * 18 + a * 6 + 5) * g + y) * g + x] = jj == j ? 50.0 : 0.0;
                }
    }
    const auto got = fl::total_loss(f.raw, f.gts, f.active, f.match, f.anchors);
    CHECK(got.cls.item() < 1e-9);
}

TEST_CASE("no-object weight scales its term exactly linearly") {
    fsdm::Rng rng(309);
    LossFixture f(rng);
    const auto a = fl::total_loss(f.raw, f.gts, f.active, f.match, f.anchors, {1.0, 0.5});
    const auto b = fl::total_loss(f.raw, f.gts, f.active, f.match, f.anchors, {1.0, 1.0});
    CHECK(a.noobj.item() == b.noobj.item());
    CHECK(b.total.item() - a.total.item() == doctest::Approx(0.5 * a.noobj.item()).epsilon(1e-12));
}

TEST_CASE("loss gradient matches finite differences") {
    fsdm::Rng rng(310);
    const int image_size = 32;
    const auto anchors = fl::AnchorSet::defaults(image_size);
    std::vector<BoxAnnotation> gts{{14, 18, 10, 8, 1}, {24, 8, 6, 9, 0}};
    const auto match = fl::match_anchors(gts, anchors, image_size);
    std::array<Tensor<double>, 3> raw;
    std::vector<Tensor<double>> params;
    for (int s = 0; s < 3; ++s) {
        const int g = match.grid[static_cast<std::size_t>(s)];
        std::vector<double> v(static_cast<std::size_t>(2 * 18 * g * g));
        for (auto& x : v) x = rng.uniform(-1.5, 1.5);
        raw[static_cast<std::size_t>(s)] = Tensor<double>::from_data({2, 18, g, g}, std::move(v), true);
        params.push_back(raw[static_cast<std::size_t>(s)]);
    }
    auto fn = [&]() { return fl::total_loss(raw, gts, {0, 1}, match, anchors).total; };
    const auto r = oracle::gradcheck(fn, params);
    CHECK(r.checked == 2 * 18 * (1 + 4 + 16));
    CHECK(r.max_rel < 1e-4);
}
