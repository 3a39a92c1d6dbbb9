#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "fsdm/dataset.hpp"
#include "fsdm/image.hpp"
#include "fsdm/manifest.hpp"
#include "fsdm/png_io.hpp"
#include "fsdm/shapeworld.hpp"

namespace fs = std::filesystem;
using namespace fsdm;
using namespace fsdm::data;

namespace {

std::string fresh_dir(const std::string& name) {
    fs::path p = fs::path("tmp_test_dataset") / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::vector<char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

BoxAnnotation ann(double cx, double cy, double w, double h, int cat) {
    BoxAnnotation b;
    b.cx = cx;
    b.cy = cy;
    b.w = w;
    b.h = h;
    b.category_id = cat;
    return b;
}

GenConfig tiny_config(std::uint64_t seed) {
    GenConfig cfg;
    cfg.num_images = 12;
    cfg.image_size = 64;
    cfg.min_side = 10;
    cfg.max_side = 28;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("png roundtrip preserves bytes and is deterministic") {
    const std::string dir = fresh_dir("png");
    Rng rng(7);
    const int w = 37, h = 23;
    std::vector<unsigned char> rgb(static_cast<size_t>(w) * h * 3);
    for (auto& b : rgb) b = static_cast<unsigned char>(rng.uniform_int(0, 255));

    write_rgb8(dir + "/a.png", w, h, rgb);
    write_rgb8(dir + "/b.png", w, h, rgb);
    CHECK(file_bytes(dir + "/a.png") == file_bytes(dir + "/b.png"));

    int rw = 0, rh = 0;
    std::vector<unsigned char> back = read_rgb8(dir + "/a.png", rw, rh);
    CHECK(rw == w);
    CHECK(rh == h);
    CHECK(back == rgb);

    CHECK_THROWS_AS(write_rgb8(dir + "/bad.png", w, h, std::vector<unsigned char>(10)),
                    DimensionError);
    CHECK_THROWS_AS(read_rgb8(dir + "/missing.png", rw, rh), IoError);
}

TEST_CASE("tensor conversion roundtrips 8-bit data") {
    Rng rng(3);
    const int w = 9, h = 5;
    std::vector<unsigned char> rgb(static_cast<size_t>(w) * h * 3);
    for (auto& b : rgb) b = static_cast<unsigned char>(rng.uniform_int(0, 255));
    Tensor<float> t = tensor_from_rgb8(rgb, w, h);
    REQUIRE(t.shape() == std::vector<int>{3, h, w});
    CHECK(rgb8_from_tensor(t) == rgb);
    // channel plane layout: red value of pixel (x=2,y=1)
    CHECK(t.data()[(0 * h + 1) * w + 2] ==
          doctest::Approx(rgb[(1 * w + 2) * 3 + 0] / 255.0f));
}

TEST_CASE("bilinear resize keeps constants and interpolates a known grid") {
    Tensor<float> flat = Tensor<float>::filled({2, 4, 4}, 0.37f);
    Tensor<float> up = resize_bilinear(flat, 8, 8);
    for (int i = 0; i < up.numel(); ++i) CHECK(up.data()[i] == doctest::Approx(0.37f));

    // 1x2 row [0, 1] doubled to 1x4: centers sample at src x = -0.25,0.25,0.75,1.25.
    Tensor<float> row = Tensor<float>::from_data({1, 1, 2}, {0.0f, 1.0f});
    Tensor<float> wide = resize_bilinear(row, 1, 4);
    CHECK(wide.data()[0] == doctest::Approx(0.0f));
    CHECK(wide.data()[1] == doctest::Approx(0.25f));
    CHECK(wide.data()[2] == doctest::Approx(0.75f));
    CHECK(wide.data()[3] == doctest::Approx(1.0f));

    CHECK(resize_bilinear(flat, 4, 4).values() == flat.values());
    CHECK_THROWS_AS(resize_bilinear(flat, 0, 4), UsageError);
}

TEST_CASE("resize_sample scales boxes with the image") {
    ImageSample s;
    s.id = "x";
    s.image = Tensor<float>::filled({3, 64, 32}, 0.5f);
    s.boxes = {ann(16, 32, 10, 20, 0)};
    ImageSample r = resize_sample(s, 32, 32);
    CHECK(r.image.shape() == std::vector<int>{3, 32, 32});
    CHECK(r.boxes[0].cx == doctest::Approx(16.0));
    CHECK(r.boxes[0].w == doctest::Approx(10.0));
    CHECK(r.boxes[0].cy == doctest::Approx(16.0));
    CHECK(r.boxes[0].h == doctest::Approx(10.0));
}

TEST_CASE("render_image is deterministic and varies across indices") {
    GenConfig cfg = tiny_config(11);
    RenderedImage a = render_image(cfg, 0);
    RenderedImage b = render_image(cfg, 0);
    CHECK(a.rgb == b.rgb);
    REQUIRE(a.boxes.size() == b.boxes.size());
    for (size_t i = 0; i < a.boxes.size(); ++i) {
        CHECK(a.boxes[i].cx == b.boxes[i].cx);
        CHECK(a.boxes[i].category_id == b.boxes[i].category_id);
    }
    RenderedImage c = render_image(cfg, 1);
    CHECK(a.rgb != c.rgb);
}

TEST_CASE("rendered annotations are tight in-bounds boxes with low overlap") {
    GenConfig cfg = tiny_config(5);
    cfg.noise_level = 0.0;  // keeps background exactly flat for the pixel checks
    cfg.num_images = 30;
    int total = 0;
    for (int i = 0; i < cfg.num_images; ++i) {
        RenderedImage img = render_image(cfg, i);
        total += static_cast<int>(img.boxes.size());
        CHECK(static_cast<int>(img.boxes.size()) + img.skipped >= cfg.min_objects);
        CHECK(static_cast<int>(img.boxes.size()) <= cfg.max_objects);
        auto shape_pixel = [&](int x, int y) {
            const unsigned char* p = &img.rgb[(static_cast<size_t>(y) * cfg.image_size + x) * 3];
            return std::min({p[0], p[1], p[2]}) >= 110;
        };
        for (size_t j = 0; j < img.boxes.size(); ++j) {
            const Box box = img.boxes[j].box();
            CHECK(box.x1() >= 0);
            CHECK(box.y1() >= 0);
            CHECK(box.x2() <= cfg.image_size);
            CHECK(box.y2() <= cfg.image_size);
            CHECK(img.boxes[j].w >= 3);
            CHECK(img.boxes[j].h >= 3);
            CHECK(img.boxes[j].category_id >= 0);
            CHECK(img.boxes[j].category_id < static_cast<int>(cfg.categories.size()));
            for (size_t k = j + 1; k < img.boxes.size(); ++k) {
                CHECK(iou(box, img.boxes[k].box()) <= 0.15);
            }
            // Tightness: every edge line of the bbox touches shape-colored pixels.
            const int x1 = static_cast<int>(box.x1()), x2 = static_cast<int>(box.x2()) - 1;
            const int y1 = static_cast<int>(box.y1()), y2 = static_cast<int>(box.y2()) - 1;
            bool left = false, right = false, top = false, bottom = false;
            for (int y = y1; y <= y2; ++y) {
                left = left || shape_pixel(x1, y);
                right = right || shape_pixel(x2, y);
            }
            for (int x = x1; x <= x2; ++x) {
                top = top || shape_pixel(x, y1);
                bottom = bottom || shape_pixel(x, y2);
            }
            CHECK(left);
            CHECK(right);
            CHECK(top);
            CHECK(bottom);
        }
    }
    CHECK(total > 0);
}

TEST_CASE("generate_shapeworld writes a reloadable manifest and is reproducible") {
    GenConfig cfg = tiny_config(21);
    const std::string dir_a = fresh_dir("gen_a");
    const std::string dir_b = fresh_dir("gen_b");
    DatasetManifest m = generate_shapeworld(cfg, dir_a);
    generate_shapeworld(cfg, dir_b);

    CHECK(file_bytes(dir_a + "/manifest.jsonl") == file_bytes(dir_b + "/manifest.jsonl"));
    for (int i : {0, 5, 11}) {
        CHECK(file_bytes(m.image_path(i)) ==
              file_bytes(dir_b + "/images/" + m.images[i].id + ".png"));
    }

    DatasetManifest loaded = load_manifest(dir_a + "/manifest.jsonl");
    CHECK(loaded.seed == cfg.seed);
    CHECK(loaded.version == 1);
    REQUIRE(loaded.categories.size() == cfg.categories.size());
    CHECK(loaded.categories[3].name == cfg.categories[3]);
    REQUIRE(loaded.images.size() == m.images.size());
    int loaded_boxes = 0, direct_boxes = 0;
    for (size_t i = 0; i < loaded.images.size(); ++i) {
        CHECK(loaded.images[i].id == m.images[i].id);
        REQUIRE(loaded.images[i].boxes.size() == m.images[i].boxes.size());
        for (size_t b = 0; b < loaded.images[i].boxes.size(); ++b) {
            CHECK(loaded.images[i].boxes[b].cx == m.images[i].boxes[b].cx);
            CHECK(loaded.images[i].boxes[b].h == m.images[i].boxes[b].h);
            CHECK(loaded.images[i].boxes[b].category_id == m.images[i].boxes[b].category_id);
        }
        loaded_boxes += static_cast<int>(loaded.images[i].boxes.size());
        // independent re-run of the sampling sequence, bypassing all files
        direct_boxes += static_cast<int>(render_image(cfg, static_cast<int>(i)).boxes.size());
    }
    CHECK(loaded_boxes == direct_boxes);

    GenConfig echoed = gen_config_from_json(loaded.config);
    CHECK(echoed.image_size == cfg.image_size);
    CHECK(echoed.categories == cfg.categories);

    GenConfig bad = cfg;
    bad.image_size = 100;
    CHECK_THROWS_AS(validate(bad), UsageError);
    bad = cfg;
    bad.categories = {"circle", "circle"};
    CHECK_THROWS_AS(validate(bad), UsageError);
    bad = cfg;
    bad.categories = {"blob"};
    CHECK_THROWS_AS(validate(bad), UsageError);
    CHECK_THROWS_AS(gen_config_from_json({{"imagesize", 128}}), UsageError);
}

TEST_CASE("support mask equals a pixel-scan oracle and flags missing categories") {
    std::vector<BoxAnnotation> boxes = {ann(8.5, 6, 5, 8, 2), ann(20, 21, 8, 6, 2),
                                        ann(11, 11, 6, 6, 1)};
    const int hgt = 32, wdt = 32;
    Tensor<float> mask = make_support_mask(hgt, wdt, boxes, 2);
    REQUIRE(mask.shape() == std::vector<int>{1, hgt, wdt});

    int popcount = 0;
    for (int y = 0; y < hgt; ++y) {
        for (int x = 0; x < wdt; ++x) {
            bool inside = false;
            for (const auto& b : boxes) {
                if (b.category_id != 2) continue;
                if (x + 0.5 >= b.cx - b.w / 2 && x + 0.5 < b.cx + b.w / 2 &&
                    y + 0.5 >= b.cy - b.h / 2 && y + 0.5 < b.cy + b.h / 2) {
                    inside = true;
                }
            }
            const float v = mask.data()[y * wdt + x];
            CHECK((v == 0.0f || v == 1.0f));
            CHECK(v == (inside ? 1.0f : 0.0f));
            popcount += v == 1.0f;
        }
    }
    CHECK(popcount == 5 * 8 + 8 * 6);

    Tensor<float> empty = make_support_mask(hgt, wdt, boxes, 9);
    for (int i = 0; i < empty.numel(); ++i) CHECK(empty.data()[i] == 0.0f);
}

TEST_CASE("crop_patches clips boxes against a rasterized-area oracle") {
    Rng rng(17);
    ImageSample s;
    s.id = "img";
    const int sz = 40;
    std::vector<float> v(3 * sz * sz);
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    s.image = Tensor<float>::from_data({3, sz, sz}, v);
    for (int b = 0; b < 12; ++b) {
        // integer-edged boxes, as the generator produces
        int x1 = static_cast<int>(rng.uniform_int(0, sz - 5));
        int y1 = static_cast<int>(rng.uniform_int(0, sz - 5));
        int w = static_cast<int>(rng.uniform_int(3, std::min(14, sz - x1)));
        int h = static_cast<int>(rng.uniform_int(3, std::min(14, sz - y1)));
        s.boxes.push_back(ann(x1 + w / 2.0, y1 + h / 2.0, w, h, b % 3));
    }

    const int patch = 24, stride = 8;
    const double min_overlap = 0.7;
    auto patches = crop_patches(s, patch, stride, min_overlap);
    REQUIRE(patches.size() == 9);  // offsets {0,8,16} in each axis

    size_t pi = 0;
    for (int y0 = 0; y0 + patch <= sz; y0 += stride) {
        for (int x0 = 0; x0 + patch <= sz; x0 += stride) {
            const ImageSample& p = patches[pi++];
            CHECK(p.id == "img_" + std::to_string(x0) + "_" + std::to_string(y0));
            // pixel-exact crop
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < patch; y += 5) {
                    for (int x = 0; x < patch; x += 5) {
                        CHECK(p.image.data()[(c * patch + y) * patch + x] ==
                              s.image.data()[(c * sz + y0 + y) * sz + x0 + x]);
                    }
                }
            }
            // oracle: count covered pixels inside/outside the window
            std::vector<int> expected_kept;
            for (size_t b = 0; b < s.boxes.size(); ++b) {
                const Box box = s.boxes[b].box();
                int inside = 0, area = 0;
                for (int y = static_cast<int>(box.y1()); y < box.y2(); ++y) {
                    for (int x = static_cast<int>(box.x1()); x < box.x2(); ++x) {
                        ++area;
                        if (x >= x0 && x < x0 + patch && y >= y0 && y < y0 + patch) ++inside;
                    }
                }
                if (inside >= min_overlap * area) expected_kept.push_back(static_cast<int>(b));
            }
            REQUIRE(p.boxes.size() == expected_kept.size());
            for (size_t k = 0; k < expected_kept.size(); ++k) {
                const BoxAnnotation& orig = s.boxes[expected_kept[k]];
                const BoxAnnotation& got = p.boxes[k];
                CHECK(got.category_id == orig.category_id);
                CHECK(got.w <= orig.w);
                CHECK(got.h <= orig.h);
                CHECK(got.cx - got.w / 2 >= -1e-9);
                CHECK(got.cx + got.w / 2 <= patch + 1e-9);
            }
        }
    }

    CHECK_THROWS_AS(crop_patches(s, 64, 8), UsageError);
    CHECK_THROWS_AS(crop_patches(s, 24, 0), UsageError);
    CHECK_THROWS_AS(crop_patches(s, 24, 8, 0.0), UsageError);
}

namespace {

// 20 images, categories 0/1 base and 2/3 novel, with hand-placed instances.
DatasetManifest synthetic_manifest() {
    DatasetManifest m;
    m.seed = 99;
    m.config = nlohmann::json::object();
    for (int i = 0; i < 4; ++i) m.categories.push_back({i, "c" + std::to_string(i)});
    auto img = [&](std::vector<BoxAnnotation> boxes) {
        ImageRecord rec;
        rec.id = "img_" + std::to_string(m.images.size());
        rec.path = rec.id + ".png";
        rec.width = 64;
        rec.height = 64;
        rec.boxes = std::move(boxes);
        m.images.push_back(std::move(rec));
    };
    for (int i = 0; i < 12; ++i) {
        std::vector<BoxAnnotation> bs = {ann(10, 10, 8, 8, i % 2)};
        if (i % 3 == 0) bs.push_back(ann(30, 30, 8, 8, (i + 1) % 2));
        img(std::move(bs));
    }
    img({ann(10, 10, 8, 8, 2), ann(30, 30, 8, 8, 2), ann(50, 50, 8, 8, 3),
         ann(20, 50, 8, 8, 0)});                                    // 12
    img({ann(10, 10, 8, 8, 2), ann(30, 30, 8, 8, 2)});              // 13
    img({ann(10, 10, 8, 8, 2)});                                    // 14
    img({ann(10, 10, 8, 8, 2), ann(30, 30, 8, 8, 2), ann(50, 50, 8, 8, 2)});  // 15
    img({ann(10, 10, 8, 8, 3)});                                    // 16
    img({ann(10, 10, 8, 8, 3), ann(30, 30, 8, 8, 1)});              // 17
    img({ann(10, 10, 8, 8, 3), ann(30, 30, 8, 8, 3)});              // 18
    img({ann(10, 10, 8, 8, 3)});                                    // 19
    return m;
}

}  // namespace

TEST_CASE("split_base_novel fills exact k-shot pools and carves held-out sets") {
    DatasetManifest m = synthetic_manifest();
    SplitSpec spec;
    spec.base_categories = {0, 1};
    spec.novel_categories = {2, 3};
    spec.k_shot = 3;
    Pools pools = split_base_novel(m, spec);

    std::set<int> base_all(pools.base_train.begin(), pools.base_train.end());
    base_all.insert(pools.base_eval.begin(), pools.base_eval.end());
    CHECK(base_all == std::set<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    CHECK(pools.base_eval.size() == 2);  // 12/5
    CHECK(pools.base_train.size() == 10);

    // exactly k instances per novel category, filled in image order
    for (int c : {2, 3}) {
        int total = 0;
        int last_image = -1;
        for (const auto& ref : pools.novel_support.at(c)) {
            CHECK(ref.image_index > last_image);
            last_image = ref.image_index;
            for (int b : ref.box_indices) {
                CHECK(m.images[ref.image_index].boxes[b].category_id == c);
                ++total;
            }
        }
        CHECK(total == 3);
    }
    CHECK(pools.novel_support.at(2)[0].image_index == 12);
    CHECK(pools.novel_support.at(2)[0].box_indices == std::vector<int>{0, 1});
    CHECK(pools.novel_support.at(2)[1].image_index == 13);
    CHECK(pools.novel_support.at(2)[1].box_indices == std::vector<int>{0});
    CHECK(pools.novel_support.at(3)[0].image_index == 12);
    CHECK(pools.novel_support.at(3)[0].box_indices == std::vector<int>{2});

    // eval pool excludes every support-touched image
    std::set<int> touched;
    for (const auto& [c, refs] : pools.novel_support) {
        for (const auto& r : refs) touched.insert(r.image_index);
    }
    CHECK(touched == std::set<int>{12, 13, 16, 17});
    CHECK(pools.novel_eval == std::vector<int>{14, 15, 18, 19});

    for (int c : {0, 1}) {
        int total = 0;
        for (const auto& ref : pools.base_support.at(c)) {
            total += static_cast<int>(ref.box_indices.size());
        }
        CHECK(total == 3);
        for (int idx : pools.base_train_by_cat.at(c)) {
            CHECK(std::binary_search(pools.base_train.begin(), pools.base_train.end(), idx));
        }
    }

    auto items = finetune_tuning_set(m, pools);
    std::map<int, std::vector<int>> by_image;
    for (const auto& it : items) {
        CHECK(!by_image.count(it.image_index));  // one item per image
        by_image[it.image_index] = it.box_indices;
    }
    // image 12 serves both novel categories plus its base box, merged once
    REQUIRE(by_image.count(12));
    CHECK(by_image[12] == std::vector<int>{0, 1, 2, 3});
    // image 13: only the first of its two novel instances was selected
    REQUIRE(by_image.count(13));
    CHECK(by_image[13] == std::vector<int>{0});
    // image 17: selected novel box plus its base box
    REQUIRE(by_image.count(17));
    CHECK(by_image[17] == std::vector<int>{0, 1});
    CHECK(!by_image.count(14));  // never selected as support

    SUBCASE("capacity and usage errors") {
        SplitSpec bad = spec;
        bad.k_shot = 9;  // category c2 has 8 instances
        try {
            split_base_novel(m, bad);
            FAIL("expected CapacityError");
        } catch (const CapacityError& e) {
            CHECK(std::string(e.what()).find("c2") != std::string::npos);
        }
        bad = spec;
        bad.k_shot = 0;
        CHECK_THROWS_AS(split_base_novel(m, bad), CapacityError);
        bad = spec;
        bad.novel_categories = {1, 2, 3};
        CHECK_THROWS_AS(split_base_novel(m, bad), UsageError);
        bad = spec;
        bad.novel_categories = {3};
        CHECK_THROWS_AS(split_base_novel(m, bad), UsageError);
    }
}

TEST_CASE("episodes assemble deterministic sorted supports from real files") {
    GenConfig cfg;
    cfg.num_images = 40;
    cfg.image_size = 64;
    cfg.min_side = 10;
    cfg.max_side = 24;
    cfg.seed = 31;
    cfg.categories = {"circle", "square", "triangle", "cross", "ring", "star"};
    const std::string dir = fresh_dir("episodes");
    DatasetManifest m = generate_shapeworld(cfg, dir);

    SplitSpec spec;
    spec.base_categories = {0, 1, 2, 3};
    spec.novel_categories = {4, 5};
    spec.k_shot = 2;
    Pools pools = split_base_novel(m, spec);
    ImageStore store(m);

    REQUIRE(!pools.base_train.empty());
    const int rw = 64;
    Rng rng_a(5), rng_b(5);
    Episode a = build_base_episode(store, pools, spec.base_categories, pools.base_train[0], rw,
                                   rng_a);
    Episode b = build_base_episode(store, pools, spec.base_categories, pools.base_train[0], rw,
                                   rng_b);

    REQUIRE(a.supports.size() == 4);
    for (size_t i = 0; i < a.supports.size(); ++i) {
        CHECK(a.supports[i].category_id == static_cast<int>(i));
        CHECK(a.supports[i].image.shape() == std::vector<int>{3, rw, rw});
        CHECK(a.supports[i].mask.shape() == std::vector<int>{1, rw, rw});
        int pop = 0;
        for (int p = 0; p < a.supports[i].mask.numel(); ++p) {
            const float v = a.supports[i].mask.data()[p];
            CHECK((v == 0.0f || v == 1.0f));
            pop += v == 1.0f;
        }
        CHECK(pop > 0);
        CHECK(a.supports[i].image.values() == b.supports[i].image.values());
        CHECK(a.supports[i].mask.values() == b.supports[i].mask.values());
    }
    for (const auto& box : a.query.boxes) {
        CHECK(box.category_id <= 3);
    }
    CHECK(a.query.image.values() == store.image(pools.base_train[0]).values());

    SUBCASE("support resize scales masks to the reweighting input") {
        const auto& refs = pools.novel_support.at(4);
        REQUIRE(!refs.empty());
        SupportSample s = make_support(store, refs[0], 4, 32);
        CHECK(s.image.shape() == std::vector<int>{3, 32, 32});
        CHECK(s.mask.shape() == std::vector<int>{1, 32, 32});
        // oracle: rescale the selected boxes by 0.5 and scan pixel centers
        const ImageRecord& rec = m.images[refs[0].image_index];
        int expected = 0;
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) {
                bool inside = false;
                for (int bi : refs[0].box_indices) {
                    const BoxAnnotation& bb = rec.boxes[bi];
                    const double cx = bb.cx / 2, cy = bb.cy / 2, w = bb.w / 2, h = bb.h / 2;
                    if (x + 0.5 >= cx - w / 2 && x + 0.5 < cx + w / 2 && y + 0.5 >= cy - h / 2 &&
                        y + 0.5 < cy + h / 2) {
                        inside = true;
                    }
                }
                expected += inside;
                CHECK(s.mask.data()[y * 32 + x] == (inside ? 1.0f : 0.0f));
            }
        }
        CHECK(expected > 0);
    }

    SUBCASE("finetune episodes use only the selected boxes as supervision") {
        auto items = finetune_tuning_set(m, pools);
        REQUIRE(!items.empty());
        std::vector<int> active = {0, 1, 2, 3, 4, 5};
        Rng rng(9);
        Episode ep = build_finetune_episode(store, pools, active, items[0], rw, rng);
        CHECK(ep.supports.size() == 6);
        for (size_t i = 0; i + 1 < ep.supports.size(); ++i) {
            CHECK(ep.supports[i].category_id < ep.supports[i + 1].category_id);
        }
        CHECK(ep.query.boxes.size() == items[0].box_indices.size());
    }

    SUBCASE("image store caches and validates sizes") {
        ImageSample s0 = store.sample(0);
        CHECK(s0.id == "img_00000");
        CHECK(s0.image.shape() == std::vector<int>{3, 64, 64});
        CHECK(s0.boxes.size() == m.images[0].boxes.size());
        Tensor<float> again = store.image(0);
        CHECK(again.values() == s0.image.values());
    }
}
