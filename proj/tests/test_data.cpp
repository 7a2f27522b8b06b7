#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "expresscount/data.hpp"
#include "expresscount/errors.hpp"
#include "expresscount/rng.hpp"
#include "scene_oracle.hpp"

using namespace expresscount;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("xc_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double iou_oracle(const BBox& a, const BBox& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    return inter / (a.w * a.h + b.w * b.h - inter);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

SyntheticSpec two_class_spec(std::uint64_t seed) {
    SyntheticSpec s;
    s.shape_classes = {{ShapeKind::circle, "red"}, {ShapeKind::square, "blue"}};
    s.min_instances = 2;
    s.max_instances = 9;
    s.seed = seed;
    return s;
}

} // namespace

TEST_CASE("box clamp pulls edge boxes inside the image") {
    BBox b{0.9, 0.2, 0.3, 0.3};
    CHECK(clamp_box(b));
    CHECK(b.w == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(b.h == doctest::Approx(0.3));
    BBox inside{0.1, 0.1, 0.2, 0.2};
    CHECK_FALSE(clamp_box(inside));
    CHECK(is_valid(inside));
}

TEST_CASE("box IoU on hand-computed overlap") {
    // overlap 0.25 x 0.25 = 0.0625, union 0.25 + 0.25 - 0.0625
    CHECK(box_iou({0, 0, 0.5, 0.5}, {0.25, 0.25, 0.5, 0.5}) == doctest::Approx(0.0625 / 0.4375));
    CHECK(box_iou({0, 0, 0.2, 0.2}, {0.5, 0.5, 0.2, 0.2}) == 0.0);
    CHECK(box_iou({0.1, 0.2, 0.3, 0.4}, {0.1, 0.2, 0.3, 0.4}) == doctest::Approx(1.0));
}

TEST_CASE("record JSON round trip and validation") {
    SceneSample s;
    s.sample_id = "a";
    s.image_file = "images/a.png";
    s.annotation = {"a few red circles", PromptKind::fine_grained, "circle"};
    s.exemplar_boxes = {{0.1, 0.2, 0.1, 0.1}};
    s.count = 3;
    s.points = std::vector<Point>{{1, 2}, {3, 4}, {5, 6}};
    const SceneSample back = record_from_json(record_to_json(s));
    CHECK(back.sample_id == s.sample_id);
    CHECK(back.annotation == s.annotation);
    CHECK(back.exemplar_boxes == s.exemplar_boxes);
    CHECK(back.count == 3);
    CHECK(*back.points == *s.points);

    auto j = record_to_json(s);
    j["count"] = -1;
    try {
        record_from_json(j);
        FAIL("negative count accepted");
    } catch (const validation_error& e) {
        CHECK(std::string(e.what()).find("count") != std::string::npos);
        CHECK(std::string(e.what()).find("'a'") != std::string::npos);
    }
    j = record_to_json(s);
    j["points"] = nlohmann::json::array({{1, 2}});
    CHECK_THROWS_AS(record_from_json(j), validation_error);
    j = record_to_json(s);
    j["prompt_kind"] = "null";
    CHECK_THROWS_AS(record_from_json(j), validation_error);  // null prompt with text

    j = record_to_json(s);
    j["exemplar_boxes"] = nlohmann::json::array({{0.9, 0.1, 0.2, 0.3}});
    const SceneSample clamped = record_from_json(j);
    CHECK(clamped.exemplar_boxes[0].w == doctest::Approx(0.1));
}

TEST_CASE("load_dataset errors name the path or sample") {
    const fs::path root = scratch_dir("load_errors");
    try {
        load_dataset(root, Split::train);
        FAIL("missing file accepted");
    } catch (const load_error& e) {
        CHECK(std::string(e.what()).find("train.jsonl") != std::string::npos);
    }
    {
        std::ofstream out(root / "train.jsonl");
        out << R"({"sample_id":"s9","image":"images/none.png","expression":"","prompt_kind":"null","class_name":"","exemplar_boxes":[[0.1,0.1,0.1,0.1]],"count":1})"
            << '\n';
    }
    try {
        load_dataset(root, Split::train);
        FAIL("missing image accepted");
    } catch (const load_error& e) {
        CHECK(std::string(e.what()).find("s9") != std::string::npos);
    }
}

TEST_CASE("save/load round trip preserves every field") {
    const fs::path root = scratch_dir("roundtrip");
    const auto samples = generate_synthetic(two_class_spec(3), 3);
    save_dataset(samples, root, Split::train);
    const auto loaded = load_dataset(root, Split::train);
    REQUIRE(loaded.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(loaded[i].sample_id == samples[i].sample_id);
        CHECK(loaded[i].annotation == samples[i].annotation);
        CHECK(loaded[i].exemplar_boxes == samples[i].exemplar_boxes);
        CHECK(loaded[i].count == samples[i].count);
        CHECK(*loaded[i].points == *samples[i].points);
        CHECK(*loaded[i].scene == *samples[i].scene);
        CHECK(loaded[i].image == samples[i].image);  // 8-bit palette survives PNG exactly
    }
    const fs::path root2 = scratch_dir("roundtrip2");
    save_dataset(loaded, root2, Split::train);
    CHECK(slurp(root / "train.jsonl") == slurp(root2 / "train.jsonl"));
}

TEST_CASE("forced instance range yields exact counts") {
    SyntheticSpec spec;
    spec.shape_classes = {{ShapeKind::circle, "red"}};
    spec.min_instances = spec.max_instances = 5;
    spec.seed = 7;
    const auto s = generate_synthetic(spec, 1);
    REQUIRE(s.size() == 1);
    CHECK(s[0].count == 5);
    CHECK(s[0].points->size() == 5);
}

TEST_CASE("generation is byte-identical across calls") {
    const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
    write_synthetic_corpus(two_class_spec(11), 4, a, Split::train);
    write_synthetic_corpus(two_class_spec(11), 4, b, Split::train);
    CHECK(slurp(a / "train.jsonl") == slurp(b / "train.jsonl"));
    CHECK(slurp(a / "spec.json") == slurp(b / "spec.json"));
    for (int i = 0; i < 4; ++i) {
        const std::string f = "images/syn_11_" + std::to_string(i) + ".png";
        CHECK(slurp(a / f) == slurp(b / f));
    }
}

TEST_CASE("property: pixel oracle agrees with synthetic counts, boxes and points") {
    for (Layout layout : {Layout::scatter, Layout::cluster, Layout::grid}) {
        SyntheticSpec spec;
        spec.shape_classes = {{ShapeKind::circle, "red"}, {ShapeKind::square, "blue"}, {ShapeKind::triangle, "yellow"}};
        spec.min_instances = 1;
        spec.max_instances = 6;
        spec.layout = layout;
        spec.seed = 40 + static_cast<std::uint64_t>(layout);
        for (const auto& s : generate_synthetic(spec, 12)) {
            CAPTURE(s.sample_id);
            const auto& g = *s.scene;
            // every class renders exactly its recorded count of components
            for (const auto& e : g.classes) {
                const auto comps = testing::components(testing::color_mask(s.image, e.cls.color), s.image.height,
                                                       s.image.width);
                CHECK(static_cast<int>(comps.size()) == e.count);
            }
            const auto& target = g.classes[static_cast<std::size_t>(g.target)];
            const auto comps = testing::components(testing::color_mask(s.image, target.cls.color), s.image.height,
                                                   s.image.width);
            CHECK(static_cast<int>(comps.size()) == s.count);
            CHECK(static_cast<int>(s.points->size()) == s.count);
            // each exemplar box tightly bounds one target instance
            for (const auto& b : s.exemplar_boxes) {
                double best = 0.0;
                for (const auto& c : comps)
                    best = std::max(best, iou_oracle(b, testing::component_box(c, s.image.height, s.image.width)));
                CHECK(best >= 0.9);
            }
            // each centroid lies inside a distinct target component
            std::vector<int> hits(comps.size(), 0);
            for (const auto& p : *s.points)
                for (std::size_t k = 0; k < comps.size(); ++k)
                    if (p.row >= comps[k].y0 && p.row <= comps[k].y1 + 1 && p.col >= comps[k].x0 && p.col <= comps[k].x1 + 1)
                        ++hits[k];
            for (int h : hits) CHECK(h == 1);
            CHECK(s.annotation == render_expression(g, spec.prompt_kind));
        }
    }
}

TEST_CASE("two-class counts only the expression's target class") {
    const auto samples = generate_synthetic(two_class_spec(5), 8);
    for (const auto& s : samples) {
        const auto& g = *s.scene;
        const auto& t = g.classes[static_cast<std::size_t>(g.target)];
        const auto& other = g.classes[static_cast<std::size_t>(1 - g.target)];
        const auto n_t = testing::components(testing::color_mask(s.image, t.cls.color), 128, 128).size();
        const auto n_o = testing::components(testing::color_mask(s.image, other.cls.color), 128, 128).size();
        CHECK(static_cast<int>(n_t) == s.count);
        CHECK(static_cast<int>(n_o) == other.count);
        CHECK(s.annotation.text.find(plural(t.cls.shape).substr(0, 4)) != std::string::npos);
    }
}

TEST_CASE("infeasible layouts raise a generation error") {
    SyntheticSpec spec;
    spec.canvas_size = 32;
    spec.min_instances = spec.max_instances = 40;
    spec.min_size = spec.max_size = 10;
    CHECK_THROWS_AS(generate_synthetic(spec, 1), generation_error);
}

TEST_CASE("expression templates") {
    SceneGeometry g;
    g.classes = {{{ShapeKind::circle, "red"}, 7}};
    g.layout = Layout::scatter;
    CHECK(render_expression(g, PromptKind::fine_grained).text == "a bunch of red circles scattered on a plain background");
    CHECK(render_expression(g, PromptKind::null).text.empty());
    CHECK(render_expression(g, PromptKind::question).text == "What is the number of the circle?");
    SceneGeometry sq;
    sq.classes = {{{ShapeKind::square, "blue"}, 1}};
    CHECK(render_expression(sq, PromptKind::class_name).text == "square");
    CHECK(render_expression(sq, PromptKind::fine_grained).text == "a blue square scattered on a plain background");

    CHECK(quantifier_for(1) == "a");
    for (int c = 2; c <= 4; ++c) CHECK(quantifier_for(c) == "a few");
    for (int c = 5; c <= 9; ++c) CHECK(quantifier_for(c) == "a bunch of");
    for (int c : {10, 11, 50}) CHECK(quantifier_for(c) == "a pile of");
}

TEST_CASE("augment identity branch and unit rescale") {
    const auto s = generate_synthetic(two_class_spec(2), 1)[0];
    AugmentConfig off;
    off.reshape_prob = 0.0;
    off.erase_prob = 0.0;
    const SceneSample same = augment(s, 99, off);
    CHECK(same.image == s.image);
    CHECK(same.exemplar_boxes == s.exemplar_boxes);
    CHECK(same.count == s.count);

    const SceneSample unit = apply_reshape(s, ReshapeParams{});
    CHECK(unit.image == s.image);
    CHECK(unit.exemplar_boxes == s.exemplar_boxes);
}

TEST_CASE("downscale-and-pad box transform, recomputed by hand") {
    SceneSample s;
    s.sample_id = "sq";
    s.image = Image(128, 128, 0.5);
    // 16 x 16 white square at rows 32..47, cols 64..79
    for (int y = 32; y < 48; ++y)
        for (int x = 64; x < 80; ++x)
            for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = 1.0;
    s.exemplar_boxes = {{0.5, 0.25, 0.125, 0.125}};
    s.count = 1;
    ReshapeParams p{0.8, 0.8, 10, 13};
    const SceneSample out = apply_reshape(s, p);
    // content 102 x 102 (round 102.4) at offset (10, 13) in a 128 canvas:
    // x' = (13 + 0.5 * 102) / 128 = 0.5, y' = (10 + 0.25 * 102) / 128, w' = 0.125 * 102 / 128
    const BBox& b = out.exemplar_boxes[0];
    CHECK(b.x == doctest::Approx(64.0 / 128.0));
    CHECK(b.y == doctest::Approx(35.5 / 128.0));
    CHECK(b.w == doctest::Approx(12.75 / 128.0));
    CHECK(b.h == doctest::Approx(12.75 / 128.0));
    // the bright pixels sit where the box says (within the resampling blur)
    int y0 = 128, y1 = -1, x0 = 128, x1 = -1;
    for (int y = 0; y < 128; ++y)
        for (int x = 0; x < 128; ++x)
            if (out.image.at(y, x, 0) > 0.75) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    CHECK(std::abs(x0 - b.x * 128) <= 1.0);
    CHECK(std::abs(y0 - b.y * 128) <= 1.0);
    CHECK(std::abs((x1 + 1) - (b.x + b.w) * 128) <= 1.0);
    CHECK(std::abs((y1 + 1) - (b.y + b.h) * 128) <= 1.0);
}

TEST_CASE("property: augmentation keeps counts, valid boxes and protects exemplars") {
    const auto samples = generate_synthetic(two_class_spec(21), 10);
    int erased = 0, reshaped = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            AugmentTrace tr;
            const SceneSample out = augment(samples[i], mix_seed(seed, i), {}, &tr);
            CHECK(out.count == samples[i].count);
            CHECK(out.exemplar_boxes.size() == samples[i].exemplar_boxes.size());
            CHECK(out.image.height == samples[i].image.height);
            for (const auto& b : out.exemplar_boxes) {
                CHECK(is_valid(b));
                CHECK(b.x + b.w <= 1.0 + kBoxEps);
                CHECK(b.y + b.h <= 1.0 + kBoxEps);
            }
            CHECK(out.points->size() == samples[i].points->size());
            if (tr.reshape) {
                ++reshaped;
                CHECK(tr.reshape->scale_x >= 0.8);
                CHECK(tr.reshape->scale_x <= 1.25);
            }
            CHECK(tr.erase_attempts <= 10);
            if (tr.erase) {
                ++erased;
                const auto& r = *tr.erase;
                const double area = static_cast<double>(r.h) * r.w / (128.0 * 128.0);
                CHECK(area >= 0.015);
                CHECK(area <= 0.11);
                for (const auto& b : out.exemplar_boxes) {
                    const double bx0 = b.x * 128, bx1 = (b.x + b.w) * 128, by0 = b.y * 128, by1 = (b.y + b.h) * 128;
                    const double ix = std::max(0.0, std::min<double>(bx1, r.x0 + r.w) - std::max<double>(bx0, r.x0));
                    const double iy = std::max(0.0, std::min<double>(by1, r.y0 + r.h) - std::max<double>(by0, r.y0));
                    CHECK(ix * iy <= 0.5 * (bx1 - bx0) * (by1 - by0) + 1e-9);
                }
            }
        }
    }
    CHECK(reshaped > 0);
    CHECK(erased > 0);
}

TEST_CASE("preprocess sizes and normalisation") {
    const auto s = generate_synthetic(two_class_spec(1), 1)[0];
    const Preprocessed p = preprocess(s, 64);
    CHECK(p.image.shape == std::vector<int>{3, 64, 64});
    CHECK(p.annotation == s.annotation);
    // the background grey (128/255) maps to (128/255 - 0.5) / 0.5
    CHECK(p.image.at(0, 0, 0) == doctest::Approx((128.0 / 255.0 - 0.5) / 0.5).epsilon(1e-9));
    CHECK_THROWS_AS(preprocess(s, 100), config_error);
    CHECK(preprocess(s, 640).image.shape == std::vector<int>{3, 640, 640});
}
