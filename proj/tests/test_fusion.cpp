#include <doctest.h>

#include <cmath>

#include "expresscount/errors.hpp"
#include "expresscount/fusion.hpp"
#include "support.hpp"

using namespace expresscount;

namespace {

FusionConfig small_fusion(int n_exemplars, int lang_width = 12) {
    FusionConfig c;
    c.width = 16;
    c.n_heads = 4;
    c.ffn_dim = 16;
    c.n_layers = 1;
    c.n_exemplars = n_exemplars;
    c.lang_width = lang_width;
    return c;
}

ParamStore fusion_store(const FusionConfig& cfg, std::uint64_t seed) {
    ParamStore s;
    Rng rng(seed);
    init_fusion(s, cfg, rng);
    return s;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = scale * rng.normal();
    return t;
}

std::vector<std::uint8_t> mask_of(int real, int n) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n), 0);
    std::fill(m.begin(), m.begin() + real, 1);
    return m;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

} // namespace

TEST_CASE("fused sequence lengths") {
    Rng rng(1);
    {
        const FusionConfig c = small_fusion(1);
        const ParamStore s = fusion_store(c, 2);
        FuseTrace tr;
        const Tensor loc = fuse(random_tensor({12, 20}, rng), mask_of(6, 20), random_tensor({16, 400}, rng), c, s, &tr);
        CHECK(tr.sequence_length == 421);
        CHECK(loc.shape == std::vector<int>{16, 1});
    }
    {
        const FusionConfig c = small_fusion(3);
        const ParamStore s = fusion_store(c, 3);
        FuseTrace tr;
        const Tensor loc = fuse(random_tensor({12, 20}, rng), mask_of(6, 20), random_tensor({16, 4}, rng), c, s, &tr);
        CHECK(tr.sequence_length == 27);
        CHECK(loc.shape == std::vector<int>{16, 3});
    }
    {
        const FusionConfig c = small_fusion(1);
        const ParamStore s = fusion_store(c, 4);
        FuseTrace tr;
        fuse(random_tensor({12, 20}, rng), mask_of(6, 20), Tensor{}, c, s, &tr);
        CHECK(tr.sequence_length == 21);
    }
}

TEST_CASE("property: fused length equals k + N_l + N_i") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const int k = rng.bernoulli(0.5) ? 1 : 3;
        const int n_l = rng.uniform_int(3, 24);
        const int n_i = rng.uniform_int(0, 3) == 0 ? 0 : rng.uniform_int(1, 30);
        const FusionConfig c = small_fusion(k);
        const ParamStore s = fusion_store(c, static_cast<std::uint64_t>(trial));
        FuseTrace tr;
        const Tensor vis = n_i ? random_tensor({16, n_i}, rng) : Tensor{};
        const Tensor loc = fuse(random_tensor({12, n_l}, rng), mask_of(rng.uniform_int(1, n_l), n_l), vis, c, s, &tr);
        CHECK(tr.sequence_length == fused_length(c, n_l, n_i));
        CHECK(tr.sequence_length == k + n_l + n_i);
        CHECK(regress_bbox(loc, s).size() == static_cast<std::size_t>(k));
    }
}

TEST_CASE("zero-weight fusion layers return the raw [Loc] parameters") {
    const FusionConfig c = small_fusion(3);
    ParamStore s = fusion_store(c, 6);
    for (auto& [name, t] : s.all())
        if (name.rfind("fusion.layers.", 0) == 0 && name.substr(name.size() - 2) == ".w")
            std::fill(t.data.begin(), t.data.end(), 0.0);
    Rng rng(7);
    const Tensor loc = fuse(random_tensor({12, 20}, rng), mask_of(5, 20), random_tensor({16, 4}, rng), c, s);
    const Tensor& raw = s.get("fusion.loc");
    for (int k = 0; k < 3; ++k)
        for (int d = 0; d < 16; ++d) CHECK(loc.at(d, k) == raw.at(k, d));
}

TEST_CASE("box head bias oracles") {
    const FusionConfig c = small_fusion(1);
    ParamStore s = fusion_store(c, 8);
    Rng rng(9);
    const Tensor loc = random_tensor({16, 1}, rng);
    std::fill(s.get("fusion.head.fc3.w").data.begin(), s.get("fusion.head.fc3.w").data.end(), 0.0);
    std::fill(s.get("fusion.head.fc3.b").data.begin(), s.get("fusion.head.fc3.b").data.end(), 0.0);
    const BBox half = regress_bbox(loc, s)[0];
    for (double v : {half.x, half.y, half.h, half.w}) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));

    s.get("fusion.head.fc3.b").data = {logit(0.2), logit(0.3), logit(0.1), logit(0.4)};
    const BBox b = regress_bbox(loc, s)[0];
    CHECK(b.x == doctest::Approx(0.2).epsilon(1e-8));
    CHECK(b.y == doctest::Approx(0.3).epsilon(1e-8));
    CHECK(b.h == doctest::Approx(0.1).epsilon(1e-8));
    CHECK(b.w == doctest::Approx(0.4).epsilon(1e-8));
}

TEST_CASE("property: fuzzed parameters keep boxes inside the unit square") {
    const FusionConfig c = small_fusion(3);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        ParamStore s = fusion_store(c, seed);
        Rng rng(seed + 1000);
        const double scale = rng.uniform(0.1, 4.0);
        for (auto& [name, t] : s.all())
            for (auto& x : t.data) x = scale * rng.normal();
        const Tensor loc = random_tensor({16, 3}, rng, scale);
        for (const auto& b : regress_bbox(loc, s)) {
            for (double v : {b.x, b.y, b.h, b.w}) {
                CHECK(v > 0.0);
                CHECK(v < 1.0);
            }
            CHECK(b.x + b.w <= 1.0);
            CHECK(b.y + b.h <= 1.0);
        }
    }
}

TEST_CASE("non-finite [Loc] input is a numerical error") {
    const FusionConfig c = small_fusion(1);
    const ParamStore s = fusion_store(c, 10);
    Tensor loc({16, 1}, 0.0);
    loc.at(3, 0) = std::nan("");
    CHECK_THROWS_AS(regress_bbox(loc, s), numerical_error);
}

TEST_CASE("property: padding ids never move the predicted box") {
    const FusionConfig c = small_fusion(1);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ParamStore s = fusion_store(c, seed);
        Rng rng(seed + 50);
        const int real = rng.uniform_int(2, 10);
        Tensor lang = random_tensor({12, 20}, rng);
        const Tensor vis = random_tensor({16, 4}, rng);
        const auto mask = mask_of(real, 20);
        const BBox a = regress_bbox(fuse(lang, mask, vis, c, s), s)[0];
        for (int n = real; n < 20; ++n)
            for (int d = 0; d < 12; ++d) lang.at(d, n) = 5.0 * rng.normal();
        const BBox b = regress_bbox(fuse(lang, mask, vis, c, s), s)[0];
        CHECK(std::abs(a.x - b.x) <= 1e-6);
        CHECK(std::abs(a.y - b.y) <= 1e-6);
        CHECK(std::abs(a.h - b.h) <= 1e-6);
        CHECK(std::abs(a.w - b.w) <= 1e-6);
    }
}

TEST_CASE("three [Loc] tokens start apart and give three boxes") {
    const FusionConfig c = small_fusion(3);
    const ParamStore s = fusion_store(c, 11);
    const Tensor& loc = s.get("fusion.loc");
    CHECK(loc.rows() == 3);
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
            double d = 0.0;
            for (int k = 0; k < loc.cols(); ++k) d += std::abs(loc.at(a, k) - loc.at(b, k));
            CHECK(d > 1e-3);
        }
    Rng rng(12);
    const auto boxes = regress_bbox(fuse(random_tensor({12, 20}, rng), mask_of(4, 20), random_tensor({16, 4}, rng), c, s), s);
    REQUIRE(boxes.size() == 3);
    CHECK_FALSE(boxes[0] == boxes[1]);
    CHECK_FALSE(boxes[1] == boxes[2]);
}

TEST_CASE("language projection is required when widths differ") {
    FusionConfig c = small_fusion(1, 16);
    c.project_lang = false;
    CHECK_FALSE(c.uses_lang_projection());
    c.lang_width = 24;
    CHECK(c.uses_lang_projection());
    const ParamStore s = fusion_store(small_fusion(1, 12), 13);
    FusionConfig mismatch = small_fusion(1, 12);
    Rng rng(14);
    CHECK_THROWS_AS(fuse(random_tensor({12, 20}, rng), mask_of(4, 20), random_tensor({8, 4}, rng), mismatch, s),
                    contract_error);
}

TEST_CASE("fusion and box head gradients agree with finite differences") {
    const FusionConfig c = small_fusion(3);
    ParamStore s = fusion_store(c, 15);
    // boxes stay clear of the clamp
    s.get("fusion.head.fc3.b").data = {logit(0.3), logit(0.3), logit(0.15), logit(0.15)};
    for (auto& x : s.get("fusion.head.fc3.w").data) x *= 0.1;
    Rng rng(16);
    const Tensor lang = random_tensor({20, 12}, rng);
    const Tensor vis = random_tensor({4, 16}, rng);
    const Tensor probe = random_tensor({3, 4}, rng);
    const auto mask = mask_of(6, 20);
    const testing::LossFn fn = [&](ad::Tape& tape, const ParamStore& st) {
        ad::Var loc = fuse_tokens(tape, st, c, tape.constant(lang), mask, tape.constant(vis));
        return ad::sum(ad::mul(regress_bbox_rows(tape, st, loc), tape.constant(probe)));
    };
    const auto r = testing::grad_check(s, fn, {"fusion."}, 4, 17);
    CAPTURE(r.worst_name);
    CAPTURE(r.worst_rel);
    CHECK(r.checked >= 60);
    CHECK(r.failed <= r.checked / 100);
}
