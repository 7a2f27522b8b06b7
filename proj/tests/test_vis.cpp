#include <doctest.h>

#include "expresscount/errors.hpp"
#include "expresscount/vis_encoder.hpp"
#include "support.hpp"

using namespace expresscount;

namespace {

ParamStore vis_store(const VisEncoderConfig& cfg, std::uint64_t seed) {
    ParamStore s;
    Rng rng(seed);
    init_vis_encoder(s, cfg, rng);
    return s;
}

VisEncoderConfig narrow(int input_size) {
    VisEncoderConfig c;
    c.input_size = input_size;
    c.width = 16;
    c.n_heads = 4;
    c.ffn_dim = 16;
    c.n_layers = 1;
    c.backbone_widths = {4, 4, 8, 8, 8};
    return c;
}

Tensor random_image(int s, std::uint64_t seed) {
    Tensor t({3, s, s});
    Rng rng(seed);
    for (auto& x : t.data) x = rng.uniform(-1.0, 1.0);
    return t;
}

// Bright square of side 16 with top-left (y, x) on a flat background.
Tensor square_image(int s, int y, int x) {
    Tensor t({3, s, s}, -0.5);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j) t.at(c, y + i, x + j) = 0.9;
    return t;
}

std::pair<int, int> argmax_cell(const Tensor& f, const Tensor& blank) {
    const int g = f.dim(1);
    double best = -1.0;
    std::pair<int, int> at{-1, -1};
    for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x) {
            double e = 0.0;
            for (int c = 0; c < f.dim(0); ++c) e += std::abs(f.at(c, y, x) - blank.at(c, y, x));
            if (e > best) {
                best = e;
                at = {y, x};
            }
        }
    return at;
}

} // namespace

TEST_CASE("desk backbone gives C x S/32 x S/32") {
    VisEncoderConfig c = narrow(64);
    c.backbone_widths = {8, 16, 32, 64, 128};
    c.width = 64;
    c.n_heads = 8;
    const ParamStore s = vis_store(c, 1);
    CHECK(backbone_features(random_image(64, 2), c, s).shape == std::vector<int>{128, 2, 2});
    CHECK(encode_visual(random_image(64, 2), c, s).shape == std::vector<int>{64, 4});
}

TEST_CASE("property: token count follows (S/32)^2") {
    for (int S : {32, 64, 128, 640}) {
        CAPTURE(S);
        const VisEncoderConfig c = narrow(S);
        const ParamStore s = vis_store(c, static_cast<std::uint64_t>(S));
        const Tensor f = encode_visual(random_image(S, 3), c, s);
        CHECK(f.shape == std::vector<int>{16, (S / 32) * (S / 32)});
        CHECK(c.n_tokens() == (S / 32) * (S / 32));
        CHECK(f.all_finite());
    }
}

TEST_CASE("zero image gives finite features") {
    const VisEncoderConfig c = narrow(64);
    const ParamStore s = vis_store(c, 4);
    CHECK(backbone_features(Tensor({3, 64, 64}), c, s).all_finite());
    CHECK(encode_visual(Tensor({3, 64, 64}), c, s).all_finite());
}

TEST_CASE("bad input shapes are contract violations") {
    const VisEncoderConfig c = narrow(64);
    const ParamStore s = vis_store(c, 4);
    CHECK_THROWS_AS(encode_visual(Tensor({3, 64, 32}), c, s), contract_error);
    CHECK_THROWS_AS(encode_visual(Tensor({3, 96, 96}), c, s), contract_error);
    VisEncoderConfig bad = c;
    bad.input_size = 48;
    CHECK_THROWS_AS(bad.validate(), config_error);
}

TEST_CASE("swapping positional encodings of two tokens changes their outputs") {
    const VisEncoderConfig c = narrow(64);
    ParamStore s = vis_store(c, 5);
    const Tensor img = random_image(64, 6);
    const Tensor before = encode_visual(img, c, s);
    Tensor& pos = s.get("vis.pos_embed");
    for (int d = 0; d < pos.cols(); ++d) std::swap(pos.at(0, d), pos.at(3, d));
    const Tensor after = encode_visual(img, c, s);
    double d0 = 0.0, d3 = 0.0;
    for (int d = 0; d < before.rows(); ++d) {
        d0 = std::max(d0, std::abs(before.at(d, 0) - after.at(d, 0)));
        d3 = std::max(d3, std::abs(before.at(d, 3) - after.at(d, 3)));
    }
    CHECK(d0 > 1e-6);
    CHECK(d3 > 1e-6);
}

TEST_CASE("property: a 32-pixel shift moves the peak cell by one before attention") {
    const int S = 256;
    VisEncoderConfig c = narrow(S);
    c.backbone_widths = {8, 16, 32, 64, 64};
    int moved = 0, trials = 0;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const ParamStore s = vis_store(c, 100 + seed);
        const auto fmap = [&](const Tensor& img) {
            ad::Tape tape(false);
            return backbone_features(tape, s, c, tape.constant(img)).value();
        };
        const Tensor blank = fmap(Tensor({3, S, S}, -0.5));
        for (auto [cy, cx] : {std::pair{3, 3}, std::pair{4, 2}, std::pair{2, 4}}) {
            const Tensor a = fmap(square_image(S, cy * 32 - 8, cx * 32 - 8));
            const Tensor b = fmap(square_image(S, cy * 32 - 8, cx * 32 + 24));
            const auto pa = argmax_cell(a, blank);
            const auto pb = argmax_cell(b, blank);
            CAPTURE(seed);
            CAPTURE(pa.first);
            CAPTURE(pa.second);
            CAPTURE(pb.first);
            CAPTURE(pb.second);
            CHECK(pb.first == pa.first);
            CHECK(pb.second == pa.second + 1);
            moved += pb.second - pa.second == 1 && pb.first == pa.first;
            ++trials;
        }
    }
    CHECK(moved == trials);
}

TEST_CASE("visual encoder gradients agree with finite differences") {
    VisEncoderConfig c = narrow(32);
    c.backbone_widths = {3, 4, 4, 4, 6};
    c.width = 8;
    c.n_heads = 2;
    ParamStore s = vis_store(c, 9);
    const Tensor img = random_image(32, 10);
    Rng rng(11);
    Tensor probe({1, c.width});
    for (auto& x : probe.data) x = rng.normal();
    const testing::LossFn fn = [&](ad::Tape& tape, const ParamStore& st) {
        return ad::sum(ad::mul(encode_visual_tokens(tape, st, c, tape.constant(img)), tape.constant(probe)));
    };
    const auto r = testing::grad_check(s, fn, {"vis."}, 3, 12);
    CAPTURE(r.worst_name);
    CAPTURE(r.worst_rel);
    CHECK(r.failed <= r.checked / 100);
}
