#include "expresscount/counter.hpp"

#include <algorithm>
#include <cmath>

#include "expresscount/errors.hpp"
#include "expresscount/image.hpp"
#include "expresscount/layers.hpp"

namespace expresscount {

std::string to_string(CountHead h) {
    switch (h) {
    case CountHead::count: return "count";
    case CountHead::density: return "density";
    case CountHead::hybrid: return "hybrid";
    }
    throw contract_error("unknown count head");
}

CountHead parse_count_head(std::string_view t) {
    if (t == "count") return CountHead::count;
    if (t == "density") return CountHead::density;
    if (t == "hybrid") return CountHead::hybrid;
    throw config_error("unknown count head '" + std::string(t) + "' (expected count, density or hybrid)");
}

void CounterConfig::validate() const {
    if (exemplar_size <= 0 || exemplar_size % 16 != 0) throw config_error("counter: exemplar_size must be a multiple of 16");
    if (image_size <= 0 || image_size % 16 != 0) throw config_error("counter: image_size must be a multiple of 16");
    if (feat_width < 1) throw config_error("counter: feat_width must be >= 1");
    if (backbone_widths.size() != 4) throw config_error("counter: backbone_widths needs 4 entries (stem + 3 stages)");
    if (count_hidden < 1) throw config_error("counter: count_hidden must be >= 1");
}

void init_counter(ParamStore& store, const CounterConfig& cfg, Rng& rng) {
    cfg.validate();
    const int fw = cfg.feat_width;
    const int patches = cfg.exemplar_grid() * cfg.exemplar_grid();
    const int cells = cfg.image_grid() * cfg.image_grid();
    layers::init_backbone(store, "counter.exemplar_backbone", 3, cfg.backbone_widths, rng);
    layers::init_backbone(store, "counter.image_backbone", 3, cfg.backbone_widths, rng);
    layers::init_pointwise(store, "counter.exemplar_reduce", cfg.backbone_widths.back(), fw, rng);
    layers::init_pointwise(store, "counter.image_reduce", cfg.backbone_widths.back(), fw, rng);

    layers::init_linear(store, "counter.fge.proj", fw, fw, rng, 1.0 / std::sqrt(fw));
    Tensor agg = init::truncated_normal({patches}, 0.02, rng);
    for (auto& v : agg.data) v += 1.0 / patches;
    store.add("counter.fge.agg.w", std::move(agg));
    store.add("counter.fge.agg.b", Tensor({1}));

    store.add("counter.ca.alpha1", Tensor({1}, cfg.alpha_init));
    store.add("counter.ca.alpha2", Tensor({1}, cfg.alpha_init));
    store.add("counter.ca.l1.w", init::truncated_normal({fw}, 0.02, rng));
    store.add("counter.ca.l1.b", Tensor({fw}));
    layers::init_linear(store, "counter.ca.l2", fw, fw, rng, 1.0 / std::sqrt(fw));

    layers::init_linear(store, "counter.count.fc1", cells, cfg.count_hidden, rng, 1.0 / std::sqrt(cells));
    layers::init_linear(store, "counter.count.fc2", cfg.count_hidden, 1, rng, 1.0 / std::sqrt(cfg.count_hidden));
    layers::init_pointwise(store, "counter.density", fw + 1, 1, rng);
}

PixelWindow box_to_window(const BBox& box, int height, int width) {
    if (!std::isfinite(box.x) || !std::isfinite(box.y) || !std::isfinite(box.h) || !std::isfinite(box.w))
        throw numerical_error("crop_exemplar received a non-finite box");
    auto axis = [](double start, double extent, int len, int& lo, int& span) {
        int a = static_cast<int>(std::lround(start * len));
        int b = static_cast<int>(std::lround((start + extent) * len));
        a = std::clamp(a, 0, len);
        b = std::clamp(b, 0, len);
        if (b - a < 2) {
            const double centre = (start + extent / 2.0) * len;
            a = std::clamp(static_cast<int>(std::lround(centre - 1.0)), 0, std::max(0, len - 2));
            b = std::min(len, a + 2);
        }
        lo = a;
        span = b - a;
    };
    PixelWindow w{};
    axis(box.y, box.h, height, w.y0, w.h);
    axis(box.x, box.w, width, w.x0, w.w);
    return w;
}

Tensor crop_exemplar(const Tensor& image, const BBox& box, int exemplar_size) {
    XC_EXPECT(image.rank() == 3, "crop_exemplar expects [3,H,W]");
    const PixelWindow w = box_to_window(box, image.dim(1), image.dim(2));
    return crop_resize_bilinear(image, w.y0, w.x0, w.h, w.w, exemplar_size, exemplar_size);
}

DualFeatures dual_features(ad::Tape& tape, const ParamStore& store, const CounterConfig& cfg, ad::Var raw_image,
                           ad::Var exemplar) {
    const Tensor& raw = raw_image.value();
    const Tensor& ex = exemplar.value();
    XC_EXPECT(raw.rank() == 3 && raw.dim(0) == 3 && raw.dim(1) % 16 == 0 && raw.dim(2) % 16 == 0,
              "counter: raw image must be [3,H,W] with H, W multiples of 16, got " + shape_str(raw.shape));
    XC_EXPECT(ex.rank() == 3 && ex.dim(0) == 3 && ex.dim(1) == cfg.exemplar_size && ex.dim(2) == cfg.exemplar_size,
              "counter: exemplar must be [3,E,E] with E=" + std::to_string(cfg.exemplar_size) + ", got " + shape_str(ex.shape));
    const std::size_t stages = cfg.backbone_widths.size();
    ad::Var fe = layers::backbone(tape, store, "counter.exemplar_backbone", exemplar, stages);
    ad::Var fi = layers::backbone(tape, store, "counter.image_backbone", raw_image, stages);
    return {layers::pointwise(tape, store, "counter.exemplar_reduce", fe),
            layers::pointwise(tape, store, "counter.image_reduce", fi)};
}

ad::Var fine_grained_extract(ad::Tape& tape, const ParamStore& store, ad::Var exemplar_features) {
    const Tensor& fe = exemplar_features.value();
    XC_EXPECT(fe.rank() == 3, "fine_grained_extract expects [fw,g,g]");
    const int fw = fe.dim(0);
    const int patches = fe.dim(1) * fe.dim(2);
    XC_EXPECT(static_cast<int>(store.get("counter.fge.agg.w").size()) == patches,
              "fine_grained_extract: aggregation expects " + std::to_string(store.get("counter.fge.agg.w").size()) +
                  " patches, got " + std::to_string(patches));
    // [fw, P] -> patch rows [P, fw]
    ad::Var rows = ad::transpose(ad::reshape(exemplar_features, {fw, patches}));
    ad::Var proj = layers::linear(tape, store, "counter.fge.proj", rows);
    ad::Var agg = ad::reshape(tape.param(store, "counter.fge.agg.w"), {1, patches});
    ad::Var out = ad::matmul(agg, proj);  // [1, fw]
    ad::Var bias = tape.param(store, "counter.fge.agg.b");
    ad::Var ones = tape.constant(Tensor({1, fw}, 1.0));
    return ad::add(out, ad::scale_by(ones, bias));
}

Recalibrated cross_attention_recalibrate(ad::Tape& tape, const ParamStore& store, ad::Var exemplar_vec,
                                         ad::Var image_flat) {
    const Tensor& fi = image_flat.value();
    XC_EXPECT(fi.rank() == 2, "cross attention expects F_I as [fw, M]");
    XC_EXPECT(exemplar_vec.value().rank() == 2 && exemplar_vec.value().rows() == 1 && exemplar_vec.value().cols() == fi.rows(),
              "cross attention: exemplar vector must be [1, fw]");
    ad::Var a1 = ad::scale_by(image_flat, tape.param(store, "counter.ca.alpha1"));
    ad::Var a2 = ad::scale_by(image_flat, tape.param(store, "counter.ca.alpha2"));
    ad::Var gram = ad::matmul_nt(a1, a2);  // [fw, fw]
    // L1 reduces each Gram row to one weight: (G u)^T + b
    ad::Var u = ad::reshape(tape.param(store, "counter.ca.l1.w"), {fi.rows(), 1});
    ad::Var w1_col = ad::matmul(gram, u);  // [fw, 1]
    ad::Var w1 = ad::sigmoid(ad::add_row(ad::transpose(w1_col), tape.param(store, "counter.ca.l1.b")));
    ad::Var w2 = ad::sigmoid(layers::linear(tape, store, "counter.ca.l2", exemplar_vec));
    ad::Var ex = ad::mul(exemplar_vec, w1);
    ad::Var im = ad::mul_col(image_flat, ad::reshape(w2, {fi.rows()}));
    return {ex, im, w1, w2};
}

CountPrediction regress_count(ad::Tape& tape, const ParamStore& store, const CounterConfig& cfg, ad::Var exemplar_vec,
                              ad::Var image_flat, int grid_h, int grid_w) {
    const int fw = image_flat.value().rows();
    const int cells = image_flat.value().cols();
    XC_EXPECT(cells == grid_h * grid_w, "regress_count: grid does not match the flattened map");
    CountPrediction out;
    ad::Var sim = ad::matmul(exemplar_vec, image_flat);  // [1, M]
    out.similarity = ad::reshape(sim, {grid_h, grid_w});
    if (cfg.head == CountHead::count || cfg.head == CountHead::hybrid) {
        XC_EXPECT(store.get("counter.count.fc1.w").rows() == cells,
                  "regress_count: count head was built for a different grid");
        ad::Var h = ad::relu(layers::linear(tape, store, "counter.count.fc1", sim));
        out.count = ad::reshape(ad::softplus(layers::linear(tape, store, "counter.count.fc2", h)), {1});
    }
    if (cfg.head == CountHead::density || cfg.head == CountHead::hybrid) {
        std::vector<ad::Var> parts{image_flat, sim};
        ad::Var stacked = ad::reshape(ad::concat_rows(parts), {fw + 1, grid_h, grid_w});
        ad::Var dens = ad::softplus(layers::pointwise(tape, store, "counter.density", stacked));
        out.density = ad::reshape(dens, {grid_h, grid_w});
        out.density_count = ad::sum(*out.density);
        if (cfg.head == CountHead::density) out.count = *out.density_count;
    }
    return out;
}

CountPrediction count_objects(ad::Tape& tape, const ParamStore& store, const CounterConfig& cfg, const Tensor& raw_image,
                              const std::vector<Tensor>& exemplars) {
    XC_EXPECT(!exemplars.empty(), "count_objects needs at least one exemplar crop");
    ad::Var raw = tape.constant(raw_image);
    std::optional<ad::Var> image_flat;
    std::optional<ad::Var> vec_sum;
    int gh = 0, gw = 0;
    for (const auto& ex : exemplars) {
        DualFeatures f;
        if (!image_flat) {
            f = dual_features(tape, store, cfg, raw, tape.constant(ex));
            gh = f.image.value().dim(1);
            gw = f.image.value().dim(2);
            image_flat = ad::reshape(f.image, {cfg.feat_width, gh * gw});
        } else {
            ad::Var fe = layers::backbone(tape, store, "counter.exemplar_backbone", tape.constant(ex), cfg.backbone_widths.size());
            f.exemplar = layers::pointwise(tape, store, "counter.exemplar_reduce", fe);
        }
        ad::Var v = fine_grained_extract(tape, store, f.exemplar);
        vec_sum = vec_sum ? ad::add(*vec_sum, v) : v;
    }
    ad::Var vec = exemplars.size() == 1 ? *vec_sum : ad::scale(*vec_sum, 1.0 / static_cast<double>(exemplars.size()));
    Recalibrated rc = cross_attention_recalibrate(tape, store, vec, *image_flat);
    return regress_count(tape, store, cfg, rc.exemplar, rc.image, gh, gw);
}

Tensor density_target(const std::vector<Point>& points, int image_h, int image_w, int grid_h, int grid_w) {
    Tensor out({grid_h, grid_w});
    for (const auto& p : points) {
        const double gy = p.row / image_h * grid_h - 0.5;
        const double gx = p.col / image_w * grid_w - 0.5;
        Tensor g({grid_h, grid_w});
        double z = 0.0;
        for (int y = 0; y < grid_h; ++y)
            for (int x = 0; x < grid_w; ++x) {
                const double v = std::exp(-0.5 * ((y - gy) * (y - gy) + (x - gx) * (x - gx)));
                g.at(y, x) = v;
                z += v;
            }
        if (z <= 0) continue;
        for (std::size_t i = 0; i < g.size(); ++i) out.data[i] += g.data[i] / z;
    }
    return out;
}

} // namespace expresscount
