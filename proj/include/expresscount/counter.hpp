#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "expresscount/autograd.hpp"
#include "expresscount/data.hpp"
#include "expresscount/params.hpp"

namespace expresscount {

enum class CountHead { count, density, hybrid };
std::string to_string(CountHead head);
CountHead parse_count_head(std::string_view text);

struct CounterConfig {
    int exemplar_size = 64;  // E
    int image_size = 64;     // side of the raw image fed to the image branch
    int feat_width = 32;
    // Stem plus three stride-2 stages: total stride 16.
    std::vector<int> backbone_widths{8, 16, 32, 64};
    int count_hidden = 32;
    double alpha_init = 1.0;
    CountHead head = CountHead::count;

    void validate() const;
    int exemplar_grid() const { return exemplar_size / 16; }
    int image_grid() const { return image_size / 16; }
};

// Parameters live under "counter.".
void init_counter(ParamStore& store, const CounterConfig& cfg, Rng& rng);

// Pixel window a box maps to on an H x W image, at least 2 x 2.
struct PixelWindow {
    int y0, x0, h, w;
};
PixelWindow box_to_window(const BBox& box, int height, int width);

// Hard crop + bilinear resize; the box is a constant (no gradient).
Tensor crop_exemplar(const Tensor& image, const BBox& box, int exemplar_size);

struct DualFeatures {
    ad::Var exemplar;  // F_e [fw, E/16, E/16]
    ad::Var image;     // F_I [fw, H/16, W/16]
};

DualFeatures dual_features(ad::Tape& tape, const ParamStore& store, const CounterConfig& cfg, ad::Var raw_image,
                           ad::Var exemplar);
// F_e [fw, g, g] -> [1, fw]: patch split, shared linear projection, learned
// aggregation across patches.
ad::Var fine_grained_extract(ad::Tape& tape, const ParamStore& store, ad::Var exemplar_features);

struct Recalibrated {
    ad::Var exemplar;  // F_e_hat' [1, fw]
    ad::Var image;     // F_I' [fw, M]
    ad::Var w1;        // [1, fw]
    ad::Var w2;        // [1, fw]
};
// W1 = sigmoid(L1((a1 F_I)(a2 F_I)^T)), W2 = sigmoid(L2(F_e_hat)),
// F_e_hat' = F_e_hat * W1, F_I' = F_I scaled per channel by W2.
Recalibrated cross_attention_recalibrate(ad::Tape& tape, const ParamStore& store, ad::Var exemplar_vec,
                                         ad::Var image_flat);

struct CountPrediction {
    ad::Var count;       // [1], non-negative
    ad::Var similarity;  // [gh, gw]
    std::optional<ad::Var> density;         // [gh, gw], non-negative
    std::optional<ad::Var> density_count;   // [1], sum of density
};

CountPrediction regress_count(ad::Tape& tape, const ParamStore& store, const CounterConfig& cfg, ad::Var exemplar_vec,
                              ad::Var image_flat, int grid_h, int grid_w);

// Full counting branch from the raw image and one or more exemplar crops;
// refined exemplar vectors are averaged across crops.
CountPrediction count_objects(ad::Tape& tape, const ParamStore& store, const CounterConfig& cfg, const Tensor& raw_image,
                              const std::vector<Tensor>& exemplars);

// Gaussian density target (sigma = 1 grid cell, each instance sums to 1) on a
// grid_h x grid_w map; points in pixels of an image_h x image_w image.
Tensor density_target(const std::vector<Point>& points, int image_h, int image_w, int grid_h, int grid_w);

} // namespace expresscount
