#pragma once

#include <vector>

#include "expresscount/autograd.hpp"
#include "expresscount/params.hpp"

namespace expresscount {

struct VisEncoderConfig {
    int width = 64;  // D_i
    int n_layers = 2;
    int n_heads = 8;
    int ffn_dim = 128;
    int input_size = 64;  // S
    // Stem plus four stride-2 stages: total stride 32.
    std::vector<int> backbone_widths{8, 16, 32, 64, 64};

    void validate() const;
    int grid() const { return input_size / 32; }
    int n_tokens() const { return grid() * grid(); }
};

// Parameters live under "vis.".
void init_vis_encoder(ParamStore& store, const VisEncoderConfig& cfg, Rng& rng);

// f_s: [C, S/32, S/32]
ad::Var backbone_features(ad::Tape& tape, const ParamStore& store, const VisEncoderConfig& cfg, ad::Var image);
// 1x1 projection of f_s to D_i channels, before any attention.
ad::Var visual_feature_map(ad::Tape& tape, const ParamStore& store, const VisEncoderConfig& cfg, ad::Var image);
// Visual tokens as [N_i, D_i] rows.
ad::Var encode_visual_tokens(ad::Tape& tape, const ParamStore& store, const VisEncoderConfig& cfg, ad::Var image);

Tensor backbone_features(const Tensor& image, const VisEncoderConfig& cfg, const ParamStore& store);
// F_i laid out as [D_i, N_i].
Tensor encode_visual(const Tensor& image, const VisEncoderConfig& cfg, const ParamStore& store);

} // namespace expresscount
