#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "expresscount/autograd.hpp"
#include "expresscount/data.hpp"
#include "expresscount/lang_encoder.hpp"
#include "expresscount/params.hpp"
#include "expresscount/vis_encoder.hpp"

namespace expresscount {

// Perceptron variants: E ignores the image, EV keeps the visual encoder
// frozen, full fine-tunes everything.
enum class Variant { E, EV, full };
std::string to_string(Variant v);
Variant parse_variant(std::string_view text);

struct FusionConfig {
    int width = 64;
    int n_layers = 2;
    int n_heads = 4;
    int ffn_dim = 128;
    int n_exemplars = 1;
    int lang_width = 64;  // D_l, source of the language projection
    bool project_lang = true;

    void validate() const;
    bool uses_lang_projection() const { return project_lang || lang_width != width; }
};

// Parameters live under "fusion.".
void init_fusion(ParamStore& store, const FusionConfig& cfg, Rng& rng);

// Length of [Loc_1..k, F_l, F_i].
inline int fused_length(const FusionConfig& cfg, int n_lang, int n_vis) { return cfg.n_exemplars + n_lang + n_vis; }

struct FuseTrace {
    int sequence_length = 0;
};

// lang: [N_l, D_l] rows, vis: [N_i, width] rows or empty. Returns [k, width].
ad::Var fuse_tokens(ad::Tape& tape, const ParamStore& store, const FusionConfig& cfg, ad::Var lang,
                    std::span<const std::uint8_t> lang_mask, std::optional<ad::Var> vis, FuseTrace* trace = nullptr);
// Sigmoid box head on [k, width] rows; returns clamped [k, 4] (x, y, h, w).
ad::Var regress_bbox_rows(ad::Tape& tape, const ParamStore& store, ad::Var loc);

// F_l [D_l, N_l], F_i [D_i, N_i] (N_i may be 0) -> loc embeddings [width, k].
Tensor fuse(const Tensor& lang_features, std::span<const std::uint8_t> lang_mask, const Tensor& vis_features,
            const FusionConfig& cfg, const ParamStore& store, FuseTrace* trace = nullptr);
// loc embeddings [width, k] -> k boxes.
std::vector<BBox> regress_bbox(const Tensor& loc_embeddings, const ParamStore& store);

std::vector<BBox> boxes_from_tensor(const Tensor& rows);

struct PerceptronConfig {
    LangEncoderConfig lang;
    VisEncoderConfig vis;
    FusionConfig fusion;
};

// Freezes the parameter groups a variant keeps fixed (lang.freeze included).
void apply_freeze(ParamStore& store, const PerceptronConfig& cfg, Variant variant);

// encode_language -> [encode_visual] -> fuse -> regress_bbox, on a tape.
ad::Var perceive_exemplar_var(ad::Tape& tape, const ParamStore& store, const PerceptronConfig& cfg,
                              const Tensor& image, const TokenSequence& tokens, Variant variant,
                              FuseTrace* trace = nullptr);
std::vector<BBox> perceive_exemplar(const Tensor& image, const TokenSequence& tokens, const PerceptronConfig& cfg,
                                    const ParamStore& store, Variant variant);

} // namespace expresscount
