#include "expresscount/fusion.hpp"

#include <cmath>

#include "expresscount/errors.hpp"
#include "expresscount/layers.hpp"

namespace expresscount {

std::string to_string(Variant v) {
    switch (v) {
    case Variant::E: return "E";
    case Variant::EV: return "EV";
    case Variant::full: return "full";
    }
    throw contract_error("unknown variant");
}

Variant parse_variant(std::string_view t) {
    if (t == "E") return Variant::E;
    if (t == "EV") return Variant::EV;
    if (t == "full") return Variant::full;
    throw config_error("unknown variant '" + std::string(t) + "' (expected E, EV or full)");
}

void FusionConfig::validate() const {
    if (width <= 0 || n_heads <= 0 || width % n_heads != 0) throw config_error("fusion: width must be divisible by n_heads");
    if (n_exemplars != 1 && n_exemplars != 3) throw config_error("fusion: n_exemplars must be 1 or 3");
    if (n_layers < 0 || ffn_dim <= 0 || lang_width <= 0) throw config_error("fusion: invalid layer configuration");
}

void init_fusion(ParamStore& store, const FusionConfig& cfg, Rng& rng) {
    cfg.validate();
    // Each [Loc] row draws independently so multi-exemplar heads start apart.
    store.add("fusion.loc", init::truncated_normal({cfg.n_exemplars, cfg.width}, 0.02, rng));
    if (cfg.uses_lang_projection()) layers::init_linear(store, "fusion.lang_proj", cfg.lang_width, cfg.width, rng);
    for (int i = 0; i < cfg.n_layers; ++i)
        layers::init_transformer_layer(store, "fusion.layers." + std::to_string(i), cfg.width, cfg.ffn_dim, rng);
    const double he = std::sqrt(2.0 / cfg.width);
    layers::init_linear(store, "fusion.head.fc1", cfg.width, cfg.width, rng, he);
    layers::init_linear(store, "fusion.head.fc2", cfg.width, cfg.width, rng, he);
    layers::init_linear(store, "fusion.head.fc3", cfg.width, 4, rng);
}

ad::Var fuse_tokens(ad::Tape& tape, const ParamStore& store, const FusionConfig& cfg, ad::Var lang,
                    std::span<const std::uint8_t> lang_mask, std::optional<ad::Var> vis, FuseTrace* trace) {
    XC_EXPECT(lang.value().rank() == 2 && static_cast<std::size_t>(lang.value().rows()) == lang_mask.size(),
              "fusion: language tokens and mask disagree");
    ad::Var loc = tape.param(store, "fusion.loc");
    XC_EXPECT(loc.value().rows() == cfg.n_exemplars, "fusion: [Loc] table does not match n_exemplars");
    ad::Var lang_w = cfg.uses_lang_projection() ? layers::linear(tape, store, "fusion.lang_proj", lang) : lang;
    XC_EXPECT(lang_w.value().cols() == cfg.width, "fusion: language width " + std::to_string(lang_w.value().cols()) +
                                                      " does not match fusion width " + std::to_string(cfg.width));
    std::vector<ad::Var> parts{loc, lang_w};
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(cfg.n_exemplars), 1);
    mask.insert(mask.end(), lang_mask.begin(), lang_mask.end());
    if (vis && vis->value().size() > 0) {
        XC_EXPECT(vis->value().cols() == cfg.width, "fusion: visual width " + std::to_string(vis->value().cols()) +
                                                        " does not match fusion width " + std::to_string(cfg.width));
        parts.push_back(*vis);
        mask.insert(mask.end(), static_cast<std::size_t>(vis->value().rows()), 1);
    }
    ad::Var x = ad::concat_rows(parts);
    if (trace) trace->sequence_length = x.value().rows();
    for (int i = 0; i < cfg.n_layers; ++i)
        x = layers::transformer_layer(tape, store, "fusion.layers." + std::to_string(i), x, cfg.n_heads, mask);
    return ad::slice_rows(x, 0, cfg.n_exemplars);
}

ad::Var regress_bbox_rows(ad::Tape& tape, const ParamStore& store, ad::Var loc) {
    if (!loc.value().all_finite()) throw numerical_error("box regression received non-finite [Loc] embeddings");
    ad::Var h = ad::relu(layers::linear(tape, store, "fusion.head.fc1", loc));
    h = ad::relu(layers::linear(tape, store, "fusion.head.fc2", h));
    // Saturated logits stay strictly inside (0, 1).
    constexpr double margin = 1e-9;
    ad::Var raw = ad::add_scalar(ad::scale(ad::sigmoid(layers::linear(tape, store, "fusion.head.fc3", h)), 1.0 - 2 * margin), margin);
    return ad::clamp_boxes(raw);
}

std::vector<BBox> boxes_from_tensor(const Tensor& rows) {
    XC_EXPECT(rows.rank() == 2 && rows.cols() == 4, "expected [k,4] box rows");
    std::vector<BBox> out;
    for (int r = 0; r < rows.rows(); ++r) out.push_back({rows.at(r, 0), rows.at(r, 1), rows.at(r, 2), rows.at(r, 3)});
    return out;
}

Tensor fuse(const Tensor& lang_features, std::span<const std::uint8_t> lang_mask, const Tensor& vis_features,
            const FusionConfig& cfg, const ParamStore& store, FuseTrace* trace) {
    ad::Tape tape(false);
    ad::Var lang = tape.constant(lang_features.transposed());
    std::optional<ad::Var> vis;
    if (vis_features.size() > 0) vis = tape.constant(vis_features.transposed());
    return fuse_tokens(tape, store, cfg, lang, lang_mask, vis, trace).value().transposed();
}

std::vector<BBox> regress_bbox(const Tensor& loc_embeddings, const ParamStore& store) {
    ad::Tape tape(false);
    return boxes_from_tensor(regress_bbox_rows(tape, store, tape.constant(loc_embeddings.transposed())).value());
}

void apply_freeze(ParamStore& store, const PerceptronConfig& cfg, Variant variant) {
    if (cfg.lang.freeze) store.freeze_prefix("lang.");
    if (variant == Variant::EV) store.freeze_prefix("vis.");
}

ad::Var perceive_exemplar_var(ad::Tape& tape, const ParamStore& store, const PerceptronConfig& cfg,
                              const Tensor& image, const TokenSequence& tokens, Variant variant, FuseTrace* trace) {
    XC_EXPECT(tokens.length() == cfg.lang.max_len, "token sequence length differs from configured N_l");
    ad::Var lang = encode_language_tokens(tape, store, cfg.lang, tokens);
    std::optional<ad::Var> vis;
    if (variant != Variant::E) vis = encode_visual_tokens(tape, store, cfg.vis, tape.constant(image));
    ad::Var loc = fuse_tokens(tape, store, cfg.fusion, lang, tokens.mask, vis, trace);
    return regress_bbox_rows(tape, store, loc);
}

std::vector<BBox> perceive_exemplar(const Tensor& image, const TokenSequence& tokens, const PerceptronConfig& cfg,
                                    const ParamStore& store, Variant variant) {
    ad::Tape tape(false);
    return boxes_from_tensor(perceive_exemplar_var(tape, store, cfg, image, tokens, variant).value());
}

} // namespace expresscount
