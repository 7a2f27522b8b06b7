#include "expresscount/vis_encoder.hpp"

#include "expresscount/errors.hpp"
#include "expresscount/layers.hpp"

namespace expresscount {

void VisEncoderConfig::validate() const {
    if (input_size <= 0 || input_size % 32 != 0) throw config_error("vis: input_size must be a positive multiple of 32");
    if (width <= 0 || n_heads <= 0 || width % n_heads != 0) throw config_error("vis: width must be divisible by n_heads");
    if (backbone_widths.size() != 5) throw config_error("vis: backbone_widths needs 5 entries (stem + 4 stages)");
    for (int w : backbone_widths)
        if (w <= 0) throw config_error("vis: backbone widths must be positive");
    if (n_layers < 0 || ffn_dim <= 0) throw config_error("vis: invalid layer configuration");
}

void init_vis_encoder(ParamStore& store, const VisEncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    layers::init_backbone(store, "vis.backbone", 3, cfg.backbone_widths, rng);
    layers::init_pointwise(store, "vis.proj", cfg.backbone_widths.back(), cfg.width, rng);
    store.add("vis.pos_embed", init::truncated_normal({cfg.n_tokens(), cfg.width}, 0.02, rng));
    for (int i = 0; i < cfg.n_layers; ++i)
        layers::init_transformer_layer(store, "vis.layers." + std::to_string(i), cfg.width, cfg.ffn_dim, rng);
}

namespace {

void check_image(const Tensor& img, const VisEncoderConfig& cfg) {
    XC_EXPECT(img.rank() == 3 && img.dim(0) == 3, "vis: image must be [3,S,S], got " + shape_str(img.shape));
    XC_EXPECT(img.dim(1) == img.dim(2), "vis: image must be square, got " + shape_str(img.shape));
    XC_EXPECT(img.dim(1) == cfg.input_size,
              "vis: image side " + std::to_string(img.dim(1)) + " differs from configured " + std::to_string(cfg.input_size));
}

} // namespace

ad::Var backbone_features(ad::Tape& tape, const ParamStore& store, const VisEncoderConfig& cfg, ad::Var image) {
    check_image(image.value(), cfg);
    return layers::backbone(tape, store, "vis.backbone", image, cfg.backbone_widths.size());
}

ad::Var visual_feature_map(ad::Tape& tape, const ParamStore& store, const VisEncoderConfig& cfg, ad::Var image) {
    return layers::pointwise(tape, store, "vis.proj", backbone_features(tape, store, cfg, image));
}

ad::Var encode_visual_tokens(ad::Tape& tape, const ParamStore& store, const VisEncoderConfig& cfg, ad::Var image) {
    ad::Var fmap = visual_feature_map(tape, store, cfg, image);
    const int n = cfg.n_tokens();
    // [D_i, g, g] -> [D_i, N_i] -> [N_i, D_i]
    ad::Var x = ad::transpose(ad::reshape(fmap, {cfg.width, n}));
    const Tensor& pos = store.get("vis.pos_embed");
    XC_EXPECT(pos.rows() == n && pos.cols() == cfg.width, "vis: positional table does not match the token grid");
    x = ad::add(x, tape.param(store, "vis.pos_embed"));
    const std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 1);
    for (int i = 0; i < cfg.n_layers; ++i)
        x = layers::transformer_layer(tape, store, "vis.layers." + std::to_string(i), x, cfg.n_heads, mask);
    return x;
}

Tensor backbone_features(const Tensor& image, const VisEncoderConfig& cfg, const ParamStore& store) {
    ad::Tape tape(false);
    return backbone_features(tape, store, cfg, tape.constant(image)).value();
}

Tensor encode_visual(const Tensor& image, const VisEncoderConfig& cfg, const ParamStore& store) {
    ad::Tape tape(false);
    return encode_visual_tokens(tape, store, cfg, tape.constant(image)).value().transposed();
}

} // namespace expresscount
