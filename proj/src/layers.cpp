#include "expresscount/layers.hpp"

#include <cmath>

#include "expresscount/errors.hpp"

namespace expresscount::layers {

void init_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng, double stddev) {
    if (stddev <= 0.0) stddev = 1.0 / std::sqrt(static_cast<double>(in));
    store.add(prefix + ".w", init::truncated_normal({in, out}, stddev, rng));
    store.add(prefix + ".b", Tensor({out}));
}

ad::Var linear(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var x) {
    return ad::linear(x, tape.param(store, prefix + ".w"), tape.param(store, prefix + ".b"));
}

void init_layer_norm(ParamStore& store, const std::string& prefix, int width) {
    store.add(prefix + ".g", Tensor({width}, 1.0));
    store.add(prefix + ".b", Tensor({width}));
}

ad::Var layer_norm(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var x) {
    return ad::layer_norm(x, tape.param(store, prefix + ".g"), tape.param(store, prefix + ".b"));
}

void init_transformer_layer(ParamStore& store, const std::string& prefix, int width, int ffn_dim, Rng& rng,
                            double stddev) {
    init_layer_norm(store, prefix + ".ln1", width);
    init_linear(store, prefix + ".attn.q", width, width, rng, stddev);
    init_linear(store, prefix + ".attn.k", width, width, rng, stddev);
    init_linear(store, prefix + ".attn.v", width, width, rng, stddev);
    init_linear(store, prefix + ".attn.o", width, width, rng, stddev);
    init_layer_norm(store, prefix + ".ln2", width);
    init_linear(store, prefix + ".ffn.in", width, ffn_dim, rng, stddev);
    init_linear(store, prefix + ".ffn.out", ffn_dim, width, rng, stddev);
}

ad::Var transformer_layer(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var x,
                          int n_heads, std::span<const std::uint8_t> key_mask) {
    ad::Var h = layer_norm(tape, store, prefix + ".ln1", x);
    ad::Var q = linear(tape, store, prefix + ".attn.q", h);
    ad::Var k = linear(tape, store, prefix + ".attn.k", h);
    ad::Var v = linear(tape, store, prefix + ".attn.v", h);
    ad::Var a = ad::multi_head_attention(q, k, v, n_heads, key_mask);
    x = ad::add(x, linear(tape, store, prefix + ".attn.o", a));
    h = layer_norm(tape, store, prefix + ".ln2", x);
    h = ad::gelu(linear(tape, store, prefix + ".ffn.in", h));
    return ad::add(x, linear(tape, store, prefix + ".ffn.out", h));
}

void init_pointwise(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng) {
    store.add(prefix + ".w", init::kaiming_conv(out, in, 1, rng));
    store.add(prefix + ".b", Tensor({out}));
}

ad::Var pointwise(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var x) {
    return ad::conv2d(x, tape.param(store, prefix + ".w"), tape.param(store, prefix + ".b"), 1, 0);
}

void init_backbone(ParamStore& store, const std::string& prefix, int in_channels, const std::vector<int>& widths,
                   Rng& rng) {
    XC_EXPECT(!widths.empty(), "backbone needs at least a stem width");
    store.add(prefix + ".stem.w", init::kaiming_conv(widths[0], in_channels, 3, rng));
    store.add(prefix + ".stem.b", Tensor({widths[0]}));
    for (std::size_t i = 1; i < widths.size(); ++i) {
        const std::string s = prefix + ".stage" + std::to_string(i);
        store.add(s + ".down.w", init::kaiming_conv(widths[i], widths[i - 1], 3, rng));
        store.add(s + ".down.b", Tensor({widths[i]}));
        store.add(s + ".res.w", init::kaiming_conv(widths[i], widths[i], 3, rng));
        store.add(s + ".res.b", Tensor({widths[i]}));
    }
}

ad::Var backbone(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var image,
                 std::size_t n_stages) {
    auto conv = [&](const std::string& name, ad::Var x, int stride) {
        return ad::conv2d(x, tape.param(store, name + ".w"), tape.param(store, name + ".b"), stride, 1);
    };
    ad::Var x = ad::relu(conv(prefix + ".stem", image, 2));
    for (std::size_t i = 1; i < n_stages; ++i) {
        const std::string s = prefix + ".stage" + std::to_string(i);
        ad::Var a = ad::relu(conv(s + ".down", x, 2));
        x = ad::relu(ad::add(a, conv(s + ".res", a, 1)));
    }
    return x;
}

} // namespace expresscount::layers
