#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "expresscount/autograd.hpp"
#include "expresscount/params.hpp"
#include "expresscount/rng.hpp"

namespace expresscount::layers {

// prefix.w [in,out], prefix.b [out]
void init_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng, double stddev = 0.0);
ad::Var linear(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var x);

void init_layer_norm(ParamStore& store, const std::string& prefix, int width);
ad::Var layer_norm(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var x);

// Pre-norm encoder layer:
//   x += Wo * attn(LN1(x));  x += FFN(LN2(x))
// With all projection weights zero the layer is the identity map.
// stddev 0 selects 1/sqrt(fan_in) for every projection.
void init_transformer_layer(ParamStore& store, const std::string& prefix, int width, int ffn_dim, Rng& rng,
                            double stddev = 0.0);
ad::Var transformer_layer(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var x,
                          int n_heads, std::span<const std::uint8_t> key_mask);

// Residual convolutional stack: a stride-2 3x3 stem followed by stride-2
// stages, each `relu(a + conv3x3(a))` with `a = relu(conv3x3_s2(x))`.
// Total stride is 2^widths.size().
void init_backbone(ParamStore& store, const std::string& prefix, int in_channels, const std::vector<int>& widths,
                   Rng& rng);
ad::Var backbone(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var image,
                 std::size_t n_stages);

// 1x1 convolution, prefix.w [out,in,1,1], prefix.b [out]
void init_pointwise(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng);
ad::Var pointwise(ad::Tape& tape, const ParamStore& store, const std::string& prefix, ad::Var x);

} // namespace expresscount::layers
