#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "expresscount/autograd.hpp"
#include "expresscount/config.hpp"
#include "expresscount/counter.hpp"
#include "expresscount/fusion.hpp"
#include "expresscount/lang_encoder.hpp"

namespace expresscount {

// Perceptron and counting branch sharing one parameter store.
struct Model {
    ModelConfig cfg;
    Vocabulary vocab;
    ParamStore params;
};

// Fresh parameters for every module; freeze flags follow `variant`.
Model init_model(const ModelConfig& cfg, Vocabulary vocab, std::uint64_t seed, Variant variant);

struct ForwardResult {
    ad::Var boxes;                 // [k, 4]
    std::vector<BBox> predicted;   // values of `boxes`
    std::vector<BBox> crop_boxes;  // boxes the counter actually cropped
    CountPrediction count;
    FuseTrace trace;
};

// image: preprocessed [3,S,S]. The counter crops `crop_override` when given,
// otherwise the predicted boxes.
ForwardResult forward(ad::Tape& tape, const Model& model, const Tensor& image, const TokenSequence& tokens,
                      Variant variant, const std::vector<BBox>* crop_override = nullptr);

struct Prediction {
    std::vector<BBox> boxes;
    double count = 0.0;
};
// Inference without gradients; no augmentation.
Prediction predict(const Model& model, const SceneSample& sample, Variant variant);

} // namespace expresscount
