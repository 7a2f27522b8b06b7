#include "expresscount/model.hpp"

#include <cmath>

#include "expresscount/errors.hpp"

namespace expresscount {

Model init_model(const ModelConfig& cfg, Vocabulary vocab, std::uint64_t seed, Variant variant) {
    Model m{cfg, std::move(vocab), {}};
    m.cfg.perceptron.lang.vocab_size = m.vocab.size();
    m.cfg.perceptron.lang.validate();
    Rng lang_rng(mix_seed(seed, 1, 0));
    Rng vis_rng(mix_seed(seed, 2, 0));
    Rng fusion_rng(mix_seed(seed, 3, 0));
    Rng counter_rng(mix_seed(seed, 4, 0));
    init_lang_encoder(m.params, m.cfg.perceptron.lang, lang_rng);
    init_vis_encoder(m.params, m.cfg.perceptron.vis, vis_rng);
    init_fusion(m.params, m.cfg.perceptron.fusion, fusion_rng);
    init_counter(m.params, m.cfg.counter, counter_rng);
    apply_freeze(m.params, m.cfg.perceptron, variant);
    return m;
}

namespace {

Tensor dark_noise_image(const ModelConfig& cfg) {
    Tensor t({3, cfg.input_size, cfg.input_size});
    Rng rng(0xda7c);
    const int plane = cfg.input_size * cfg.input_size;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < plane; ++i)
            t.data[static_cast<std::size_t>(c * plane + i)] = (0.05 * rng.uniform() - cfg.norm.mean[c]) / cfg.norm.std[c];
    return t;
}

} // namespace

ForwardResult forward(ad::Tape& tape, const Model& model, const Tensor& image, const TokenSequence& tokens,
                      Variant variant, const std::vector<BBox>* crop_override) {
    ForwardResult r;
    const Tensor vis_input = model.cfg.dark_noise_input ? dark_noise_image(model.cfg) : Tensor{};
    r.boxes = perceive_exemplar_var(tape, model.params, model.cfg.perceptron,
                                    model.cfg.dark_noise_input ? vis_input : image, tokens, variant, &r.trace);
    r.predicted = boxes_from_tensor(r.boxes.value());
    r.crop_boxes = crop_override ? *crop_override : r.predicted;
    XC_EXPECT(!r.crop_boxes.empty(), "forward needs at least one crop box");
    std::vector<Tensor> crops;
    crops.reserve(r.crop_boxes.size());
    for (const auto& b : r.crop_boxes) crops.push_back(crop_exemplar(image, b, model.cfg.counter.exemplar_size));
    r.count = count_objects(tape, model.params, model.cfg.counter, image, crops);
    return r;
}

Prediction predict(const Model& model, const SceneSample& sample, Variant variant) {
    const Preprocessed pre = preprocess(sample, model.cfg.input_size, model.cfg.norm);
    const TokenSequence tokens = tokenize(pre.annotation, model.vocab, model.cfg.perceptron.lang.max_len);
    ad::Tape tape(false);
    ForwardResult r = forward(tape, model, pre.image, tokens, variant);
    const double count = r.count.count.value().data[0];
    if (!std::isfinite(count)) throw numerical_error("non-finite count prediction for sample " + sample.sample_id);
    return {r.predicted, count};
}

} // namespace expresscount
