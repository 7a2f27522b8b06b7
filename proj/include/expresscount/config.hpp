#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expresscount/counter.hpp"
#include "expresscount/data.hpp"
#include "expresscount/fusion.hpp"

namespace expresscount {

// Desk-scale defaults; every constant the model, trainer and annotator use
// lives in this tree.
nlohmann::json default_config();
// Same tree with the published full-size settings (640 px input, 768-wide
// 12-layer language stack, 6-layer visual and fusion stacks, lr 1e-5,
// batch 15).
nlohmann::json large_scale_config();

// Deep-merges `patch` into `base`. Keys absent from `base` and values whose
// JSON type differs from the existing one are rejected with config_error.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& path = "");
// Applies one "dotted.key=value" override. The value is parsed as JSON when
// possible, otherwise taken as a string.
void apply_override(nlohmann::json& cfg, const std::string& assignment);
nlohmann::json load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});
std::string config_hash(const nlohmann::json& cfg);

struct ModelConfig {
    PerceptronConfig perceptron;
    CounterConfig counter;
    Normalization norm;
    int input_size = 64;
    // The visual encoder sees a fixed dark noise image instead of the input.
    bool dark_noise_input = false;
};

struct TrainConfig {
    Variant variant = Variant::full;
    double lr = 1e-3;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 8;
    int steps = 500;
    int val_every = 50;
    std::uint64_t seed = 0;
    double clip_norm = 10.0;
    bool augment = true;
    AugmentConfig augmentation;
};

struct AnnotateConfig {
    std::string coarse_prompt = "What objects does this image include?";
    std::string refine_prompt = "How many [class]? Describe the [class] details.";
    int max_retries = 3;
    double timeout_s = 30.0;
    double backoff_base_s = 1.0;
    double backoff_factor = 2.0;
    int concurrency = 1;
    std::string auth_env = "EXPRESSCOUNT_API_TOKEN";
};

// vocab_size is filled in once a vocabulary exists.
ModelConfig model_config_from(const nlohmann::json& cfg, int vocab_size);
TrainConfig train_config_from(const nlohmann::json& cfg);
AnnotateConfig annotate_config_from(const nlohmann::json& cfg);

} // namespace expresscount
