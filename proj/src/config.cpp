#include "expresscount/config.hpp"

#include <fstream>
#include <iomanip>
#include <openssl/sha.h>
#include <sstream>

#include "expresscount/errors.hpp"

namespace expresscount {

using nlohmann::json;

json default_config() {
    return json::parse(R"({
  "data": {
    "input_size": 64,
    "mean": [0.5, 0.5, 0.5],
    "std": [0.5, 0.5, 0.5]
  },
  "lang": {"width": 64, "n_layers": 2, "n_heads": 4, "ffn_dim": 128, "max_len": 20, "freeze": false},
  "vis": {"width": 64, "n_layers": 2, "n_heads": 8, "ffn_dim": 128, "backbone_widths": [8, 16, 32, 64, 64], "input": "image"},
  "fusion": {"width": 64, "n_layers": 2, "n_heads": 4, "ffn_dim": 128, "n_exemplars": 1, "project_lang": true},
  "counter": {
    "exemplar_size": 64,
    "feat_width": 32,
    "backbone_widths": [8, 16, 32, 64],
    "count_hidden": 32,
    "alpha_init": 1.0,
    "head": "count"
  },
  "train": {
    "variant": "full",
    "lr": 0.001,
    "weight_decay": 0.0005,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "batch_size": 8,
    "steps": 500,
    "val_every": 50,
    "seed": 0,
    "clip_norm": 10.0,
    "augment": true,
    "reshape_prob": 0.5,
    "erase_prob": 0.5
  },
  "annotate": {
    "coarse_prompt": "What objects does this image include?",
    "refine_prompt": "How many [class]? Describe the [class] details.",
    "max_retries": 3,
    "timeout_s": 30.0,
    "backoff_base_s": 1.0,
    "backoff_factor": 2.0,
    "concurrency": 1,
    "auth_env": "EXPRESSCOUNT_API_TOKEN"
  }
})");
}

json large_scale_config() {
    json c = default_config();
    c["data"]["input_size"] = 640;
    c["lang"] = {{"width", 768}, {"n_layers", 12}, {"n_heads", 12}, {"ffn_dim", 3072}, {"max_len", 20}, {"freeze", false}};
    c["vis"] = {{"width", 256}, {"n_layers", 6}, {"n_heads", 8}, {"ffn_dim", 2048},
                {"backbone_widths", {64, 256, 512, 1024, 2048}}, {"input", "image"}};
    c["fusion"] = {{"width", 256}, {"n_layers", 6}, {"n_heads", 8}, {"ffn_dim", 2048}, {"n_exemplars", 1}, {"project_lang", true}};
    c["counter"]["exemplar_size"] = 128;
    c["counter"]["feat_width"] = 256;
    c["counter"]["backbone_widths"] = {64, 256, 512, 1024};
    c["counter"]["count_hidden"] = 256;
    c["train"]["lr"] = 1e-5;
    c["train"]["batch_size"] = 15;
    return c;
}

namespace {

bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
    return a.type() == b.type();
}

std::string kind_name(const json& v) {
    if (v.is_number_integer()) return "integer";
    if (v.is_number()) return "number";
    return v.type_name();
}

} // namespace

void merge_config(json& base, const json& patch, const std::string& path) {
    if (!patch.is_object()) throw config_error("config" + (path.empty() ? "" : " key '" + path + "'") + " must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string full = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw config_error("unknown config key '" + full + "'");
        json& slot = base[key];
        if (slot.is_object()) {
            merge_config(slot, value, full);
            continue;
        }
        if (!same_kind(slot, value))
            throw config_error("config key '" + full + "' expects " + kind_name(slot) + ", got " + kind_name(value));
        slot = value.is_number() && slot.is_number_float() ? json(value.get<double>()) : value;
    }
}

void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw config_error("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    // Build {"a": {"b": value}} and merge, so the same type checks apply.
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (true) {
        const auto dot = rest.find('.', pos);
        parts.push_back(rest.substr(pos, dot - pos));
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        if (it->empty()) throw config_error("override key '" + key + "' has an empty component");
        patch = json{{*it, patch}};
    }
    merge_config(cfg, patch);
}

json load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
    json cfg = default_config();
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw config_error("cannot open config file " + file.string());
        json user;
        try {
            user = json::parse(in);
        } catch (const json::parse_error& e) {
            throw config_error("config file " + file.string() + ": " + e.what());
        }
        merge_config(cfg, user);
    }
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
}

std::string config_hash(const json& cfg) {
    const std::string text = cfg.dump();
    unsigned char digest[SHA256_DIGEST_LENGTH];
    SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), digest);
    std::ostringstream os;
    for (unsigned char b : digest) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
    return os.str();
}

namespace {

template <class T>
T get(const json& cfg, const char* section, const char* key) {
    try {
        return cfg.at(section).at(key).get<T>();
    } catch (const json::exception& e) {
        throw config_error(std::string("config key '") + section + "." + key + "': " + e.what());
    }
}

} // namespace

ModelConfig model_config_from(const json& cfg, int vocab_size) {
    ModelConfig m;
    m.input_size = get<int>(cfg, "data", "input_size");
    if (m.input_size <= 0 || m.input_size % 32 != 0)
        throw config_error("data.input_size must be a positive multiple of 32, got " + std::to_string(m.input_size));
    const auto mean = get<std::vector<double>>(cfg, "data", "mean");
    const auto stdv = get<std::vector<double>>(cfg, "data", "std");
    if (mean.size() != 3 || stdv.size() != 3) throw config_error("data.mean and data.std need three entries");
    for (int c = 0; c < 3; ++c) {
        if (stdv[static_cast<std::size_t>(c)] <= 0) throw config_error("data.std entries must be positive");
        m.norm.mean[c] = mean[static_cast<std::size_t>(c)];
        m.norm.std[c] = stdv[static_cast<std::size_t>(c)];
    }

    auto& l = m.perceptron.lang;
    l.width = get<int>(cfg, "lang", "width");
    l.n_layers = get<int>(cfg, "lang", "n_layers");
    l.n_heads = get<int>(cfg, "lang", "n_heads");
    l.ffn_dim = get<int>(cfg, "lang", "ffn_dim");
    l.max_len = get<int>(cfg, "lang", "max_len");
    l.freeze = get<bool>(cfg, "lang", "freeze");
    l.vocab_size = vocab_size;

    auto& v = m.perceptron.vis;
    v.width = get<int>(cfg, "vis", "width");
    v.n_layers = get<int>(cfg, "vis", "n_layers");
    v.n_heads = get<int>(cfg, "vis", "n_heads");
    v.ffn_dim = get<int>(cfg, "vis", "ffn_dim");
    v.backbone_widths = get<std::vector<int>>(cfg, "vis", "backbone_widths");
    v.input_size = m.input_size;
    const std::string vis_input = get<std::string>(cfg, "vis", "input");
    if (vis_input != "image" && vis_input != "dark_noise")
        throw config_error("vis.input must be image or dark_noise, got '" + vis_input + "'");
    m.dark_noise_input = vis_input == "dark_noise";

    auto& f = m.perceptron.fusion;
    f.width = get<int>(cfg, "fusion", "width");
    f.n_layers = get<int>(cfg, "fusion", "n_layers");
    f.n_heads = get<int>(cfg, "fusion", "n_heads");
    f.ffn_dim = get<int>(cfg, "fusion", "ffn_dim");
    f.n_exemplars = get<int>(cfg, "fusion", "n_exemplars");
    f.project_lang = get<bool>(cfg, "fusion", "project_lang");
    f.lang_width = l.width;

    auto& c = m.counter;
    c.exemplar_size = get<int>(cfg, "counter", "exemplar_size");
    c.feat_width = get<int>(cfg, "counter", "feat_width");
    c.backbone_widths = get<std::vector<int>>(cfg, "counter", "backbone_widths");
    c.count_hidden = get<int>(cfg, "counter", "count_hidden");
    c.alpha_init = get<double>(cfg, "counter", "alpha_init");
    c.head = parse_count_head(get<std::string>(cfg, "counter", "head"));
    c.image_size = m.input_size;

    if (vocab_size > 0) l.validate();
    v.validate();
    f.validate();
    c.validate();
    if (v.width != f.width) throw config_error("vis.width must equal fusion.width");
    return m;
}

TrainConfig train_config_from(const json& cfg) {
    TrainConfig t;
    t.variant = parse_variant(get<std::string>(cfg, "train", "variant"));
    t.lr = get<double>(cfg, "train", "lr");
    t.weight_decay = get<double>(cfg, "train", "weight_decay");
    t.beta1 = get<double>(cfg, "train", "beta1");
    t.beta2 = get<double>(cfg, "train", "beta2");
    t.eps = get<double>(cfg, "train", "eps");
    t.batch_size = get<int>(cfg, "train", "batch_size");
    t.steps = get<int>(cfg, "train", "steps");
    t.val_every = get<int>(cfg, "train", "val_every");
    t.seed = get<std::uint64_t>(cfg, "train", "seed");
    t.clip_norm = get<double>(cfg, "train", "clip_norm");
    t.augment = get<bool>(cfg, "train", "augment");
    t.augmentation.reshape_prob = get<double>(cfg, "train", "reshape_prob");
    t.augmentation.erase_prob = get<double>(cfg, "train", "erase_prob");
    if (t.lr <= 0 || t.batch_size < 1 || t.steps < 0 || t.val_every < 1)
        throw config_error("train: lr, batch_size, steps and val_every must be positive");
    return t;
}

AnnotateConfig annotate_config_from(const json& cfg) {
    AnnotateConfig a;
    a.coarse_prompt = get<std::string>(cfg, "annotate", "coarse_prompt");
    a.refine_prompt = get<std::string>(cfg, "annotate", "refine_prompt");
    a.max_retries = get<int>(cfg, "annotate", "max_retries");
    a.timeout_s = get<double>(cfg, "annotate", "timeout_s");
    a.backoff_base_s = get<double>(cfg, "annotate", "backoff_base_s");
    a.backoff_factor = get<double>(cfg, "annotate", "backoff_factor");
    a.concurrency = get<int>(cfg, "annotate", "concurrency");
    a.auth_env = get<std::string>(cfg, "annotate", "auth_env");
    return a;
}

} // namespace expresscount
