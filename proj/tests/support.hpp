#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expresscount/autograd.hpp"
#include "expresscount/config.hpp"
#include "expresscount/data.hpp"
#include "expresscount/params.hpp"
#include "expresscount/rng.hpp"

namespace expresscount::testing {

struct GradCheckResult {
    int checked = 0;
    int failed = 0;
    double worst_rel = 0.0;
    std::string worst_name;
};

// Builds a scalar loss on a fresh tape from the store.
using LossFn = std::function<ad::Var(ad::Tape&, const ParamStore&)>;

inline double eval_loss(const LossFn& fn, const ParamStore& store) {
    ad::Tape tape(false);
    return fn(tape, store).value().data[0];
}

// Central differences on `per_param` random entries of every parameter whose
// name starts with one of `prefixes`.
inline GradCheckResult grad_check(ParamStore& store, const LossFn& fn, const std::vector<std::string>& prefixes,
                                  int per_param, std::uint64_t seed, double tol = 1e-3, double h = 1e-6) {
    GradStore grads;
    {
        ad::Tape tape(true);
        ad::Var loss = fn(tape, store);
        tape.backward(loss);
        tape.accumulate_param_grads(grads);
    }
    GradCheckResult res;
    Rng rng(seed);
    for (auto& [name, value] : store.all()) {
        bool selected = false;
        for (const auto& p : prefixes) selected = selected || name.rfind(p, 0) == 0;
        if (!selected || store.is_frozen(name)) continue;
        for (int s = 0; s < per_param; ++s) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(value.data.size()) - 1));
            const double orig = value.data[i];
            value.data[i] = orig + h;
            const double up = eval_loss(fn, store);
            value.data[i] = orig - h;
            const double down = eval_loss(fn, store);
            value.data[i] = orig;
            const double numeric = (up - down) / (2 * h);
            auto git = grads.find(name);
            const double analytic = git == grads.end() ? 0.0 : git->second.data[i];
            const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-7});
            ++res.checked;
            if (rel > tol) ++res.failed;
            if (rel > res.worst_rel) {
                res.worst_rel = rel;
                res.worst_name = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

// Smallest configuration that exercises every module (S = 32).
inline nlohmann::json tiny_config() {
    nlohmann::json c = default_config();
    c["data"]["input_size"] = 32;
    c["lang"].update({{"width", 16}, {"n_layers", 1}, {"n_heads", 4}, {"ffn_dim", 16}, {"max_len", 12}});
    c["vis"].update({{"width", 16}, {"n_layers", 1}, {"n_heads", 4}, {"ffn_dim", 16}, {"backbone_widths", {4, 4, 4, 4, 8}}});
    c["fusion"].update({{"width", 16}, {"n_layers", 1}, {"n_heads", 4}, {"ffn_dim", 16}});
    c["counter"].update({{"exemplar_size", 32}, {"feat_width", 4}, {"backbone_widths", {4, 4, 4, 4}}, {"count_hidden", 4}});
    c["train"].update({{"batch_size", 2}, {"steps", 4}, {"val_every", 2}});
    return c;
}

inline std::vector<SceneSample> tiny_corpus(int n, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.canvas_size = 64;
    spec.shape_classes = {{ShapeKind::circle, "red"}, {ShapeKind::square, "blue"}};
    spec.min_instances = 1;
    spec.max_instances = 4;
    spec.min_size = 6;
    spec.max_size = 10;
    spec.seed = seed;
    return generate_synthetic(spec, n);
}

} // namespace expresscount::testing
