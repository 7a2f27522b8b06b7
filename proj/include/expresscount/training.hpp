#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expresscount/autograd.hpp"
#include "expresscount/config.hpp"
#include "expresscount/model.hpp"

namespace expresscount {

struct LossReport {
    double L_l = 0.0;
    double L_c = 0.0;
    std::optional<double> L_density;
    double total = 0.0;
};

// Ground-truth boxes matched to k predictions by annotation order; the last
// box repeats when fewer than k exist.
std::vector<BBox> padded_targets(const std::vector<BBox>& gt, int k);

// Sum over boxes of |dx|+|dy|+|dh|+|dw|, summed over samples, divided by the
// batch size. Each gt list is padded to its prediction's length first.
double exemplar_loss(const std::vector<std::vector<BBox>>& pred, const std::vector<std::vector<BBox>>& gt);
// Mean |C_g - C_p| over the batch.
double count_loss(const std::vector<double>& pred, const std::vector<double>& gt);

struct Metrics {
    double mae = 0.0;
    double rmse = 0.0;
};
Metrics metrics(const std::vector<double>& pred, const std::vector<double>& gt);

// Single-sample differentiable terms (no batch division).
ad::Var exemplar_loss_var(ad::Var boxes, const std::vector<BBox>& gt);
ad::Var count_loss_var(ad::Var count, double gt);
ad::Var density_loss_var(ad::Var density, const Tensor& target);

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;
};

// Decoupled weight decay. Frozen parameters and parameters without a
// gradient this step are left untouched.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}
    void step(ParamStore& params, const GradStore& grads);

    const AdamWConfig& config() const { return cfg_; }
    std::int64_t steps() const { return t_; }
    std::map<std::string, Tensor>& first_moments() { return m_; }
    std::map<std::string, Tensor>& second_moments() { return v_; }
    const std::map<std::string, Tensor>& first_moments() const { return m_; }
    const std::map<std::string, Tensor>& second_moments() const { return v_; }
    void set_steps(std::int64_t t) { t_ = t; }

private:
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    std::map<std::string, Tensor> m_;
    std::map<std::string, Tensor> v_;
};

// Rescales grads in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(GradStore& grads, double max_norm);

struct HistoryEntry {
    int step = 0;
    double train_loss = 0.0;
    double val_mae = 0.0;
    double val_rmse = 0.0;
    bool operator==(const HistoryEntry&) const = default;
};

struct TrainState {
    Model model;
    AdamW optimizer;
    nlohmann::json config;  // full config tree the run was started with
    int step = 0;
    std::vector<HistoryEntry> history;
    std::uint64_t seed = 0;
    // Running train-loss mean since the last history entry.
    double loss_sum = 0.0;
    int loss_count = 0;
};

TrainState init_train_state(const nlohmann::json& config, const Vocabulary& vocab);

// Per-sample and batch outcome of one optimisation step.
struct StepReport {
    int step = 0;
    LossReport loss;
    double grad_norm = 0.0;
};

// Samples and augmentation seeds for `step` (1-based) depend only on the
// seed and the step, so runs resume deterministically.
std::vector<int> batch_indices(std::uint64_t seed, int step, int batch_size, int n_samples);

// Loss terms for one sample; runs backward and accumulates gradients
// scaled by 1/batch_size when `grads` is given.
LossReport sample_loss(const Model& model, const SceneSample& sample, Variant variant, double batch_size,
                       GradStore* grads);

StepReport train_step(TrainState& state, const std::vector<SceneSample>& train_set);

struct TrainCallbacks {
    std::function<void(const StepReport&)> on_step;
    std::function<void(const HistoryEntry&)> on_eval;
};

// Runs until state.step == config train.steps, evaluating every val_every
// steps (and at the last step). Checkpoints to `checkpoint` when non-empty
// after every evaluation.
void train(TrainState& state, const std::vector<SceneSample>& train_set, const std::vector<SceneSample>& val_set,
           const std::filesystem::path& checkpoint = {}, const TrainCallbacks& callbacks = {});

struct SampleReport {
    std::string sample_id;
    double count_gt = 0.0;
    double count_pred = 0.0;
    std::vector<BBox> boxes;
};

struct Evaluation {
    Metrics metrics;
    std::vector<SampleReport> samples;
};

Evaluation evaluate(const Model& model, const std::vector<SceneSample>& dataset, Variant variant);
void write_report_csv(const Evaluation& eval, const std::filesystem::path& path);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

// <dir>/curves.csv, <dir>/train_loss.svg, <dir>/val_mae.svg
struct CurveFiles {
    std::filesystem::path csv;
    std::filesystem::path loss_plot;
    std::filesystem::path mae_plot;
};
CurveFiles emit_curves(const std::vector<HistoryEntry>& history, const std::filesystem::path& dir);
std::vector<HistoryEntry> read_curves_csv(const std::filesystem::path& path);

} // namespace expresscount
