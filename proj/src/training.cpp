#include "expresscount/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "expresscount/errors.hpp"

namespace expresscount {

using nlohmann::json;

std::vector<BBox> padded_targets(const std::vector<BBox>& gt, int k) {
    XC_EXPECT(!gt.empty(), "no ground-truth exemplar boxes to match");
    XC_EXPECT(k >= 1, "need at least one predicted box");
    std::vector<BBox> out(gt.begin(), gt.begin() + std::min<std::size_t>(gt.size(), static_cast<std::size_t>(k)));
    while (static_cast<int>(out.size()) < k) out.push_back(gt.back());
    return out;
}

double exemplar_loss(const std::vector<std::vector<BBox>>& pred, const std::vector<std::vector<BBox>>& gt) {
    XC_EXPECT(!pred.empty(), "exemplar_loss on an empty batch");
    XC_EXPECT(pred.size() == gt.size(), "exemplar_loss batch sizes differ");
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto target = padded_targets(gt[i], static_cast<int>(pred[i].size()));
        for (std::size_t k = 0; k < pred[i].size(); ++k) {
            const BBox& p = pred[i][k];
            const BBox& g = target[k];
            total += std::abs(g.x - p.x) + std::abs(g.y - p.y) + std::abs(g.h - p.h) + std::abs(g.w - p.w);
        }
    }
    return total / static_cast<double>(pred.size());
}

double count_loss(const std::vector<double>& pred, const std::vector<double>& gt) {
    XC_EXPECT(!pred.empty(), "count_loss on an empty batch");
    XC_EXPECT(pred.size() == gt.size(), "count_loss batch sizes differ");
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) total += std::abs(gt[i] - pred[i]);
    return total / static_cast<double>(pred.size());
}

Metrics metrics(const std::vector<double>& pred, const std::vector<double>& gt) {
    XC_EXPECT(!pred.empty(), "metrics on an empty prediction list");
    XC_EXPECT(pred.size() == gt.size(), "metrics: prediction and ground-truth lengths differ");
    double abs_sum = 0.0, sq_sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - gt[i];
        abs_sum += std::abs(d);
        sq_sum += d * d;
    }
    const double n = static_cast<double>(pred.size());
    return {abs_sum / n, std::sqrt(sq_sum / n)};
}

ad::Var exemplar_loss_var(ad::Var boxes, const std::vector<BBox>& gt) {
    const int k = boxes.value().dim(0);
    const auto target = padded_targets(gt, k);
    Tensor t({k, 4});
    for (int i = 0; i < k; ++i) {
        const BBox& b = target[static_cast<std::size_t>(i)];
        t.at(i, 0) = b.x;
        t.at(i, 1) = b.y;
        t.at(i, 2) = b.h;
        t.at(i, 3) = b.w;
    }
    return ad::sum(ad::abs(ad::sub(boxes, boxes.tape->constant(std::move(t)))));
}

ad::Var count_loss_var(ad::Var count, double gt) {
    return ad::abs(ad::add_scalar(count, -gt));
}

ad::Var density_loss_var(ad::Var density, const Tensor& target) {
    XC_EXPECT(density.value().shape == target.shape, "density map and target shapes differ: " +
                                                         shape_str(density.value().shape) + " vs " +
                                                         shape_str(target.shape));
    return ad::sum(ad::square(ad::sub(density, density.tape->constant(target))));
}

void AdamW::step(ParamStore& params, const GradStore& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.all()) {
        if (params.is_frozen(name)) continue;
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        XC_EXPECT(g.shape == p.shape, "gradient shape mismatch for " + name);
        Tensor& m = m_.try_emplace(name, Tensor::zeros_like(p)).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros_like(p)).first->second;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            p.data[i] -= cfg_.lr * cfg_.weight_decay * p.data[i];
            m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g.data[i];
            v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

double clip_grad_norm(GradStore& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [_, g] : grads)
        for (double x : g.data) sq += x * x;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / (norm + 1e-6);
        for (auto& [_, g] : grads)
            for (double& x : g.data) x *= s;
    }
    return norm;
}

TrainState init_train_state(const json& config, const Vocabulary& vocab) {
    const ModelConfig mc = model_config_from(config, vocab.size());
    const TrainConfig tc = train_config_from(config);
    TrainState s{init_model(mc, vocab, tc.seed, tc.variant),
                 AdamW({tc.lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay}),
                 config,
                 0,
                 {},
                 tc.seed};
    return s;
}

std::vector<int> batch_indices(std::uint64_t seed, int step, int batch_size, int n_samples) {
    XC_EXPECT(n_samples > 0, "training set is empty");
    XC_EXPECT(step >= 1 && batch_size >= 1, "batch_indices needs step >= 1 and batch_size >= 1");
    // Concatenated per-epoch permutations; batch `step` takes the next
    // batch_size entries of that stream.
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    const std::int64_t begin = static_cast<std::int64_t>(step - 1) * batch_size;
    std::int64_t epoch = -1;
    std::vector<int> perm;
    for (std::int64_t pos = begin; pos < begin + batch_size; ++pos) {
        const std::int64_t e = pos / n_samples;
        if (e != epoch) {
            epoch = e;
            perm.resize(static_cast<std::size_t>(n_samples));
            std::iota(perm.begin(), perm.end(), 0);
            Rng rng(mix_seed(seed, static_cast<std::uint64_t>(e), 0xba7c4));
            for (int i = n_samples - 1; i > 0; --i)
                std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
        }
        out.push_back(perm[static_cast<std::size_t>(pos % n_samples)]);
    }
    return out;
}

namespace {

void check_finite(double v, const char* term, const std::string& where) {
    if (!std::isfinite(v)) throw numerical_error(std::string("non-finite ") + term + " " + where);
}

} // namespace

LossReport sample_loss(const Model& model, const SceneSample& sample, Variant variant, double batch_size,
                       GradStore* grads) {
    const Preprocessed pre = preprocess(sample, model.cfg.input_size, model.cfg.norm);
    const TokenSequence tokens = tokenize(pre.annotation, model.vocab, model.cfg.perceptron.lang.max_len);
    ad::Tape tape(grads != nullptr);
    ForwardResult fr = forward(tape, model, pre.image, tokens, variant);

    ad::Var l_l = exemplar_loss_var(fr.boxes, sample.exemplar_boxes);
    ad::Var l_c = count_loss_var(fr.count.count, static_cast<double>(sample.count));
    ad::Var total = ad::add(l_l, l_c);
    LossReport r;
    r.L_l = l_l.value().data[0];
    r.L_c = l_c.value().data[0];
    const std::string where = "for sample " + sample.sample_id;
    check_finite(r.L_l, "L_l", where);
    check_finite(r.L_c, "L_c", where);
    if (fr.count.density) {
        if (!sample.points)
            throw validation_error("sample " + sample.sample_id + ": density supervision needs point annotations");
        const Tensor target = density_target(*sample.points, sample.image.height, sample.image.width,
                                             fr.count.density->value().dim(0), fr.count.density->value().dim(1));
        ad::Var l_d = density_loss_var(*fr.count.density, target);
        r.L_density = l_d.value().data[0];
        check_finite(*r.L_density, "L_density", where);
        total = ad::add(total, l_d);
    }
    r.total = total.value().data[0];
    if (grads) {
        tape.backward(ad::scale(total, 1.0 / batch_size));
        tape.accumulate_param_grads(*grads);
    }
    return r;
}

StepReport train_step(TrainState& state, const std::vector<SceneSample>& train_set) {
    const TrainConfig tc = train_config_from(state.config);
    const int step = state.step + 1;
    const auto idx = batch_indices(state.seed, step, tc.batch_size, static_cast<int>(train_set.size()));
    const double b = static_cast<double>(idx.size());
    GradStore grads;
    StepReport rep;
    rep.step = step;
    bool any_density = false;
    double density_sum = 0.0;
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const SceneSample& src = train_set[static_cast<std::size_t>(idx[j])];
        LossReport r;
        if (tc.augment) {
            const SceneSample aug = augment(src, mix_seed(state.seed, static_cast<std::uint64_t>(step), j + 1),
                                            tc.augmentation);
            r = sample_loss(state.model, aug, tc.variant, b, &grads);
        } else {
            r = sample_loss(state.model, src, tc.variant, b, &grads);
        }
        rep.loss.L_l += r.L_l / b;
        rep.loss.L_c += r.L_c / b;
        if (r.L_density) {
            any_density = true;
            density_sum += *r.L_density / b;
        }
    }
    if (any_density) rep.loss.L_density = density_sum;
    rep.loss.total = rep.loss.L_l + rep.loss.L_c + (any_density ? density_sum : 0.0);
    check_finite(rep.loss.total, "total loss", "at step " + std::to_string(step));

    for (auto it = grads.begin(); it != grads.end();) {
        it = state.model.params.is_frozen(it->first) ? grads.erase(it) : std::next(it);
    }
    rep.grad_norm = clip_grad_norm(grads, tc.clip_norm);
    check_finite(rep.grad_norm, "gradient norm", "at step " + std::to_string(step));
    state.optimizer.step(state.model.params, grads);
    state.step = step;
    state.loss_sum += rep.loss.total;
    state.loss_count += 1;
    return rep;
}

void train(TrainState& state, const std::vector<SceneSample>& train_set, const std::vector<SceneSample>& val_set,
           const std::filesystem::path& checkpoint, const TrainCallbacks& callbacks) {
    const TrainConfig tc = train_config_from(state.config);
    XC_EXPECT(!train_set.empty(), "training set is empty");
    while (state.step < tc.steps) {
        const StepReport rep = train_step(state, train_set);
        if (callbacks.on_step) callbacks.on_step(rep);
        if (state.step % tc.val_every == 0 || state.step == tc.steps) {
            HistoryEntry h;
            h.step = state.step;
            h.train_loss = state.loss_sum / std::max(1, state.loss_count);
            if (!val_set.empty()) {
                const Evaluation ev = evaluate(state.model, val_set, tc.variant);
                h.val_mae = ev.metrics.mae;
                h.val_rmse = ev.metrics.rmse;
            } else {
                h.val_mae = h.val_rmse = std::nan("");
            }
            state.history.push_back(h);
            state.loss_sum = 0.0;
            state.loss_count = 0;
            if (callbacks.on_eval) callbacks.on_eval(h);
            if (!checkpoint.empty()) save_checkpoint(state, checkpoint);
        }
    }
}

Evaluation evaluate(const Model& model, const std::vector<SceneSample>& dataset, Variant variant) {
    XC_EXPECT(!dataset.empty(), "evaluate on an empty dataset");
    Evaluation ev;
    std::vector<double> pred, gt;
    for (const auto& s : dataset) {
        const Prediction p = predict(model, s, variant);
        ev.samples.push_back({s.sample_id, static_cast<double>(s.count), p.count, p.boxes});
        pred.push_back(p.count);
        gt.push_back(static_cast<double>(s.count));
    }
    ev.metrics = metrics(pred, gt);
    return ev;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    return out;
}

} // namespace

void write_report_csv(const Evaluation& eval, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "sample_id,count_gt,count_pred,boxes\n";
    for (const auto& s : eval.samples) {
        out << s.sample_id << ',' << fmt_double(s.count_gt) << ',' << fmt_double(s.count_pred) << ',';
        for (std::size_t k = 0; k < s.boxes.size(); ++k) {
            const BBox& b = s.boxes[k];
            out << (k ? "|" : "") << fmt_double(b.x) << ' ' << fmt_double(b.y) << ' ' << fmt_double(b.h) << ' '
                << fmt_double(b.w);
        }
        out << '\n';
    }
    if (!out) throw io_error("failed writing " + path.string());
}

// --- checkpoint -------------------------------------------------------------
// Layout: "XCKPT001", uint64 header length, JSON header, raw float64 payload
// in header order. Native byte order (little-endian on every supported host).

namespace {

constexpr char kMagic[8] = {'X', 'C', 'K', 'P', 'T', '0', '0', '1'};

struct Entry {
    std::string name;
    const Tensor* tensor;
};

} // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
    Tensor history({static_cast<int>(state.history.size()), 4});
    for (std::size_t i = 0; i < state.history.size(); ++i) {
        const auto& h = state.history[i];
        const int r = static_cast<int>(i);
        history.at(r, 0) = h.step;
        history.at(r, 1) = h.train_loss;
        history.at(r, 2) = h.val_mae;
        history.at(r, 3) = h.val_rmse;
    }
    Tensor loss_acc({2}, std::vector<double>{state.loss_sum, static_cast<double>(state.loss_count)});

    std::vector<Entry> entries;
    for (const auto& [name, t] : state.model.params.all()) entries.push_back({"param/" + name, &t});
    for (const auto& [name, t] : state.optimizer.first_moments()) entries.push_back({"adam.m/" + name, &t});
    for (const auto& [name, t] : state.optimizer.second_moments()) entries.push_back({"adam.v/" + name, &t});
    entries.push_back({"trainer/history", &history});
    entries.push_back({"trainer/loss_acc", &loss_acc});

    json tensors = json::array();
    for (const auto& e : entries) tensors.push_back({{"name", e.name}, {"shape", e.tensor->shape}});
    json header = {{"format", "expresscount-checkpoint"},
                   {"version", 1},
                   {"config", state.config},
                   {"config_hash", config_hash(state.config)},
                   {"step", state.step},
                   {"seed", state.seed},
                   {"optimizer_steps", state.optimizer.steps()},
                   {"vocabulary", state.model.vocab.to_json()},
                   {"tensors", tensors}};
    const std::string text = header.dump();

    // Write to a sibling temp file and rename so a crash never leaves a
    // truncated checkpoint behind.
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        auto out = open_out(tmp);
        out.write(kMagic, sizeof kMagic);
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& e : entries)
            out.write(reinterpret_cast<const char*>(e.tensor->data.data()),
                      static_cast<std::streamsize>(e.tensor->data.size() * sizeof(double)));
        out.flush();
        if (!out) throw io_error("failed writing checkpoint " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw load_error("cannot open checkpoint " + path.string());
    char magic[sizeof kMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw load_error(path.string() + " is not an expresscount checkpoint");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (1ull << 32)) throw load_error("corrupt checkpoint header in " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw load_error("truncated checkpoint header in " + path.string());
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw load_error("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    if (header.value("format", "") != "expresscount-checkpoint" || header.value("version", 0) != 1)
        throw load_error("unsupported checkpoint format in " + path.string());

    const json config = header.at("config");
    if (header.at("config_hash").get<std::string>() != config_hash(config))
        throw load_error("checkpoint config hash mismatch in " + path.string());
    const Vocabulary vocab = Vocabulary::from_json(header.at("vocabulary"));
    TrainState state = init_train_state(config, vocab);
    state.step = header.at("step").get<int>();
    state.seed = header.at("seed").get<std::uint64_t>();
    state.optimizer.set_steps(header.at("optimizer_steps").get<std::int64_t>());

    std::map<std::string, Tensor> params;
    Tensor history, loss_acc;
    for (const auto& t : header.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        Tensor value(t.at("shape").get<std::vector<int>>(), 0.0);
        in.read(reinterpret_cast<char*>(value.data.data()), static_cast<std::streamsize>(value.data.size() * sizeof(double)));
        if (!in) throw load_error("truncated checkpoint payload at " + name + " in " + path.string());
        if (name.rfind("param/", 0) == 0) {
            params.emplace(name.substr(6), std::move(value));
        } else if (name.rfind("adam.m/", 0) == 0) {
            state.optimizer.first_moments()[name.substr(7)] = std::move(value);
        } else if (name.rfind("adam.v/", 0) == 0) {
            state.optimizer.second_moments()[name.substr(7)] = std::move(value);
        } else if (name == "trainer/history") {
            history = std::move(value);
        } else if (name == "trainer/loss_acc") {
            loss_acc = std::move(value);
        } else {
            throw load_error("unknown checkpoint entry '" + name + "' in " + path.string());
        }
    }
    if (params.size() != state.model.params.all().size())
        throw load_error("checkpoint " + path.string() + " has " + std::to_string(params.size()) +
                         " parameters, model expects " + std::to_string(state.model.params.all().size()));
    const auto unknown = state.model.params.load_from(params);
    if (!unknown.empty()) throw load_error("checkpoint parameter '" + unknown.front() + "' is not part of the model");
    if (history.rank() == 2) {
        for (int r = 0; r < history.rows(); ++r)
            state.history.push_back({static_cast<int>(history.at(r, 0)), history.at(r, 1), history.at(r, 2), history.at(r, 3)});
    }
    if (loss_acc.size() == 2) {
        state.loss_sum = loss_acc.data[0];
        state.loss_count = static_cast<int>(loss_acc.data[1]);
    }
    return state;
}

// --- curves -----------------------------------------------------------------

namespace {

void write_plot(const std::vector<HistoryEntry>& history, double HistoryEntry::*field, const std::string& title,
                const std::filesystem::path& path) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& h : history)
        if (std::isfinite(h.*field)) pts.emplace_back(h.step, h.*field);
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (!pts.empty()) {
        xmin = xmax = pts[0].first;
        ymin = ymax = pts[0].second;
        for (const auto& [x, y] : pts) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    const double W = 640, H = 360, L = 70, R = 20, T = 40, B = 50;
    const double xs = xmax > xmin ? xmax - xmin : 1.0;
    const double ys = ymax > ymin ? ymax - ymin : 1.0;
    auto px = [&](double x) { return L + (x - xmin) / xs * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - ymin) / ys * (H - T - B); };

    auto out = open_out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" data-xmin=\""
        << fmt_double(xmin) << "\" data-xmax=\"" << fmt_double(xmax) << "\" data-ymin=\"" << fmt_double(ymin)
        << "\" data-ymax=\"" << fmt_double(ymax) << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
        << title << "</text>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(ymax) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
        << fmt_double(ymax) << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(ymin) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
        << fmt_double(ymin) << "</text>\n";
    out << "<text x=\"" << L << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"11\">" << xmin
        << "</text>\n";
    out << "<text x=\"" << W - R << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"11\">" << xmax
        << "</text>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">step</text>\n";
    out << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : pts) out << px(x) << ',' << py(y) << ' ';
    out << "\"/>\n</svg>\n";
    if (!out) throw io_error("failed writing " + path.string());
}

} // namespace

CurveFiles emit_curves(const std::vector<HistoryEntry>& history, const std::filesystem::path& dir) {
    XC_EXPECT(!history.empty(), "emit_curves needs a non-empty history");
    CurveFiles files{dir / "curves.csv", dir / "train_loss.svg", dir / "val_mae.svg"};
    {
        auto out = open_out(files.csv);
        out << "step,train_loss,val_mae,val_rmse\n";
        for (const auto& h : history)
            out << h.step << ',' << fmt_double(h.train_loss) << ',' << fmt_double(h.val_mae) << ','
                << fmt_double(h.val_rmse) << '\n';
        if (!out) throw io_error("failed writing " + files.csv.string());
    }
    write_plot(history, &HistoryEntry::train_loss, "train loss", files.loss_plot);
    write_plot(history, &HistoryEntry::val_mae, "val MAE", files.mae_plot);
    return files;
}

std::vector<HistoryEntry> read_curves_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw load_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "step,train_loss,val_mae,val_rmse")
        throw load_error(path.string() + ": unexpected curve CSV header");
    std::vector<HistoryEntry> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 4) throw load_error(path.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
        try {
            out.push_back({std::stoi(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3])});
        } catch (const std::exception&) {
            throw load_error(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    if (out.empty()) throw load_error(path.string() + " has no rows");
    return out;
}

} // namespace expresscount
