#include "expresscount/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>

#include "expresscount/annotate.hpp"
#include "expresscount/config.hpp"
#include "expresscount/errors.hpp"
#include "expresscount/training.hpp"

namespace expresscount {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Shared {
    std::string config;
    std::vector<std::string> overrides;
};

void add_config_flags(CLI::App* cmd, Shared& s) {
    cmd->add_option("--config", s.config, "JSON config file (defaults apply to missing keys)");
    cmd->add_option("--set", s.overrides, "Config override, dotted.key=value (repeatable)");
}

json resolve_config(const Shared& s) { return load_config(s.config, s.overrides); }

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw load_error("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw validation_error(p.string() + ": " + e.what());
    }
}

void write_json(const json& j, const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw io_error("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

int run_generate(const fs::path& spec_path, int n, const fs::path& out_dir, const std::string& split,
                 std::optional<std::uint64_t> seed, std::ostream& out) {
    if (n < 1) throw config_error("--n must be at least 1");
    SyntheticSpec spec = synthetic_spec_from_json(read_json(spec_path));
    if (seed) spec.seed = *seed;
    write_synthetic_corpus(spec, n, out_dir, parse_split(split));
    out << "wrote " << n << " samples to " << annotation_path(out_dir, parse_split(split)).string() << '\n';
    return 0;
}

int run_annotate(const Shared& shared, const fs::path& dataset, const std::string& split, const std::string& backend,
                 const std::string& endpoint, const fs::path& out_file, std::ostream& out) {
    const json cfg = resolve_config(shared);
    const AnnotateConfig ac = annotate_config_from(cfg);
    CaptionBackend be{parse_backend(backend), endpoint, ac.auth_env};
    const AnnotateStats stats = annotate_corpus(dataset, parse_split(split), protocol_from(ac), be, out_file, ac.concurrency);
    out << stats.to_json().dump() << '\n';
    return 0;
}

int run_train(const Shared& shared, const fs::path& data, const fs::path& out_dir, const fs::path& resume,
              bool quiet, std::ostream& out) {
    const std::vector<SceneSample> train_set = load_dataset(data, Split::train);
    std::vector<SceneSample> val_set;
    if (fs::exists(annotation_path(data, Split::val))) val_set = load_dataset(data, Split::val);
    fs::create_directories(out_dir);
    const fs::path ckpt = out_dir / "checkpoint.bin";

    TrainState state = [&] {
        if (!resume.empty()) {
            if (!shared.config.empty() || !shared.overrides.empty())
                throw config_error("--resume takes its config from the checkpoint; drop --config/--set");
            return load_checkpoint(resume);
        }
        const json cfg = resolve_config(shared);
        return init_train_state(cfg, build_vocabulary(train_set));
    }();
    write_json(state.config, out_dir / "config.json");
    state.model.vocab.save(out_dir / "vocab.json");

    TrainCallbacks cb;
    if (!quiet) {
        cb.on_eval = [&](const HistoryEntry& h) {
            out << "step " << h.step << " train_loss " << fmt(h.train_loss) << " val_mae " << fmt(h.val_mae)
                << " val_rmse " << fmt(h.val_rmse) << '\n';
            out.flush();
        };
    }
    train(state, train_set, val_set, ckpt, cb);
    save_checkpoint(state, ckpt);
    if (!state.history.empty()) emit_curves(state.history, out_dir);
    out << "checkpoint " << ckpt.string() << '\n';
    return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data, const std::string& split, const fs::path& report,
             std::ostream& out) {
    const TrainState state = load_checkpoint(ckpt);
    const auto dataset = load_dataset(data, parse_split(split));
    const Variant variant = train_config_from(state.config).variant;
    const Evaluation ev = evaluate(state.model, dataset, variant);
    if (!report.empty()) write_report_csv(ev, report);
    out << "samples " << ev.samples.size() << " mae " << fmt(ev.metrics.mae) << " rmse " << fmt(ev.metrics.rmse) << '\n';
    return 0;
}

int run_predict(const fs::path& ckpt, const fs::path& image_path, const std::string& text, const fs::path& vis_out,
                std::ostream& out) {
    const TrainState state = load_checkpoint(ckpt);
    SceneSample s;
    s.sample_id = image_path.stem().string();
    s.image = load_image(image_path);
    s.annotation = {text, PromptKind::fine_grained, ""};
    const Variant variant = train_config_from(state.config).variant;
    const Prediction p = predict(state.model, s, variant);
    out << std::setprecision(6) << std::fixed;
    for (const auto& b : p.boxes) out << b.x << ' ' << b.y << ' ' << b.h << ' ' << b.w << '\n';
    out << "count " << p.count << '\n';
    if (!vis_out.empty()) {
        Image canvas = s.image;
        for (const auto& b : p.boxes) {
            const int x0 = static_cast<int>(std::lround(b.x * canvas.width));
            const int y0 = static_cast<int>(std::lround(b.y * canvas.height));
            const int x1 = std::min(canvas.width - 1, static_cast<int>(std::lround((b.x + b.w) * canvas.width)) - 1);
            const int y1 = std::min(canvas.height - 1, static_cast<int>(std::lround((b.y + b.h) * canvas.height)) - 1);
            draw_rectangle(canvas, y0, x0, std::max(y0, y1), std::max(x0, x1), {1.0, 0.0, 1.0});
        }
        save_image(canvas, vis_out);
    }
    return 0;
}

int run_plot(const fs::path& ckpt, const fs::path& csv, const fs::path& out_dir, std::ostream& out) {
    if (ckpt.empty() == csv.empty()) throw config_error("plot-curves needs exactly one of --ckpt or --csv");
    const std::vector<HistoryEntry> history = ckpt.empty() ? read_curves_csv(csv) : load_checkpoint(ckpt).history;
    const CurveFiles files = emit_curves(history, out_dir);
    out << files.csv.string() << '\n' << files.loss_plot.string() << '\n' << files.mae_plot.string() << '\n';
    return 0;
}

} // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Expression-guided zero-shot object counting"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    Shared shared;

    std::string spec_path, gen_out, gen_split = "train";
    int gen_n = 0;
    std::optional<std::uint64_t> gen_seed;
    auto* gen = app.add_subcommand("generate", "Render a synthetic corpus");
    gen->add_option("--spec", spec_path, "Synthetic spec JSON")->required();
    gen->add_option("--n", gen_n, "Number of samples")->required();
    gen->add_option("--out", gen_out, "Dataset root")->required();
    gen->add_option("--split", gen_split, "train, val or test");
    gen->add_option("--seed", gen_seed, "Override the spec seed");

    std::string ann_dataset, ann_split = "train", ann_backend = "offline", ann_endpoint, ann_out;
    auto* ann = app.add_subcommand("annotate", "Write fine-grained expressions for a corpus");
    ann->add_option("--dataset", ann_dataset, "Dataset root")->required();
    ann->add_option("--split", ann_split, "train, val or test");
    ann->add_option("--backend", ann_backend, "http or offline");
    ann->add_option("--endpoint", ann_endpoint, "Caption service URL (http backend)");
    ann->add_option("--out", ann_out, "Output annotation file (.jsonl)")->required();
    add_config_flags(ann, shared);

    std::string tr_data, tr_out, tr_resume;
    bool tr_quiet = false;
    auto* tr = app.add_subcommand("train", "Train a model");
    tr->add_option("--data", tr_data, "Dataset root with train.jsonl (and optional val.jsonl)")->required();
    tr->add_option("--out", tr_out, "Run directory")->required();
    tr->add_option("--resume", tr_resume, "Continue from a checkpoint");
    tr->add_flag("--quiet", tr_quiet, "No per-evaluation progress lines");
    add_config_flags(tr, shared);

    std::string ev_ckpt, ev_data, ev_split = "val", ev_report;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
    ev->add_option("--data", ev_data, "Dataset root")->required();
    ev->add_option("--split", ev_split, "train, val or test");
    ev->add_option("--report", ev_report, "Per-sample CSV report");

    std::string pr_ckpt, pr_image, pr_text, pr_out;
    auto* pr = app.add_subcommand("predict-exemplar", "Predict exemplar boxes for one image and expression");
    pr->add_option("--ckpt", pr_ckpt, "Checkpoint file")->required();
    pr->add_option("--image", pr_image, "Image file")->required();
    pr->add_option("--text", pr_text, "Referring expression")->required();
    pr->add_option("--out", pr_out, "Visualization with the boxes drawn");

    std::string pl_ckpt, pl_csv, pl_out;
    auto* pl = app.add_subcommand("plot-curves", "Write loss and validation-MAE plots");
    pl->add_option("--ckpt", pl_ckpt, "Checkpoint with a training history");
    pl->add_option("--csv", pl_csv, "Curve CSV (step,train_loss,val_mae,val_rmse)");
    pl->add_option("--out", pl_out, "Output directory")->required();

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            // --help and --help-all, on the app or any subcommand.
            if (e.get_exit_code() == 0) {
                app.exit(e, out, err);
                return 0;
            }
            err << "error[E_USAGE]: " << e.what() << '\n';
            return 1;
        }
        if (*gen) return run_generate(spec_path, gen_n, gen_out, gen_split, gen_seed, out);
        if (*ann) return run_annotate(shared, ann_dataset, ann_split, ann_backend, ann_endpoint, ann_out, out);
        if (*tr) return run_train(shared, tr_data, tr_out, tr_resume, tr_quiet, out);
        if (*ev) return run_eval(ev_ckpt, ev_data, ev_split, ev_report, out);
        if (*pr) return run_predict(pr_ckpt, pr_image, pr_text, pr_out, out);
        if (*pl) return run_plot(pl_ckpt, pl_csv, pl_out, out);
        err << "error[E_USAGE]: no subcommand given\n";
        return 1;
    } catch (const error& e) {
        err << "error[" << e.code() << "]: " << e.what() << '\n';
        return e.is_user_error() ? 1 : 2;
    } catch (const std::exception& e) {
        err << "error[E_INTERNAL]: " << e.what() << '\n';
        return 2;
    }
}

} // namespace expresscount
