#include "expresscount/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <spdlog/spdlog.h>

#include "expresscount/errors.hpp"
#include "expresscount/rng.hpp"

namespace expresscount {

using nlohmann::json;
namespace fs = std::filesystem;

// --- boxes ------------------------------------------------------------------

bool is_valid(const BBox& b) {
    const auto in01 = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
    return in01(b.x) && in01(b.y) && in01(b.h) && in01(b.w) && b.x + b.w <= 1.0 + kBoxEps &&
           b.y + b.h <= 1.0 + kBoxEps;
}

bool clamp_box(BBox& b) {
    const BBox before = b;
    for (double* v : {&b.x, &b.y, &b.h, &b.w}) *v = std::clamp(*v, 0.0, 1.0);
    b.w = std::min(b.w, 1.0 - b.x);
    b.h = std::min(b.h, 1.0 - b.y);
    return !(before == b);
}

double box_iou(const BBox& a, const BBox& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// --- enums ------------------------------------------------------------------

std::string to_string(PromptKind kind) {
    switch (kind) {
    case PromptKind::null: return "null";
    case PromptKind::class_name: return "class_name";
    case PromptKind::question: return "question";
    case PromptKind::fine_grained: return "fine_grained";
    }
    throw contract_error("unknown prompt kind");
}

PromptKind parse_prompt_kind(std::string_view t) {
    if (t == "null") return PromptKind::null;
    if (t == "class_name") return PromptKind::class_name;
    if (t == "question") return PromptKind::question;
    if (t == "fine_grained") return PromptKind::fine_grained;
    throw validation_error("unknown prompt_kind '" + std::string(t) + "'");
}

std::string to_string(ShapeKind s) {
    switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    }
    throw contract_error("unknown shape");
}

std::string plural(ShapeKind s) { return to_string(s) + "s"; }

ShapeKind parse_shape(std::string_view t) {
    if (t == "circle") return ShapeKind::circle;
    if (t == "square") return ShapeKind::square;
    if (t == "triangle") return ShapeKind::triangle;
    throw validation_error("unknown shape '" + std::string(t) + "'");
}

std::string to_string(Layout l) {
    switch (l) {
    case Layout::scatter: return "scatter";
    case Layout::cluster: return "cluster";
    case Layout::grid: return "grid";
    }
    throw contract_error("unknown layout");
}

Layout parse_layout(std::string_view t) {
    if (t == "scatter") return Layout::scatter;
    if (t == "cluster") return Layout::cluster;
    if (t == "grid") return Layout::grid;
    throw validation_error("unknown layout '" + std::string(t) + "'");
}

std::string to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    throw contract_error("unknown split");
}

Split parse_split(std::string_view t) {
    if (t == "train") return Split::train;
    if (t == "val") return Split::val;
    if (t == "test") return Split::test;
    throw validation_error("unknown split '" + std::string(t) + "'");
}

// --- sample validation ------------------------------------------------------

namespace {

[[noreturn]] void invalid(const std::string& id, const std::string& field, const std::string& why) {
    throw validation_error("sample '" + id + "': field \"" + field + "\" " + why);
}

} // namespace

void validate(const SceneSample& s) {
    if (s.sample_id.empty()) invalid(s.sample_id, "sample_id", "is empty");
    const auto& a = s.annotation;
    if (a.prompt_kind == PromptKind::null && !a.text.empty()) invalid(s.sample_id, "expression", "must be empty for prompt_kind null");
    if (a.prompt_kind != PromptKind::null && a.text.empty()) invalid(s.sample_id, "expression", "is empty");
    if (s.exemplar_boxes.empty()) invalid(s.sample_id, "exemplar_boxes", "needs at least one box");
    for (const auto& b : s.exemplar_boxes)
        if (!is_valid(b)) invalid(s.sample_id, "exemplar_boxes", "contains a box outside the unit square");
    if (s.count < 0) invalid(s.sample_id, "count", "is negative");
    if (s.count < static_cast<int>(s.exemplar_boxes.size())) invalid(s.sample_id, "count", "is smaller than the number of exemplar boxes");
    if (s.points && static_cast<int>(s.points->size()) != s.count) invalid(s.sample_id, "points", "length differs from count");
}

// --- records ----------------------------------------------------------------

namespace {

json geometry_to_json(const SceneGeometry& g) {
    json classes = json::array();
    for (const auto& e : g.classes)
        classes.push_back({{"shape", to_string(e.cls.shape)}, {"color", e.cls.color}, {"count", e.count}});
    return {{"classes", classes}, {"target", g.target}, {"layout", to_string(g.layout)}};
}

SceneGeometry geometry_from_json(const json& j) {
    SceneGeometry g;
    for (const auto& c : j.at("classes"))
        g.classes.push_back({{parse_shape(c.at("shape").get<std::string>()), c.at("color").get<std::string>()},
                             c.at("count").get<int>()});
    g.target = j.at("target").get<int>();
    g.layout = parse_layout(j.at("layout").get<std::string>());
    return g;
}

} // namespace

json record_to_json(const SceneSample& s) {
    json boxes = json::array();
    for (const auto& b : s.exemplar_boxes) boxes.push_back({b.x, b.y, b.h, b.w});
    json j = {{"sample_id", s.sample_id},
              {"image", s.image_file},
              {"expression", s.annotation.text},
              {"prompt_kind", to_string(s.annotation.prompt_kind)},
              {"class_name", s.annotation.class_name},
              {"exemplar_boxes", boxes},
              {"count", s.count}};
    if (s.points) {
        json pts = json::array();
        for (const auto& p : *s.points) pts.push_back({p.row, p.col});
        j["points"] = pts;
    }
    if (s.scene) j["scene"] = geometry_to_json(*s.scene);
    return j;
}

SceneSample record_from_json(const json& j) {
    SceneSample s;
    if (!j.is_object()) throw validation_error("annotation record is not a JSON object");
    if (!j.contains("sample_id") || !j["sample_id"].is_string()) invalid("?", "sample_id", "is missing or not a string");
    s.sample_id = j["sample_id"].get<std::string>();
    const std::string& id = s.sample_id;
    auto require_string = [&](const char* key) -> std::string {
        if (!j.contains(key) || !j[key].is_string()) invalid(id, key, "is missing or not a string");
        return j[key].get<std::string>();
    };
    s.image_file = require_string("image");
    s.annotation.text = require_string("expression");
    try {
        s.annotation.prompt_kind = parse_prompt_kind(require_string("prompt_kind"));
    } catch (const validation_error& e) {
        invalid(id, "prompt_kind", e.what());
    }
    if (j.contains("class_name")) {
        if (!j["class_name"].is_string()) invalid(id, "class_name", "is not a string");
        s.annotation.class_name = j["class_name"].get<std::string>();
    }
    if (!j.contains("count") || !j["count"].is_number_integer()) invalid(id, "count", "is missing or not an integer");
    s.count = j["count"].get<int>();
    if (s.count < 0) invalid(id, "count", "is negative");
    if (!j.contains("exemplar_boxes") || !j["exemplar_boxes"].is_array()) invalid(id, "exemplar_boxes", "is missing or not an array");
    for (const auto& b : j["exemplar_boxes"]) {
        if (!b.is_array() || b.size() != 4) invalid(id, "exemplar_boxes", "entries must be [x,y,h,w]");
        for (const auto& v : b)
            if (!v.is_number()) invalid(id, "exemplar_boxes", "entries must be numeric");
        BBox box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        if (!std::isfinite(box.x + box.y + box.h + box.w)) invalid(id, "exemplar_boxes", "contains a non-finite value");
        if (clamp_box(box))
            spdlog::warn("sample '{}': exemplar box [{}, {}, {}, {}] clamped to [{}, {}, {}, {}]", id, b[0].get<double>(),
                         b[1].get<double>(), b[2].get<double>(), b[3].get<double>(), box.x, box.y, box.h, box.w);
        s.exemplar_boxes.push_back(box);
    }
    if (j.contains("points") && !j["points"].is_null()) {
        if (!j["points"].is_array()) invalid(id, "points", "is not an array");
        std::vector<Point> pts;
        for (const auto& p : j["points"]) {
            if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
                invalid(id, "points", "entries must be [row,col]");
            pts.push_back({p[0].get<double>(), p[1].get<double>()});
        }
        s.points = std::move(pts);
    }
    if (j.contains("scene")) {
        try {
            s.scene = geometry_from_json(j["scene"]);
        } catch (const std::exception& e) {
            invalid(id, "scene", std::string("is malformed: ") + e.what());
        }
    }
    validate(s);
    return s;
}

fs::path annotation_path(const fs::path& root, Split split) { return root / (to_string(split) + ".jsonl"); }

std::vector<SceneSample> load_dataset(const fs::path& root, Split split) {
    const fs::path file = annotation_path(root, split);
    std::ifstream in(file);
    if (!in) throw load_error("cannot open annotation file " + file.string());
    std::vector<SceneSample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw validation_error(file.string() + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        SceneSample s = record_from_json(j);
        const fs::path img = root / s.image_file;
        if (!fs::exists(img)) throw load_error("sample '" + s.sample_id + "': image file " + img.string() + " not found");
        s.image = load_image(img);
        out.push_back(std::move(s));
    }
    return out;
}

void save_dataset(const std::vector<SceneSample>& samples, const fs::path& root, Split split) {
    fs::create_directories(root / "images");
    const fs::path file = annotation_path(root, split);
    std::ofstream out(file);
    if (!out) throw io_error("cannot write annotation file " + file.string());
    for (const auto& s0 : samples) {
        SceneSample s = s0;
        validate(s);
        if (s.image_file.empty()) s.image_file = "images/" + s.sample_id + ".png";
        if (!s.image.empty()) save_image(s.image, root / s.image_file);
        out << record_to_json(s).dump() << '\n';
    }
    if (!out) throw io_error("failed writing " + file.string());
}

// --- expressions ------------------------------------------------------------

std::string quantifier_for(int count) {
    if (count <= 1) return "a";
    if (count <= 4) return "a few";
    if (count <= 9) return "a bunch of";
    return "a pile of";
}

namespace {

std::string layout_phrase(Layout l) {
    switch (l) {
    case Layout::scatter: return "scattered on a plain background";
    case Layout::cluster: return "clustered together on a plain background";
    case Layout::grid: return "arranged in a grid on a plain background";
    }
    throw contract_error("unknown layout");
}

const std::map<std::string, std::array<unsigned char, 3>>& palette() {
    static const std::map<std::string, std::array<unsigned char, 3>> p = {
        {"red", {220, 40, 40}},     {"green", {40, 180, 60}},  {"blue", {40, 80, 220}},
        {"yellow", {230, 210, 40}}, {"purple", {150, 60, 190}}, {"orange", {240, 140, 30}},
        {"white", {245, 245, 245}}, {"black", {20, 20, 20}},
    };
    return p;
}

constexpr unsigned char kBackground = 128;

} // namespace

ExpressionAnnotation render_expression(const SceneGeometry& scene, PromptKind kind) {
    XC_EXPECT(scene.target >= 0 && scene.target < static_cast<int>(scene.classes.size()),
              "scene target index out of range");
    const auto& t = scene.classes[static_cast<std::size_t>(scene.target)];
    ExpressionAnnotation a;
    a.prompt_kind = kind;
    a.class_name = to_string(t.cls.shape);
    switch (kind) {
    case PromptKind::null: break;
    case PromptKind::class_name: a.text = a.class_name; break;
    case PromptKind::question: a.text = "What is the number of the " + a.class_name + "?"; break;
    case PromptKind::fine_grained:
        a.text = quantifier_for(t.count) + " " + t.cls.color + " " +
                 (t.count == 1 ? to_string(t.cls.shape) : plural(t.cls.shape)) + " " + layout_phrase(scene.layout);
        break;
    default: throw contract_error("unknown prompt kind");
    }
    return a;
}

std::vector<std::string> expression_lexicon() {
    std::vector<std::string> words = {"a", "few", "bunch", "of", "pile", "what", "is", "the", "number"};
    for (const auto& [name, _] : palette()) words.push_back(name);
    for (auto s : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle}) {
        words.push_back(to_string(s));
        words.push_back(plural(s));
    }
    for (auto l : {Layout::scatter, Layout::cluster, Layout::grid}) {
        std::string phrase = layout_phrase(l);
        std::size_t pos = 0;
        while (pos < phrase.size()) {
            const std::size_t end = phrase.find(' ', pos);
            words.push_back(phrase.substr(pos, end - pos));
            if (end == std::string::npos) break;
            pos = end + 1;
        }
    }
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    return words;
}

// --- synthetic generation ---------------------------------------------------

void validate(const SyntheticSpec& s) {
    auto bad = [](const std::string& m) { throw validation_error("synthetic spec: " + m); };
    if (s.canvas_size < 16) bad("canvas_size must be at least 16");
    if (s.shape_classes.empty()) bad("shape_classes is empty");
    for (const auto& c : s.shape_classes)
        if (!palette().count(c.color)) bad("unknown color '" + c.color + "'");
    for (std::size_t i = 0; i < s.shape_classes.size(); ++i)
        for (std::size_t k = i + 1; k < s.shape_classes.size(); ++k)
            if (s.shape_classes[i] == s.shape_classes[k]) bad("duplicate shape class");
    if (s.min_instances < 1) bad("instances_per_class min must be >= 1");
    if (s.max_instances < s.min_instances) bad("instances_per_class max < min");
    if (s.min_size < 3 || s.max_size < s.min_size) bad("size_range invalid");
    if (s.max_size > s.canvas_size) bad("size_range exceeds canvas");
    if (s.n_exemplars < 1) bad("n_exemplars must be >= 1");
}

json to_json(const SyntheticSpec& s) {
    json classes = json::array();
    for (const auto& c : s.shape_classes) classes.push_back({{"shape", to_string(c.shape)}, {"color", c.color}});
    return {{"canvas_size", s.canvas_size},
            {"shape_classes", classes},
            {"instances_per_class", {s.min_instances, s.max_instances}},
            {"size_range", {s.min_size, s.max_size}},
            {"seed", s.seed},
            {"layout", to_string(s.layout)},
            {"prompt_kind", to_string(s.prompt_kind)},
            {"n_exemplars", s.n_exemplars}};
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
    SyntheticSpec s;
    try {
        s.canvas_size = j.value("canvas_size", s.canvas_size);
        if (j.contains("shape_classes")) {
            s.shape_classes.clear();
            for (const auto& c : j.at("shape_classes"))
                s.shape_classes.push_back({parse_shape(c.at("shape").get<std::string>()), c.at("color").get<std::string>()});
        }
        if (j.contains("instances_per_class")) {
            s.min_instances = j["instances_per_class"].at(0).get<int>();
            s.max_instances = j["instances_per_class"].at(1).get<int>();
        }
        if (j.contains("size_range")) {
            s.min_size = j["size_range"].at(0).get<int>();
            s.max_size = j["size_range"].at(1).get<int>();
        }
        s.seed = j.value("seed", s.seed);
        if (j.contains("layout")) s.layout = parse_layout(j["layout"].get<std::string>());
        if (j.contains("prompt_kind")) s.prompt_kind = parse_prompt_kind(j["prompt_kind"].get<std::string>());
        s.n_exemplars = j.value("n_exemplars", s.n_exemplars);
    } catch (const json::exception& e) {
        throw validation_error(std::string("synthetic spec: ") + e.what());
    }
    validate(s);
    return s;
}

namespace {

struct Placed {
    int cls;
    int y, x, size;
};

struct Rendered {
    BBox box;
    Point centroid;
};

bool overlaps(const Placed& a, int y, int x, int size, int gap) {
    return !(x >= a.x + a.size + gap || a.x >= x + size + gap || y >= a.y + a.size + gap || a.y >= y + size + gap);
}

bool inside_shape(ShapeKind shape, int size, double py, double px) {
    // py, px: pixel centre relative to the shape's bounding square
    const double s = size;
    switch (shape) {
    case ShapeKind::square: return true;
    case ShapeKind::circle: {
        const double r = s / 2.0;
        return (py - r) * (py - r) + (px - r) * (px - r) <= r * r;
    }
    case ShapeKind::triangle: return std::abs(px - s / 2.0) <= py / 2.0;
    }
    return false;
}

// Draws one instance; returns the tight box of the painted pixels.
Rendered paint(Image& img, const Placed& p, ShapeKind shape, const std::array<unsigned char, 3>& rgb) {
    int y0 = img.height, x0 = img.width, y1 = -1, x1 = -1;
    double sr = 0, sc = 0;
    int n = 0;
    for (int dy = 0; dy < p.size; ++dy)
        for (int dx = 0; dx < p.size; ++dx) {
            if (!inside_shape(shape, p.size, dy + 0.5, dx + 0.5)) continue;
            const int y = p.y + dy, x = p.x + dx;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[static_cast<std::size_t>(c)] / 255.0;
            y0 = std::min(y0, y);
            x0 = std::min(x0, x);
            y1 = std::max(y1, y);
            x1 = std::max(x1, x);
            sr += y + 0.5;
            sc += x + 0.5;
            ++n;
        }
    const double H = img.height, W = img.width;
    return {{x0 / W, y0 / H, (y1 - y0 + 1) / H, (x1 - x0 + 1) / W}, {sr / n, sc / n}};
}

struct SceneLayout {
    std::vector<Placed> placed;
    std::vector<int> counts;
};

std::optional<SceneLayout> try_layout(const SyntheticSpec& spec, Rng& rng) {
    const int C = spec.canvas_size;
    const int n_cls = static_cast<int>(spec.shape_classes.size());
    constexpr int gap = 2;
    constexpr int attempts = 200;
    SceneLayout out;
    out.counts.assign(static_cast<std::size_t>(n_cls), 0);

    std::vector<int> wanted(static_cast<std::size_t>(n_cls));
    for (auto& w : wanted) w = rng.uniform_int(spec.min_instances, spec.max_instances);

    // grid cells, shuffled once per scene
    const int cell = spec.max_size + gap;
    std::vector<std::pair<int, int>> cells;
    for (int gy = 0; gy + cell <= C + gap; gy += cell)
        for (int gx = 0; gx + cell <= C + gap; gx += cell) cells.emplace_back(gy, gx);
    for (std::size_t i = cells.size(); i > 1; --i)
        std::swap(cells[i - 1], cells[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    std::size_t next_cell = 0;

    for (int c = 0; c < n_cls; ++c) {
        const double cy = rng.uniform(C * 0.25, C * 0.75);
        const double cx = rng.uniform(C * 0.25, C * 0.75);
        for (int k = 0; k < wanted[static_cast<std::size_t>(c)]; ++k) {
            bool ok = false;
            for (int a = 0; a < attempts && !ok; ++a) {
                const int size = rng.uniform_int(spec.min_size, spec.max_size);
                int y = 0, x = 0;
                switch (spec.layout) {
                case Layout::scatter:
                    y = rng.uniform_int(0, C - size);
                    x = rng.uniform_int(0, C - size);
                    break;
                case Layout::cluster:
                    y = std::clamp(static_cast<int>(std::lround(cy + rng.normal() * C / 8.0 - size / 2.0)), 0, C - size);
                    x = std::clamp(static_cast<int>(std::lround(cx + rng.normal() * C / 8.0 - size / 2.0)), 0, C - size);
                    break;
                case Layout::grid: {
                    if (next_cell >= cells.size()) {
                        a = attempts;
                        continue;
                    }
                    const auto [gy, gx] = cells[next_cell];
                    y = gy + rng.uniform_int(0, spec.max_size - size);
                    x = gx + rng.uniform_int(0, spec.max_size - size);
                    break;
                }
                }
                if (y + size > C || x + size > C) continue;
                ok = std::none_of(out.placed.begin(), out.placed.end(),
                                  [&](const Placed& p) { return overlaps(p, y, x, size, gap); });
                if (ok) {
                    out.placed.push_back({c, y, x, size});
                    if (spec.layout == Layout::grid) ++next_cell;
                }
            }
            if (!ok) break;
            ++out.counts[static_cast<std::size_t>(c)];
        }
        if (out.counts[static_cast<std::size_t>(c)] < spec.min_instances) return std::nullopt;
    }
    return out;
}

SceneSample generate_one(const SyntheticSpec& spec, int index) {
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index), 0x5ce4e));
    std::optional<SceneLayout> layout;
    for (int retry = 0; retry < 10 && !layout; ++retry) layout = try_layout(spec, rng);
    if (!layout)
        throw generation_error("cannot place " + std::to_string(spec.min_instances) +
                               " non-overlapping instances per class for spec " + to_json(spec).dump());

    const int C = spec.canvas_size;
    Image img(C, C, kBackground / 255.0);
    const int n_cls = static_cast<int>(spec.shape_classes.size());
    const int target = rng.uniform_int(0, n_cls - 1);
    std::vector<Rendered> target_instances;
    for (const auto& p : layout->placed) {
        const auto& cls = spec.shape_classes[static_cast<std::size_t>(p.cls)];
        Rendered r = paint(img, p, cls.shape, palette().at(cls.color));
        if (p.cls == target) target_instances.push_back(r);
    }

    SceneSample s;
    s.sample_id = "syn_" + std::to_string(spec.seed) + "_" + std::to_string(index);
    s.image = std::move(img);
    s.count = static_cast<int>(target_instances.size());

    // Exemplars: distinct target instances in random order.
    std::vector<int> order(target_instances.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    const std::size_t n_ex = std::min<std::size_t>(static_cast<std::size_t>(spec.n_exemplars), order.size());
    for (std::size_t i = 0; i < n_ex; ++i) s.exemplar_boxes.push_back(target_instances[static_cast<std::size_t>(order[i])].box);

    std::vector<Point> pts;
    for (const auto& r : target_instances) pts.push_back(r.centroid);
    s.points = std::move(pts);

    SceneGeometry g;
    for (int c = 0; c < n_cls; ++c)
        g.classes.push_back({spec.shape_classes[static_cast<std::size_t>(c)], layout->counts[static_cast<std::size_t>(c)]});
    g.target = target;
    g.layout = spec.layout;
    s.annotation = render_expression(g, spec.prompt_kind);
    s.scene = std::move(g);
    s.image_file = "images/" + s.sample_id + ".png";
    return s;
}

} // namespace

std::vector<SceneSample> generate_synthetic(const SyntheticSpec& spec, int n_samples) {
    validate(spec);
    XC_EXPECT(n_samples >= 1, "generate_synthetic needs n_samples >= 1");
    std::vector<SceneSample> out;
    out.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) out.push_back(generate_one(spec, i));
    return out;
}

void write_synthetic_corpus(const SyntheticSpec& spec, int n_samples, const fs::path& root, Split split) {
    const auto samples = generate_synthetic(spec, n_samples);
    save_dataset(samples, root, split);
    std::ofstream sidecar(root / "spec.json");
    if (!sidecar) throw io_error("cannot write " + (root / "spec.json").string());
    json j = to_json(spec);
    j["n_samples"] = n_samples;
    j["split"] = to_string(split);
    sidecar << j.dump(2) << '\n';
}

// --- augmentation -----------------------------------------------------------

SceneSample apply_reshape(const SceneSample& sample, const ReshapeParams& p) {
    const int H = sample.image.height;
    const int W = sample.image.width;
    const int ch = std::max(1, static_cast<int>(std::lround(p.scale_y * H)));
    const int cw = std::max(1, static_cast<int>(std::lround(p.scale_x * W)));
    const int Ch = std::max(H, ch);
    const int Cw = std::max(W, cw);
    XC_EXPECT(p.offset_y >= 0 && p.offset_x >= 0 && p.offset_y + ch <= Ch && p.offset_x + cw <= Cw,
              "reshape offset outside the padded canvas");

    SceneSample out = sample;
    const auto fill = mean_color(sample.image);
    Image canvas(Ch, Cw);
    for (int y = 0; y < Ch; ++y)
        for (int x = 0; x < Cw; ++x)
            for (int c = 0; c < 3; ++c) canvas.at(y, x, c) = fill[static_cast<std::size_t>(c)];
    const Image content = resize_image(sample.image, ch, cw);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
            for (int c = 0; c < 3; ++c) canvas.at(p.offset_y + y, p.offset_x + x, c) = content.at(y, x, c);
    out.image = resize_image(canvas, H, W);

    for (auto& b : out.exemplar_boxes) {
        b.x = (p.offset_x + b.x * cw) / Cw;
        b.w = b.w * cw / Cw;
        b.y = (p.offset_y + b.y * ch) / Ch;
        b.h = b.h * ch / Ch;
        clamp_box(b);
    }
    if (out.points)
        for (auto& pt : *out.points) {
            pt.col = (p.offset_x + pt.col * cw / W) * W / Cw;
            pt.row = (p.offset_y + pt.row * ch / H) * H / Ch;
        }
    return out;
}

SceneSample apply_erase(const SceneSample& sample, const EraseRect& r) {
    SceneSample out = sample;
    const auto fill = mean_color(sample.image);
    for (int y = r.y0; y < r.y0 + r.h; ++y)
        for (int x = r.x0; x < r.x0 + r.w; ++x)
            for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = fill[static_cast<std::size_t>(c)];
    return out;
}

namespace {

double coverage(const BBox& b, const EraseRect& r, int H, int W) {
    const double bx0 = b.x * W, bx1 = (b.x + b.w) * W, by0 = b.y * H, by1 = (b.y + b.h) * H;
    const double ix = std::max(0.0, std::min(bx1, static_cast<double>(r.x0 + r.w)) - std::max(bx0, static_cast<double>(r.x0)));
    const double iy = std::max(0.0, std::min(by1, static_cast<double>(r.y0 + r.h)) - std::max(by0, static_cast<double>(r.y0)));
    const double area = (bx1 - bx0) * (by1 - by0);
    return area > 0 ? ix * iy / area : 0.0;
}

} // namespace

SceneSample augment(const SceneSample& sample, std::uint64_t seed, const AugmentConfig& cfg, AugmentTrace* trace) {
    AugmentTrace local;
    AugmentTrace& tr = trace ? *trace : local;
    tr = {};
    if (sample.image.empty() || sample.image.height < 2 || sample.image.width < 2) return sample;
    Rng rng(seed);
    SceneSample out = sample;
    const int H = sample.image.height;
    const int W = sample.image.width;

    if (rng.bernoulli(cfg.reshape_prob)) {
        ReshapeParams p;
        p.scale_y = rng.uniform(cfg.min_scale, cfg.max_scale);
        p.scale_x = rng.uniform(cfg.min_scale, cfg.max_scale);
        const int ch = std::max(1, static_cast<int>(std::lround(p.scale_y * H)));
        const int cw = std::max(1, static_cast<int>(std::lround(p.scale_x * W)));
        p.offset_y = rng.uniform_int(0, std::max(H, ch) - ch);
        p.offset_x = rng.uniform_int(0, std::max(W, cw) - cw);
        out = apply_reshape(out, p);
        tr.reshape = p;
    }

    if (rng.bernoulli(cfg.erase_prob)) {
        for (int attempt = 0; attempt < cfg.max_erase_attempts; ++attempt) {
            ++tr.erase_attempts;
            const double area = rng.uniform(cfg.min_erase_area, cfg.max_erase_area) * H * W;
            const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
            EraseRect r;
            r.h = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, H);
            r.w = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, W);
            r.y0 = rng.uniform_int(0, H - r.h);
            r.x0 = rng.uniform_int(0, W - r.w);
            const bool protects = std::all_of(out.exemplar_boxes.begin(), out.exemplar_boxes.end(), [&](const BBox& b) {
                return coverage(b, r, H, W) <= cfg.max_box_coverage;
            });
            if (protects) {
                out = apply_erase(out, r);
                tr.erase = r;
                break;
            }
        }
    }
    return out;
}

// --- preprocessing ----------------------------------------------------------

Preprocessed preprocess(const SceneSample& sample, int input_size, const Normalization& norm) {
    if (input_size <= 0 || input_size % 32 != 0)
        throw config_error("input size " + std::to_string(input_size) + " is not a positive multiple of 32");
    XC_EXPECT(!sample.image.empty(), "sample '" + sample.sample_id + "' has no image");
    Tensor t = resize_bilinear(image_to_chw(sample.image), input_size, input_size);
    const std::size_t plane = static_cast<std::size_t>(input_size) * input_size;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            double& v = t.data[static_cast<std::size_t>(c) * plane + i];
            v = (v - norm.mean[c]) / norm.std[c];
        }
    return {std::move(t), sample.annotation};
}

} // namespace expresscount
