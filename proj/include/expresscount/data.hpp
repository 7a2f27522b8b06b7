#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "expresscount/image.hpp"
#include "expresscount/tensor.hpp"

namespace expresscount {

// Normalised exemplar rectangle; (x, y) is the top-left corner, x and w are
// fractions of the image width, y and h of the height.
struct BBox {
    double x = 0.0;
    double y = 0.0;
    double h = 0.0;
    double w = 0.0;
    bool operator==(const BBox&) const = default;
};

constexpr double kBoxEps = 1e-6;

bool is_valid(const BBox& box);
// Pulls a box back inside the unit square. Returns true when anything moved.
bool clamp_box(BBox& box);
double box_iou(const BBox& a, const BBox& b);

enum class PromptKind { null, class_name, question, fine_grained };
std::string to_string(PromptKind kind);
PromptKind parse_prompt_kind(std::string_view text);

struct ExpressionAnnotation {
    std::string text;
    PromptKind prompt_kind = PromptKind::null;
    std::string class_name;
    bool operator==(const ExpressionAnnotation&) const = default;
};

enum class ShapeKind { circle, square, triangle };
enum class Layout { scatter, cluster, grid };
std::string to_string(ShapeKind shape);
std::string to_string(Layout layout);
ShapeKind parse_shape(std::string_view text);
Layout parse_layout(std::string_view text);
std::string plural(ShapeKind shape);

struct ShapeClass {
    ShapeKind shape = ShapeKind::circle;
    std::string color = "red";
    bool operator==(const ShapeClass&) const = default;
};

// Scene description used to phrase expressions: which classes are present,
// how many of each, which one is being counted.
struct SceneGeometry {
    struct Entry {
        ShapeClass cls;
        int count = 0;
        bool operator==(const Entry&) const = default;
    };
    std::vector<Entry> classes;
    int target = 0;
    Layout layout = Layout::scatter;
    bool operator==(const SceneGeometry&) const = default;
};

struct Point {
    double row = 0.0;
    double col = 0.0;
    bool operator==(const Point&) const = default;
};

struct SceneSample {
    std::string sample_id;
    Image image;
    // Relative to the dataset root; filled by load/save.
    std::string image_file;
    ExpressionAnnotation annotation;
    std::vector<BBox> exemplar_boxes;
    int count = 0;
    std::optional<std::vector<Point>> points;  // pixel coordinates
    std::optional<SceneGeometry> scene;        // synthetic corpora only
};

// Throws validation_error naming the sample and the offending field.
void validate(const SceneSample& sample);

struct SyntheticSpec {
    int canvas_size = 128;
    std::vector<ShapeClass> shape_classes{{ShapeKind::circle, "red"}};
    int min_instances = 1;
    int max_instances = 5;
    int min_size = 8;
    int max_size = 16;
    std::uint64_t seed = 0;
    Layout layout = Layout::scatter;
    PromptKind prompt_kind = PromptKind::fine_grained;
    int n_exemplars = 3;
};

void validate(const SyntheticSpec& spec);
nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

enum class Split { train, val, test };
std::string to_string(Split split);
Split parse_split(std::string_view text);

// Dataset root layout: <root>/<split>.jsonl plus image files referenced by
// relative path (conventionally <root>/images/).
std::filesystem::path annotation_path(const std::filesystem::path& root, Split split);
std::vector<SceneSample> load_dataset(const std::filesystem::path& root, Split split);
// Writes images as PNG under <root>/images and the annotation lines.
void save_dataset(const std::vector<SceneSample>& samples, const std::filesystem::path& root, Split split);

nlohmann::json record_to_json(const SceneSample& sample);
// Parses one annotation line (image not loaded). Boxes are clamped.
SceneSample record_from_json(const nlohmann::json& j);

std::vector<SceneSample> generate_synthetic(const SyntheticSpec& spec, int n_samples);
// Emits the corpus in dataset format plus the "spec.json" sidecar.
void write_synthetic_corpus(const SyntheticSpec& spec, int n_samples, const std::filesystem::path& root, Split split);

ExpressionAnnotation render_expression(const SceneGeometry& scene, PromptKind kind);
std::string quantifier_for(int count);
// Every word the expression templates can produce.
std::vector<std::string> expression_lexicon();

struct AugmentConfig {
    double reshape_prob = 0.5;
    double erase_prob = 0.5;
    double min_scale = 0.8;
    double max_scale = 1.25;
    double min_erase_area = 0.02;
    double max_erase_area = 0.10;
    int max_erase_attempts = 10;
    double max_box_coverage = 0.5;
};

// Per-axis rescale; the rescaled content is placed at `offset` inside a
// canvas padded with the mean colour and the canvas is resized back to the
// original size.
struct ReshapeParams {
    double scale_y = 1.0;
    double scale_x = 1.0;
    int offset_y = 0;  // pixels inside the padded canvas
    int offset_x = 0;
};

struct EraseRect {
    int y0 = 0;
    int x0 = 0;
    int h = 0;
    int w = 0;
};

struct AugmentTrace {
    std::optional<ReshapeParams> reshape;
    std::optional<EraseRect> erase;
    int erase_attempts = 0;
};

SceneSample apply_reshape(const SceneSample& sample, const ReshapeParams& params);
SceneSample apply_erase(const SceneSample& sample, const EraseRect& rect);
SceneSample augment(const SceneSample& sample, std::uint64_t seed, const AugmentConfig& cfg = {},
                    AugmentTrace* trace = nullptr);

struct Normalization {
    double mean[3] = {0.5, 0.5, 0.5};
    double std[3] = {0.5, 0.5, 0.5};
};

struct Preprocessed {
    Tensor image;  // [3,S,S], normalised
    ExpressionAnnotation annotation;
};

Preprocessed preprocess(const SceneSample& sample, int input_size, const Normalization& norm = {});

} // namespace expresscount
