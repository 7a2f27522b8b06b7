#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expresscount/config.hpp"
#include "expresscount/data.hpp"

namespace expresscount {

struct PromptProtocol {
    std::string coarse_prompt = "What objects does this image include?";
    std::string refine_prompt = "How many [class]? Describe the [class] details.";
    int max_retries = 3;
    double timeout_s = 30.0;
    double backoff_base_s = 1.0;
    double backoff_factor = 2.0;

    // The coarse prompt must not contain "[class]"; the refine prompt must.
    void validate() const;
    std::string refine_for(const std::string& class_name) const;
};

PromptProtocol protocol_from(const AnnotateConfig& cfg);

enum class BackendKind { http_service, offline_template };
std::string to_string(BackendKind kind);
BackendKind parse_backend(std::string_view text);

struct CaptionBackend {
    BackendKind kind = BackendKind::offline_template;
    std::string endpoint;  // http_service only, e.g. http://127.0.0.1:8080/caption
    std::string auth_env;  // environment variable holding a bearer token

    void validate() const;
};

// Append-only JSON-lines log of every request/response pair; thread-safe.
class RequestLog {
public:
    RequestLog() = default;
    explicit RequestLog(const std::filesystem::path& path);
    void write(const nlohmann::json& record);
    std::size_t records() const { return records_; }

private:
    std::unique_ptr<std::ofstream> out_;
    std::mutex mutex_;
    std::size_t records_ = 0;
};

// Splits a coarse answer into class names, in mention order.
std::vector<std::string> parse_class_list(const std::string& answer);

// Two-round protocol: coarse prompt -> class list -> refine prompt per class
// until one yields a non-empty expression. Offline answers come from
// `sample.scene`; http sends the image at `image_path`.
ExpressionAnnotation annotate_sample(const SceneSample& sample, const std::filesystem::path& image_path,
                                     const PromptProtocol& protocol, const CaptionBackend& backend,
                                     RequestLog* log = nullptr);

struct AnnotateStats {
    int total = 0;
    int skipped = 0;     // already present in the output
    int attempted = 0;
    int successes = 0;
    int failures = 0;
    double mean_expression_words = 0.0;
    std::vector<std::string> failed_ids;

    nlohmann::json to_json() const;
};

// Annotates every sample of `split` under `dataset_root` and appends the
// results to `out` (data-module JSON lines, image paths relative to the
// output directory). Samples already in `out` are skipped. Writes
// <out>.requests.jsonl and <out>.stats.json.
AnnotateStats annotate_corpus(const std::filesystem::path& dataset_root, Split split, const PromptProtocol& protocol,
                              const CaptionBackend& backend, const std::filesystem::path& out, int concurrency = 1);

std::string base64_encode(const std::string& bytes);

} // namespace expresscount
