#include "expresscount/annotate.hpp"

#include <httplib.h>

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "expresscount/errors.hpp"
#include "expresscount/lang_encoder.hpp"

namespace expresscount {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kPlaceholder = "[class]";

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n.");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n.");
    return s.substr(b, e - b + 1);
}

} // namespace

void PromptProtocol::validate() const {
    if (coarse_prompt.empty()) throw config_error("coarse prompt is empty");
    if (coarse_prompt.find(kPlaceholder) != std::string::npos)
        throw config_error("coarse prompt must not contain the [class] placeholder");
    if (refine_prompt.find(kPlaceholder) == std::string::npos)
        throw config_error("refine prompt must contain the [class] placeholder");
    if (max_retries < 0) throw config_error("max_retries must be >= 0");
    if (timeout_s <= 0) throw config_error("timeout must be positive");
    if (backoff_base_s < 0 || backoff_factor < 1) throw config_error("backoff base must be >= 0 and factor >= 1");
}

std::string PromptProtocol::refine_for(const std::string& class_name) const {
    return replace_all(refine_prompt, kPlaceholder, class_name);
}

PromptProtocol protocol_from(const AnnotateConfig& cfg) {
    PromptProtocol p{cfg.coarse_prompt, cfg.refine_prompt, cfg.max_retries, cfg.timeout_s, cfg.backoff_base_s,
                     cfg.backoff_factor};
    p.validate();
    return p;
}

std::string to_string(BackendKind k) { return k == BackendKind::http_service ? "http" : "offline"; }

BackendKind parse_backend(std::string_view t) {
    if (t == "http" || t == "http_service") return BackendKind::http_service;
    if (t == "offline" || t == "offline_template") return BackendKind::offline_template;
    throw config_error("unknown annotation backend '" + std::string(t) + "' (expected http or offline)");
}

void CaptionBackend::validate() const {
    if (kind == BackendKind::http_service && endpoint.empty())
        throw config_error("the http backend needs an endpoint URL");
}

RequestLog::RequestLog(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_ = std::make_unique<std::ofstream>(path, std::ios::app);
    if (!*out_) throw io_error("cannot open request log " + path.string());
}

void RequestLog::write(const json& record) {
    std::lock_guard lock(mutex_);
    ++records_;
    if (out_) {
        *out_ << record.dump() << '\n';
        out_->flush();
    }
}

std::vector<std::string> parse_class_list(const std::string& answer) {
    std::string s = answer;
    for (char& c : s)
        if (c == '\n' || c == ';') c = ',';
    s = replace_all(s, " and ", ",");
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.rfind("and ", 0) == 0) item = trim(item.substr(4));
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string base64_encode(const std::string& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw load_error("cannot read image " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string class_label(const ShapeClass& c) { return c.color + " " + plural(c.shape); }

// Scene-metadata stand-in for a captioning service.
class OfflineResponder {
public:
    explicit OfflineResponder(const SceneSample& s) : sample_(s) {
        if (!s.scene) throw annotation_error("sample '" + s.sample_id + "' has no scene metadata for the offline backend");
    }

    std::string coarse() const {
        const auto& g = *sample_.scene;
        std::vector<std::size_t> order{static_cast<std::size_t>(g.target)};
        for (std::size_t i = 0; i < g.classes.size(); ++i)
            if (static_cast<int>(i) != g.target) order.push_back(i);
        std::string out;
        for (std::size_t i : order) out += (out.empty() ? "" : ", ") + class_label(g.classes[i].cls);
        return out;
    }

    ExpressionAnnotation refine(const std::string& label) const {
        SceneGeometry g = *sample_.scene;
        for (std::size_t i = 0; i < g.classes.size(); ++i) {
            if (class_label(g.classes[i].cls) == label) {
                g.target = static_cast<int>(i);
                return render_expression(g, PromptKind::fine_grained);
            }
        }
        return {};
    }

private:
    const SceneSample& sample_;
};

class HttpResponder {
public:
    HttpResponder(const CaptionBackend& backend, const PromptProtocol& protocol, const fs::path& image_path)
        : protocol_(protocol) {
        const auto scheme = backend.endpoint.find("://");
        if (scheme == std::string::npos) throw config_error("endpoint '" + backend.endpoint + "' lacks a scheme");
        const auto slash = backend.endpoint.find('/', scheme + 3);
        base_ = backend.endpoint.substr(0, slash);
        path_ = slash == std::string::npos ? "/" : backend.endpoint.substr(slash);
        if (!backend.auth_env.empty()) {
            if (const char* tok = std::getenv(backend.auth_env.c_str()); tok && *tok) token_ = tok;
        }
        image_b64_ = base64_encode(read_file(image_path));
    }

    std::string ask(const std::string& prompt, const std::string& sample_id, const char* stage, RequestLog* log) const {
        httplib::Client cli(base_);
        const auto secs = std::chrono::duration<double>(protocol_.timeout_s);
        const auto t = std::chrono::duration_cast<std::chrono::microseconds>(secs);
        cli.set_connection_timeout(t);
        cli.set_read_timeout(t);
        cli.set_write_timeout(t);
        httplib::Headers headers;
        if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
        const std::string body = json{{"image", image_b64_}, {"prompt", prompt}}.dump();

        std::string last;
        for (int attempt = 0; attempt <= protocol_.max_retries; ++attempt) {
            if (attempt > 0) {
                const double wait = protocol_.backoff_base_s * std::pow(protocol_.backoff_factor, attempt - 1);
                std::this_thread::sleep_for(std::chrono::duration<double>(wait));
            }
            json rec = {{"sample_id", sample_id}, {"stage", stage}, {"prompt", prompt}, {"attempt", attempt}};
            auto res = cli.Post(path_, headers, body, "application/json");
            if (!res) {
                last = "transport error: " + httplib::to_string(res.error());
                rec["error"] = last;
                if (log) log->write(rec);
                continue;
            }
            rec["status"] = res->status;
            rec["response"] = res->body;
            if (log) log->write(rec);
            last = res->body;
            if (res->status >= 500) continue;
            if (res->status != 200)
                throw annotation_error("sample '" + sample_id + "': caption service answered HTTP " +
                                           std::to_string(res->status),
                                       last);
            try {
                const json j = json::parse(res->body);
                return j.at("text").get<std::string>();
            } catch (const json::exception&) {
                throw annotation_error("sample '" + sample_id + "': malformed caption response", last);
            }
        }
        throw annotation_error("sample '" + sample_id + "': caption service failed after " +
                                   std::to_string(protocol_.max_retries + 1) + " attempts",
                               last);
    }

private:
    const PromptProtocol& protocol_;
    std::string base_, path_, token_, image_b64_;
};

} // namespace

ExpressionAnnotation annotate_sample(const SceneSample& sample, const fs::path& image_path,
                                     const PromptProtocol& protocol, const CaptionBackend& backend, RequestLog* log) {
    protocol.validate();
    backend.validate();
    if (backend.kind == BackendKind::offline_template) {
        const OfflineResponder r(sample);
        const std::string coarse = r.coarse();
        if (log)
            log->write({{"sample_id", sample.sample_id}, {"stage", "coarse"}, {"prompt", protocol.coarse_prompt},
                        {"attempt", 0}, {"response", coarse}});
        const auto classes = parse_class_list(coarse);
        if (classes.empty()) throw annotation_error("sample '" + sample.sample_id + "': no classes detected", coarse);
        for (const auto& c : classes) {
            const std::string prompt = protocol.refine_for(c);
            ExpressionAnnotation a = r.refine(c);
            if (log)
                log->write({{"sample_id", sample.sample_id}, {"stage", "refine"}, {"prompt", prompt},
                            {"attempt", 0}, {"response", a.text}});
            if (!trim(a.text).empty()) return a;
        }
        throw annotation_error("sample '" + sample.sample_id + "': every refinement came back empty");
    }

    const HttpResponder r(backend, protocol, image_path);
    const std::string coarse = r.ask(protocol.coarse_prompt, sample.sample_id, "coarse", log);
    const auto classes = parse_class_list(coarse);
    if (classes.empty()) throw annotation_error("sample '" + sample.sample_id + "': no classes detected", coarse);
    for (const auto& c : classes) {
        const std::string text = trim(r.ask(protocol.refine_for(c), sample.sample_id, "refine", log));
        if (!text.empty()) return {text, PromptKind::fine_grained, c};
    }
    throw annotation_error("sample '" + sample.sample_id + "': every refinement came back empty");
}

json AnnotateStats::to_json() const {
    return {{"total", total},           {"skipped", skipped},
            {"attempted", attempted},   {"successes", successes},
            {"failures", failures},     {"mean_expression_words", mean_expression_words},
            {"failed_ids", failed_ids}};
}

AnnotateStats annotate_corpus(const fs::path& dataset_root, Split split, const PromptProtocol& protocol,
                              const CaptionBackend& backend, const fs::path& out, int concurrency) {
    protocol.validate();
    backend.validate();
    if (concurrency < 1) throw config_error("annotation concurrency must be >= 1");
    const std::vector<SceneSample> samples = load_dataset(dataset_root, split);

    std::set<std::string> done;
    if (fs::exists(out)) {
        std::ifstream in(out);
        std::string line;
        while (std::getline(in, line)) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                done.insert(json::parse(line).at("sample_id").get<std::string>());
            } catch (const json::exception& e) {
                throw validation_error("existing output " + out.string() + " is malformed: " + e.what());
            }
        }
    }

    const fs::path out_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
    fs::create_directories(out_dir);
    std::ofstream writer(out, std::ios::app);
    if (!writer) throw io_error("cannot write annotation output " + out.string());
    fs::path log_path = out;
    log_path += ".requests.jsonl";
    RequestLog log(log_path);

    AnnotateStats stats;
    stats.total = static_cast<int>(samples.size());
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (done.count(samples[i].sample_id))
            ++stats.skipped;
        else
            todo.push_back(i);
    }
    stats.attempted = static_cast<int>(todo.size());

    // Workers fill `results`; the completed prefix is flushed in input order.
    struct Result {
        bool ready = false;
        std::optional<SceneSample> record;
        std::string error;
    };
    std::vector<Result> results(todo.size());
    std::mutex mu;
    std::size_t flushed = 0;
    std::atomic<std::size_t> next{0};
    double words = 0.0;
    std::exception_ptr fatal;

    auto flush_ready = [&] {
        while (flushed < results.size() && results[flushed].ready) {
            Result& r = results[flushed];
            if (r.record) {
                writer << record_to_json(*r.record).dump() << '\n';
                ++stats.successes;
                words += static_cast<double>(split_words(r.record->annotation.text).size());
            } else {
                ++stats.failures;
                stats.failed_ids.push_back(samples[todo[flushed]].sample_id);
            }
            ++flushed;
        }
        writer.flush();
    };

    auto worker = [&] {
        for (std::size_t j = next++; j < todo.size(); j = next++) {
            const SceneSample& s = samples[todo[j]];
            const fs::path image_path = dataset_root / s.image_file;
            Result r;
            r.ready = true;
            try {
                ExpressionAnnotation a = annotate_sample(s, image_path, protocol, backend, &log);
                SceneSample rec = s;
                rec.annotation = std::move(a);
                rec.image_file = fs::relative(fs::absolute(image_path), fs::absolute(out_dir)).generic_string();
                r.record = std::move(rec);
            } catch (const annotation_error& e) {
                r.error = e.what();
                log.write({{"sample_id", s.sample_id}, {"stage", "failed"}, {"error", r.error},
                           {"last_response", e.last_response}});
            } catch (...) {
                std::lock_guard lock(mu);
                if (!fatal) fatal = std::current_exception();
                results[j] = std::move(r);
                next = todo.size();
                return;
            }
            std::lock_guard lock(mu);
            results[j] = std::move(r);
            flush_ready();
        }
    };

    const int n_threads = std::min<int>(concurrency, std::max<int>(1, static_cast<int>(todo.size())));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (fatal) std::rethrow_exception(fatal);
    if (!writer) throw io_error("failed writing " + out.string());
    stats.mean_expression_words = stats.successes ? words / stats.successes : 0.0;

    fs::path stats_path = out;
    stats_path += ".stats.json";
    std::ofstream sout(stats_path);
    if (!sout) throw io_error("cannot write " + stats_path.string());
    sout << stats.to_json().dump(2) << '\n';
    return stats;
}

} // namespace expresscount
