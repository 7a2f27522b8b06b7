#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <mutex>
#include <thread>

#include "expresscount/annotate.hpp"
#include "expresscount/errors.hpp"
#include "mock_service.hpp"

using namespace expresscount;
namespace fs = std::filesystem;
using nlohmann::json;
using testing::MockService;
using testing::Reply;

namespace {

fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("xc_annot_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

PromptProtocol fast_protocol() {
    PromptProtocol p;
    p.max_retries = 2;
    p.timeout_s = 2.0;
    p.backoff_base_s = 0.01;
    p.backoff_factor = 2.0;
    return p;
}

bool is_coarse(const json& req) { return req.at("prompt").get<std::string>() == PromptProtocol{}.coarse_prompt; }

std::vector<SceneSample> write_corpus(const fs::path& root, int n) {
    SyntheticSpec spec;
    spec.shape_classes = {{ShapeKind::circle, "red"}, {ShapeKind::square, "blue"}};
    spec.min_instances = 1;
    spec.max_instances = 9;
    spec.seed = 31;
    write_synthetic_corpus(spec, n, root, Split::train);
    return load_dataset(root, Split::train);
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::vector<std::string> out;
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(line);
    return out;
}

} // namespace

TEST_CASE("class list parsing") {
    CHECK(parse_class_list("donuts, plates and cups") == std::vector<std::string>{"donuts", "plates", "cups"});
    CHECK(parse_class_list("red circles\nblue squares; yellow triangles") ==
          std::vector<std::string>{"red circles", "blue squares", "yellow triangles"});
    CHECK(parse_class_list("  ,  ").empty());
    CHECK(parse_class_list("").empty());
}

TEST_CASE("base64 reference vectors") {
    CHECK(base64_encode("") == "");
    CHECK(base64_encode("f") == "Zg==");
    CHECK(base64_encode("fo") == "Zm8=");
    CHECK(base64_encode("foo") == "Zm9v");
    CHECK(base64_encode("foobar") == "Zm9vYmFy");
}

TEST_CASE("prompt protocol placeholder rules") {
    PromptProtocol p;
    CHECK_NOTHROW(p.validate());
    CHECK(p.coarse_prompt == "What objects does this image include?");
    CHECK(p.refine_for("donuts") == "How many donuts? Describe the donuts details.");
    PromptProtocol bad = p;
    bad.refine_prompt = "Describe it.";
    CHECK_THROWS_AS(bad.validate(), config_error);
    bad = p;
    bad.coarse_prompt = "Any [class]?";
    CHECK_THROWS_AS(bad.validate(), config_error);
    CaptionBackend http{BackendKind::http_service, "", ""};
    CHECK_THROWS_AS(http.validate(), config_error);
    CHECK_NOTHROW(CaptionBackend{}.validate());
}

TEST_CASE("offline backend follows the expression templates") {
    SceneSample s;
    s.sample_id = "o1";
    SceneGeometry g;
    g.classes = {{{ShapeKind::circle, "red"}, 7}};
    s.scene = g;
    const ExpressionAnnotation a = annotate_sample(s, {}, PromptProtocol{}, CaptionBackend{});
    CHECK(a.text.find("a bunch of") != std::string::npos);
    CHECK(a == render_expression(g, PromptKind::fine_grained));
    CHECK(a.prompt_kind == PromptKind::fine_grained);
    CHECK(annotate_sample(s, {}, PromptProtocol{}, CaptionBackend{}) == a);

    SceneGeometry multi;
    multi.classes = {{{ShapeKind::circle, "red"}, 3}, {{ShapeKind::square, "blue"}, 12}};
    multi.target = 1;
    s.scene = multi;
    const ExpressionAnnotation m = annotate_sample(s, {}, PromptProtocol{}, CaptionBackend{});
    CHECK(m.text == "a pile of blue squares scattered on a plain background");

    s.scene.reset();
    CHECK_THROWS_AS(annotate_sample(s, {}, PromptProtocol{}, CaptionBackend{}), annotation_error);
}

TEST_CASE("http backend passes the refinement through verbatim") {
    const fs::path dir = scratch_dir("pass");
    const auto corpus = write_corpus(dir, 1);
    std::vector<json> seen;
    std::mutex mu;
    MockService svc([&](const json& req, const httplib::Request&) {
        std::lock_guard lock(mu);
        seen.push_back(req);
        return is_coarse(req) ? Reply{200, "donuts"} : Reply{200, "six glazed donuts on a white plate"};
    });
    setenv("XC_TEST_TOKEN", "s3cret", 1);
    RequestLog log;
    const auto a = annotate_sample(corpus[0], dir / corpus[0].image_file, fast_protocol(), svc.backend(), &log);
    unsetenv("XC_TEST_TOKEN");
    CHECK(a.text == "six glazed donuts on a white plate");
    CHECK(a.class_name == "donuts");
    CHECK(a.prompt_kind == PromptKind::fine_grained);
    REQUIRE(seen.size() == 2);
    CHECK(seen[1].at("prompt") == "How many donuts? Describe the donuts details.");
    std::ifstream img(dir / corpus[0].image_file, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(img)), std::istreambuf_iterator<char>());
    CHECK(seen[0].at("image") == base64_encode(bytes));
    CHECK(svc.auth[0] == "Bearer s3cret");
    CHECK(log.records() == 2);
}

TEST_CASE("retries, timeouts and non-retryable errors") {
    const fs::path dir = scratch_dir("retry");
    const auto corpus = write_corpus(dir, 1);
    const fs::path img = dir / corpus[0].image_file;

    SUBCASE("timeouts exhaust max_retries + 1 attempts") {
        MockService svc([](const json&, const httplib::Request&) { return Reply{200, "late", 0.6}; });
        PromptProtocol p = fast_protocol();
        p.timeout_s = 0.2;
        try {
            annotate_sample(corpus[0], img, p, svc.backend());
            FAIL("timeout accepted");
        } catch (const annotation_error& e) {
            CHECK(std::string(e.what()).find("3 attempts") != std::string::npos);
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(700));
        CHECK(svc.calls == 3);
    }
    SUBCASE("5xx is retried and then succeeds") {
        std::atomic<int> n{0};
        MockService svc([&](const json& req, const httplib::Request&) {
            if (n++ < 2) return Reply{503, "busy"};
            return is_coarse(req) ? Reply{200, "red circles"} : Reply{200, "a few red circles"};
        });
        const auto a = annotate_sample(corpus[0], img, fast_protocol(), svc.backend());
        CHECK(a.text == "a few red circles");
        CHECK(svc.calls == 4);
    }
    SUBCASE("persistent 5xx carries the last response") {
        MockService svc([](const json&, const httplib::Request&) { return Reply{500, "{\"error\":\"boom\"}", 0.0, true}; });
        try {
            annotate_sample(corpus[0], img, fast_protocol(), svc.backend());
            FAIL("5xx accepted");
        } catch (const annotation_error& e) {
            CHECK(e.last_response == "{\"error\":\"boom\"}");
        }
        CHECK(svc.calls == 3);
    }
    SUBCASE("4xx fails at once") {
        MockService svc([](const json&, const httplib::Request&) { return Reply{403, "denied"}; });
        CHECK_THROWS_AS(annotate_sample(corpus[0], img, fast_protocol(), svc.backend()), annotation_error);
        CHECK(svc.calls == 1);
    }
    SUBCASE("empty coarse answer") {
        MockService svc([](const json&, const httplib::Request&) { return Reply{200, "  "}; });
        try {
            annotate_sample(corpus[0], img, fast_protocol(), svc.backend());
            FAIL("empty coarse accepted");
        } catch (const annotation_error& e) {
            CHECK(std::string(e.what()).find("no classes detected") != std::string::npos);
        }
    }
    SUBCASE("unreachable service") {
        CaptionBackend dead{BackendKind::http_service, "http://127.0.0.1:1/caption", ""};
        CHECK_THROWS_AS(annotate_sample(corpus[0], img, fast_protocol(), dead), annotation_error);
    }
}

TEST_CASE("corpus annotation: cardinality, schema and idempotence") {
    const fs::path root = scratch_dir("corpus");
    const auto corpus = write_corpus(root / "data", 10);
    MockService svc([](const json& req, const httplib::Request&) {
        return is_coarse(req) ? Reply{200, "red circles, blue squares"} : Reply{200, "several shapes on grey"};
    });
    const fs::path out = root / "out" / "train.jsonl";
    const AnnotateStats s = annotate_corpus(root / "data", Split::train, fast_protocol(), svc.backend(), out);
    CHECK(s.total == 10);
    CHECK(s.successes == 10);
    CHECK(s.failures == 0);
    CHECK(s.mean_expression_words == 4.0);
    CHECK(lines_of(out).size() == 10);
    CHECK(svc.calls == 20);  // one coarse and one refine request per image

    const auto annotated = load_dataset(root / "out", Split::train);
    REQUIRE(annotated.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(annotated[i].sample_id == corpus[i].sample_id);
        CHECK(annotated[i].count == corpus[i].count);
        CHECK(annotated[i].exemplar_boxes == corpus[i].exemplar_boxes);
        CHECK(annotated[i].image == corpus[i].image);
        CHECK(annotated[i].annotation.text == "several shapes on grey");
        CHECK(annotated[i].annotation.class_name == "red circles");
    }
    const json stats = json::parse(std::ifstream(out.string() + ".stats.json"));
    CHECK(stats.at("successes") == 10);
    CHECK(lines_of(out.string() + ".requests.jsonl").size() == 20);

    const int before = svc.calls;
    const AnnotateStats again = annotate_corpus(root / "data", Split::train, fast_protocol(), svc.backend(), out);
    CHECK(svc.calls == before);
    CHECK(again.skipped == 10);
    CHECK(again.attempted == 0);
    CHECK(lines_of(out).size() == 10);
}

TEST_CASE("corpus annotation records partial failures and resumes them") {
    const fs::path root = scratch_dir("partial");
    const auto corpus = write_corpus(root / "data", 10);
    std::set<std::string> failing;
    for (int i : {3, 7}) {
        std::ifstream img(root / "data" / corpus[static_cast<std::size_t>(i)].image_file, std::ios::binary);
        failing.insert(base64_encode(std::string((std::istreambuf_iterator<char>(img)), std::istreambuf_iterator<char>())));
    }
    std::atomic<bool> healthy{false};
    MockService svc([&](const json& req, const httplib::Request&) {
        if (!healthy && failing.count(req.at("image").get<std::string>())) return Reply{502, "bad gateway"};
        return is_coarse(req) ? Reply{200, "red circles"} : Reply{200, "some red circles"};
    });
    const fs::path out = root / "out.jsonl";
    for (int conc : {1, 4}) {
        fs::remove(out);
        const AnnotateStats s = annotate_corpus(root / "data", Split::train, fast_protocol(), svc.backend(), out, conc);
        CAPTURE(conc);
        CHECK(s.successes == 8);
        CHECK(s.failures == 2);
        CHECK(s.failed_ids == std::vector<std::string>{corpus[3].sample_id, corpus[7].sample_id});
        const auto lines = lines_of(out);
        REQUIRE(lines.size() == 8);
        std::vector<std::string> ids;
        for (const auto& l : lines) ids.push_back(record_from_json(json::parse(l)).sample_id);
        std::vector<std::string> expect;
        for (std::size_t i = 0; i < 10; ++i)
            if (i != 3 && i != 7) expect.push_back(corpus[i].sample_id);
        CHECK(ids == expect);
    }
    healthy = true;
    const int before = svc.calls;
    const AnnotateStats r = annotate_corpus(root / "data", Split::train, fast_protocol(), svc.backend(), out);
    CHECK(r.skipped == 8);
    CHECK(r.successes == 2);
    CHECK(svc.calls - before == 4);
    CHECK(lines_of(out).size() == 10);
}

TEST_CASE("offline corpus annotation is deterministic") {
    const fs::path root = scratch_dir("offline");
    write_corpus(root / "data", 6);
    annotate_corpus(root / "data", Split::train, PromptProtocol{}, CaptionBackend{}, root / "a.jsonl");
    annotate_corpus(root / "data", Split::train, PromptProtocol{}, CaptionBackend{}, root / "b.jsonl", 3);
    CHECK(lines_of(root / "a.jsonl") == lines_of(root / "b.jsonl"));
    for (const auto& l : lines_of(root / "a.jsonl")) {
        const SceneSample s = record_from_json(json::parse(l));
        CHECK(s.annotation == render_expression(*s.scene, PromptKind::fine_grained));
    }
}
