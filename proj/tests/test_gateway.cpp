#include "support.hpp"

#include "dualstream/gateway.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cstdlib>
#include <deque>
#include <fstream>
#include <thread>

using namespace dualstream;
using nlohmann::json;

namespace {

ModelRequest request_of(std::string text) {
    ModelRequest r;
    r.messages = {{Role::system, "sys"}, {Role::user, std::move(text)}};
    r.model_id = "test-model";
    return r;
}

std::string completion_body(const std::string& content, int prompt = 11, int completion = 7) {
    return json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", "stop"}}}},
                {"usage", {{"prompt_tokens", prompt}, {"completion_tokens", completion}}}}
        .dump();
}

// Replays canned replies and remembers what it was sent.
class FakeTransport : public Transport {
public:
    explicit FakeTransport(std::deque<HttpReply> replies) : replies_(std::move(replies)) {}

    HttpReply post(const std::string& path, const std::string& body, const Headers& headers) override {
        paths.push_back(path);
        bodies.push_back(body);
        last_headers = headers;
        HttpReply r = replies_.front();
        replies_.pop_front();
        return r;
    }

    std::vector<std::string> paths;
    std::vector<std::string> bodies;
    Headers last_headers;

private:
    std::deque<HttpReply> replies_;
};

}  // namespace

TEST_CASE("usage accumulation") {
    UsageCounter c;
    c = accumulate(c, {100, 20});
    CHECK(c == UsageCounter{100, 20, 1, false});
    c = accumulate(c, {30, 5}, true);
    CHECK(c.prompt_tokens == 130);
    CHECK(c.completion_tokens == 25);
    CHECK(c.total() == 155);
    CHECK(c.steps == 2);
    CHECK(c.estimated);
    CHECK_THROWS_AS(accumulate(c, {-1, 0}), Error);
}

TEST_CASE("default temperatures per model") {
    CHECK(default_temperature("gpt-5.1") == 1.0);
    CHECK(default_temperature("gemini-3-pro-preview") == 1.0);
    CHECK(default_temperature("kimi-k2-0905") == 0.6);
    CHECK(default_temperature("deepseek-v3.2") == 0.2);
    CHECK(default_temperature("something-else") == kDefaultTemperature);
}

TEST_CASE("scripted backend") {
    ScriptedBackend backend({"first", "second"});
    auto r1 = complete(backend, request_of("q"));
    CHECK(r1.text == "first");
    CHECK(r1.usage_estimated);
    CHECK(r1.usage == estimate_usage(request_of("q"), "first"));
    CHECK(r1.usage.completion_tokens == estimate_tokens("first"));
    CHECK(backend.complete(request_of("q")).text == "second");
    CHECK(backend.calls() == 2);
    CHECK(backend.remaining() == 0);
    try {
        backend.complete(request_of("q"));
        FAIL("expected script_exhausted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::script_exhausted);
    }
    ModelRequest empty;
    CHECK_THROWS_AS(complete(backend, empty), Error);
}

TEST_CASE("scripted backend from file") {
    auto path = test::temp_path("script.json");
    std::ofstream(path) << R"(["a", "b"])";
    CHECK(ScriptedBackend::from_json_file(path)->remaining() == 2);
    auto bad = test::temp_path("script-bad.json");
    std::ofstream(bad) << R"([1, 2])";
    CHECK_THROWS_AS(ScriptedBackend::from_json_file(bad), Error);
    auto empty = test::temp_path("script-empty.json");
    std::ofstream(empty) << "[]";
    CHECK_THROWS_AS(ScriptedBackend::from_json_file(empty), Error);
}

TEST_CASE("wire encoding") {
    auto req = request_of("hello");
    req.temperature = 0.6;
    req.max_output_tokens = 128;
    auto j = json::parse(HttpChatBackend::encode_request(req));
    CHECK(j["model"] == "test-model");
    CHECK(j["temperature"] == 0.6);
    CHECK(j["max_tokens"] == 128);
    CHECK(j["messages"][0]["role"] == "system");
    CHECK(j["messages"][1]["content"] == "hello");

    auto r = HttpChatBackend::decode_response(completion_body("ok", 11, 7), req);
    CHECK(r.text == "ok");
    CHECK(r.usage == Usage{11, 7});
    CHECK_FALSE(r.usage_estimated);
    CHECK(r.finish_reason == FinishReason::stop);

    auto no_usage = json{{"choices", {{{"message", {{"content", "hi"}}}, {"finish_reason", "length"}}}}}.dump();
    auto est = HttpChatBackend::decode_response(no_usage, req);
    CHECK(est.usage_estimated);
    CHECK(est.finish_reason == FinishReason::length);
    CHECK(est.usage == estimate_usage(req, "hi"));

    CHECK_THROWS_AS(HttpChatBackend::decode_response("{}", req), Error);
    CHECK_THROWS_AS(HttpChatBackend::decode_response("not json", req), Error);
}

TEST_CASE("429 twice then 200 succeeds after backoff") {
    auto transport = std::make_shared<FakeTransport>(std::deque<HttpReply>{
        {429, "slow down", ""}, {429, "slow down", ""}, {200, completion_body("done"), ""}});
    std::vector<std::chrono::milliseconds> slept;
    RetryPolicy policy;
    policy.sleeper = [&](std::chrono::milliseconds d) { slept.push_back(d); };
    HttpChatBackend backend(transport, "sk-test", policy);
    auto r = backend.complete(request_of("q"));
    CHECK(r.text == "done");
    CHECK(r.retries == 2);
    auto records = backend.retries();
    REQUIRE(records.size() == 2);
    CHECK(records[0].status == 429);
    CHECK(records[1].attempt == 2);
    CHECK(slept == std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(1000), std::chrono::milliseconds(2000)});
    CHECK(transport->paths == std::vector<std::string>(3, "/chat/completions"));
    CHECK(transport->last_headers[0].second == "Bearer sk-test");
}

TEST_CASE("non-retryable status fails at once; exhaustion fails after the last attempt") {
    RetryPolicy policy;
    policy.sleeper = [](std::chrono::milliseconds) {};
    auto once = std::make_shared<FakeTransport>(std::deque<HttpReply>{{401, "bad key", ""}});
    HttpChatBackend a(once, "k", policy);
    CHECK_THROWS_AS(a.complete(request_of("q")), Error);
    CHECK(once->paths.size() == 1);

    auto down = std::make_shared<FakeTransport>(
        std::deque<HttpReply>{{503, "", ""}, {0, "", "connection refused"}, {500, "", ""}});
    HttpChatBackend b(down, "k", policy);
    try {
        b.complete(request_of("q"));
        FAIL("expected request_failed");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::request_failed);
    }
    CHECK(down->paths.size() == 3);
    CHECK(b.retries().size() == 3);
}

TEST_CASE("credentials come from the environment") {
    ::unsetenv("DUALSTREAM_API_KEY");
    try {
        HttpChatBackend::from_environment();
        FAIL("expected request_failed");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::request_failed);
    }
}

TEST_CASE("http transport against a local server") {
    httplib::Server server;
    std::string seen_auth;
    std::string seen_body;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        seen_body = req.body;
        res.set_content(completion_body("from server", 3, 2), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    auto transport = std::make_shared<HttplibTransport>("http://127.0.0.1:" + std::to_string(port) + "/v1");
    HttpChatBackend backend(transport, "sk-local");
    auto r = backend.complete(request_of("ping"));
    server.stop();
    worker.join();

    CHECK(r.text == "from server");
    CHECK(r.usage == Usage{3, 2});
    CHECK(seen_auth == "Bearer sk-local");
    CHECK(json::parse(seen_body)["messages"][1]["content"] == "ping");
}
