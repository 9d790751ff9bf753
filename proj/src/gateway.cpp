#include "dualstream/gateway.hpp"

#include "dualstream/errors.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <thread>

namespace dualstream {

namespace {

struct TemperatureEntry {
    std::string_view model;
    double temperature;
};

constexpr TemperatureEntry kTemperatureTable[] = {
    {"deepseek-v3.2", 0.2},
    {"qwen3-coder", 0.2},
    {"kimi-k2-0905", 0.6},
    {"claude-sonnet-4.5", 0.2},
    {"gpt-5.1", 1.0},
    {"gemini-3-pro", 1.0},
};

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

bool retryable(int status) {
    return status == 0 || status == 429 || status >= 500;
}

}  // namespace

double default_temperature(std::string_view model_id) {
    const std::string id = lower(model_id);
    for (const auto& e : kTemperatureTable) {
        if (id.rfind(e.model, 0) == 0) {
            return e.temperature;
        }
    }
    return kDefaultTemperature;
}

std::string_view to_string(FinishReason reason) noexcept {
    switch (reason) {
        case FinishReason::stop: return "stop";
        case FinishReason::length: return "length";
        case FinishReason::other: return "other";
    }
    return "other";
}

FinishReason finish_reason_from_string(std::string_view text) noexcept {
    if (text == "stop") return FinishReason::stop;
    if (text == "length") return FinishReason::length;
    return FinishReason::other;
}

void ModelRequest::validate() const {
    if (messages.empty()) {
        throw Error(ErrorCode::contract, "model request has no messages");
    }
    if (!(temperature >= 0.0)) {
        throw Error(ErrorCode::contract, "temperature must be >= 0");
    }
    if (max_output_tokens <= 0) {
        throw Error(ErrorCode::contract, "max_output_tokens must be positive");
    }
}

UsageCounter accumulate(UsageCounter counter, const Usage& usage, bool estimated) {
    if (usage.prompt_tokens < 0 || usage.completion_tokens < 0) {
        throw Error(ErrorCode::contract, "usage components must be non-negative");
    }
    counter.prompt_tokens += usage.prompt_tokens;
    counter.completion_tokens += usage.completion_tokens;
    counter.steps += 1;
    counter.estimated = counter.estimated || estimated;
    return counter;
}

ModelResponse complete(ModelBackend& backend, const ModelRequest& request) {
    request.validate();
    return backend.complete(request);
}

Usage estimate_usage(const ModelRequest& request, std::string_view response_text,
                     const ConversationHistory::Counter& counter) {
    Usage u;
    for (const auto& m : request.messages) {
        u.prompt_tokens += counter(m.content);
    }
    u.completion_tokens = counter(response_text);
    return u;
}

// ---------------------------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::vector<std::string> script, ConversationHistory::Counter counter)
    : script_(std::move(script)), counter_(std::move(counter)) {}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io, "cannot open script " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::schema, "script " + path.string() + ": " + e.what());
    }
    if (!j.is_array() || j.empty()) {
        throw Error(ErrorCode::schema, "script " + path.string() + " must be a non-empty array of strings");
    }
    std::vector<std::string> items;
    for (const auto& item : j) {
        if (!item.is_string()) {
            throw Error(ErrorCode::schema, "script " + path.string() + " contains a non-string item");
        }
        items.push_back(item.get<std::string>());
    }
    return std::make_shared<ScriptedBackend>(std::move(items));
}

ModelResponse ScriptedBackend::complete(const ModelRequest& request) {
    std::string text;
    {
        std::lock_guard lock(mutex_);
        if (next_ >= script_.size()) {
            throw Error(ErrorCode::script_exhausted,
                        "scripted backend exhausted after " + std::to_string(script_.size()) + " responses");
        }
        text = script_[next_++];
    }
    ModelResponse r;
    r.usage = estimate_usage(request, text, counter_);
    r.usage_estimated = true;
    r.finish_reason = FinishReason::stop;
    r.text = std::move(text);
    return r;
}

std::size_t ScriptedBackend::calls() const {
    std::lock_guard lock(mutex_);
    return next_;
}

std::size_t ScriptedBackend::remaining() const {
    std::lock_guard lock(mutex_);
    return script_.size() - next_;
}

// ---------------------------------------------------------------------------

HttplibTransport::HttplibTransport(std::string base_url, std::chrono::seconds timeout) : timeout_(timeout) {
    const auto scheme = base_url.find("://");
    const auto path_start = base_url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (path_start == std::string::npos) {
        origin_ = base_url;
    } else {
        origin_ = base_url.substr(0, path_start);
        prefix_ = base_url.substr(path_start);
        while (!prefix_.empty() && prefix_.back() == '/') {
            prefix_.pop_back();
        }
    }
}

HttpReply HttplibTransport::post(const std::string& path, const std::string& body, const Headers& headers) {
    httplib::Client client(origin_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Headers h;
    for (const auto& [k, v] : headers) {
        h.emplace(k, v);
    }
    auto res = client.Post(prefix_ + path, h, body, "application/json");
    HttpReply reply;
    if (!res) {
        reply.error = httplib::to_string(res.error());
        return reply;
    }
    reply.status = res->status;
    reply.body = res->body;
    return reply;
}

std::chrono::milliseconds RetryPolicy::delay_before(int attempt) const {
    // attempt is 1-based; the first retry waits backoff_base.
    if (attempt <= 1) {
        return std::chrono::milliseconds(0);
    }
    return backoff_base * (1LL << (attempt - 2));
}

HttpChatBackend::HttpChatBackend(std::shared_ptr<Transport> transport, std::string api_key, RetryPolicy policy)
    : transport_(std::move(transport)), api_key_(std::move(api_key)), policy_(std::move(policy)) {
    if (policy_.attempts < 1) {
        policy_.attempts = 1;
    }
    if (!policy_.sleeper) {
        policy_.sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }
}

std::shared_ptr<HttpChatBackend> HttpChatBackend::from_environment(RetryPolicy policy) {
    const char* key = std::getenv("DUALSTREAM_API_KEY");
    if (key == nullptr || *key == '\0') {
        throw Error(ErrorCode::request_failed, "DUALSTREAM_API_KEY is not set");
    }
    const char* base = std::getenv("DUALSTREAM_BASE_URL");
    std::string url = (base != nullptr && *base != '\0') ? base : "https://api.openai.com/v1";
    return std::make_shared<HttpChatBackend>(std::make_shared<HttplibTransport>(std::move(url)), key,
                                             std::move(policy));
}

std::string HttpChatBackend::encode_request(const ModelRequest& request) {
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& m : request.messages) {
        messages.push_back({{"role", std::string(to_string(m.role))}, {"content", m.content}});
    }
    nlohmann::json body = {
        {"model", request.model_id},
        {"messages", std::move(messages)},
        {"temperature", request.temperature},
        {"max_tokens", request.max_output_tokens},
    };
    return body.dump();
}

ModelResponse HttpChatBackend::decode_response(const std::string& body, const ModelRequest& request) {
    ModelResponse r;
    try {
        const auto j = nlohmann::json::parse(body);
        const auto& choice = j.at("choices").at(0);
        const auto& content = choice.at("message").at("content");
        r.text = content.is_null() ? std::string() : content.get<std::string>();
        if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
            r.finish_reason = finish_reason_from_string(choice["finish_reason"].get<std::string>());
        }
        const auto usage = j.find("usage");
        if (usage != j.end() && usage->is_object() && usage->contains("prompt_tokens") &&
            usage->contains("completion_tokens")) {
            r.usage.prompt_tokens = usage->at("prompt_tokens").get<std::int64_t>();
            r.usage.completion_tokens = usage->at("completion_tokens").get<std::int64_t>();
        } else {
            r.usage = estimate_usage(request, r.text);
            r.usage_estimated = true;
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::request_failed, std::string("malformed provider response: ") + e.what());
    }
    return r;
}

ModelResponse HttpChatBackend::complete(const ModelRequest& request) {
    request.validate();
    const std::string body = encode_request(request);
    const Headers headers = {{"Authorization", "Bearer " + api_key_}};
    std::string last_error;
    for (int attempt = 1; attempt <= policy_.attempts; ++attempt) {
        const auto delay = policy_.delay_before(attempt);
        if (delay.count() > 0) {
            policy_.sleeper(delay);
        }
        const HttpReply reply = transport_->post("/chat/completions", body, headers);
        if (reply.status >= 200 && reply.status < 300) {
            ModelResponse r = decode_response(reply.body, request);
            r.retries = attempt - 1;
            return r;
        }
        last_error = reply.status == 0 ? "transport: " + reply.error
                                       : "HTTP " + std::to_string(reply.status) + ": " + reply.body.substr(0, 200);
        {
            std::lock_guard lock(mutex_);
            retries_.push_back({attempt, reply.status, last_error, policy_.delay_before(attempt + 1)});
        }
        if (!retryable(reply.status)) {
            break;
        }
    }
    throw Error(ErrorCode::request_failed, "model request failed: " + last_error);
}

std::vector<RetryRecord> HttpChatBackend::retries() const {
    std::lock_guard lock(mutex_);
    return retries_;
}

}  // namespace dualstream
