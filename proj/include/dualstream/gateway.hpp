#pragma once

// Chat-completion interface: a scripted double for deterministic runs and an
// HTTP adapter for chat-completions style providers.

#include "dualstream/semantic.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace dualstream {

/// Temperature used when a model has no entry in the per-model table.
inline constexpr double kDefaultTemperature = 0.2;

/// Documented default temperature for a model id; kDefaultTemperature when unknown.
double default_temperature(std::string_view model_id);

struct Usage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;

    [[nodiscard]] std::int64_t total() const noexcept { return prompt_tokens + completion_tokens; }
    bool operator==(const Usage&) const = default;
};

enum class FinishReason { stop, length, other };

std::string_view to_string(FinishReason reason) noexcept;
FinishReason finish_reason_from_string(std::string_view text) noexcept;

struct ModelRequest {
    std::vector<ChatMessage> messages;
    double temperature = kDefaultTemperature;
    std::int64_t max_output_tokens = 4096;
    std::string model_id;

    /// Throws Error(contract) on an empty message list or negative temperature.
    void validate() const;
};

struct ModelResponse {
    std::string text;
    Usage usage;
    FinishReason finish_reason = FinishReason::stop;
    /// Usage came from the local estimator instead of the provider.
    bool usage_estimated = false;
    /// Failed attempts before this response.
    int retries = 0;
};

struct UsageCounter {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    std::int64_t steps = 0;
    bool estimated = false;

    [[nodiscard]] std::int64_t total() const noexcept { return prompt_tokens + completion_tokens; }
    bool operator==(const UsageCounter&) const = default;
};

/// Adds one model call. Throws Error(contract) on negative usage.
UsageCounter accumulate(UsageCounter counter, const Usage& usage, bool estimated = false);

class ModelBackend {
public:
    virtual ~ModelBackend() = default;
    virtual ModelResponse complete(const ModelRequest& request) = 0;
    [[nodiscard]] virtual std::string name() const = 0;
};

using BackendPtr = std::shared_ptr<ModelBackend>;

/// Validates the request and forwards it to the backend.
ModelResponse complete(ModelBackend& backend, const ModelRequest& request);

/// Usage of a request/response pair under a token counter.
Usage estimate_usage(const ModelRequest& request, std::string_view response_text,
                     const ConversationHistory::Counter& counter = estimate_tokens);

/// Returns its script items in order regardless of request content.
class ScriptedBackend final : public ModelBackend {
public:
    explicit ScriptedBackend(std::vector<std::string> script,
                             ConversationHistory::Counter counter = estimate_tokens);

    /// JSON array of strings. Throws Error(io) / Error(schema).
    static std::shared_ptr<ScriptedBackend> from_json_file(const std::filesystem::path& path);

    /// Throws Error(script_exhausted) once every item has been served.
    ModelResponse complete(const ModelRequest& request) override;
    [[nodiscard]] std::string name() const override { return "scripted"; }

    [[nodiscard]] std::size_t calls() const;
    [[nodiscard]] std::size_t remaining() const;

private:
    std::vector<std::string> script_;
    ConversationHistory::Counter counter_;
    mutable std::mutex mutex_;
    std::size_t next_ = 0;
};

struct HttpReply {
    int status = 0;  // 0: transport failure
    std::string body;
    std::string error;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpReply post(const std::string& path, const std::string& body, const Headers& headers) = 0;
};

/// HTTPS (or HTTP) transport on cpp-httplib. `base_url` is scheme://host[:port][/prefix].
class HttplibTransport final : public Transport {
public:
    explicit HttplibTransport(std::string base_url, std::chrono::seconds timeout = std::chrono::seconds(120));
    HttpReply post(const std::string& path, const std::string& body, const Headers& headers) override;

private:
    std::string origin_;
    std::string prefix_;
    std::chrono::seconds timeout_;
};

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds backoff_base{1000};
    /// Called between attempts; defaults to std::this_thread::sleep_for.
    std::function<void(std::chrono::milliseconds)> sleeper;

    [[nodiscard]] std::chrono::milliseconds delay_before(int attempt) const;
};

struct RetryRecord {
    int attempt = 0;
    int status = 0;
    std::string error;
    std::chrono::milliseconds delay{0};
};

/// Chat-completions wire format: POST {prefix}/chat/completions with
/// {model, messages:[{role, content}], temperature, max_tokens}.
class HttpChatBackend final : public ModelBackend {
public:
    HttpChatBackend(std::shared_ptr<Transport> transport, std::string api_key, RetryPolicy policy = {});

    /// Reads DUALSTREAM_API_KEY and DUALSTREAM_BASE_URL. Throws Error(request_failed)
    /// when the key is absent.
    static std::shared_ptr<HttpChatBackend> from_environment(RetryPolicy policy = {});

    /// 429, 5xx and transport failures are retried with exponential backoff;
    /// after the last attempt, or on any other status, throws Error(request_failed).
    ModelResponse complete(const ModelRequest& request) override;
    [[nodiscard]] std::string name() const override { return "http"; }

    [[nodiscard]] std::vector<RetryRecord> retries() const;

    static std::string encode_request(const ModelRequest& request);
    /// Throws Error(request_failed) on a malformed body.
    static ModelResponse decode_response(const std::string& body, const ModelRequest& request);

private:
    std::shared_ptr<Transport> transport_;
    std::string api_key_;
    RetryPolicy policy_;
    mutable std::mutex mutex_;
    std::vector<RetryRecord> retries_;
};

}  // namespace dualstream
