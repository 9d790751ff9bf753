#pragma once

// The agent turn loop: sample a response, gate its code through the security
// policy, execute it in the runtime, shape the output and feed it back, until
// the model answers in plain text or the turn budget runs out.

#include "dualstream/errors.hpp"
#include "dualstream/gateway.hpp"
#include "dualstream/runtime.hpp"
#include "dualstream/security.hpp"
#include "dualstream/semantic.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace dualstream {

inline constexpr const char* kMaxStepsMessage = "Max steps reached";
inline constexpr int kDefaultMaxTurns = 10;

struct ModelParams {
    std::string model_id = "scripted";
    double temperature = kDefaultTemperature;
    std::int64_t max_output_tokens = 4096;
};

struct AgentConfig {
    int T_max = kDefaultMaxTurns;
    std::size_t L_max = kDefaultMaxOutput;
    SecurityPolicy policy = default_policy();
    PromptTemplateSet templates = PromptTemplateSet::defaults();
    ModelParams model;
    /// Fixed "Current time" for the system prompt; the wall clock when unset.
    std::optional<std::string> current_time;
    std::string additional_context;
    /// Wrap injected tools so every call lands in the agent's InvocationLog.
    bool instrument_tools = true;
    /// Add a type schema for every user-defined class among injected values.
    bool describe_types = true;
    /// step() starts a new history for each conversation (runtime is kept).
    bool fresh_history_per_conversation = false;

    /// Throws Error(contract) when T_max < 1 or L_max < 1.
    void validate() const;

    /// Keys: T_max, L_max, policy{...}, templates{...}, model_id, temperature,
    /// max_output_tokens, current_time, additional_context,
    /// fresh_history_per_conversation. Throws Error(schema) / Error(io).
    static AgentConfig from_json_file(const std::filesystem::path& path);
};

struct TurnRecord {
    int index = 0;  // 1-based within the session
    std::string response;
    Action action;
    std::vector<Violation> violations;
    std::optional<ExecutionOutcome> outcome;
    std::optional<ShapedObservation> observation;
    /// The user message appended after this turn (empty on the final turn).
    std::string feedback;
    Usage usage;
    bool usage_estimated = false;
};

enum class FinalKind { answer, max_steps, aborted };

std::string_view to_string(FinalKind kind) noexcept;

struct SessionResult {
    FinalKind final = FinalKind::answer;
    std::string query;
    std::string answer;  // FinalKind::answer only
    std::vector<TurnRecord> turns;
    UsageCounter usage;
    RuntimeHandle runtime;
    std::string abort_reason;

    /// The answer, kMaxStepsMessage, or "Aborted: <reason>".
    [[nodiscard]] std::string final_text() const;
};

struct Invocation {
    std::string name;
    std::string arguments;  // "(2, 3)", keyword arguments as k=v
    std::int64_t cell_index = 0;

    bool operator==(const Invocation&) const = default;
};

/// Append-only, safe to append from any thread.
class InvocationLog {
public:
    void append(Invocation record);
    [[nodiscard]] std::vector<Invocation> records() const;
    [[nodiscard]] std::size_t size() const;
    void clear();

private:
    mutable std::mutex mutex_;
    std::vector<Invocation> records_;
};

/// Wraps a callable so each call appends (name, rendered args, cell index)
/// to `log` before delegating. Results and exceptions pass through. Requires
/// the GIL.
py::object instrument(py::handle callable, std::shared_ptr<InvocationLog> log, std::string name);

/// Renders call arguments as "(a, b, k=v)" using repr().
std::string render_arguments(py::handle args, py::handle kwargs);

struct ToolSpec {
    FunctionDescriptor descriptor;  // an empty name means "introspect"
    python::Ref callable;
};

struct VariableSpec {
    VariableDescriptor descriptor;
    python::Ref value;
};

/// Thrown on kernel death; carries the turns completed so far.
class SessionError : public Error {
public:
    SessionError(const Error& cause, SessionResult partial)
        : Error(cause.code(), cause.what()), partial_(std::move(partial)) {}

    [[nodiscard]] const SessionResult& partial() const noexcept { return partial_; }

private:
    SessionResult partial_;
};

class Agent;
using AgentPtr = std::shared_ptr<Agent>;

class Agent : public std::enable_shared_from_this<Agent> {
public:
    using ExecuteHook = std::function<ExecutionOutcome(Runtime&, std::string_view)>;

    /// Injects tools and variables, renders the context bundle and installs
    /// the system prompt. Throws Error(duplicate_descriptor) for repeated names;
    /// injection errors propagate.
    static AgentPtr create(AgentConfig config, RuntimeHandle runtime, BackendPtr backend,
                           std::vector<ToolSpec> tools = {}, std::vector<VariableSpec> variables = {},
                           std::vector<TypeSchema> types = {});

    /// Starts a new conversation from the system prompt over the same runtime.
    SessionResult run(std::string_view query);

    /// Continues the conversation with a new user message.
    SessionResult step(std::string_view message);

    [[nodiscard]] const ConversationHistory& history() const;
    [[nodiscard]] std::shared_ptr<InvocationLog> invocations() const noexcept { return log_; }
    [[nodiscard]] RuntimeHandle runtime() const;
    [[nodiscard]] const AgentConfig& config() const noexcept { return config_; }
    [[nodiscard]] const ContextBundle& bundle() const noexcept { return bundle_; }
    [[nodiscard]] const ChatMessage& system_message() const noexcept { return system_; }
    [[nodiscard]] UsageCounter lifetime_usage() const;
    [[nodiscard]] const BackendPtr& backend() const noexcept { return backend_; }

    /// Used by shared-runtime binding: later cells run on `runtime` through `hook`.
    void rebind(RuntimeHandle runtime, ExecuteHook hook);
    [[nodiscard]] bool bound() const;

private:
    Agent(AgentConfig config, RuntimeHandle runtime, BackendPtr backend);

    SessionResult converse(std::string_view message, bool fresh);
    ExecutionOutcome execute(std::string_view code);

    AgentConfig config_;
    RuntimeHandle runtime_;
    BackendPtr backend_;
    ContextBundle bundle_;
    ChatMessage system_;
    std::optional<ConversationHistory> history_;
    std::optional<std::string> pending_close_;  // assistant text owed after MaxSteps/abort
    std::shared_ptr<InvocationLog> log_ = std::make_shared<InvocationLog>();
    UsageCounter lifetime_;
    ExecuteHook hook_;
    bool bound_ = false;
    mutable std::mutex mutex_;       // guards runtime_/hook_/bound_
    std::mutex session_mutex_;       // one conversation at a time
};

/// Structured transcript: query, per-turn response/code/violations/outcome/
/// observation/feedback/usage, final kind and totals. Durations are omitted.
nlohmann::json transcript_json(const SessionResult& result);
SessionResult transcript_from_json(const nlohmann::json& j);
void export_transcript(const SessionResult& result, const std::filesystem::path& path);
SessionResult load_transcript(const std::filesystem::path& path);

}  // namespace dualstream
