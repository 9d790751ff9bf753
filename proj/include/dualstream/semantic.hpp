#pragma once

// Semantic stream: the system prompt, the conversation history, parsing of
// model responses into actions, and observation shaping.

#include "dualstream/descriptor.hpp"
#include "dualstream/runtime.hpp"
#include "dualstream/security.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dualstream {

/// Default shaping limit in characters.
inline constexpr std::size_t kDefaultMaxOutput = 4000;

enum class Role { system, user, assistant };

std::string_view to_string(Role role) noexcept;
Role role_from_string(std::string_view text);

struct ChatMessage {
    Role role = Role::user;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

/// Local token estimate: ceil(code points / 4).
std::int64_t estimate_tokens(std::string_view text) noexcept;

class ConversationHistory {
public:
    using Counter = std::function<std::int64_t(std::string_view)>;

    explicit ConversationHistory(ChatMessage system, Counter counter = estimate_tokens);

    /// Appends, enforcing system → user → assistant → user ... alternation.
    /// Throws Error(ordering_error).
    void append(ChatMessage message);

    [[nodiscard]] const std::vector<ChatMessage>& messages() const noexcept { return messages_; }
    [[nodiscard]] std::size_t size() const noexcept { return messages_.size(); }
    [[nodiscard]] std::int64_t token_estimate() const noexcept { return token_estimate_; }
    [[nodiscard]] const ChatMessage& back() const { return messages_.back(); }

private:
    std::vector<ChatMessage> messages_;
    Counter counter_;
    std::int64_t token_estimate_ = 0;
};

enum class ActionKind { code, final_answer };

struct Action {
    ActionKind kind = ActionKind::final_answer;
    std::string code;
    std::string answer;
    std::string raw_response;
    /// More than one runnable fenced block was present; only the first is used.
    bool multi_block = false;
    std::size_t block_count = 0;
};

enum class ObservationKind { output, size_error, security_error };

std::string_view to_string(ObservationKind kind) noexcept;

struct ShapedObservation {
    ObservationKind kind = ObservationKind::output;
    std::string text;
    std::size_t raw_length = 0;

    bool operator==(const ShapedObservation&) const = default;
};

struct PromptTemplateSet {
    std::string agent_identity;
    std::string instructions;        // may contain {python_block_identifier}
    std::string block_identifier = "python";
    std::string execution_feedback;  // {execution_output}
    std::string truncation_feedback; // {output_length}, {max_length}
    std::string security_feedback;   // {error}

    /// The built-in templates.
    static PromptTemplateSet defaults();

    /// Defaults overlaid with the keys of a JSON object document (keys are the
    /// field names above). Throws Error(schema) / Error(template_error).
    static PromptTemplateSet from_json_file(const std::filesystem::path& path);

    /// Throws Error(template_error) naming the first missing placeholder.
    void validate() const;
};

/// Replaces each `{key}` occurrence in one pass; unknown placeholders stay.
std::string substitute(std::string_view text,
                       const std::vector<std::pair<std::string, std::string>>& values);

/// "YYYY-MM-DD HH:MM:SS" in local time.
std::string format_timestamp(std::chrono::system_clock::time_point when);

ChatMessage build_system_prompt(const PromptTemplateSet& templates, const ContextBundle& bundle,
                                std::string_view current_time, std::string_view additional_context);

Action extract_action(std::string_view response, std::string_view block_identifier);

/// Text subject to shaping: stdout, then stderr, then the error rendering,
/// joined by newlines where both sides are non-empty.
std::string observable_text(const ExecutionOutcome& outcome);

ShapedObservation shape_observation(const ExecutionOutcome& outcome, std::size_t max_length,
                                    const PromptTemplateSet& templates = PromptTemplateSet::defaults());

ShapedObservation security_observation(const std::vector<Violation>& violations,
                                       const PromptTemplateSet& templates = PromptTemplateSet::defaults());

ChatMessage make_feedback(const ShapedObservation& shaped, const PromptTemplateSet& templates);

}  // namespace dualstream
