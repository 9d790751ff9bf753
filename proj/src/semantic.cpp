#include "dualstream/semantic.hpp"

#include "dualstream/errors.hpp"

#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dualstream {

namespace {

constexpr const char* kAgentIdentity =
    "You are a tool-augmented agent specializing in Python programming that enables function-calling "
    "through LLM code generation. You have to leverage your coding capabilities to interact with tools "
    "through a Python runtime environment, allowing direct access to execution results and runtime state. "
    "The user will give you a task and you should solve it by writing Python code in the Python "
    "environment provided.";

constexpr const char* kInstructions =
    "1. Carefully read and analyze the user's input.\n"
    "\n"
    "2. If the task requires Python code:\n"
    "   - Generate appropriate Python code to address the user's request.\n"
    "   - Your code will then be executed in a Python environment, and the execution result will be "
    "returned to you as input for the next step.\n"
    "   - During each intermediate step, you can use 'print()' to save whatever important information you "
    "will then need in the following steps.\n"
    "   - These print outputs will then be given to you as input for the next step.\n"
    "   - Review the result and generate additional code as needed until the task is completed.\n"
    "\n"
    "3. CRITICAL EXECUTION CONTEXT: You are operating in a persistent Jupyter-like environment where:\n"
    "  - Each code block you write is executed in a new cell within the SAME continuous session\n"
    "  - ALL variables, functions, and imports persist across cells automatically\n"
    "  - You can directly reference any variable created in previous cells without using locals(), "
    "globals(), or any special access methods.\n"
    "\n"
    "4. If the task doesn't require Python code, provide a direct answer based on your knowledge.\n"
    "\n"
    "5. Always provide your final answer in plain text, not as a code block.\n"
    "\n"
    "6. You must not perform any calculations or operations yourself, even for simple tasks like sorting "
    "or addition.\n"
    "\n"
    "7. Write your code in a {python_block_identifier} code block. In each step, write all your code in "
    "only one block.\n"
    "\n"
    "8. Never predict, simulate, or fabricate code execution results.\n"
    "\n"
    "9. To solve the task, you must plan forward to proceed in a series of steps, in a cycle of Thought "
    "and Code sequences.";

constexpr const char* kExecutionFeedback =
    "<execution_output>\n"
    "{execution_output}\n"
    "</execution_output>\n"
    "\n"
    "IMPORTANT CONTEXT REMINDER:\n"
    "- Based on this output, should we continue with more operations?\n"
    "- If the output includes an error, please review the error carefully and modify your code to fix the "
    "error if needed.\n"
    "- If yes, provide the next code block. If no, provide the final answer (not as a code block).\n"
    "- You are in the SAME Jupyter-like session. All variables from your previous code blocks are still "
    "available and can be accessed directly by name.\n"
    "- You DO NOT need to use locals(), globals(), or any special methods to access them.\n"
    "- Think of this exactly like working in Jupyter: when you create a variable in cell 1, you can simply "
    "use it by name in cell 2, 3, 4, etc.";

constexpr const char* kTruncationFeedback =
    "The code execution generated {output_length} characters of output, which exceeds the maximum limit "
    "of {max_length} characters.\n"
    "Please modify your code to:\n"
    "1. Avoid printing large datasets or lengthy content\n"
    "2. Use summary statistics instead of full data (e.g., print shape, head(), describe() for "
    "dataframes)\n"
    "3. Print only essential information needed for the task";

constexpr const char* kSecurityFeedback =
    "<security_error>\n"
    "{error}\n"
    "</security_error>\n"
    "Code blocked for security reasons. Please modify your code to avoid this violation.";

constexpr const char* kSystemLayout =
    "{agent_identity}\n"
    "\n"
    "Current time: {current_time}\n"
    "\n"
    "You have access to:\n"
    "\n"
    "{functions}\n"
    "\n"
    "{variables}\n"
    "\n"
    "{types}\n"
    "\n"
    "Instructions:\n"
    "{instructions}";

void require_placeholder(std::string_view text, std::string_view field, std::string_view placeholder) {
    if (text.find(placeholder) == std::string_view::npos) {
        throw Error(ErrorCode::template_error,
                    "template '" + std::string(field) + "' is missing placeholder " + std::string(placeholder));
    }
}

std::string trim_copy(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

bool is_language_tag(std::string_view line) {
    if (line.empty()) {
        return false;
    }
    for (char c : line) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                        c == '_' || c == '+' || c == '-' || c == '#' || c == '.';
        if (!ok) {
            return false;
        }
    }
    return true;
}

}  // namespace

std::string_view to_string(Role role) noexcept {
    switch (role) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "user";
}

Role role_from_string(std::string_view text) {
    if (text == "system") return Role::system;
    if (text == "user") return Role::user;
    if (text == "assistant") return Role::assistant;
    throw Error(ErrorCode::schema, "unknown role '" + std::string(text) + "'");
}

std::string_view to_string(ObservationKind kind) noexcept {
    switch (kind) {
        case ObservationKind::output: return "output";
        case ObservationKind::size_error: return "size_error";
        case ObservationKind::security_error: return "security_error";
    }
    return "output";
}

std::int64_t estimate_tokens(std::string_view text) noexcept {
    const auto chars = static_cast<std::int64_t>(python::codepoint_length(text));
    return (chars + 3) / 4;
}

ConversationHistory::ConversationHistory(ChatMessage system, Counter counter) : counter_(std::move(counter)) {
    if (system.role != Role::system) {
        throw Error(ErrorCode::ordering_error, "conversation history must start with a system message");
    }
    token_estimate_ = counter_(system.content);
    messages_.push_back(std::move(system));
}

void ConversationHistory::append(ChatMessage message) {
    const Role last = messages_.back().role;
    const bool ok = (message.role == Role::user && (last == Role::system || last == Role::assistant)) ||
                    (message.role == Role::assistant && last == Role::user);
    if (!ok) {
        throw Error(ErrorCode::ordering_error, "cannot append a " + std::string(to_string(message.role)) +
                                                   " message after a " + std::string(to_string(last)) + " message");
    }
    if (message.content.empty()) {
        throw Error(ErrorCode::ordering_error, std::string(to_string(message.role)) + " message content is empty");
    }
    token_estimate_ += counter_(message.content);
    messages_.push_back(std::move(message));
}

PromptTemplateSet PromptTemplateSet::defaults() {
    PromptTemplateSet t;
    t.agent_identity = kAgentIdentity;
    t.instructions = kInstructions;
    t.block_identifier = "python";
    t.execution_feedback = kExecutionFeedback;
    t.truncation_feedback = kTruncationFeedback;
    t.security_feedback = kSecurityFeedback;
    return t;
}

void PromptTemplateSet::validate() const {
    require_placeholder(execution_feedback, "execution_feedback", "{execution_output}");
    require_placeholder(truncation_feedback, "truncation_feedback", "{output_length}");
    require_placeholder(truncation_feedback, "truncation_feedback", "{max_length}");
    require_placeholder(security_feedback, "security_feedback", "{error}");
    if (block_identifier.empty() || block_identifier.find_first_of(" \t\r\n`") != std::string::npos) {
        throw Error(ErrorCode::template_error, "block_identifier must be a single word");
    }
}

PromptTemplateSet PromptTemplateSet::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io, "cannot open template file " + path.string());
    }
    PromptTemplateSet t = defaults();
    try {
        const auto j = nlohmann::json::parse(in);
        if (!j.is_object()) {
            throw Error(ErrorCode::schema, "template file must contain an object");
        }
        for (const auto& [key, value] : j.items()) {
            if (!value.is_string()) {
                throw Error(ErrorCode::schema, "template '" + key + "' must be a string");
            }
            const auto text = value.get<std::string>();
            if (key == "agent_identity") t.agent_identity = text;
            else if (key == "instructions") t.instructions = text;
            else if (key == "block_identifier") t.block_identifier = text;
            else if (key == "execution_feedback") t.execution_feedback = text;
            else if (key == "truncation_feedback") t.truncation_feedback = text;
            else if (key == "security_feedback") t.security_feedback = text;
            else throw Error(ErrorCode::schema, "unknown template '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::schema, "template file " + path.string() + ": " + e.what());
    }
    t.validate();
    return t;
}

std::string substitute(std::string_view text, const std::vector<std::pair<std::string, std::string>>& values) {
    std::string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] == '{') {
            const auto close = text.find('}', i + 1);
            if (close != std::string_view::npos) {
                const auto key = text.substr(i + 1, close - i - 1);
                bool replaced = false;
                for (const auto& [k, v] : values) {
                    if (k == key) {
                        out += v;
                        replaced = true;
                        break;
                    }
                }
                if (replaced) {
                    i = close + 1;
                    continue;
                }
            }
        }
        out += text[i];
        ++i;
    }
    return out;
}

std::string format_timestamp(std::chrono::system_clock::time_point when) {
    const std::time_t t = std::chrono::system_clock::to_time_t(when);
    std::tm tm{};
    localtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%d %H:%M:%S");
    return os.str();
}

ChatMessage build_system_prompt(const PromptTemplateSet& templates, const ContextBundle& bundle,
                                std::string_view current_time, std::string_view additional_context) {
    templates.validate();
    const std::string instructions =
        substitute(templates.instructions, {{"python_block_identifier", templates.block_identifier}});
    std::string content = substitute(kSystemLayout, {{"agent_identity", templates.agent_identity},
                                                     {"current_time", std::string(current_time)},
                                                     {"functions", bundle.functions_block},
                                                     {"variables", bundle.variables_block},
                                                     {"types", bundle.types_block},
                                                     {"instructions", instructions}});
    if (!additional_context.empty()) {
        content += "\n\n";
        content += additional_context;
    }
    return ChatMessage{Role::system, std::move(content)};
}

Action extract_action(std::string_view response, std::string_view block_identifier) {
    Action action;
    action.raw_response = std::string(response);

    std::vector<std::string> blocks;
    std::size_t pos = 0;
    while (true) {
        const auto open = response.find("```", pos);
        if (open == std::string_view::npos) {
            break;
        }
        const auto body_start = open + 3;
        const auto close = response.find("```", body_start);
        if (close == std::string_view::npos) {
            break;
        }
        std::string_view body = response.substr(body_start, close - body_start);
        pos = close + 3;

        const auto newline = body.find('\n');
        const std::string first_line =
            trim_copy(newline == std::string_view::npos ? body : body.substr(0, newline));
        std::string_view code;
        if (newline != std::string_view::npos && (first_line.empty() || first_line == block_identifier)) {
            code = body.substr(newline + 1);
        } else if (newline != std::string_view::npos && is_language_tag(first_line)) {
            continue;  // fenced block in another language
        } else if (newline == std::string_view::npos && first_line == block_identifier) {
            code = {};
        } else {
            code = body;
        }
        std::string text(code);
        if (!text.empty() && text.back() == '\n') {
            text.pop_back();
            if (!text.empty() && text.back() == '\r') {
                text.pop_back();
            }
        }
        blocks.push_back(std::move(text));
    }

    action.block_count = blocks.size();
    if (blocks.empty()) {
        action.kind = ActionKind::final_answer;
        action.answer = std::string(response);
        return action;
    }
    action.kind = ActionKind::code;
    action.code = std::move(blocks.front());
    action.multi_block = action.block_count > 1;
    return action;
}

std::string observable_text(const ExecutionOutcome& outcome) {
    std::string text = outcome.stdout_text;
    auto join = [&text](const std::string& part) {
        if (part.empty()) {
            return;
        }
        if (!text.empty() && text.back() != '\n') {
            text += '\n';
        }
        text += part;
    };
    join(outcome.stderr_text);
    if (outcome.error) {
        join(outcome.error->render());
    }
    return text;
}

ShapedObservation shape_observation(const ExecutionOutcome& outcome, std::size_t max_length,
                                    const PromptTemplateSet& templates) {
    if (max_length == 0) {
        throw Error(ErrorCode::contract, "shaping limit must be positive");
    }
    ShapedObservation shaped;
    std::string text = observable_text(outcome);
    shaped.raw_length = python::codepoint_length(text) + outcome.dropped_chars;
    if (shaped.raw_length <= max_length) {
        shaped.kind = ObservationKind::output;
        shaped.text = std::move(text);
        return shaped;
    }
    shaped.kind = ObservationKind::size_error;
    shaped.text = substitute(templates.truncation_feedback, {{"output_length", std::to_string(shaped.raw_length)},
                                                             {"max_length", std::to_string(max_length)}});
    return shaped;
}

ShapedObservation security_observation(const std::vector<Violation>& violations, const PromptTemplateSet& templates) {
    if (violations.empty()) {
        throw Error(ErrorCode::contract, "security observation needs at least one violation");
    }
    std::string joined;
    for (std::size_t i = 0; i < violations.size(); ++i) {
        if (i != 0) {
            joined += '\n';
        }
        joined += violations[i].message;
    }
    ShapedObservation shaped;
    shaped.kind = ObservationKind::security_error;
    shaped.text = substitute(templates.security_feedback, {{"error", joined}});
    shaped.raw_length = python::codepoint_length(joined);
    return shaped;
}

ChatMessage make_feedback(const ShapedObservation& shaped, const PromptTemplateSet& templates) {
    switch (shaped.kind) {
        case ObservationKind::output:
            return {Role::user, substitute(templates.execution_feedback, {{"execution_output", shaped.text}})};
        case ObservationKind::size_error:
        case ObservationKind::security_error:
            return {Role::user, shaped.text};
    }
    return {Role::user, shaped.text};
}

}  // namespace dualstream
