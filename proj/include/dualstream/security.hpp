#pragma once

// Static policy gate run on every candidate cell before execution. Matching is
// name-based over AST nodes: Import/ImportFrom for modules, Call for callables,
// Attribute (and bare Name) for attributes. There is no data-flow analysis, so
// `__import__("os")` is only caught because `__import__` is a banned call.

#include "dualstream/python.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dualstream {

enum class RuleKind { import_rule, function_rule, attribute_rule, syntax };

std::string_view to_string(RuleKind kind) noexcept;

struct Rule {
    RuleKind kind = RuleKind::import_rule;
    std::vector<std::string> targets;
};

struct SecurityPolicy {
    std::vector<std::string> banned_imports;
    std::vector<std::string> banned_calls;
    std::vector<std::string> banned_attributes;

    /// One rule per non-empty list, in Import/Function/Attribute order.
    [[nodiscard]] std::vector<Rule> rule_set() const;

    /// Drops empty names and duplicates, keeping first occurrences.
    void normalize();

    /// JSON document with the three string lists; missing lists are empty.
    /// Throws Error(schema) or Error(io).
    static SecurityPolicy from_json_file(const std::filesystem::path& path);
};

struct SourceLocation {
    int line = 1;    // 1-based
    int column = 1;  // 1-based

    auto operator<=>(const SourceLocation&) const = default;
};

struct Violation {
    RuleKind rule_kind = RuleKind::import_rule;
    std::string offending_name;
    SourceLocation location;
    std::string message;
};

struct SyntaxReport {
    bool ok = false;
    python::Ref tree;  // ast.Module when ok
    std::optional<SourceLocation> error_location;
    std::string error_message;
};

SyntaxReport parse_source(std::string_view source);

/// Every rule match in the source, sorted by location then rule kind. A
/// source that does not parse yields exactly one RuleKind::syntax violation.
std::vector<Violation> check(std::string_view source, const SecurityPolicy& policy);

/// {os, subprocess} imports, {eval, exec, __import__} calls, {__builtins__} attributes.
SecurityPolicy default_policy();

/// Violation messages inside <security_error> tags followed by the fixed
/// remediation sentence. Throws Error(contract) on an empty list.
std::string format_security_feedback(const std::vector<Violation>& violations);

}  // namespace dualstream
