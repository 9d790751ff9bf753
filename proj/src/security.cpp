#include "dualstream/security.hpp"

#include "dualstream/errors.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace dualstream {

namespace py = pybind11;

namespace {

constexpr const char* kRemediation = "Code blocked for security reasons. Please modify your code to avoid this violation.";

bool listed(const std::vector<std::string>& names, const std::string& candidate) {
    return std::find(names.begin(), names.end(), candidate) != names.end();
}

// "os.path" is banned when "os" or "os.path" is.
std::optional<std::string> banned_module(const std::vector<std::string>& banned, const std::string& module) {
    std::string prefix;
    std::size_t start = 0;
    while (true) {
        const auto dot = module.find('.', start);
        prefix = module.substr(0, dot);
        if (listed(banned, prefix)) {
            return prefix;
        }
        if (dot == std::string::npos) {
            return std::nullopt;
        }
        start = dot + 1;
    }
}

// Dotted name of a call target: Name -> "eval", Attribute chain -> "os.system".
std::string dotted_name(py::handle node, py::handle name_cls, py::handle attr_cls) {
    if (py::isinstance(node, name_cls)) {
        return node.attr("id").cast<std::string>();
    }
    if (py::isinstance(node, attr_cls)) {
        const std::string base = dotted_name(node.attr("value"), name_cls, attr_cls);
        const std::string attr = node.attr("attr").cast<std::string>();
        return base.empty() ? attr : base + "." + attr;
    }
    return {};
}

SourceLocation location_of(py::handle node) {
    SourceLocation loc;
    if (py::hasattr(node, "lineno")) {
        loc.line = node.attr("lineno").cast<int>();
    }
    if (py::hasattr(node, "col_offset")) {
        loc.column = node.attr("col_offset").cast<int>() + 1;
    }
    return loc;
}

std::string location_text(const SourceLocation& loc) {
    return "line " + std::to_string(loc.line) + ", column " + std::to_string(loc.column);
}

Violation make_violation(RuleKind kind, std::string name, SourceLocation loc, std::string_view what) {
    Violation v;
    v.rule_kind = kind;
    v.offending_name = std::move(name);
    v.location = loc;
    v.message = std::string(to_string(kind)) + ": " + std::string(what) + " '" + v.offending_name +
                "' is not allowed (" + location_text(loc) + ")";
    return v;
}

}  // namespace

std::string_view to_string(RuleKind kind) noexcept {
    switch (kind) {
        case RuleKind::import_rule: return "ImportRule";
        case RuleKind::function_rule: return "FunctionRule";
        case RuleKind::attribute_rule: return "AttributeRule";
        case RuleKind::syntax: return "SyntaxError";
    }
    return "ImportRule";
}

std::vector<Rule> SecurityPolicy::rule_set() const {
    std::vector<Rule> rules;
    if (!banned_imports.empty()) {
        rules.push_back({RuleKind::import_rule, banned_imports});
    }
    if (!banned_calls.empty()) {
        rules.push_back({RuleKind::function_rule, banned_calls});
    }
    if (!banned_attributes.empty()) {
        rules.push_back({RuleKind::attribute_rule, banned_attributes});
    }
    return rules;
}

void SecurityPolicy::normalize() {
    for (auto* list : {&banned_imports, &banned_calls, &banned_attributes}) {
        std::set<std::string> seen;
        std::vector<std::string> kept;
        for (auto& name : *list) {
            if (!name.empty() && seen.insert(name).second) {
                kept.push_back(name);
            }
        }
        *list = std::move(kept);
    }
}

SecurityPolicy SecurityPolicy::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io, "cannot open policy file " + path.string());
    }
    SecurityPolicy policy;
    try {
        const auto j = nlohmann::json::parse(in);
        if (!j.is_object()) {
            throw Error(ErrorCode::schema, "policy file must contain an object");
        }
        for (const auto& [key, value] : j.items()) {
            if (key != "banned_imports" && key != "banned_calls" && key != "banned_attributes") {
                throw Error(ErrorCode::schema, "unknown policy key '" + key + "'");
            }
            if (!value.is_array()) {
                throw Error(ErrorCode::schema, "policy key '" + key + "' must be a list of strings");
            }
            for (const auto& item : value) {
                if (!item.is_string() || item.get<std::string>().empty()) {
                    throw Error(ErrorCode::schema, "policy key '" + key + "' must be a list of non-empty strings");
                }
            }
        }
        policy.banned_imports = j.value("banned_imports", std::vector<std::string>{});
        policy.banned_calls = j.value("banned_calls", std::vector<std::string>{});
        policy.banned_attributes = j.value("banned_attributes", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::schema, "policy file " + path.string() + ": " + e.what());
    }
    policy.normalize();
    return policy;
}

SyntaxReport parse_source(std::string_view source) {
    python::ensure_started();
    python::Gil gil;
    SyntaxReport report;
    try {
        py::object tree = py::module_::import("ast").attr("parse")(py::str(std::string(source)), "<cell>", "exec");
        report.ok = true;
        report.tree = python::Ref(tree);
    } catch (py::error_already_set& e) {
        report.ok = false;
        SourceLocation loc;
        py::object value = e.value();
        if (e.matches(PyExc_SyntaxError)) {
            if (py::hasattr(value, "lineno") && !value.attr("lineno").is_none()) {
                loc.line = value.attr("lineno").cast<int>();
            }
            if (py::hasattr(value, "offset") && !value.attr("offset").is_none()) {
                loc.column = std::max(1, value.attr("offset").cast<int>());
            }
            report.error_message = py::str(value.attr("msg")).cast<std::string>();
        } else {
            // ValueError for NUL bytes and similar.
            report.error_message = py::str(value).cast<std::string>();
        }
        report.error_location = loc;
    }
    return report;
}

std::vector<Violation> check(std::string_view source, const SecurityPolicy& policy) {
    auto report = parse_source(source);
    std::vector<Violation> out;
    if (!report.ok) {
        Violation v;
        v.rule_kind = RuleKind::syntax;
        v.location = *report.error_location;
        v.offending_name = "<syntax>";
        v.message = "SyntaxError: " + report.error_message + " (" + location_text(v.location) + ")";
        out.push_back(std::move(v));
        return out;
    }

    python::Gil gil;
    auto ast = py::module_::import("ast");
    py::object import_cls = ast.attr("Import");
    py::object from_cls = ast.attr("ImportFrom");
    py::object call_cls = ast.attr("Call");
    py::object attr_cls = ast.attr("Attribute");
    py::object name_cls = ast.attr("Name");

    for (py::handle node : ast.attr("walk")(report.tree.get())) {
        if (py::isinstance(node, import_cls)) {
            for (py::handle alias : node.attr("names")) {
                const auto module = alias.attr("name").cast<std::string>();
                if (auto hit = banned_module(policy.banned_imports, module)) {
                    out.push_back(make_violation(RuleKind::import_rule, module, location_of(node), "import of module"));
                }
            }
        } else if (py::isinstance(node, from_cls)) {
            py::object module_obj = node.attr("module");
            const std::string module = module_obj.is_none() ? std::string() : module_obj.cast<std::string>();
            const int level = node.attr("level").is_none() ? 0 : node.attr("level").cast<int>();
            if (level == 0 && !module.empty() && banned_module(policy.banned_imports, module)) {
                out.push_back(make_violation(RuleKind::import_rule, module, location_of(node), "import of module"));
            } else if (level == 0) {
                // "from os import path" style where the package itself is fine but
                // the imported submodule is banned, e.g. "from x import os".
                for (py::handle alias : node.attr("names")) {
                    const auto name = alias.attr("name").cast<std::string>();
                    const std::string full = module.empty() ? name : module + "." + name;
                    if (listed(policy.banned_imports, full)) {
                        out.push_back(make_violation(RuleKind::import_rule, full, location_of(node), "import of module"));
                    }
                }
            }
        } else if (py::isinstance(node, call_cls)) {
            py::object func = node.attr("func");
            const std::string dotted = dotted_name(func, name_cls, attr_cls);
            if (dotted.empty()) {
                continue;
            }
            const std::string last = dotted.substr(dotted.rfind('.') + 1);
            if (listed(policy.banned_calls, dotted)) {
                out.push_back(make_violation(RuleKind::function_rule, dotted, location_of(node), "call to"));
            } else if (listed(policy.banned_calls, last)) {
                out.push_back(make_violation(RuleKind::function_rule, last, location_of(node), "call to"));
            }
        } else if (py::isinstance(node, attr_cls)) {
            const auto attr = node.attr("attr").cast<std::string>();
            if (listed(policy.banned_attributes, attr)) {
                out.push_back(make_violation(RuleKind::attribute_rule, attr, location_of(node), "access to attribute"));
            }
        } else if (py::isinstance(node, name_cls)) {
            const auto id = node.attr("id").cast<std::string>();
            if (listed(policy.banned_attributes, id)) {
                out.push_back(make_violation(RuleKind::attribute_rule, id, location_of(node), "access to attribute"));
            }
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const Violation& a, const Violation& b) {
        if (a.location != b.location) {
            return a.location < b.location;
        }
        return static_cast<int>(a.rule_kind) < static_cast<int>(b.rule_kind);
    });
    return out;
}

SecurityPolicy default_policy() {
    SecurityPolicy p;
    p.banned_imports = {"os", "subprocess"};
    p.banned_calls = {"eval", "exec", "__import__"};
    p.banned_attributes = {"__builtins__"};
    return p;
}

std::string format_security_feedback(const std::vector<Violation>& violations) {
    if (violations.empty()) {
        throw Error(ErrorCode::contract, "format_security_feedback needs at least one violation");
    }
    std::string text = "<security_error>\n";
    for (const auto& v : violations) {
        text += v.message + "\n";
    }
    text += "</security_error>\n";
    text += kRemediation;
    return text;
}

}  // namespace dualstream
