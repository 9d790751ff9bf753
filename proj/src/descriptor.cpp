#include "dualstream/descriptor.hpp"

#include "dualstream/errors.hpp"
#include "dualstream/python.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace dualstream {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

std::size_t indent_of(std::string_view line) {
    const auto pos = line.find_first_not_of(' ');
    return pos == std::string_view::npos ? line.size() : pos;
}

std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            lines.emplace_back(text.substr(start));
            break;
        }
        lines.emplace_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

// Canonical header for a recognized section line, or "" for other headers,
// or nullopt when the line is not a section header at all.
std::optional<std::string> section_header(std::string_view line) {
    const std::string t = trim(line);
    if (t.empty() || t.back() != ':') {
        return std::nullopt;
    }
    const std::string word = t.substr(0, t.size() - 1);
    if (word == "Args" || word == "Arguments" || word == "Parameters") {
        return std::string("Args:");
    }
    if (word == "Returns" || word == "Return") {
        return std::string("Returns:");
    }
    static const std::set<std::string> other = {"Raises", "Yields", "Examples", "Example", "Note",
                                                "Notes", "Attributes", "See Also", "Warning"};
    if (other.count(word) != 0) {
        return std::string();
    }
    return std::nullopt;
}

std::string clip(std::string_view text, std::size_t limit) {
    if (python::codepoint_length(text) <= limit) {
        return std::string(text);
    }
    std::size_t count = 0;
    std::size_t i = 0;
    const std::size_t keep = limit > 3 ? limit - 3 : 0;
    while (i < text.size() && count < keep) {
        ++i;
        while (i < text.size() && (static_cast<unsigned char>(text[i]) & 0xC0) == 0x80) {
            ++i;
        }
        ++count;
    }
    return std::string(text.substr(0, i)) + "...";
}

std::string annotation_label(py::handle annotation, py::handle empty) {
    if (annotation.is(empty)) {
        return kAnyLabel;
    }
    if (annotation.is_none() || annotation.is(py::type::handle_of(py::none()))) {
        return "None";
    }
    if (py::isinstance<py::str>(annotation)) {
        return annotation.cast<std::string>();
    }
    auto types = py::module_::import("types");
    const bool generic_alias = py::isinstance(annotation, types.attr("GenericAlias"));
    if (PyType_Check(annotation.ptr()) != 0 && !generic_alias) {
        return py::str(annotation.attr("__name__")).cast<std::string>();
    }
    std::string text = py::str(annotation).cast<std::string>();
    for (std::string_view prefix : {"typing.", "builtins."}) {
        std::size_t pos = 0;
        while ((pos = text.find(prefix, pos)) != std::string::npos) {
            text.erase(pos, prefix.size());
        }
    }
    return text;
}

Signature signature_from_inspect(py::handle sig, bool drop_first) {
    auto inspect = py::module_::import("inspect");
    py::object empty = inspect.attr("Parameter").attr("empty");
    py::object param_cls = inspect.attr("Parameter");
    Signature out;
    bool first = true;
    for (auto item : sig.attr("parameters").attr("values")()) {
        if (first && drop_first) {
            first = false;
            continue;
        }
        first = false;
        Parameter p;
        p.name = py::str(item.attr("name")).cast<std::string>();
        p.type_label = annotation_label(item.attr("annotation"), empty);
        py::object def = item.attr("default");
        if (!def.is(empty)) {
            p.default_repr = python::bounded_repr(def, 80);
        }
        py::object kind = item.attr("kind");
        if (kind.is(param_cls.attr("VAR_POSITIONAL"))) {
            p.kind = Parameter::Kind::var_positional;
        } else if (kind.is(param_cls.attr("KEYWORD_ONLY"))) {
            p.kind = Parameter::Kind::keyword_only;
        } else if (kind.is(param_cls.attr("VAR_KEYWORD"))) {
            p.kind = Parameter::Kind::var_keyword;
        }
        out.parameters.push_back(std::move(p));
    }
    out.return_label = annotation_label(sig.attr("return_annotation"), empty);
    return out;
}

std::optional<Signature> try_signature(py::handle fn, bool drop_first) {
    try {
        auto sig = py::module_::import("inspect").attr("signature")(fn);
        return signature_from_inspect(sig, drop_first);
    } catch (const py::error_already_set&) {
        return std::nullopt;
    }
}

std::string first_paragraph(py::handle doc_obj) {
    if (doc_obj.is_none() || !py::isinstance<py::str>(doc_obj)) {
        return {};
    }
    auto cleaned = py::module_::import("inspect").attr("cleandoc")(doc_obj).cast<std::string>();
    return split_doc(cleaned).first;
}

void check_unique(const std::vector<std::string>& names, std::string_view block) {
    std::set<std::string> seen;
    for (const auto& n : names) {
        if (!seen.insert(n).second) {
            throw Error(ErrorCode::duplicate_descriptor,
                        "duplicate " + std::string(block) + " descriptor: " + n);
        }
    }
}

std::string wrap_block(std::string_view tag, const std::vector<std::string>& items) {
    std::string out = "<" + std::string(tag) + ">\n";
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i != 0) {
            out += "\n";
        }
        out += items[i];
    }
    out += "</" + std::string(tag) + ">";
    return out;
}

}  // namespace

std::string Signature::render(std::string_view name) const {
    std::string out(name);
    out += "(";
    bool saw_star = false;
    for (std::size_t i = 0; i < parameters.size(); ++i) {
        const auto& p = parameters[i];
        if (i != 0) {
            out += ", ";
        }
        if (p.kind == Parameter::Kind::keyword_only && !saw_star) {
            out += "*, ";
            saw_star = true;
        }
        if (p.kind == Parameter::Kind::var_positional) {
            out += "*";
            saw_star = true;
        } else if (p.kind == Parameter::Kind::var_keyword) {
            out += "**";
        }
        out += p.name + ": " + p.type_label;
        if (p.default_repr) {
            out += " = " + *p.default_repr;
        }
    }
    out += ") -> " + return_label;
    return out;
}

std::pair<std::string, std::string> split_doc(std::string_view docstring) {
    const auto lines = split_lines(docstring);
    std::size_t i = 0;
    std::string summary;
    for (; i < lines.size(); ++i) {
        const std::string t = trim(lines[i]);
        if (t.empty()) {
            if (!summary.empty()) {
                break;
            }
            continue;
        }
        if (section_header(lines[i])) {
            break;
        }
        if (!summary.empty()) {
            summary += ' ';
        }
        summary += t;
    }

    std::vector<std::string> doc_lines;
    while (i < lines.size()) {
        auto header = section_header(lines[i]);
        if (!header) {
            ++i;
            continue;
        }
        const std::size_t header_indent = indent_of(lines[i]);
        std::vector<std::string> body;
        ++i;
        for (; i < lines.size(); ++i) {
            if (trim(lines[i]).empty()) {
                continue;
            }
            if (indent_of(lines[i]) <= header_indent) {
                break;
            }
            body.push_back(lines[i]);
        }
        if (header->empty() || body.empty()) {
            continue;
        }
        std::size_t common = std::string::npos;
        for (const auto& b : body) {
            common = std::min(common, indent_of(b));
        }
        doc_lines.push_back(*header);
        for (const auto& b : body) {
            std::string line = b.substr(common);
            while (!line.empty() && (line.back() == ' ' || line.back() == '\r')) {
                line.pop_back();
            }
            doc_lines.push_back("  " + line);
        }
    }

    summary = clip(summary, kDocCap);
    std::size_t budget = kDocCap - python::codepoint_length(summary);
    std::string doc;
    bool clipped = false;
    for (const auto& line : doc_lines) {
        const std::size_t need = python::codepoint_length(line) + (doc.empty() ? 0 : 1);
        if (need > budget) {
            clipped = true;
            break;
        }
        if (!doc.empty()) {
            doc += '\n';
        }
        doc += line;
        budget -= need;
    }
    if (clipped && budget >= 6) {
        doc += doc.empty() ? "  ..." : "\n  ...";
    }
    return {summary, doc};
}

bool is_method_signature(std::string_view method) {
    const auto open = method.find('(');
    const auto arrow = method.rfind(") -> ");
    if (open == std::string_view::npos || open == 0 || arrow == std::string_view::npos || arrow < open) {
        return false;
    }
    if (arrow + 5 >= method.size()) {
        return false;
    }
    return python::is_identifier(method.substr(0, open));
}

FunctionDescriptor describe_function(py::handle callable, const FunctionOverrides& overrides) {
    python::Gil gil;
    if (PyCallable_Check(callable.ptr()) == 0) {
        throw Error(ErrorCode::not_callable, "entity is not callable: " + python::type_name(callable));
    }
    FunctionDescriptor d;

    if (overrides.name) {
        d.name = *overrides.name;
    } else if (py::hasattr(callable, "__name__")) {
        d.name = py::str(callable.attr("__name__")).cast<std::string>();
    }
    if (!python::is_identifier(d.name)) {
        throw Error(ErrorCode::metadata_missing,
                    "callable has no usable name (" + (d.name.empty() ? std::string("<none>") : d.name) +
                        "); supply one through overrides");
    }

    if (overrides.signature) {
        d.signature = *overrides.signature;
    } else if (auto sig = try_signature(callable, false)) {
        d.signature = *sig;
    } else {
        throw Error(ErrorCode::metadata_missing, "signature of '" + d.name + "' cannot be inspected");
    }

    std::string summary;
    std::string details;
    py::object doc = py::module_::import("inspect").attr("getdoc")(callable);
    const bool has_doc = !doc.is_none() && !trim(doc.cast<std::string>()).empty();
    if (has_doc) {
        std::tie(summary, details) = split_doc(doc.cast<std::string>());
    }
    if (!has_doc && !overrides.description && !overrides.doc) {
        throw Error(ErrorCode::metadata_missing, "'" + d.name + "' has no documentation; supply a description");
    }
    d.description = overrides.description ? clip(*overrides.description, kDocCap) : summary;
    d.doc = overrides.doc ? *overrides.doc : details;
    return d;
}

VariableDescriptor describe_variable(std::string name, py::handle value, std::string description) {
    if (!python::is_identifier(name)) {
        throw Error(ErrorCode::invalid_name, "not a valid identifier: '" + name + "'");
    }
    python::Gil gil;
    return VariableDescriptor{std::move(name), python::type_name(value), std::move(description)};
}

TypeSchema derive_type_schema(py::handle value_or_type) {
    python::Gil gil;
    const bool is_type = PyType_Check(value_or_type.ptr()) != 0;
    py::object cls = is_type ? py::reinterpret_borrow<py::object>(value_or_type)
                             : py::reinterpret_borrow<py::object>(py::type::handle_of(value_or_type));
    auto inspect = py::module_::import("inspect");
    auto builtins = py::module_::import("builtins");
    py::object empty = inspect.attr("Parameter").attr("empty");

    TypeSchema schema;
    schema.type_name = py::str(cls.attr("__name__")).cast<std::string>();
    schema.doc = first_paragraph(py::dict(cls.attr("__dict__")).attr("get")("__doc__"));
    // Auto-generated dataclass docs just repeat the constructor.
    if (schema.doc.rfind(schema.type_name + "(", 0) == 0) {
        schema.doc.clear();
    }

    std::set<std::string> seen_methods;
    std::set<std::string> seen_fields;
    py::list mro = py::list(cls.attr("__mro__"));
    for (auto it = mro.size(); it-- > 0;) {
        py::handle klass = mro[it];
        if (klass.is(builtins.attr("object"))) {
            continue;
        }
        py::dict own = py::dict(klass.attr("__dict__"));
        if (own.contains("__annotations__")) {
            for (auto item : py::dict(own["__annotations__"])) {
                const auto name = py::str(item.first).cast<std::string>();
                if (name.empty() || name[0] == '_' || !seen_fields.insert(name).second) {
                    continue;
                }
                schema.fields.emplace_back(name, annotation_label(item.second, empty));
            }
        }
        for (auto item : own) {
            const auto name = py::str(item.first).cast<std::string>();
            if (name.empty() || name[0] == '_') {
                continue;
            }
            py::handle attr = item.second;
            if (py::isinstance(attr, builtins.attr("property"))) {
                if (seen_fields.insert(name).second) {
                    std::string label = kAnyLabel;
                    py::object fget = attr.attr("fget");
                    if (!fget.is_none()) {
                        if (auto sig = try_signature(fget, true)) {
                            label = sig->return_label;
                        }
                    }
                    schema.fields.emplace_back(name, label);
                }
                continue;
            }
            py::object fn;
            bool drop_first = true;
            if (py::isinstance(attr, builtins.attr("staticmethod"))) {
                fn = attr.attr("__func__");
                drop_first = false;
            } else if (py::isinstance(attr, builtins.attr("classmethod"))) {
                fn = attr.attr("__func__");
            } else if (PyCallable_Check(attr.ptr()) != 0 && PyType_Check(attr.ptr()) == 0) {
                fn = py::reinterpret_borrow<py::object>(attr);
            } else {
                if (!seen_fields.count(name) && PyType_Check(attr.ptr()) == 0) {
                    seen_fields.insert(name);
                    schema.fields.emplace_back(name, python::type_name(attr));
                }
                continue;
            }
            if (!seen_methods.insert(name).second) {
                continue;
            }
            if (auto sig = try_signature(fn, drop_first)) {
                schema.methods.push_back(sig->render(name));
            } else {
                schema.methods.push_back(name + "(...) -> " + kAnyLabel);
            }
        }
    }

    if (!is_type && py::hasattr(value_or_type, "__dict__")) {
        try {
            for (auto item : py::dict(value_or_type.attr("__dict__"))) {
                const auto name = py::str(item.first).cast<std::string>();
                if (name.empty() || name[0] == '_' || seen_fields.count(name) || seen_methods.count(name)) {
                    continue;
                }
                seen_fields.insert(name);
                schema.fields.emplace_back(name, python::type_name(item.second));
            }
        } catch (const py::error_already_set&) {
            // __dict__ that is not a mapping (mappingproxy subclasses etc.)
        }
    }
    return schema;
}

ContextBundle render_context(const std::vector<FunctionDescriptor>& functions,
                             const std::vector<VariableDescriptor>& variables,
                             const std::vector<TypeSchema>& types) {
    std::vector<std::string> names;
    for (const auto& f : functions) {
        names.push_back(f.name);
    }
    check_unique(names, "function");
    names.clear();
    for (const auto& v : variables) {
        names.push_back(v.name);
    }
    check_unique(names, "variable");
    names.clear();
    for (const auto& t : types) {
        names.push_back(t.type_name);
    }
    check_unique(names, "type");

    std::vector<std::string> items;
    for (const auto& f : functions) {
        std::string s = "- function: " + f.signature.render(f.name) + "\n";
        if (!f.description.empty()) {
            s += "  description: " + f.description + "\n";
        }
        if (!f.doc.empty()) {
            s += "  doc:\n";
            for (const auto& line : split_lines(f.doc)) {
                s += "    " + line + "\n";
            }
        }
        items.push_back(std::move(s));
    }
    ContextBundle bundle;
    bundle.functions_block = wrap_block("functions", items);

    items.clear();
    for (const auto& v : variables) {
        std::string s = "- name: " + v.name + "\n  type: " + v.type_label + "\n";
        if (!v.description.empty()) {
            s += "  description: " + v.description + "\n";
        }
        items.push_back(std::move(s));
    }
    bundle.variables_block = wrap_block("variables", items);

    items.clear();
    for (const auto& t : types) {
        std::string s = t.type_name + ":\n";
        if (!t.doc.empty()) {
            s += "  doc: " + t.doc + "\n";
        }
        if (!t.methods.empty()) {
            s += "  methods:\n";
            for (const auto& m : t.methods) {
                s += "    - " + m + "\n";
            }
        }
        if (!t.fields.empty()) {
            s += "  fields:\n";
            for (const auto& [name, label] : t.fields) {
                s += "    - " + name + ": " + label + "\n";
            }
        }
        items.push_back(std::move(s));
    }
    bundle.types_block = wrap_block("types", items);
    return bundle;
}

namespace {

std::string_view kind_name(Parameter::Kind k) {
    switch (k) {
        case Parameter::Kind::positional: return "positional";
        case Parameter::Kind::var_positional: return "var_positional";
        case Parameter::Kind::keyword_only: return "keyword_only";
        case Parameter::Kind::var_keyword: return "var_keyword";
    }
    return "positional";
}

}  // namespace

void to_json(nlohmann::json& j, const Parameter& p) {
    j = {{"name", p.name}, {"type", p.type_label}, {"kind", kind_name(p.kind)}};
    if (p.default_repr) {
        j["default"] = *p.default_repr;
    }
}

void from_json(const nlohmann::json& j, Parameter& p) {
    p.name = j.at("name").get<std::string>();
    p.type_label = j.value("type", std::string(kAnyLabel));
    if (j.contains("default")) {
        p.default_repr = j.at("default").get<std::string>();
    }
    const auto kind = j.value("kind", std::string("positional"));
    p.kind = kind == "var_positional"  ? Parameter::Kind::var_positional
             : kind == "keyword_only" ? Parameter::Kind::keyword_only
             : kind == "var_keyword"  ? Parameter::Kind::var_keyword
                                      : Parameter::Kind::positional;
}

void to_json(nlohmann::json& j, const Signature& s) {
    j = {{"parameters", s.parameters}, {"returns", s.return_label}};
}

void from_json(const nlohmann::json& j, Signature& s) {
    s.parameters = j.value("parameters", std::vector<Parameter>{});
    s.return_label = j.value("returns", std::string(kAnyLabel));
}

void to_json(nlohmann::json& j, const FunctionDescriptor& d) {
    j = {{"name", d.name}, {"signature", d.signature}, {"description", d.description}, {"doc", d.doc}};
}

void from_json(const nlohmann::json& j, FunctionDescriptor& d) {
    d.name = j.at("name").get<std::string>();
    d.signature = j.value("signature", Signature{});
    d.description = j.value("description", std::string());
    d.doc = j.value("doc", std::string());
}

void to_json(nlohmann::json& j, const VariableDescriptor& d) {
    j = {{"name", d.name}, {"type", d.type_label}, {"description", d.description}};
}

void from_json(const nlohmann::json& j, VariableDescriptor& d) {
    d.name = j.at("name").get<std::string>();
    d.type_label = j.value("type", std::string(kAnyLabel));
    d.description = j.value("description", std::string());
}

}  // namespace dualstream
