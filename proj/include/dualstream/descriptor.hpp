#pragma once

// Metadata abstraction for injected entities: function tuples (name,
// signature, doc), variable tuples (name, type, description) and type
// schemas, plus their rendering into the <functions>/<variables>/<types>
// prompt blocks.

#include <json.hpp>
#include <pybind11/pybind11.h>

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dualstream {

namespace py = pybind11;

/// Label used when a parameter or return value has no annotation.
inline constexpr const char* kAnyLabel = "Any";
/// Upper bound on description + doc text kept per descriptor.
inline constexpr std::size_t kDocCap = 600;

struct Parameter {
    enum class Kind { positional, var_positional, keyword_only, var_keyword };

    std::string name;
    std::string type_label = kAnyLabel;
    std::optional<std::string> default_repr;
    Kind kind = Kind::positional;

    bool operator==(const Parameter&) const = default;
};

struct Signature {
    std::vector<Parameter> parameters;
    std::string return_label = kAnyLabel;

    /// "name(a: int, b: int = 2) -> int"
    [[nodiscard]] std::string render(std::string_view name) const;

    bool operator==(const Signature&) const = default;
};

struct FunctionDescriptor {
    std::string name;
    Signature signature;
    std::string description;  // first paragraph of the documentation
    std::string doc;          // Args/Returns sections, section headers at column 0

    bool operator==(const FunctionDescriptor&) const = default;
};

struct VariableDescriptor {
    std::string name;
    std::string type_label;
    std::string description;

    bool operator==(const VariableDescriptor&) const = default;
};

struct TypeSchema {
    std::string type_name;
    std::string doc;
    std::vector<std::string> methods;                         // "name(params) -> label"
    std::vector<std::pair<std::string, std::string>> fields;  // name, label

    bool operator==(const TypeSchema&) const = default;
};

struct ContextBundle {
    std::string functions_block;
    std::string variables_block;
    std::string types_block;

    bool operator==(const ContextBundle&) const = default;
};

/// Partial descriptor whose fields win over introspection.
struct FunctionOverrides {
    std::optional<std::string> name;
    std::optional<Signature> signature;
    std::optional<std::string> description;
    std::optional<std::string> doc;
};

/// Introspects a callable (signature, annotations, docstring). Throws
/// Error(metadata_missing) when the name, signature or documentation cannot be
/// obtained and no override supplies it, and Error(not_callable) for
/// non-callables. Requires the GIL.
FunctionDescriptor describe_function(py::handle callable, const FunctionOverrides& overrides = {});

/// Type label is the live value's type name. Throws Error(invalid_name).
VariableDescriptor describe_variable(std::string name, py::handle value, std::string description);

/// Public methods and fields of a class (or of an instance's class). Names
/// with a leading underscore are excluded.
TypeSchema derive_type_schema(py::handle value_or_type);

/// Renders the three blocks in insertion order. Throws
/// Error(duplicate_descriptor) naming the clash.
ContextBundle render_context(const std::vector<FunctionDescriptor>& functions,
                             const std::vector<VariableDescriptor>& variables,
                             const std::vector<TypeSchema>& types);

/// Splits a cleaned docstring into (first paragraph, Args/Returns sections),
/// applying kDocCap.
std::pair<std::string, std::string> split_doc(std::string_view docstring);

/// True when `method` has the shape "name(params) -> label".
bool is_method_signature(std::string_view method);

void to_json(nlohmann::json& j, const Parameter& p);
void from_json(const nlohmann::json& j, Parameter& p);
void to_json(nlohmann::json& j, const Signature& s);
void from_json(const nlohmann::json& j, Signature& s);
void to_json(nlohmann::json& j, const FunctionDescriptor& d);
void from_json(const nlohmann::json& j, FunctionDescriptor& d);
void to_json(nlohmann::json& j, const VariableDescriptor& d);
void from_json(const nlohmann::json& j, VariableDescriptor& d);

}  // namespace dualstream
