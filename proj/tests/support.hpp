#pragma once

#include "dualstream/errors.hpp"
#include "dualstream/python.hpp"
#include "dualstream/runtime.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>
#include <string>

namespace test {

namespace ds = dualstream;
namespace py = pybind11;

/// Evaluates `expr` in the runtime namespace and returns its repr.
inline std::string repr_of(ds::Runtime& rt, const std::string& expr) {
    ds::python::Gil gil;
    py::object value = py::eval(expr, rt.globals());
    return py::repr(value).cast<std::string>();
}

/// Runs a cell that must succeed; returns its stdout.
inline std::string run_ok(ds::Runtime& rt, std::string_view code) {
    auto outcome = rt.execute_cell(code);
    INFO("cell: " << code);
    REQUIRE_MESSAGE(outcome.ok(), (outcome.error ? outcome.error->render() : std::string()));
    return outcome.stdout_text;
}

inline std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "dualstream-tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

inline bool has_module(const char* name) {
    ds::python::ensure_started();
    ds::python::Gil gil;
    return !py::module_::import("importlib.util").attr("find_spec")(name).is_none();
}

}  // namespace test
