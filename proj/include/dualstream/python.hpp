#pragma once

// Embedded CPython host shared by every runtime in the process.
//
// The interpreter is started lazily by ensure_started() and the starting
// thread gives the GIL back immediately, so every entry point that touches
// Python objects takes the GIL with `python::Gil`. Callers that hold py::object
// values outside library calls must hold a Gil for as long as those values
// live.

#include <pybind11/embed.h>

#include <cstddef>
#include <string>
#include <string_view>

namespace dualstream::python {

namespace py = pybind11;

using Gil = py::gil_scoped_acquire;
using NoGil = py::gil_scoped_release;

/// Starts the interpreter once per process. Safe to call from any thread.
/// Throws Error(startup) when initialization fails.
void ensure_started();

/// The helper module created at startup (CaptureRouter, CellTimeout, ...).
py::module_ host_module();

/// True when the calling thread currently holds the GIL.
bool gil_held() noexcept;

/// `type(obj).__name__`
std::string type_name(py::handle obj);

/// repr() clipped to `limit` characters with a trailing "..." when clipped.
std::string bounded_repr(py::handle obj, std::size_t limit);

/// A valid, non-keyword Python identifier.
bool is_identifier(std::string_view name);

/// The name is bound in the builtins module.
bool is_builtin_name(std::string_view name);

/// Length in Unicode code points of UTF-8 text (counts non-continuation bytes).
std::size_t codepoint_length(std::string_view utf8) noexcept;

/// Owning reference that takes the GIL when it drops its object, so it can be
/// stored in plain C++ aggregates and destroyed from any thread.
class Ref {
public:
    Ref() = default;
    explicit Ref(py::object obj) : obj_(std::move(obj)) {}
    Ref(const Ref& other);
    Ref(Ref&& other) noexcept = default;
    Ref& operator=(const Ref& other);
    Ref& operator=(Ref&& other) noexcept;
    ~Ref();

    [[nodiscard]] const py::object& get() const noexcept { return obj_; }
    [[nodiscard]] explicit operator bool() const noexcept { return static_cast<bool>(obj_); }

private:
    void clear() noexcept;
    py::object obj_;
};

}  // namespace dualstream::python
