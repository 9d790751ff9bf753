#include "dualstream/python.hpp"

#include "dualstream/errors.hpp"

#include <mutex>

namespace dualstream::python {

namespace {

// Installed as sys.stdout / sys.stderr. Each thread owns a stack of capture
// buffers; writes go to the innermost one, or to the original stream when the
// thread is not inside a cell.
constexpr const char* kBootstrap = R"PY(
import builtins
import functools
import io
import sys
import threading


class CellTimeout(BaseException):
    """Raised asynchronously inside a cell that ran past its time limit."""


class CaptureRouter:
    def __init__(self, fallback, name):
        self._fallback = fallback
        self._local = threading.local()
        self.name = name

    def _stack(self):
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        return stack

    def push(self):
        self._stack().append(io.StringIO())

    def pop(self):
        return self._stack().pop().getvalue()

    def _target(self):
        stack = self._stack()
        return stack[-1] if stack else self._fallback

    def write(self, text):
        target = self._target()
        if target is None:
            return len(text)
        return target.write(text)

    def writelines(self, lines):
        for line in lines:
            self.write(line)

    def flush(self):
        target = self._target()
        if target is not None and hasattr(target, "flush"):
            target.flush()

    def isatty(self):
        return False

    def writable(self):
        return True

    @property
    def encoding(self):
        return getattr(self._fallback, "encoding", "utf-8")


stdout_router = CaptureRouter(sys.stdout, "<stdout>")
stderr_router = CaptureRouter(sys.stderr, "<stderr>")
sys.stdout = stdout_router
sys.stderr = stderr_router


def make_wrapper(fn, hook):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        hook(args, kwargs)
        return fn(*args, **kwargs)
    return wrapper


def make_import_guard(allowed, real_import=builtins.__import__):
    allowed = frozenset(allowed)

    def guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
        root = name.partition(".")[0]
        if level == 0 and root not in allowed:
            raise ImportError(f"import of '{name}' is not allowed in this runtime")
        return real_import(name, globals, locals, fromlist, level)
    return guarded_import
)PY";

struct HostState {
    PyThreadState* saved = nullptr;
    bool started = false;
};

HostState& state() {
    static HostState s;
    return s;
}

std::once_flag g_start_once;

}  // namespace

void ensure_started() {
    std::call_once(g_start_once, [] {
        if (Py_IsInitialized() != 0) {
            // Someone else owns the interpreter (e.g. a Python extension host);
            // just install our helpers.
            Gil gil;
            auto types = py::module_::import("types");
            py::module_ mod = types.attr("ModuleType")("_dualstream_host");
            py::exec(kBootstrap, mod.attr("__dict__"));
            py::module_::import("sys").attr("modules")["_dualstream_host"] = mod;
            state().started = true;
            return;
        }
        try {
            py::initialize_interpreter(false);
            auto types = py::module_::import("types");
            py::module_ mod = types.attr("ModuleType")("_dualstream_host");
            py::exec(kBootstrap, mod.attr("__dict__"));
            py::module_::import("sys").attr("modules")["_dualstream_host"] = mod;
            // Build pybind11's internals here; a first build inside a worker's
            // acquire would record a temporary thread state.
            py::detail::get_internals();
        } catch (const std::exception& e) {
            throw Error(ErrorCode::startup, std::string("python kernel failed to start: ") + e.what());
        }
        state().started = true;
        state().saved = PyEval_SaveThread();
    });
    if (!state().started) {
        throw Error(ErrorCode::startup, "python kernel is not available");
    }
}

py::module_ host_module() {
    return py::module_::import("_dualstream_host");
}

bool gil_held() noexcept {
    return Py_IsInitialized() != 0 && PyGILState_Check() != 0;
}

std::string type_name(py::handle obj) {
    return py::str(py::type::handle_of(obj).attr("__name__")).cast<std::string>();
}

std::string bounded_repr(py::handle obj, std::size_t limit) {
    std::string text;
    try {
        text = py::repr(obj).cast<std::string>();
    } catch (const py::error_already_set&) {
        text = "<" + type_name(obj) + " object>";
    }
    if (codepoint_length(text) <= limit) {
        return text;
    }
    // Clip on a code point boundary.
    std::size_t count = 0;
    std::size_t i = 0;
    while (i < text.size() && count < limit) {
        auto c = static_cast<unsigned char>(text[i]);
        std::size_t width = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
        i += width;
        ++count;
    }
    return text.substr(0, i) + "...";
}

bool is_identifier(std::string_view name) {
    if (name.empty()) {
        return false;
    }
    ensure_started();
    Gil gil;
    py::str s{std::string(name)};
    if (!s.attr("isidentifier")().cast<bool>()) {
        return false;
    }
    return !py::module_::import("keyword").attr("iskeyword")(s).cast<bool>();
}

bool is_builtin_name(std::string_view name) {
    ensure_started();
    Gil gil;
    return py::hasattr(py::module_::import("builtins"), std::string(name).c_str());
}

std::size_t codepoint_length(std::string_view utf8) noexcept {
    std::size_t count = 0;
    for (unsigned char c : utf8) {
        if ((c & 0xC0) != 0x80) {
            ++count;
        }
    }
    return count;
}

Ref::Ref(const Ref& other) {
    if (other.obj_) {
        Gil gil;
        obj_ = other.obj_;
    }
}

Ref& Ref::operator=(const Ref& other) {
    if (this != &other) {
        Gil gil;
        obj_ = other.obj_;
    }
    return *this;
}

Ref& Ref::operator=(Ref&& other) noexcept {
    if (this != &other) {
        clear();
        obj_ = std::move(other.obj_);
    }
    return *this;
}

Ref::~Ref() { clear(); }

void Ref::clear() noexcept {
    if (obj_ && Py_IsInitialized() != 0) {
        Gil gil;
        obj_ = py::object();
    } else {
        obj_.release();
    }
}

}  // namespace dualstream::python
