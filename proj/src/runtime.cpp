#include "dualstream/runtime.hpp"

#include "dualstream/errors.hpp"

#include <condition_variable>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <unistd.h>

namespace dualstream {

namespace {

constexpr std::size_t kLastValueLimit = 1000;
constexpr std::size_t kSummaryLimit = 80;
constexpr const char* kCellModuleName = "__cell__";

thread_local std::vector<std::int64_t> t_cell_stack;

std::string make_session_id() {
    static std::atomic<std::uint64_t> seq{0};
    static const std::uint32_t salt = std::random_device{}();
    std::ostringstream os;
    os << "rt-" << ::getpid() << '-' << std::hex << salt << '-' << std::dec << ++seq;
    return os.str();
}

// Injects CellTimeout into the executing thread once the deadline passes,
// unless finish() ran first. finish() must be called with the GIL held.
class Watchdog {
public:
    Watchdog(double seconds, unsigned long thread_ident, py::handle exc_type)
        : exc_type_(exc_type.ptr()) {
        thread_ = std::thread([this, seconds, thread_ident] {
            std::unique_lock lock(mutex_);
            const auto deadline = std::chrono::duration<double>(seconds);
            if (cv_.wait_for(lock, deadline, [this] { return done_; })) {
                return;
            }
            lock.unlock();
            python::Gil gil;
            lock.lock();
            if (!done_) {
                PyThreadState_SetAsyncExc(thread_ident, exc_type_);
                fired_ = true;
            }
        });
    }

    Watchdog(const Watchdog&) = delete;
    Watchdog& operator=(const Watchdog&) = delete;

    ~Watchdog() {
        if (thread_.joinable()) {
            finish_and_join();
        }
    }

    void finish_and_join() {
        {
            std::lock_guard lock(mutex_);
            done_ = true;
        }
        cv_.notify_all();
        python::NoGil nogil;
        thread_.join();
    }

    [[nodiscard]] bool fired() const noexcept { return fired_; }

private:
    PyObject* exc_type_;
    std::mutex mutex_;
    std::condition_variable cv_;
    bool done_ = false;
    bool fired_ = false;
    std::thread thread_;
};

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::io, "cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool has_own_eq(py::handle value) {
    auto builtins = py::module_::import("builtins");
    py::object object_eq = builtins.attr("object").attr("__eq__");
    py::object type_eq = py::type::handle_of(value).attr("__eq__");
    return !type_eq.is(object_eq);
}

std::string clip_capture(std::string text, std::size_t cap, std::size_t& dropped) {
    if (cap == 0) {
        return text;
    }
    const std::size_t length = python::codepoint_length(text);
    if (length <= cap) {
        return text;
    }
    std::size_t count = 0;
    std::size_t i = 0;
    while (i < text.size() && count < cap) {
        ++i;
        while (i < text.size() && (static_cast<unsigned char>(text[i]) & 0xC0) == 0x80) {
            ++i;
        }
        ++count;
    }
    dropped += length - cap;
    text.resize(i);
    return text;
}

}  // namespace

std::string_view to_string(Origin origin) noexcept {
    return origin == Origin::injected ? "injected" : "cell-created";
}

std::string_view to_string(CellErrorKind kind) noexcept {
    switch (kind) {
        case CellErrorKind::runtime: return "runtime";
        case CellErrorKind::timeout: return "timeout";
        case CellErrorKind::syntax: return "syntax";
    }
    return "runtime";
}

std::string CellError::render() const {
    if (!traceback.empty()) {
        std::string t = traceback;
        while (!t.empty() && t.back() == '\n') {
            t.pop_back();
        }
        return t;
    }
    return message.empty() ? type_name : type_name + ": " + message;
}

const std::string& ManifestItem::name() const {
    return std::visit([](const auto& d) -> const std::string& { return d.name; }, descriptor);
}

RuntimeConfig RuntimeConfig::from_json_file(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::schema, "runtime config " + path.string() + ": " + e.what());
    }
    RuntimeConfig c;
    try {
        c.preload = j.value("preload", std::vector<std::string>{});
        c.allowed_imports = j.value("allowed_imports", std::vector<std::string>{});
        c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
        c.stdout_capture_cap = j.value("stdout_capture_cap", c.stdout_capture_cap);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::schema, "runtime config " + path.string() + ": " + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------

Runtime::Runtime(RuntimeConfig config)
    : config_(std::move(config)),
      session_id_(make_session_id()),
      created_at_(std::chrono::system_clock::now()) {}

Runtime::~Runtime() {
    python::Gil gil;
    if (globals_) {
        py::dict(globals_.get()).clear();
    }
}

RuntimeHandle Runtime::create(RuntimeConfig config) {
    python::ensure_started();
    RuntimeHandle rt(new Runtime(std::move(config)));
    rt->init_namespace();
    return rt;
}

void Runtime::init_namespace() {
    python::Gil gil;
    auto builtins_mod = py::module_::import("builtins");
    py::dict builtins = py::dict(builtins_mod.attr("__dict__")).attr("copy")();
    if (!config_.allowed_imports.empty()) {
        py::list allowed;
        for (const auto& m : config_.allowed_imports) {
            allowed.append(m);
        }
        builtins["__import__"] = python::host_module().attr("make_import_guard")(allowed);
    }
    py::dict ns;
    ns["__builtins__"] = builtins;
    ns["__name__"] = kCellModuleName;
    ns["__doc__"] = py::none();
    internal_names_ = {"__builtins__", "__name__", "__doc__"};
    for (const auto& module : config_.preload) {
        try {
            py::object mod = py::module_::import("importlib").attr("import_module")(module);
            const std::string root = module.substr(0, module.find('.'));
            ns[root.c_str()] = py::module_::import(root.c_str());
            internal_names_.push_back(root);
        } catch (const py::error_already_set& e) {
            throw Error(ErrorCode::startup, "preload of '" + module + "' failed: " + e.what());
        }
    }
    builtins_ = python::Ref(builtins);
    globals_ = python::Ref(ns);
}

void Runtime::check_alive() const {
    if (!alive_.load()) {
        throw Error(ErrorCode::kernel_dead, "runtime " + session_id_ + " is not alive");
    }
}

bool Runtime::is_internal_name(const std::string& name) const {
    if (name.size() >= 4 && name.rfind("__", 0) == 0 && name.compare(name.size() - 2, 2, "__") == 0) {
        return true;
    }
    return std::find(internal_names_.begin(), internal_names_.end(), name) != internal_names_.end();
}

py::dict Runtime::globals() const {
    return py::reinterpret_borrow<py::dict>(globals_.get());
}

std::int64_t Runtime::current_cell_index() noexcept {
    return t_cell_stack.empty() ? 0 : t_cell_stack.back();
}

ExecutionOutcome Runtime::execute_cell(std::string_view source) {
    check_alive();
    std::unique_lock exec_lock(exec_mutex_, std::try_to_lock);
    if (!exec_lock.owns_lock()) {
        throw Error(ErrorCode::busy, "runtime " + session_id_ + " is already executing a cell");
    }
    python::Gil gil;

    ExecutionOutcome outcome;
    outcome.source = std::string(source);
    outcome.cell_index = ++cell_counter_;
    const std::string filename = "<cell-" + std::to_string(outcome.cell_index) + ">";

    auto host = python::host_module();
    py::object out_router = host.attr("stdout_router");
    py::object err_router = host.attr("stderr_router");
    auto builtins = py::module_::import("builtins");
    auto ast = py::module_::import("ast");

    t_cell_stack.push_back(outcome.cell_index);
    out_router.attr("push")();
    err_router.attr("push")();
    const auto started = std::chrono::steady_clock::now();

    std::optional<Watchdog> watchdog;
    try {
        py::str code(outcome.source);
        py::module_::import("linecache").attr("cache")[py::str(filename)] =
            py::make_tuple(py::len(code), py::none(), code.attr("splitlines")(true), filename);
        py::object tree = ast.attr("parse")(code, filename, "exec");
        py::list body = tree.attr("body");
        py::object last_expr;
        if (py::len(body) > 0 && py::isinstance(body[py::len(body) - 1], ast.attr("Expr"))) {
            last_expr = body.attr("pop")();
        }
        py::object ns = globals_.get();
        if (config_.timeout_seconds > 0) {
            watchdog.emplace(config_.timeout_seconds, PyThread_get_thread_ident(), host.attr("CellTimeout"));
        }
        builtins.attr("exec")(builtins.attr("compile")(tree, filename, "exec"), ns);
        if (last_expr) {
            py::object expr = ast.attr("Expression")(last_expr.attr("value"));
            py::object value = builtins.attr("eval")(builtins.attr("compile")(expr, filename, "eval"), ns);
            if (!value.is_none()) {
                outcome.last_value_repr = python::bounded_repr(value, kLastValueLimit);
            }
        }
        if (watchdog) {
            watchdog->finish_and_join();
        }
    } catch (py::error_already_set& e) {
        if (watchdog) {
            watchdog->finish_and_join();
        }
        CellError err;
        if (e.matches(host.attr("CellTimeout"))) {
            err.kind = CellErrorKind::timeout;
            err.type_name = "TimeoutError";
            std::ostringstream msg;
            msg << "cell exceeded the time limit of " << config_.timeout_seconds << " seconds";
            err.message = msg.str();
        } else {
            err.kind = e.matches(PyExc_SyntaxError) ? CellErrorKind::syntax : CellErrorKind::runtime;
            err.type_name = py::str(e.type().attr("__name__")).cast<std::string>();
            err.message = py::str(e.value()).cast<std::string>();
            try {
                auto tb_mod = py::module_::import("traceback");
                py::object lines;
                if (err.kind == CellErrorKind::syntax) {
                    lines = tb_mod.attr("format_exception_only")(e.type(), e.value());
                } else {
                    // Drop host frames above the first cell frame.
                    py::object tb = e.trace();
                    while (!tb.is_none() && !py::str(tb.attr("tb_frame").attr("f_code").attr("co_filename"))
                                                 .attr("startswith")("<cell-")
                                                 .cast<bool>()) {
                        tb = tb.attr("tb_next");
                    }
                    lines = tb_mod.attr("format_exception")(e.type(), e.value(), tb);
                }
                err.traceback = py::str("").attr("join")(lines).cast<std::string>();
            } catch (const py::error_already_set&) {
                err.traceback.clear();
            }
        }
        outcome.error = std::move(err);
    } catch (const std::exception& e) {
        if (watchdog) {
            watchdog->finish_and_join();
        }
        outcome.error = CellError{CellErrorKind::runtime, "InternalError", e.what(), {}};
    }
    PyThreadState_SetAsyncExc(PyThread_get_thread_ident(), nullptr);

    outcome.duration_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::size_t dropped = 0;
    outcome.stdout_text = clip_capture(out_router.attr("pop")().cast<std::string>(), config_.stdout_capture_cap, dropped);
    outcome.stderr_text = clip_capture(err_router.attr("pop")().cast<std::string>(), config_.stdout_capture_cap, dropped);
    outcome.dropped_chars = dropped;
    t_cell_stack.pop_back();
    return outcome;
}

NamespaceEntry Runtime::make_entry(const std::string& name, py::handle value) const {
    NamespaceEntry e;
    e.name = name;
    e.type_name = python::type_name(value);
    {
        std::lock_guard lock(state_mutex_);
        for (const auto& item : manifest_) {
            if (item.name() == name) {
                e.origin = Origin::injected;
                break;
            }
        }
    }
    e.summary = python::bounded_repr(value, kSummaryLimit);
    return e;
}

NamespaceEntry Runtime::bind_injected(const std::string& name, py::object value, ManifestItem item,
                                      bool overwrite) {
    check_alive();
    if (!python::is_identifier(name)) {
        throw Error(ErrorCode::invalid_name, "not a valid identifier: '" + name + "'");
    }
    if (python::is_builtin_name(name) || is_internal_name(name)) {
        throw Error(ErrorCode::invalid_name, "'" + name + "' collides with a host builtin");
    }
    python::Gil gil;
    py::dict ns = globals();
    if (ns.contains(name) && !overwrite) {
        throw Error(ErrorCode::collision, "'" + name + "' is already bound in runtime " + session_id_);
    }
    ns[name.c_str()] = value;
    {
        std::lock_guard lock(state_mutex_);
        auto it = std::find_if(manifest_.begin(), manifest_.end(),
                               [&](const ManifestItem& m) { return m.name() == name; });
        if (it != manifest_.end()) {
            *it = std::move(item);
        } else {
            manifest_.push_back(std::move(item));
        }
    }
    return make_entry(name, value);
}

NamespaceEntry Runtime::inject_variable(const VariableDescriptor& descriptor, py::object value, bool overwrite) {
    return bind_injected(descriptor.name, std::move(value), ManifestItem{descriptor}, overwrite);
}

NamespaceEntry Runtime::inject_function(const FunctionDescriptor& descriptor, py::object callable,
                                        bool overwrite) {
    {
        python::Gil gil;
        if (PyCallable_Check(callable.ptr()) == 0) {
            throw Error(ErrorCode::not_callable,
                        "'" + descriptor.name + "' is not invocable (" + python::type_name(callable) + ")");
        }
    }
    return bind_injected(descriptor.name, std::move(callable), ManifestItem{descriptor}, overwrite);
}

py::object Runtime::get_variable(std::string_view name) const {
    check_alive();
    if (!python::gil_held()) {
        throw Error(ErrorCode::contract, "get_variable returns a live object; hold python::Gil while calling it");
    }
    const std::string key(name);
    py::dict ns = globals();
    if (is_internal_name(key) || !ns.contains(key)) {
        throw NotFound(key);
    }
    return ns[key.c_str()];
}

bool Runtime::contains(std::string_view name) const {
    python::Gil gil;
    const std::string key(name);
    return !is_internal_name(key) && globals().contains(key);
}

std::vector<NamespaceEntry> Runtime::list_entries() const {
    check_alive();
    python::Gil gil;
    std::vector<NamespaceEntry> entries;
    for (auto item : globals()) {
        const auto name = py::str(item.first).cast<std::string>();
        if (is_internal_name(name)) {
            continue;
        }
        entries.push_back(make_entry(name, item.second));
    }
    return entries;
}

std::vector<ManifestItem> Runtime::injected_manifest() const {
    std::lock_guard lock(state_mutex_);
    return manifest_;
}

Snapshot Runtime::snapshot() const {
    check_alive();
    python::Gil gil;
    auto pickle = py::module_::import("pickle");
    Snapshot snap;
    snap.cell_counter = cell_counter_.load();
    for (auto item : globals()) {
        const auto name = py::str(item.first).cast<std::string>();
        if (is_internal_name(name)) {
            continue;
        }
        py::handle value = item.second;
        py::handle type = py::type::handle_of(value);
        const std::string tag = py::str(type.attr("__module__")).cast<std::string>() + "." +
                                py::str(type.attr("__qualname__")).cast<std::string>();
        try {
            py::bytes payload = pickle.attr("dumps")(value, 4);
            SnapshotEntry entry;
            entry.name = name;
            entry.type_tag = tag;
            entry.payload = payload.cast<std::string>();
            snap.entries.push_back(std::move(entry));
        } catch (py::error_already_set& e) {
            snap.skipped.push_back({name, py::str(e.type().attr("__name__")).cast<std::string>() + ": " +
                                              py::str(e.value()).cast<std::string>()});
        }
    }
    std::lock_guard lock(state_mutex_);
    for (auto& entry : snap.entries) {
        for (const auto& m : manifest_) {
            if (m.name() != entry.name) {
                continue;
            }
            entry.origin = Origin::injected;
            if (const auto* v = std::get_if<VariableDescriptor>(&m.descriptor)) {
                snap.variable_manifest.push_back(*v);
            } else {
                snap.function_manifest.push_back(std::get<FunctionDescriptor>(m.descriptor));
            }
        }
    }
    return snap;
}

std::vector<SkippedEntry> Runtime::load_snapshot(const Snapshot& snapshot) {
    check_alive();
    if (snapshot.version != Snapshot::kVersion) {
        throw Error(ErrorCode::unsupported_version, "unsupported snapshot version '" + snapshot.version + "'");
    }
    python::Gil gil;
    auto pickle = py::module_::import("pickle");
    std::vector<SkippedEntry> failed;
    py::dict ns = globals();
    for (const auto& entry : snapshot.entries) {
        py::object value;
        try {
            value = pickle.attr("loads")(py::bytes(entry.payload));
        } catch (py::error_already_set& e) {
            failed.push_back({entry.name, py::str(e.type().attr("__name__")).cast<std::string>() + ": " +
                                              py::str(e.value()).cast<std::string>()});
            continue;
        }
        if (entry.origin == Origin::injected) {
            std::optional<ManifestItem> item;
            for (const auto& v : snapshot.variable_manifest) {
                if (v.name == entry.name) item = ManifestItem{v};
            }
            for (const auto& f : snapshot.function_manifest) {
                if (f.name == entry.name) item = ManifestItem{f};
            }
            if (!item) {
                item = ManifestItem{VariableDescriptor{entry.name, python::type_name(value), ""}};
            }
            bind_injected(entry.name, value, std::move(*item), true);
        } else {
            ns[entry.name.c_str()] = value;
        }
    }
    return failed;
}

RuntimeHandle Runtime::restore(const Snapshot& snapshot, RuntimeConfig config) {
    if (snapshot.version != Snapshot::kVersion) {
        throw Error(ErrorCode::unsupported_version, "unsupported snapshot version '" + snapshot.version + "'");
    }
    auto rt = create(std::move(config));
    auto failed = rt->load_snapshot(snapshot);
    if (!failed.empty()) {
        throw Error(ErrorCode::corrupt_snapshot,
                    "snapshot entry '" + failed.front().name + "' cannot be decoded: " + failed.front().reason);
    }
    rt->cell_counter_ = snapshot.cell_counter;
    return rt;
}

void Runtime::reset() {
    check_alive();
    std::unique_lock exec_lock(exec_mutex_, std::try_to_lock);
    if (!exec_lock.owns_lock()) {
        throw Error(ErrorCode::busy, "cannot reset runtime " + session_id_ + " while a cell is executing");
    }
    {
        python::Gil gil;
        globals().clear();
        init_namespace();
    }
    {
        std::lock_guard lock(state_mutex_);
        manifest_.clear();
    }
    cell_counter_ = 0;
}

void Runtime::shutdown() {
    if (!alive_.exchange(false)) {
        return;
    }
    python::Gil gil;
    globals().clear();
}

// ---------------------------------------------------------------------------

void Snapshot::save(const std::filesystem::path& path) const {
    python::ensure_started();
    python::Gil gil;
    auto binascii = py::module_::import("binascii");
    nlohmann::json j;
    j["format"] = "dualstream-snapshot";
    j["version"] = version;
    j["cell_counter"] = cell_counter;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries) {
        py::object encoded = binascii.attr("b2a_base64")(py::bytes(e.payload), py::arg("newline") = false);
        j["entries"].push_back({{"name", e.name},
                                {"type_tag", e.type_tag},
                                {"origin", std::string(to_string(e.origin))},
                                {"payload", encoded.cast<std::string>()}});
    }
    j["skipped"] = nlohmann::json::array();
    for (const auto& s : skipped) {
        j["skipped"].push_back({{"name", s.name}, {"reason", s.reason}});
    }
    j["variable_manifest"] = variable_manifest;
    j["function_manifest"] = function_manifest;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::io, "cannot write " + path.string());
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw Error(ErrorCode::io, "write failed for " + path.string());
    }
}

Snapshot Snapshot::load(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    python::ensure_started();
    Snapshot snap;
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.value("format", std::string()) != "dualstream-snapshot") {
            throw Error(ErrorCode::corrupt_snapshot, path.string() + " is not a snapshot file");
        }
        snap.version = j.at("version").get<std::string>();
        if (snap.version != kVersion) {
            throw Error(ErrorCode::unsupported_version, "unsupported snapshot version '" + snap.version + "'");
        }
        snap.cell_counter = j.at("cell_counter").get<std::int64_t>();
        python::Gil gil;
        auto binascii = py::module_::import("binascii");
        for (const auto& e : j.at("entries")) {
            SnapshotEntry entry;
            entry.name = e.at("name").get<std::string>();
            entry.type_tag = e.at("type_tag").get<std::string>();
            entry.origin = e.at("origin").get<std::string>() == "injected" ? Origin::injected : Origin::cell_created;
            try {
                entry.payload =
                    binascii.attr("a2b_base64")(e.at("payload").get<std::string>()).cast<std::string>();
            } catch (const py::error_already_set&) {
                throw Error(ErrorCode::corrupt_snapshot, "payload of '" + entry.name + "' is not valid base64");
            }
            snap.entries.push_back(std::move(entry));
        }
        for (const auto& s : j.at("skipped")) {
            snap.skipped.push_back({s.at("name").get<std::string>(), s.at("reason").get<std::string>()});
        }
        snap.variable_manifest = j.value("variable_manifest", std::vector<VariableDescriptor>{});
        snap.function_manifest = j.value("function_manifest", std::vector<FunctionDescriptor>{});
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::corrupt_snapshot, path.string() + ": " + e.what());
    }
    return snap;
}

bool values_equal(py::handle a, py::handle b) {
    python::Gil gil;
    if (a.is(b)) {
        return true;
    }
    try {
        if (py::hasattr(a, "equals") && py::hasattr(a, "shape")) {
            // pandas objects
            return py::bool_(a.attr("equals")(b)).cast<bool>();
        }
        if (py::hasattr(a, "__array__") && py::hasattr(a, "shape") && py::hasattr(a, "dtype")) {
            auto numpy = py::module_::import("numpy");
            return numpy.attr("array_equal")(a, b).cast<bool>();
        }
        if (!has_own_eq(a)) {
            return false;
        }
        py::object r = a.attr("__eq__")(b);
        if (r.is(py::module_::import("builtins").attr("NotImplemented"))) {
            r = b.attr("__eq__")(a);
            if (r.is(py::module_::import("builtins").attr("NotImplemented"))) {
                return false;
            }
        }
        return py::bool_(r).cast<bool>();
    } catch (const py::error_already_set&) {
        return false;
    }
}

}  // namespace dualstream
