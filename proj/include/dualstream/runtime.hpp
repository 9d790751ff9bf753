#pragma once

// Persistent scripting kernel: one RuntimeHandle is one durable namespace in
// the embedded interpreter, with cell execution, injection, retrieval and
// snapshot/restore.

#include "dualstream/descriptor.hpp"
#include "dualstream/python.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace dualstream {

namespace py = pybind11;

struct RuntimeConfig {
    /// Modules imported into every fresh namespace. They are host-internal and
    /// do not show up in list_entries().
    std::vector<std::string> preload;
    /// Top-level module allowlist for `import`; empty means unrestricted.
    std::vector<std::string> allowed_imports;
    double timeout_seconds = 30.0;
    /// Capture cap in characters for stdout and stderr each; 0 = unbounded.
    std::size_t stdout_capture_cap = 0;

    static RuntimeConfig from_json_file(const std::filesystem::path& path);
};

enum class Origin { injected, cell_created };

std::string_view to_string(Origin origin) noexcept;

struct NamespaceEntry {
    std::string name;
    std::string type_name;
    Origin origin = Origin::cell_created;
    std::string summary;

    bool operator==(const NamespaceEntry&) const = default;
};

enum class CellErrorKind { runtime, timeout, syntax };

std::string_view to_string(CellErrorKind kind) noexcept;

struct CellError {
    CellErrorKind kind = CellErrorKind::runtime;
    std::string type_name;  // e.g. "ZeroDivisionError"
    std::string message;
    std::string traceback;  // formatted, frames limited to cell code

    /// Text as it appears in an observation: traceback followed by "Type: message".
    [[nodiscard]] std::string render() const;
};

struct ExecutionOutcome {
    std::string source;
    std::string stdout_text;
    std::string stderr_text;
    std::optional<CellError> error;
    std::optional<std::string> last_value_repr;
    double duration_seconds = 0.0;
    std::int64_t cell_index = 0;
    /// Characters removed by RuntimeConfig::stdout_capture_cap.
    std::size_t dropped_chars = 0;

    [[nodiscard]] bool ok() const noexcept { return !error.has_value(); }
};

struct SnapshotEntry {
    std::string name;
    std::string type_tag;
    Origin origin = Origin::cell_created;
    std::string payload;  // pickle bytes
};

struct SkippedEntry {
    std::string name;
    std::string reason;
};

struct Snapshot {
    static constexpr const char* kVersion = "1";

    std::string version = kVersion;
    std::vector<SnapshotEntry> entries;
    std::vector<SkippedEntry> skipped;
    std::int64_t cell_counter = 0;
    std::vector<VariableDescriptor> variable_manifest;
    std::vector<FunctionDescriptor> function_manifest;

    void save(const std::filesystem::path& path) const;
    static Snapshot load(const std::filesystem::path& path);
};

/// Injected entity recorded for prompt rendering.
struct ManifestItem {
    std::variant<VariableDescriptor, FunctionDescriptor> descriptor;

    [[nodiscard]] const std::string& name() const;
};

class Runtime;
using RuntimeHandle = std::shared_ptr<Runtime>;

class Runtime : public std::enable_shared_from_this<Runtime> {
public:
    static RuntimeHandle create(RuntimeConfig config = {});
    static RuntimeHandle restore(const Snapshot& snapshot, RuntimeConfig config = {});

    Runtime(const Runtime&) = delete;
    Runtime& operator=(const Runtime&) = delete;
    ~Runtime();

    /// Runs one cell. Runtime errors and timeouts come back in
    /// ExecutionOutcome::error; only a dead kernel or a concurrent call on the
    /// same handle throws.
    ExecutionOutcome execute_cell(std::string_view source);

    NamespaceEntry inject_variable(const VariableDescriptor& descriptor, py::object value,
                                   bool overwrite = false);
    NamespaceEntry inject_function(const FunctionDescriptor& descriptor, py::object callable,
                                   bool overwrite = false);

    /// The live object bound to `name`. Throws NotFound.
    py::object get_variable(std::string_view name) const;
    [[nodiscard]] bool contains(std::string_view name) const;
    std::vector<NamespaceEntry> list_entries() const;

    Snapshot snapshot() const;
    /// Binds every entry of `snapshot` into this runtime (existing names are
    /// replaced). Returns the entries that could not be decoded.
    std::vector<SkippedEntry> load_snapshot(const Snapshot& snapshot);

    void reset();

    /// Marks the kernel dead; any later call throws Error(kernel_dead).
    void shutdown();
    [[nodiscard]] bool alive() const noexcept { return alive_.load(); }

    [[nodiscard]] const std::string& session_id() const noexcept { return session_id_; }
    [[nodiscard]] std::int64_t cell_counter() const noexcept { return cell_counter_.load(); }
    [[nodiscard]] std::chrono::system_clock::time_point created_at() const noexcept { return created_at_; }
    [[nodiscard]] const RuntimeConfig& config() const noexcept { return config_; }
    std::vector<ManifestItem> injected_manifest() const;

    /// The globals dict itself. Callers must hold the GIL.
    py::dict globals() const;

    /// Cell index of the innermost cell executing on the calling thread, or 0.
    static std::int64_t current_cell_index() noexcept;

private:
    explicit Runtime(RuntimeConfig config);

    void init_namespace();
    void check_alive() const;
    bool is_internal_name(const std::string& name) const;
    NamespaceEntry make_entry(const std::string& name, py::handle value) const;
    NamespaceEntry bind_injected(const std::string& name, py::object value, ManifestItem item,
                                 bool overwrite);

    RuntimeConfig config_;
    std::string session_id_;
    std::chrono::system_clock::time_point created_at_;
    python::Ref globals_;
    python::Ref builtins_;
    std::vector<std::string> internal_names_;
    std::vector<ManifestItem> manifest_;
    mutable std::mutex state_mutex_;  // guards manifest_
    std::mutex exec_mutex_;           // one in-flight cell per handle
    std::atomic<std::int64_t> cell_counter_{0};
    std::atomic<bool> alive_{true};
};

/// Value-equality contract: `==` when the value's type defines its own
/// `__eq__` (numbers, strings, containers, dataclasses, numpy/pandas via
/// `.equals`/`array_equal`), identity otherwise. Requires the GIL.
bool values_equal(py::handle a, py::handle b);

}  // namespace dualstream
