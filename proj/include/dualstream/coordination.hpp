#pragma once

// Multi-agent primitives mediated by runtimes: sub-agents injected as live
// objects, direct variable transfer between runtimes, and several agents
// sharing one runtime behind a mutual-exclusion guard.

#include "dualstream/orchestrator.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace dualstream {

/// A variable spec exposing `sub` inside another runtime as an object with
/// step(msg), run(msg), get(name), set(name, value) and entries(). Use it to
/// list the sub-agent in the meta-agent's prompt at creation time.
VariableSpec subagent_variable(const std::string& name, AgentPtr sub);

/// Injects `sub` into `meta`'s runtime under `name`. Throws Error(collision)
/// when the name is taken and Error(invalid_name) for bad identifiers.
void register_subagent(Agent& meta, const std::string& name, AgentPtr sub);

/// Name → agent map with unique names.
class AgentRegistry {
public:
    /// Registers and injects into `meta`. Throws Error(collision).
    void add(Agent& meta, const std::string& name, AgentPtr sub);
    [[nodiscard]] AgentPtr get(const std::string& name) const;
    [[nodiscard]] std::vector<std::string> names() const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, AgentPtr> entries_;
};

/// Moves the live object bound to `name` in `src` into `dst` under `new_name`
/// (or `name`). No serialization: mutable values stay the same object.
/// Throws NotFound, Error(collision) unless `overwrite`.
NamespaceEntry transfer(Runtime& src, const std::string& name, Runtime& dst,
                        const std::optional<std::string>& new_name = std::nullopt, bool overwrite = false);

/// Cross-process path: the named entries go through the snapshot payload
/// format. Values that cannot be pickled are returned as skipped.
std::vector<SkippedEntry> transfer_via_snapshot(const Runtime& src, const std::vector<std::string>& names,
                                                Runtime& dst);

class SharedRuntimeBinding {
public:
    [[nodiscard]] const RuntimeHandle& runtime() const noexcept { return runtime_; }
    [[nodiscard]] std::vector<std::string> members() const;
    [[nodiscard]] AgentPtr member(const std::string& name) const;

    /// Runs a cell under the guard; callers block (GIL released) while another
    /// member is executing.
    ExecutionOutcome execute(std::string_view code);

    /// Injects a value under the guard so every member can reference it next.
    NamespaceEntry inject(const VariableDescriptor& descriptor, py::object value, bool overwrite = false);

    /// Cells executed through the guard so far.
    [[nodiscard]] std::size_t executions() const noexcept { return executions_.load(); }

private:
    friend std::shared_ptr<SharedRuntimeBinding> bind_shared(
        const std::vector<std::pair<std::string, AgentPtr>>&, RuntimeHandle);

    explicit SharedRuntimeBinding(RuntimeHandle runtime) : runtime_(std::move(runtime)) {}

    RuntimeHandle runtime_;
    std::vector<std::pair<std::string, AgentPtr>> members_;
    std::mutex guard_;
    std::atomic<std::size_t> executions_{0};
};

/// Rebinds every agent to `runtime`. Injected tools and variables of each
/// agent are carried over when the name is still free. Throws
/// Error(already_bound) if an agent is already part of a binding, and
/// Error(kernel_dead) if the runtime is not live.
std::shared_ptr<SharedRuntimeBinding> bind_shared(const std::vector<std::pair<std::string, AgentPtr>>& agents,
                                                  RuntimeHandle runtime);

}  // namespace dualstream
