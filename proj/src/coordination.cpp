#include "dualstream/coordination.hpp"

#include "dualstream/errors.hpp"

#include <algorithm>

namespace dualstream {

namespace {

class SubAgentProxy {
public:
    SubAgentProxy(std::string name, AgentPtr agent) : name_(std::move(name)), agent_(std::move(agent)) {}

    std::string step(const std::string& message) {
        python::NoGil release;
        return agent_->step(message).final_text();
    }

    std::string run(const std::string& message) {
        python::NoGil release;
        return agent_->run(message).final_text();
    }

    py::object get(const std::string& name) const { return agent_->runtime()->get_variable(name); }

    void set(const std::string& name, py::object value) {
        if (!python::is_identifier(name)) {
            throw Error(ErrorCode::invalid_name, "not a valid identifier: '" + name + "'");
        }
        agent_->runtime()->globals()[name.c_str()] = std::move(value);
    }

    std::vector<std::string> entries() const {
        std::vector<std::string> out;
        for (const auto& e : agent_->runtime()->list_entries()) {
            out.push_back(e.name);
        }
        return out;
    }

    std::string repr() const { return "<SubAgent '" + name_ + "'>"; }

private:
    std::string name_;
    AgentPtr agent_;
};

std::once_flag g_proxy_once;

void register_proxy_type() {
    std::call_once(g_proxy_once, [] {
        auto host = python::host_module();
        py::class_<SubAgentProxy>(host, "SubAgent",
                                  "Handle on another agent: step(msg), run(msg), get(name), set(name, value), entries().")
            .def("step", &SubAgentProxy::step, py::arg("message"),
                 "Send a message to the sub-agent and return its final text.")
            .def("run", &SubAgentProxy::run, py::arg("message"),
                 "Start a new conversation with the sub-agent and return its final text.")
            .def("get", &SubAgentProxy::get, py::arg("name"), "Live value of a variable in the sub-agent runtime.")
            .def("set", &SubAgentProxy::set, py::arg("name"), py::arg("value"),
                 "Bind a variable in the sub-agent runtime.")
            .def("entries", &SubAgentProxy::entries, "Names bound in the sub-agent runtime.")
            .def("__repr__", &SubAgentProxy::repr);
    });
}

// Keeps the Python error type visible to cells (KeyError for a missing name).
void register_translators() {
    static std::once_flag once;
    std::call_once(once, [] {
        py::register_exception_translator([](std::exception_ptr p) {
            try {
                if (p) {
                    std::rethrow_exception(p);
                }
            } catch (const NotFound& e) {
                PyErr_SetString(PyExc_NameError, e.what());
            } catch (const Error& e) {
                PyErr_SetString(PyExc_RuntimeError, e.what());
            }
        });
    });
}

}  // namespace

VariableSpec subagent_variable(const std::string& name, AgentPtr sub) {
    if (!sub) {
        throw Error(ErrorCode::contract, "sub-agent is null");
    }
    python::ensure_started();
    python::Gil gil;
    register_proxy_type();
    register_translators();
    py::object proxy = py::cast(SubAgentProxy(name, std::move(sub)));
    VariableDescriptor d{name, "SubAgent",
                         "Sub-agent handle: step(message) -> str, run(message) -> str, get(name), set(name, value), "
                         "entries() -> list"};
    return {std::move(d), python::Ref(std::move(proxy))};
}

void register_subagent(Agent& meta, const std::string& name, AgentPtr sub) {
    auto spec = subagent_variable(name, std::move(sub));
    python::Gil gil;
    meta.runtime()->inject_variable(spec.descriptor, spec.value.get());
}

void AgentRegistry::add(Agent& meta, const std::string& name, AgentPtr sub) {
    std::lock_guard lock(mutex_);
    if (entries_.count(name) != 0) {
        throw Error(ErrorCode::collision, "sub-agent '" + name + "' is already registered");
    }
    register_subagent(meta, name, sub);
    entries_.emplace(name, std::move(sub));
}

AgentPtr AgentRegistry::get(const std::string& name) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw NotFound(name);
    }
    return it->second;
}

std::vector<std::string> AgentRegistry::names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) {
        out.push_back(k);
    }
    return out;
}

NamespaceEntry transfer(Runtime& src, const std::string& name, Runtime& dst, const std::optional<std::string>& new_name,
                        bool overwrite) {
    const std::string target = new_name.value_or(name);
    python::Gil gil;
    py::object value = src.get_variable(name);

    for (const auto& item : src.injected_manifest()) {
        if (item.name() != name) {
            continue;
        }
        if (const auto* fd = std::get_if<FunctionDescriptor>(&item.descriptor)) {
            FunctionDescriptor d = *fd;
            d.name = target;
            return dst.inject_function(d, value, overwrite);
        }
        VariableDescriptor d = std::get<VariableDescriptor>(item.descriptor);
        d.name = target;
        return dst.inject_variable(d, value, overwrite);
    }
    VariableDescriptor d{target, python::type_name(value), "transferred from runtime " + src.session_id()};
    return dst.inject_variable(d, value, overwrite);
}

std::vector<SkippedEntry> transfer_via_snapshot(const Runtime& src, const std::vector<std::string>& names,
                                                Runtime& dst) {
    Snapshot full = src.snapshot();
    Snapshot part;
    part.cell_counter = full.cell_counter;
    std::vector<SkippedEntry> skipped;
    for (const auto& name : names) {
        auto it = std::find_if(full.entries.begin(), full.entries.end(),
                               [&](const SnapshotEntry& e) { return e.name == name; });
        if (it != full.entries.end()) {
            part.entries.push_back(*it);
            continue;
        }
        auto sk = std::find_if(full.skipped.begin(), full.skipped.end(),
                               [&](const SkippedEntry& e) { return e.name == name; });
        if (sk != full.skipped.end()) {
            skipped.push_back(*sk);
        } else {
            throw NotFound(name);
        }
    }
    for (const auto& v : full.variable_manifest) {
        if (std::find(names.begin(), names.end(), v.name) != names.end()) {
            part.variable_manifest.push_back(v);
        }
    }
    for (const auto& f : full.function_manifest) {
        if (std::find(names.begin(), names.end(), f.name) != names.end()) {
            part.function_manifest.push_back(f);
        }
    }
    auto failed = dst.load_snapshot(part);
    skipped.insert(skipped.end(), failed.begin(), failed.end());
    return skipped;
}

std::vector<std::string> SharedRuntimeBinding::members() const {
    std::vector<std::string> out;
    for (const auto& [name, agent] : members_) {
        out.push_back(name);
    }
    return out;
}

AgentPtr SharedRuntimeBinding::member(const std::string& name) const {
    for (const auto& [n, agent] : members_) {
        if (n == name) {
            return agent;
        }
    }
    throw NotFound(name);
}

ExecutionOutcome SharedRuntimeBinding::execute(std::string_view code) {
    std::unique_lock lock(guard_, std::defer_lock);
    if (python::gil_held()) {
        python::NoGil release;
        lock.lock();
    } else {
        lock.lock();
    }
    ++executions_;
    return runtime_->execute_cell(code);
}

NamespaceEntry SharedRuntimeBinding::inject(const VariableDescriptor& descriptor, py::object value, bool overwrite) {
    std::unique_lock lock(guard_, std::defer_lock);
    if (python::gil_held()) {
        python::NoGil release;
        lock.lock();
    } else {
        lock.lock();
    }
    return runtime_->inject_variable(descriptor, std::move(value), overwrite);
}

std::shared_ptr<SharedRuntimeBinding> bind_shared(const std::vector<std::pair<std::string, AgentPtr>>& agents,
                                                  RuntimeHandle runtime) {
    if (!runtime || !runtime->alive()) {
        throw Error(ErrorCode::kernel_dead, "shared runtime is not live");
    }
    for (std::size_t i = 0; i < agents.size(); ++i) {
        const auto& [name, agent] = agents[i];
        if (!agent) {
            throw Error(ErrorCode::contract, "member '" + name + "' is null");
        }
        if (agent->bound()) {
            throw Error(ErrorCode::already_bound, "agent '" + name + "' is already bound to a shared runtime");
        }
        for (std::size_t k = 0; k < i; ++k) {
            if (agents[k].first == name || agents[k].second == agent) {
                throw Error(ErrorCode::collision, "member '" + name + "' is listed twice");
            }
        }
    }

    std::shared_ptr<SharedRuntimeBinding> binding(new SharedRuntimeBinding(runtime));
    binding->members_ = agents;
    {
        python::Gil gil;
        for (const auto& [name, agent] : agents) {
            RuntimeHandle own = agent->runtime();
            if (own == runtime) {
                continue;
            }
            for (const auto& item : own->injected_manifest()) {
                if (!runtime->contains(item.name())) {
                    transfer(*own, item.name(), *runtime);
                }
            }
        }
    }
    std::weak_ptr<SharedRuntimeBinding> weak = binding;
    for (const auto& [name, agent] : agents) {
        agent->rebind(runtime, [weak](Runtime& rt, std::string_view code) {
            if (auto b = weak.lock()) {
                return b->execute(code);
            }
            return rt.execute_cell(code);
        });
    }
    return binding;
}

}  // namespace dualstream
