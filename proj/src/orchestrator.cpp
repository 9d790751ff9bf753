#include "dualstream/orchestrator.hpp"

#include "dualstream/errors.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace dualstream {

namespace {

constexpr std::size_t kArgReprLimit = 200;

using nlohmann::json;

json usage_json(const Usage& u) {
    return {{"prompt_tokens", u.prompt_tokens}, {"completion_tokens", u.completion_tokens}, {"total_tokens", u.total()}};
}

Usage usage_from(const json& j) {
    return {j.at("prompt_tokens").get<std::int64_t>(), j.at("completion_tokens").get<std::int64_t>()};
}

RuleKind rule_kind_from(std::string_view s) {
    for (auto k : {RuleKind::import_rule, RuleKind::function_rule, RuleKind::attribute_rule, RuleKind::syntax}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw Error(ErrorCode::schema, "unknown rule kind '" + std::string(s) + "'");
}

ObservationKind observation_kind_from(std::string_view s) {
    for (auto k : {ObservationKind::output, ObservationKind::size_error, ObservationKind::security_error}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw Error(ErrorCode::schema, "unknown observation kind '" + std::string(s) + "'");
}

CellErrorKind cell_error_kind_from(std::string_view s) {
    for (auto k : {CellErrorKind::runtime, CellErrorKind::timeout, CellErrorKind::syntax}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw Error(ErrorCode::schema, "unknown cell error kind '" + std::string(s) + "'");
}

FinalKind final_kind_from(std::string_view s) {
    for (auto k : {FinalKind::answer, FinalKind::max_steps, FinalKind::aborted}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw Error(ErrorCode::schema, "unknown final kind '" + std::string(s) + "'");
}

json turn_json(const TurnRecord& t) {
    json j;
    j["index"] = t.index;
    j["role"] = "assistant";
    j["content"] = t.response;
    j["action"] = t.action.kind == ActionKind::code ? "code" : "final_answer";
    if (t.action.kind == ActionKind::code) {
        j["code"] = t.action.code;
        j["multi_block"] = t.action.multi_block;
        j["block_count"] = t.action.block_count;
    } else {
        j["answer"] = t.action.answer;
    }
    json violations = json::array();
    for (const auto& v : t.violations) {
        violations.push_back({{"rule", std::string(to_string(v.rule_kind))},
                              {"name", v.offending_name},
                              {"line", v.location.line},
                              {"column", v.location.column},
                              {"message", v.message}});
    }
    j["violations"] = std::move(violations);
    if (t.outcome) {
        const auto& o = *t.outcome;
        json oj = {{"cell_index", o.cell_index},
                   {"stdout", o.stdout_text},
                   {"stderr", o.stderr_text},
                   {"dropped_chars", o.dropped_chars}};
        if (o.last_value_repr) {
            oj["last_value_repr"] = *o.last_value_repr;
        }
        if (o.error) {
            oj["error"] = {{"kind", std::string(to_string(o.error->kind))},
                           {"type", o.error->type_name},
                           {"message", o.error->message},
                           {"traceback", o.error->traceback}};
        }
        j["outcome"] = std::move(oj);
    }
    if (t.observation) {
        j["observation"] = {{"kind", std::string(to_string(t.observation->kind))},
                            {"text", t.observation->text},
                            {"raw_length", t.observation->raw_length}};
    }
    if (!t.feedback.empty()) {
        j["feedback"] = {{"role", "user"}, {"content", t.feedback}};
    }
    j["usage"] = usage_json(t.usage);
    j["usage_estimated"] = t.usage_estimated;
    return j;
}

TurnRecord turn_from(const json& j, std::string_view block_identifier) {
    TurnRecord t;
    t.index = j.at("index").get<int>();
    t.response = j.at("content").get<std::string>();
    t.action = extract_action(t.response, block_identifier);
    const bool is_code = j.at("action").get<std::string>() == "code";
    if (is_code) {
        t.action.kind = ActionKind::code;
        t.action.code = j.at("code").get<std::string>();
        t.action.answer.clear();
        t.action.multi_block = j.value("multi_block", false);
        t.action.block_count = j.value("block_count", std::size_t{1});
    } else {
        t.action.kind = ActionKind::final_answer;
        t.action.answer = j.at("answer").get<std::string>();
        t.action.code.clear();
    }
    for (const auto& v : j.at("violations")) {
        Violation viol;
        viol.rule_kind = rule_kind_from(v.at("rule").get<std::string>());
        viol.offending_name = v.at("name").get<std::string>();
        viol.location = {v.at("line").get<int>(), v.at("column").get<int>()};
        viol.message = v.at("message").get<std::string>();
        t.violations.push_back(std::move(viol));
    }
    if (j.contains("outcome")) {
        const auto& oj = j["outcome"];
        ExecutionOutcome o;
        o.source = is_code ? t.action.code : std::string();
        o.cell_index = oj.at("cell_index").get<std::int64_t>();
        o.stdout_text = oj.at("stdout").get<std::string>();
        o.stderr_text = oj.at("stderr").get<std::string>();
        o.dropped_chars = oj.value("dropped_chars", std::size_t{0});
        if (oj.contains("last_value_repr")) {
            o.last_value_repr = oj["last_value_repr"].get<std::string>();
        }
        if (oj.contains("error")) {
            const auto& ej = oj["error"];
            o.error = CellError{cell_error_kind_from(ej.at("kind").get<std::string>()),
                                ej.at("type").get<std::string>(), ej.at("message").get<std::string>(),
                                ej.at("traceback").get<std::string>()};
        }
        t.outcome = std::move(o);
    }
    if (j.contains("observation")) {
        const auto& ob = j["observation"];
        t.observation = ShapedObservation{observation_kind_from(ob.at("kind").get<std::string>()),
                                          ob.at("text").get<std::string>(), ob.at("raw_length").get<std::size_t>()};
    }
    if (j.contains("feedback")) {
        t.feedback = j["feedback"].at("content").get<std::string>();
    }
    t.usage = usage_from(j.at("usage"));
    t.usage_estimated = j.value("usage_estimated", false);
    return t;
}

bool is_library_type(py::handle type) {
    const auto module = py::str(type.attr("__module__")).cast<std::string>();
    const auto root = module.substr(0, module.find('.'));
    static const std::set<std::string> kExternal = {"numpy", "pandas", "scipy", "torch", "polars", "sklearn", "_dualstream_host"};
    if (root == "builtins") {
        // Classes exec'd in a namespace without __name__ also land here.
        auto builtins = py::module_::import("builtins");
        return py::dict(builtins.attr("__dict__")).attr("get")(type.attr("__name__")).is(type);
    }
    if (kExternal.count(root) != 0) {
        return true;
    }
    auto sys = py::module_::import("sys");
    if (py::hasattr(sys, "stdlib_module_names")) {
        return sys.attr("stdlib_module_names").contains(py::str(root));
    }
    return false;
}

}  // namespace

std::string_view to_string(FinalKind kind) noexcept {
    switch (kind) {
        case FinalKind::answer: return "answer";
        case FinalKind::max_steps: return "max_steps";
        case FinalKind::aborted: return "aborted";
    }
    return "answer";
}

std::string SessionResult::final_text() const {
    switch (final) {
        case FinalKind::answer: return answer;
        case FinalKind::max_steps: return kMaxStepsMessage;
        case FinalKind::aborted: return "Aborted: " + abort_reason;
    }
    return answer;
}

void AgentConfig::validate() const {
    if (T_max < 1) {
        throw Error(ErrorCode::contract, "T_max must be at least 1");
    }
    if (L_max < 1) {
        throw Error(ErrorCode::contract, "L_max must be at least 1");
    }
    if (model.temperature < 0.0) {
        throw Error(ErrorCode::contract, "temperature must be >= 0");
    }
    templates.validate();
}

AgentConfig AgentConfig::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io, "cannot open agent config " + path.string());
    }
    AgentConfig c;
    try {
        const auto j = json::parse(in);
        if (!j.is_object()) {
            throw Error(ErrorCode::schema, "agent config must be an object");
        }
        for (const auto& [key, value] : j.items()) {
            if (key == "T_max") {
                c.T_max = value.get<int>();
            } else if (key == "L_max") {
                c.L_max = value.get<std::size_t>();
            } else if (key == "policy") {
                c.policy = {};
                c.policy.banned_imports = value.value("banned_imports", std::vector<std::string>{});
                c.policy.banned_calls = value.value("banned_calls", std::vector<std::string>{});
                c.policy.banned_attributes = value.value("banned_attributes", std::vector<std::string>{});
                c.policy.normalize();
            } else if (key == "templates") {
                for (const auto& [tk, tv] : value.items()) {
                    const auto text = tv.get<std::string>();
                    if (tk == "agent_identity") c.templates.agent_identity = text;
                    else if (tk == "instructions") c.templates.instructions = text;
                    else if (tk == "block_identifier") c.templates.block_identifier = text;
                    else if (tk == "execution_feedback") c.templates.execution_feedback = text;
                    else if (tk == "truncation_feedback") c.templates.truncation_feedback = text;
                    else if (tk == "security_feedback") c.templates.security_feedback = text;
                    else throw Error(ErrorCode::schema, "unknown template '" + tk + "'");
                }
            } else if (key == "model_id") {
                c.model.model_id = value.get<std::string>();
                if (!j.contains("temperature")) {
                    c.model.temperature = default_temperature(c.model.model_id);
                }
            } else if (key == "temperature") {
                c.model.temperature = value.get<double>();
            } else if (key == "max_output_tokens") {
                c.model.max_output_tokens = value.get<std::int64_t>();
            } else if (key == "current_time") {
                c.current_time = value.get<std::string>();
            } else if (key == "additional_context") {
                c.additional_context = value.get<std::string>();
            } else if (key == "fresh_history_per_conversation") {
                c.fresh_history_per_conversation = value.get<bool>();
            } else if (key == "instrument_tools") {
                c.instrument_tools = value.get<bool>();
            } else {
                throw Error(ErrorCode::schema, "unknown agent config key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::schema, "agent config " + path.string() + ": " + e.what());
    }
    c.validate();
    return c;
}

void InvocationLog::append(Invocation record) {
    std::lock_guard lock(mutex_);
    records_.push_back(std::move(record));
}

std::vector<Invocation> InvocationLog::records() const {
    std::lock_guard lock(mutex_);
    return records_;
}

std::size_t InvocationLog::size() const {
    std::lock_guard lock(mutex_);
    return records_.size();
}

void InvocationLog::clear() {
    std::lock_guard lock(mutex_);
    records_.clear();
}

std::string render_arguments(py::handle args, py::handle kwargs) {
    std::string out = "(";
    bool first = true;
    for (auto a : py::reinterpret_borrow<py::tuple>(args)) {
        if (!first) {
            out += ", ";
        }
        out += python::bounded_repr(a, kArgReprLimit);
        first = false;
    }
    if (kwargs && !kwargs.is_none()) {
        for (auto item : py::reinterpret_borrow<py::dict>(kwargs)) {
            if (!first) {
                out += ", ";
            }
            out += py::str(item.first).cast<std::string>() + "=" + python::bounded_repr(item.second, kArgReprLimit);
            first = false;
        }
    }
    return out + ")";
}

py::object instrument(py::handle callable, std::shared_ptr<InvocationLog> log, std::string name) {
    python::ensure_started();
    python::Gil gil;
    if (PyCallable_Check(callable.ptr()) == 0) {
        throw Error(ErrorCode::not_callable, "'" + name + "' is not invocable");
    }
    py::cpp_function hook([log = std::move(log), name = std::move(name)](py::tuple args, py::dict kwargs) {
        log->append({name, render_arguments(args, kwargs), Runtime::current_cell_index()});
    });
    return python::host_module().attr("make_wrapper")(callable, hook);
}

// ---------------------------------------------------------------------------

Agent::Agent(AgentConfig config, RuntimeHandle runtime, BackendPtr backend)
    : config_(std::move(config)), runtime_(std::move(runtime)), backend_(std::move(backend)) {}

AgentPtr Agent::create(AgentConfig config, RuntimeHandle runtime, BackendPtr backend, std::vector<ToolSpec> tools,
                       std::vector<VariableSpec> variables, std::vector<TypeSchema> types) {
    config.validate();
    if (!runtime) {
        throw Error(ErrorCode::contract, "agent needs a runtime");
    }
    if (!backend) {
        throw Error(ErrorCode::contract, "agent needs a model backend");
    }
    AgentPtr agent(new Agent(std::move(config), std::move(runtime), std::move(backend)));

    std::vector<FunctionDescriptor> functions;
    std::vector<VariableDescriptor> vars;
    {
        python::Gil gil;
        for (auto& tool : tools) {
            FunctionDescriptor d = tool.descriptor;
            if (d.name.empty()) {
                d = describe_function(tool.callable.get());
            }
            functions.push_back(std::move(d));
        }
        for (auto& v : variables) {
            vars.push_back(v.descriptor);
        }
        if (agent->config_.describe_types) {
            for (auto& v : variables) {
                py::handle type = v.value.get().get_type();
                if (is_library_type(type)) {
                    continue;
                }
                TypeSchema schema = derive_type_schema(v.value.get());
                const bool seen = std::any_of(types.begin(), types.end(),
                                              [&](const TypeSchema& t) { return t.type_name == schema.type_name; });
                if (!seen) {
                    types.push_back(std::move(schema));
                }
            }
        }
    }

    // Rendering first so duplicate names are rejected before anything is bound.
    agent->bundle_ = render_context(functions, vars, types);
    {
        std::set<std::string> names;
        for (const auto& f : functions) {
            names.insert(f.name);
        }
        for (const auto& v : vars) {
            if (!names.insert(v.name).second) {
                throw Error(ErrorCode::duplicate_descriptor, "'" + v.name + "' is both a tool and a variable");
            }
        }
    }

    {
        python::Gil gil;
        for (std::size_t i = 0; i < tools.size(); ++i) {
            py::object callable = tools[i].callable.get();
            if (agent->config_.instrument_tools) {
                callable = instrument(callable, agent->log_, functions[i].name);
            }
            agent->runtime_->inject_function(functions[i], callable);
        }
        for (std::size_t i = 0; i < variables.size(); ++i) {
            agent->runtime_->inject_variable(vars[i], variables[i].value.get());
        }
    }

    const std::string now = agent->config_.current_time.value_or(format_timestamp(std::chrono::system_clock::now()));
    agent->system_ =
        build_system_prompt(agent->config_.templates, agent->bundle_, now, agent->config_.additional_context);
    agent->history_.emplace(agent->system_);
    return agent;
}

const ConversationHistory& Agent::history() const {
    return *history_;
}

RuntimeHandle Agent::runtime() const {
    std::lock_guard lock(mutex_);
    return runtime_;
}

UsageCounter Agent::lifetime_usage() const {
    std::lock_guard lock(mutex_);
    return lifetime_;
}

void Agent::rebind(RuntimeHandle runtime, ExecuteHook hook) {
    std::lock_guard lock(mutex_);
    runtime_ = std::move(runtime);
    hook_ = std::move(hook);
    bound_ = true;
}

bool Agent::bound() const {
    std::lock_guard lock(mutex_);
    return bound_;
}

ExecutionOutcome Agent::execute(std::string_view code) {
    RuntimeHandle rt;
    ExecuteHook hook;
    {
        std::lock_guard lock(mutex_);
        rt = runtime_;
        hook = hook_;
    }
    return hook ? hook(*rt, code) : rt->execute_cell(code);
}

SessionResult Agent::run(std::string_view query) {
    return converse(query, true);
}

SessionResult Agent::step(std::string_view message) {
    return converse(message, config_.fresh_history_per_conversation);
}

SessionResult Agent::converse(std::string_view message, bool fresh) {
    if (message.empty()) {
        throw Error(ErrorCode::contract, "user message is empty");
    }
    std::lock_guard session(session_mutex_);
    if (fresh) {
        history_.emplace(system_);
        pending_close_.reset();
    } else if (pending_close_) {
        history_->append({Role::assistant, *pending_close_});
        pending_close_.reset();
    }
    history_->append({Role::user, std::string(message)});

    SessionResult result;
    result.query = std::string(message);
    result.runtime = runtime();

    auto finish = [&](SessionResult r) {
        std::lock_guard lock(mutex_);
        lifetime_.prompt_tokens += r.usage.prompt_tokens;
        lifetime_.completion_tokens += r.usage.completion_tokens;
        lifetime_.steps += r.usage.steps;
        lifetime_.estimated = lifetime_.estimated || r.usage.estimated;
        return r;
    };

    for (int t = 1; t <= config_.T_max; ++t) {
        ModelRequest request{history_->messages(), config_.model.temperature, config_.model.max_output_tokens,
                             config_.model.model_id};
        ModelResponse response;
        try {
            if (python::gil_held()) {
                python::NoGil release;
                response = complete(*backend_, request);
            } else {
                response = complete(*backend_, request);
            }
        } catch (const Error& e) {
            result.final = FinalKind::aborted;
            result.abort_reason = e.what();
            pending_close_ = result.final_text();
            return finish(std::move(result));
        }
        result.usage = accumulate(result.usage, response.usage, response.usage_estimated);

        TurnRecord turn;
        turn.index = t;
        turn.response = response.text;
        turn.usage = response.usage;
        turn.usage_estimated = response.usage_estimated;
        turn.action = extract_action(response.text, config_.templates.block_identifier);

        if (response.text.empty()) {
            result.turns.push_back(std::move(turn));
            result.final = FinalKind::aborted;
            result.abort_reason = "model returned an empty response";
            pending_close_ = result.final_text();
            return finish(std::move(result));
        }
        history_->append({Role::assistant, response.text});

        if (turn.action.kind == ActionKind::final_answer) {
            result.final = FinalKind::answer;
            result.answer = turn.action.answer;
            result.turns.push_back(std::move(turn));
            return finish(std::move(result));
        }

        auto violations = check(turn.action.code, config_.policy);
        // Code that does not parse cannot run, so it goes to the runtime and the
        // model sees the interpreter's own SyntaxError.
        if (violations.size() == 1 && violations.front().rule_kind == RuleKind::syntax) {
            violations.clear();
        }
        ShapedObservation observation;
        if (!violations.empty()) {
            observation = security_observation(violations, config_.templates);
            turn.violations = std::move(violations);
        } else {
            try {
                turn.outcome = execute(turn.action.code);
            } catch (const Error& e) {
                result.turns.push_back(std::move(turn));
                result.final = FinalKind::aborted;
                result.abort_reason = e.what();
                pending_close_ = result.final_text();
                throw SessionError(e, finish(std::move(result)));
            }
            observation = shape_observation(*turn.outcome, config_.L_max, config_.templates);
        }
        ChatMessage feedback = make_feedback(observation, config_.templates);
        turn.observation = std::move(observation);
        turn.feedback = feedback.content;
        history_->append(std::move(feedback));
        result.turns.push_back(std::move(turn));
    }

    result.final = FinalKind::max_steps;
    pending_close_ = kMaxStepsMessage;
    return finish(std::move(result));
}

// ---------------------------------------------------------------------------

nlohmann::json transcript_json(const SessionResult& result) {
    json turns = json::array();
    Usage sum;
    for (const auto& t : result.turns) {
        turns.push_back(turn_json(t));
        sum.prompt_tokens += t.usage.prompt_tokens;
        sum.completion_tokens += t.usage.completion_tokens;
    }
    json j;
    j["format"] = "dualstream-transcript";
    j["version"] = 1;
    j["query"] = result.query;
    j["final"] = std::string(to_string(result.final));
    j["final_text"] = result.final_text();
    if (result.final == FinalKind::answer) {
        j["answer"] = result.answer;
    }
    if (result.final == FinalKind::aborted) {
        j["abort_reason"] = result.abort_reason;
    }
    j["turns"] = std::move(turns);
    j["totals"] = {{"steps", result.usage.steps},
                   {"prompt_tokens", result.usage.prompt_tokens},
                   {"completion_tokens", result.usage.completion_tokens},
                   {"total_tokens", result.usage.total()},
                   {"estimated", result.usage.estimated}};
    return j;
}

SessionResult transcript_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", std::string()) != "dualstream-transcript") {
            throw Error(ErrorCode::schema, "not a transcript document");
        }
        SessionResult r;
        r.query = j.at("query").get<std::string>();
        r.final = final_kind_from(j.at("final").get<std::string>());
        r.answer = j.value("answer", std::string());
        r.abort_reason = j.value("abort_reason", std::string());
        for (const auto& t : j.at("turns")) {
            r.turns.push_back(turn_from(t, "python"));
        }
        const auto& totals = j.at("totals");
        r.usage.steps = totals.at("steps").get<std::int64_t>();
        r.usage.prompt_tokens = totals.at("prompt_tokens").get<std::int64_t>();
        r.usage.completion_tokens = totals.at("completion_tokens").get<std::int64_t>();
        r.usage.estimated = totals.value("estimated", false);
        return r;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::schema, std::string("malformed transcript: ") + e.what());
    }
}

void export_transcript(const SessionResult& result, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::io, "cannot write transcript " + path.string());
    }
    out << transcript_json(result).dump(2) << '\n';
    if (!out) {
        throw Error(ErrorCode::io, "failed writing transcript " + path.string());
    }
}

SessionResult load_transcript(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io, "cannot open transcript " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::schema, "transcript " + path.string() + ": " + e.what());
    }
    return transcript_from_json(j);
}

}  // namespace dualstream
