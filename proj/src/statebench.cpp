#include "dualstream/statebench.hpp"

#include "dualstream/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace dualstream {

namespace {

using nlohmann::json;

// ----- paths ----------------------------------------------------------------

struct PathStep {
    enum class Kind { attr, call, index, key } kind;
    std::string name;
    long long index = 0;
};

struct ParsedPath {
    std::string root;
    std::vector<PathStep> steps;
};

bool ident_start(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}

bool ident_char(char c) {
    return ident_start(c) || (c >= '0' && c <= '9');
}

ParsedPath parse_path(std::string_view path) {
    ParsedPath out;
    std::size_t i = 0;
    auto fail = [&](const std::string& why) -> void {
        throw Error(ErrorCode::schema, "bad variable path '" + std::string(path) + "': " + why);
    };
    auto read_ident = [&]() {
        if (i >= path.size() || !ident_start(path[i])) {
            fail("expected an identifier at offset " + std::to_string(i));
        }
        const std::size_t start = i;
        while (i < path.size() && ident_char(path[i])) {
            ++i;
        }
        return std::string(path.substr(start, i - start));
    };
    out.root = read_ident();
    while (i < path.size()) {
        if (path[i] == '.') {
            ++i;
            PathStep step{PathStep::Kind::attr, read_ident()};
            if (path.substr(i, 2) == "()") {
                step.kind = PathStep::Kind::call;
                i += 2;
            }
            out.steps.push_back(std::move(step));
        } else if (path[i] == '[') {
            ++i;
            if (i < path.size() && (path[i] == '\'' || path[i] == '"')) {
                const char quote = path[i++];
                const auto end = path.find(quote, i);
                if (end == std::string_view::npos) {
                    fail("unterminated key");
                }
                out.steps.push_back({PathStep::Kind::key, std::string(path.substr(i, end - i))});
                i = end + 1;
            } else {
                const std::size_t start = i;
                if (i < path.size() && path[i] == '-') {
                    ++i;
                }
                while (i < path.size() && path[i] >= '0' && path[i] <= '9') {
                    ++i;
                }
                if (i == start || (i == start + 1 && path[start] == '-')) {
                    fail("expected an integer index or quoted key");
                }
                PathStep step{PathStep::Kind::index, {}};
                step.index = std::stoll(std::string(path.substr(start, i - start)));
                out.steps.push_back(std::move(step));
            }
            if (i >= path.size() || path[i] != ']') {
                fail("expected ']'");
            }
            ++i;
        } else {
            fail("unexpected character '" + std::string(1, path[i]) + "'");
        }
    }
    return out;
}

// Requires the GIL. Throws NotFound or py::error_already_set.
py::object resolve(Runtime& runtime, const ParsedPath& path) {
    py::object cur = runtime.get_variable(path.root);
    for (const auto& step : path.steps) {
        switch (step.kind) {
            case PathStep::Kind::attr: cur = cur.attr(step.name.c_str()); break;
            case PathStep::Kind::call: cur = cur.attr(step.name.c_str())(); break;
            case PathStep::Kind::index: cur = cur[py::int_(step.index)]; break;
            case PathStep::Kind::key: cur = cur[py::str(step.name)]; break;
        }
    }
    return cur;
}

// ----- value conversion -------------------------------------------------------

json to_json_value(py::handle v, int depth = 0) {
    if (depth > 32) {
        return py::repr(v).cast<std::string>();
    }
    if (v.is_none()) {
        return nullptr;
    }
    if (PyBool_Check(v.ptr())) {
        return v.cast<bool>();
    }
    if (PyLong_Check(v.ptr())) {
        try {
            return v.cast<long long>();
        } catch (const py::cast_error&) {
            return v.cast<double>();
        }
    }
    if (PyFloat_Check(v.ptr())) {
        return v.cast<double>();
    }
    if (PyUnicode_Check(v.ptr())) {
        return v.cast<std::string>();
    }
    if (PyBytes_Check(v.ptr())) {
        return py::repr(v).cast<std::string>();
    }
    if (PyDict_Check(v.ptr())) {
        json obj = json::object();
        for (auto item : py::reinterpret_borrow<py::dict>(v)) {
            obj[py::str(item.first).cast<std::string>()] = to_json_value(item.second, depth + 1);
        }
        return obj;
    }
    if (PyList_Check(v.ptr()) || PyTuple_Check(v.ptr())) {
        json arr = json::array();
        for (auto item : v) {
            arr.push_back(to_json_value(item, depth + 1));
        }
        return arr;
    }
    if (PyAnySet_Check(v.ptr())) {
        py::list items = py::module_::import("builtins").attr("sorted")(v, py::arg("key") = py::module_::import("builtins").attr("repr"));
        return to_json_value(items, depth + 1);
    }
    // DataFrame-like: its values as a nested list.
    if (py::hasattr(v, "columns") && py::hasattr(v, "values") && !py::hasattr(v, "tolist")) {
        return to_json_value(v.attr("values").attr("tolist")(), depth + 1);
    }
    // numpy arrays and scalars, pandas Series/Index.
    if (py::hasattr(v, "tolist")) {
        try {
            py::object lst = v.attr("tolist")();
            if (!lst.is(v)) {
                return to_json_value(lst, depth + 1);
            }
        } catch (const py::error_already_set&) {
        }
    }
    if (PyNumber_Check(v.ptr()) && py::hasattr(v, "__float__")) {
        try {
            return v.cast<double>();
        } catch (const py::cast_error&) {
        }
    }
    return py::repr(v).cast<std::string>();
}

bool numbers_equal(const json& a, const json& b, std::optional<double> tolerance) {
    if (a.is_number_integer() && b.is_number_integer() && !tolerance) {
        if (a.is_number_unsigned() || b.is_number_unsigned()) {
            return a.get<long double>() == b.get<long double>();
        }
        return a.get<long long>() == b.get<long long>();
    }
    const double x = a.get<double>();
    const double y = b.get<double>();
    if (x == y) {
        return true;
    }
    const double tol = tolerance.value_or(kRealTolerance);
    return std::fabs(x - y) <= tol * std::max(std::fabs(x), std::fabs(y));
}

bool values_match(const json& actual, const json& expected, std::optional<double> tolerance) {
    if (actual.is_number() && expected.is_number()) {
        return numbers_equal(actual, expected, tolerance);
    }
    if (actual.is_array() && expected.is_array()) {
        if (actual.size() != expected.size()) {
            return false;
        }
        for (std::size_t i = 0; i < actual.size(); ++i) {
            if (!values_match(actual[i], expected[i], tolerance)) {
                return false;
            }
        }
        return true;
    }
    if (actual.is_object() && expected.is_object()) {
        if (actual.size() != expected.size()) {
            return false;
        }
        for (const auto& [k, v] : expected.items()) {
            if (!actual.contains(k) || !values_match(actual[k], v, tolerance)) {
                return false;
            }
        }
        return true;
    }
    return actual == expected;
}

int compare_order(const json& actual, const json& expected) {
    if (actual.is_number() && expected.is_number()) {
        if (actual.is_number_integer() && expected.is_number_integer()) {
            const auto x = actual.get<long long>();
            const auto y = expected.get<long long>();
            return x < y ? -1 : (x > y ? 1 : 0);
        }
        const double x = actual.get<double>();
        const double y = expected.get<double>();
        return x < y ? -1 : (x > y ? 1 : 0);
    }
    if (actual.is_string() && expected.is_string()) {
        const auto c = actual.get<std::string>().compare(expected.get<std::string>());
        return c < 0 ? -1 : (c > 0 ? 1 : 0);
    }
    throw Error(ErrorCode::contract, "cannot order " + actual.dump() + " against " + expected.dump());
}

std::string clip(std::string s, std::size_t n = 160) {
    if (s.size() > n) {
        s = s.substr(0, n) + "...";
    }
    return s;
}

AssertionOutcome evaluate(Runtime& runtime, const Assertion& a) {
    AssertionOutcome out;
    out.path = a.path;
    out.op = std::string(to_string(a.op));
    py::object value;
    try {
        value = resolve(runtime, parse_path(a.path));
    } catch (const NotFound& e) {
        out.passed = false;
        out.message = "'" + e.name() + "' is not bound";
        return out;
    } catch (const py::error_already_set& e) {
        if (a.op == Comparator::exists) {
            out.passed = false;
            out.message = a.path + " does not resolve";
            return out;
        }
        out.passed = false;
        out.message = std::string("retrieval failed: ") + e.what();
        return out;
    } catch (const Error& e) {
        out.passed = false;
        out.message = e.what();
        return out;
    }

    try {
        switch (a.op) {
            case Comparator::exists:
                out.passed = true;
                break;
            case Comparator::type_is:
                out.passed = a.expected.is_string() && python::type_name(value) == a.expected.get<std::string>();
                out.message = "type is " + python::type_name(value);
                break;
            case Comparator::len_eq: {
                const auto n = static_cast<long long>(py::len(value));
                out.passed = a.expected.is_number_integer() && n == a.expected.get<long long>();
                out.message = "len is " + std::to_string(n);
                break;
            }
            case Comparator::contains:
            case Comparator::not_contains: {
                py::object needle = py::module_::import("json").attr("loads")(a.expected.dump());
                const int r = PySequence_Contains(value.ptr(), needle.ptr());
                if (r < 0) {
                    throw py::error_already_set();
                }
                out.passed = (r == 1) == (a.op == Comparator::contains);
                out.message = "value is " + clip(python::bounded_repr(value, 200));
                break;
            }
            default: {
                const json actual = to_json_value(value);
                out.message = "actual " + clip(actual.dump());
                switch (a.op) {
                    case Comparator::eq: out.passed = values_match(actual, a.expected, a.tolerance); break;
                    case Comparator::ne: out.passed = !values_match(actual, a.expected, a.tolerance); break;
                    case Comparator::approx:
                        out.passed = values_match(actual, a.expected, a.tolerance.value_or(kRealTolerance));
                        break;
                    case Comparator::lt: out.passed = compare_order(actual, a.expected) < 0; break;
                    case Comparator::le: out.passed = compare_order(actual, a.expected) <= 0; break;
                    case Comparator::gt: out.passed = compare_order(actual, a.expected) > 0; break;
                    case Comparator::ge: out.passed = compare_order(actual, a.expected) >= 0; break;
                    default: break;
                }
                out.message += ", expected " + std::string(to_string(a.op)) + " " + clip(a.expected.dump());
                break;
            }
        }
    } catch (const py::error_already_set& e) {
        out.passed = false;
        out.message = std::string("comparison failed: ") + e.what();
    } catch (const Error& e) {
        out.passed = false;
        out.message = e.what();
    }
    return out;
}

ValidatorResult run_validator_source(Runtime& runtime, const Validator& validator) {
    ValidatorResult r;
    auto clone = Runtime::create();
    {
        python::Gil gil;
        auto copy = py::module_::import("copy");
        auto module_type = py::module_::import("types").attr("ModuleType");
        py::dict ns = clone->globals();
        for (const auto& entry : runtime.list_entries()) {
            py::object v = runtime.get_variable(entry.name);
            try {
                ns[entry.name.c_str()] = py::isinstance(v, module_type) ? v : copy.attr("deepcopy")(v);
            } catch (const py::error_already_set&) {
                // not copyable: the validator cannot see it
            }
        }
    }
    const auto outcome = clone->execute_cell(validator.source);
    if (outcome.error) {
        r.passed = false;
        r.message = "validator script failed: " + outcome.error->type_name + ": " + outcome.error->message;
    } else {
        python::Gil gil;
        py::dict ns = clone->globals();
        if (!ns.contains("passed")) {
            r.passed = false;
            r.message = "validator script did not bind 'passed'";
        } else {
            r.passed = py::bool_(ns["passed"]).cast<bool>();
            if (ns.contains("message")) {
                r.message = py::str(ns["message"]).cast<std::string>();
            }
        }
    }
    r.details.push_back({"<validator_source>", "script", r.passed, r.message});
    clone->shutdown();
    return r;
}

// ----- schema ---------------------------------------------------------------

[[noreturn]] void schema_error(const std::string& where, const std::string& what) {
    throw Error(ErrorCode::schema, where + ": " + what);
}

std::string req_string(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) {
        schema_error(where, std::string("missing field '") + key + "'");
    }
    if (!j[key].is_string()) {
        schema_error(where, std::string("field '") + key + "' must be a string");
    }
    return j[key].get<std::string>();
}

Validator validator_from(const json& j, const std::string& where) {
    if (!j.is_object()) {
        schema_error(where, "validator must be an object");
    }
    Validator v;
    if (j.contains("source")) {
        if (!j["source"].is_string() || j["source"].get<std::string>().empty()) {
            schema_error(where, "validator source must be a non-empty string");
        }
        v.source = j["source"].get<std::string>();
    }
    if (j.contains("assertions")) {
        if (!j["assertions"].is_array()) {
            schema_error(where, "'assertions' must be an array");
        }
        int k = 0;
        for (const auto& aj : j["assertions"]) {
            const std::string w = where + " assertion " + std::to_string(++k);
            if (!aj.is_object()) {
                schema_error(w, "must be an object");
            }
            Assertion a;
            a.path = req_string(aj, "path", w);
            try {
                parse_path(a.path);
            } catch (const Error& e) {
                schema_error(w, e.what());
            }
            a.op = aj.contains("op") ? comparator_from_string(req_string(aj, "op", w)) : Comparator::eq;
            if (aj.contains("expected")) {
                a.expected = aj["expected"];
            } else if (a.op != Comparator::exists) {
                schema_error(w, "missing field 'expected'");
            }
            if (aj.contains("tolerance")) {
                if (!aj["tolerance"].is_number() || aj["tolerance"].get<double>() < 0) {
                    schema_error(w, "tolerance must be a non-negative number");
                }
                a.tolerance = aj["tolerance"].get<double>();
            }
            v.assertions.push_back(std::move(a));
        }
    }
    if (v.assertions.empty() && v.source.empty()) {
        schema_error(where, "validator needs 'assertions' or 'source'");
    }
    if (!v.assertions.empty() && !v.source.empty()) {
        schema_error(where, "validator has both 'assertions' and 'source'");
    }
    return v;
}

json validator_to(const Validator& v) {
    if (!v.source.empty()) {
        return {{"source", v.source}};
    }
    json arr = json::array();
    for (const auto& a : v.assertions) {
        json aj = {{"path", a.path}, {"op", std::string(to_string(a.op))}};
        if (!a.expected.is_null() || a.op != Comparator::exists) {
            aj["expected"] = a.expected;
        }
        if (a.tolerance) {
            aj["tolerance"] = *a.tolerance;
        }
        arr.push_back(std::move(aj));
    }
    return {{"assertions", std::move(arr)}};
}

json usage_row(const UsageCounter& u, double rate) {
    return {{"Total Steps", u.steps},
            {"Prompt Tokens", u.prompt_tokens},
            {"Completion Tokens", u.completion_tokens},
            {"Total Tokens", u.total()},
            {"Success Rate", rate}};
}

UsageCounter add(UsageCounter a, const UsageCounter& b) {
    a.prompt_tokens += b.prompt_tokens;
    a.completion_tokens += b.completion_tokens;
    a.steps += b.steps;
    a.estimated = a.estimated || b.estimated;
    return a;
}

std::string percent(double rate) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << rate * 100.0 << "%";
    return os.str();
}

}  // namespace

std::string_view to_string(Category c) noexcept {
    switch (c) {
        case Category::simple: return "simple";
        case Category::object: return "object";
        case Category::scientific: return "scientific";
        case Category::multi_variable: return "multi_variable";
        case Category::multi_turn: return "multi_turn";
    }
    return "simple";
}

const std::vector<Category>& all_categories() {
    static const std::vector<Category> all = {Category::simple, Category::object, Category::scientific,
                                              Category::multi_variable, Category::multi_turn};
    return all;
}

Category category_from_string(std::string_view text) {
    for (auto c : all_categories()) {
        if (to_string(c) == text) {
            return c;
        }
    }
    throw Error(ErrorCode::schema, "unknown category '" + std::string(text) + "'");
}

std::string_view to_string(Comparator c) noexcept {
    switch (c) {
        case Comparator::eq: return "eq";
        case Comparator::ne: return "ne";
        case Comparator::lt: return "lt";
        case Comparator::le: return "le";
        case Comparator::gt: return "gt";
        case Comparator::ge: return "ge";
        case Comparator::approx: return "approx";
        case Comparator::len_eq: return "len_eq";
        case Comparator::contains: return "contains";
        case Comparator::not_contains: return "not_contains";
        case Comparator::exists: return "exists";
        case Comparator::type_is: return "type_is";
    }
    return "eq";
}

Comparator comparator_from_string(std::string_view text) {
    for (auto c : {Comparator::eq, Comparator::ne, Comparator::lt, Comparator::le, Comparator::gt, Comparator::ge,
                   Comparator::approx, Comparator::len_eq, Comparator::contains, Comparator::not_contains,
                   Comparator::exists, Comparator::type_is}) {
        if (to_string(c) == text) {
            return c;
        }
    }
    throw Error(ErrorCode::schema, "unknown comparator '" + std::string(text) + "'");
}

const std::vector<std::string>& usage_columns() {
    static const std::vector<std::string> cols = {"Total Steps", "Prompt Tokens", "Completion Tokens", "Total Tokens",
                                                  "Success Rate"};
    return cols;
}

int CaseResult::passed_turns() const {
    return static_cast<int>(
        std::count_if(turns.begin(), turns.end(), [](const TurnResult& t) { return t.validation.passed; }));
}

BenchCase case_from_json(const json& j) {
    if (!j.is_object()) {
        throw Error(ErrorCode::schema, "case must be an object");
    }
    BenchCase c;
    c.id = req_string(j, "id", "case");
    const std::string where = "case '" + c.id + "'";
    try {
        c.category = category_from_string(req_string(j, "category", where));
    } catch (const Error& e) {
        schema_error(where, e.what());
    }
    if (j.contains("source")) {
        c.origin = req_string(j, "source", where);
        if (c.origin != "reference" && c.origin != "extension") {
            schema_error(where, "'source' must be \"reference\" or \"extension\"");
        }
    }
    if (j.contains("optional")) {
        if (!j["optional"].is_boolean()) {
            schema_error(where, "'optional' must be a boolean");
        }
        c.optional = j["optional"].get<bool>();
    }
    if (j.contains("requires")) {
        if (!j["requires"].is_array()) {
            schema_error(where, "'requires' must be an array of module names");
        }
        for (const auto& m : j["requires"]) {
            if (!m.is_string()) {
                schema_error(where, "'requires' must be an array of module names");
            }
            c.requires_modules.push_back(m.get<std::string>());
        }
    }
    if (j.contains("setup_source")) {
        c.setup_source = req_string(j, "setup_source", where);
    }
    if (j.contains("metadata")) {
        c.metadata = j["metadata"];
    }
    if (!j.contains("turns") || !j["turns"].is_array() || j["turns"].empty()) {
        schema_error(where, "'turns' must be a non-empty array");
    }
    int k = 0;
    for (const auto& tj : j["turns"]) {
        const std::string tw = where + " turn " + std::to_string(++k);
        if (!tj.is_object()) {
            schema_error(tw, "must be an object");
        }
        BenchTurn t;
        t.query = req_string(tj, "query", tw);
        if (t.query.empty()) {
            schema_error(tw, "query is empty");
        }
        if (tj.contains("oracle")) {
            t.oracle = req_string(tj, "oracle", tw);
        }
        if (!tj.contains("validator")) {
            schema_error(tw, "missing field 'validator'");
        }
        t.validator = validator_from(tj["validator"], tw);
        t.extension = tj.value("extension", false);
        c.turns.push_back(std::move(t));
    }
    return c;
}

json case_to_json(const BenchCase& c) {
    json turns = json::array();
    for (const auto& t : c.turns) {
        json tj = {{"query", t.query}, {"oracle", t.oracle}, {"validator", validator_to(t.validator)}};
        if (t.extension) {
            tj["extension"] = true;
        }
        turns.push_back(std::move(tj));
    }
    json j = {{"id", c.id},
              {"category", std::string(to_string(c.category))},
              {"source", c.origin},
              {"setup_source", c.setup_source},
              {"turns", std::move(turns)},
              {"metadata", c.metadata}};
    if (c.optional) {
        j["optional"] = true;
    }
    if (!c.requires_modules.empty()) {
        j["requires"] = c.requires_modules;
    }
    return j;
}

std::filesystem::path resolve_suite(std::string_view name_or_path) {
    if (name_or_path == "appendixE" || name_or_path == "appendix_e") {
        return std::filesystem::path(DUALSTREAM_SUITE_DIR) / "appendix_e";
    }
    return std::filesystem::path(name_or_path);
}

std::vector<BenchCase> load_suite(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    std::error_code ec;
    if (fs::is_directory(path, ec)) {
        for (const auto& entry : fs::directory_iterator(path)) {
            if (entry.is_regular_file() && entry.path().extension() == ".json") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) {
            throw Error(ErrorCode::schema, "suite directory " + path.string() + " has no case files");
        }
    } else if (fs::is_regular_file(path, ec)) {
        files.push_back(path);
    } else {
        throw Error(ErrorCode::io, "suite not found: " + path.string());
    }

    std::vector<BenchCase> cases;
    for (const auto& file : files) {
        std::ifstream in(file);
        if (!in) {
            throw Error(ErrorCode::io, "cannot open " + file.string());
        }
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw Error(ErrorCode::schema, file.string() + ": " + e.what());
        }
        try {
            if (j.is_object() && j.contains("cases")) {
                if (!j["cases"].is_array() || j["cases"].empty()) {
                    throw Error(ErrorCode::schema, "'cases' must be a non-empty array");
                }
                for (const auto& cj : j["cases"]) {
                    cases.push_back(case_from_json(cj));
                }
            } else {
                cases.push_back(case_from_json(j));
            }
        } catch (const Error& e) {
            throw Error(ErrorCode::schema, file.string() + ": " + e.what());
        }
    }
    for (std::size_t i = 0; i < cases.size(); ++i) {
        for (std::size_t k = 0; k < i; ++k) {
            if (cases[i].id == cases[k].id) {
                throw Error(ErrorCode::schema, "duplicate case id '" + cases[i].id + "'");
            }
        }
    }
    return cases;
}

ValidatorResult validate(Runtime& runtime, const Validator& validator, int turn_index) {
    ValidatorResult r;
    if (!validator.source.empty()) {
        r = run_validator_source(runtime, validator);
        r.turn_index = turn_index;
        return r;
    }
    python::Gil gil;
    r.passed = true;
    for (const auto& a : validator.assertions) {
        auto outcome = evaluate(runtime, a);
        if (!outcome.passed) {
            r.passed = false;
            if (r.message.empty()) {
                r.message = a.path + " " + outcome.op + ": " + outcome.message;
            }
        }
        r.details.push_back(std::move(outcome));
    }
    r.turn_index = turn_index;
    return r;
}

BackendPtr oracle_backend(const BenchCase& bench_case) {
    std::vector<std::string> script;
    for (const auto& t : bench_case.turns) {
        if (!t.oracle.empty()) {
            script.push_back("```python\n" + t.oracle + "\n```");
        }
        script.push_back("Done.");
    }
    return std::make_shared<ScriptedBackend>(std::move(script));
}

AgentFactory oracle_factory(AgentConfig config) {
    return [config](const BenchCase& c, RuntimeHandle rt) {
        return Agent::create(config, std::move(rt), oracle_backend(c));
    };
}

AgentFactory backend_factory(AgentConfig config, BackendPtr backend) {
    return [config, backend](const BenchCase&, RuntimeHandle rt) { return Agent::create(config, std::move(rt), backend); };
}

bool case_available(const BenchCase& bench_case, std::string* reason) {
    if (bench_case.requires_modules.empty()) {
        return true;
    }
    python::ensure_started();
    python::Gil gil;
    auto util = py::module_::import("importlib.util");
    for (const auto& m : bench_case.requires_modules) {
        if (util.attr("find_spec")(m).is_none()) {
            if (reason != nullptr) {
                *reason = "module '" + m + "' is not installed";
            }
            return false;
        }
    }
    return true;
}

CaseResult run_case(const BenchCase& bench_case, const AgentFactory& factory, RuntimeConfig runtime_config) {
    CaseResult r;
    r.id = bench_case.id;
    r.category = bench_case.category;
    if (!case_available(bench_case, &r.skip_reason)) {
        r.skipped = true;
        return r;
    }

    auto fail_rest = [&](std::size_t from, const std::string& reason) {
        for (std::size_t i = from; i < bench_case.turns.size(); ++i) {
            TurnResult t;
            t.index = static_cast<int>(i) + 1;
            t.final = FinalKind::aborted;
            t.failure_reason = reason;
            t.validation.turn_index = t.index;
            t.validation.message = reason;
            r.turns.push_back(std::move(t));
        }
    };

    auto runtime = Runtime::create(std::move(runtime_config));
    if (!bench_case.setup_source.empty()) {
        const auto violations = check(bench_case.setup_source, default_policy());
        if (!violations.empty()) {
            r.error = "setup rejected: " + violations.front().message;
            fail_rest(0, r.error);
            return r;
        }
        const auto outcome = runtime->execute_cell(bench_case.setup_source);
        if (outcome.error) {
            r.error = "setup failed: " + outcome.error->type_name + ": " + outcome.error->message;
            fail_rest(0, r.error);
            return r;
        }
    }

    AgentPtr agent;
    try {
        agent = factory(bench_case, runtime);
    } catch (const Error& e) {
        r.error = std::string("agent construction failed: ") + e.what();
        fail_rest(0, r.error);
        return r;
    }

    for (std::size_t i = 0; i < bench_case.turns.size(); ++i) {
        const auto& turn = bench_case.turns[i];
        TurnResult t;
        t.index = static_cast<int>(i) + 1;
        SessionResult session;
        try {
            session = agent->step(turn.query);
        } catch (const SessionError& e) {
            session = e.partial();
        }
        t.final = session.final;
        t.usage = session.usage;
        r.usage = add(r.usage, session.usage);
        if (session.final == FinalKind::aborted) {
            r.error = "agent aborted at turn " + std::to_string(t.index) + ": " + session.abort_reason;
            t.failure_reason = r.error;
            t.validation.turn_index = t.index;
            t.validation.message = r.error;
            r.turns.push_back(std::move(t));
            fail_rest(i + 1, r.error);
            break;
        }
        t.validation = validate(*runtime, turn.validator, t.index);
        if (!t.validation.passed) {
            t.failure_reason = t.validation.message;
        }
        r.turns.push_back(std::move(t));
    }
    runtime->shutdown();
    return r;
}

std::vector<CaseResult> run_suite(const std::vector<BenchCase>& cases, const AgentFactory& factory, int jobs,
                                  RuntimeConfig runtime_config) {
    std::vector<CaseResult> results(cases.size());
    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(cases.size())));
    if (workers == 1) {
        for (std::size_t i = 0; i < cases.size(); ++i) {
            results[i] = run_case(cases[i], factory, runtime_config);
        }
        return results;
    }
    python::ensure_started();
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < cases.size(); i = next++) {
                    results[i] = run_case(cases[i], factory, runtime_config);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return results;
}

BenchReport report(const std::vector<CaseResult>& results) {
    if (results.empty()) {
        throw Error(ErrorCode::contract, "report needs at least one case result");
    }
    BenchReport rep;
    rep.cases = results;
    for (const auto& c : results) {
        if (c.skipped) {
            continue;
        }
        auto& stats = rep.categories[c.category];
        const int queries = static_cast<int>(c.turns.size());
        const int passed = c.passed_turns();
        stats.queries += queries;
        stats.successes += passed;
        rep.queries += queries;
        rep.successes += passed;
        rep.totals = add(rep.totals, c.usage);
    }
    return rep;
}

nlohmann::json BenchReport::to_json() const {
    json cats = json::object();
    for (const auto& [cat, stats] : categories) {
        cats[std::string(to_string(cat))] = {
            {"queries", stats.queries}, {"successes", stats.successes}, {"success_rate", stats.rate()}};
    }
    json case_list = json::array();
    for (const auto& c : cases) {
        json cj = {{"id", c.id}, {"category", std::string(to_string(c.category))}};
        if (c.skipped) {
            cj["skipped"] = true;
            cj["skip_reason"] = c.skip_reason;
            case_list.push_back(std::move(cj));
            continue;
        }
        cj["queries"] = c.turns.size();
        cj["successes"] = c.passed_turns();
        if (!c.error.empty()) {
            cj["error"] = c.error;
        }
        json turns = json::array();
        for (const auto& t : c.turns) {
            json tj = {{"turn", t.index},
                       {"passed", t.validation.passed},
                       {"final", std::string(to_string(t.final))},
                       {"steps", t.usage.steps},
                       {"prompt_tokens", t.usage.prompt_tokens},
                       {"completion_tokens", t.usage.completion_tokens}};
            if (!t.failure_reason.empty()) {
                tj["reason"] = t.failure_reason;
            }
            json details = json::array();
            for (const auto& d : t.validation.details) {
                details.push_back({{"path", d.path}, {"op", d.op}, {"passed", d.passed}, {"message", d.message}});
            }
            tj["assertions"] = std::move(details);
            turns.push_back(std::move(tj));
        }
        cj["turns"] = std::move(turns);
        cj["usage"] = usage_row(c.usage, c.turns.empty() ? 0.0 : static_cast<double>(c.passed_turns()) / c.turns.size());
        case_list.push_back(std::move(cj));
    }
    return {{"categories", std::move(cats)},
            {"queries", queries},
            {"successes", successes},
            {"usage", usage_row(totals, success_rate())},
            {"usage_estimated", totals.estimated},
            {"cases", std::move(case_list)}};
}

std::string BenchReport::table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "Category" << std::right << std::setw(9) << "Queries" << std::setw(9)
       << "Passed" << std::setw(14) << "Success Rate" << '\n';
    for (const auto& [cat, stats] : categories) {
        os << std::left << std::setw(16) << to_string(cat) << std::right << std::setw(9) << stats.queries
           << std::setw(9) << stats.successes << std::setw(14) << percent(stats.rate()) << '\n';
    }
    os << std::left << std::setw(16) << "all" << std::right << std::setw(9) << queries << std::setw(9) << successes
       << std::setw(14) << percent(success_rate()) << "\n\n";

    const auto& cols = usage_columns();
    for (const auto& c : cols) {
        os << std::setw(static_cast<int>(c.size()) + 2) << c;
    }
    os << '\n';
    const std::vector<std::string> values = {std::to_string(totals.steps), std::to_string(totals.prompt_tokens),
                                             std::to_string(totals.completion_tokens), std::to_string(totals.total()),
                                             percent(success_rate())};
    for (std::size_t i = 0; i < cols.size(); ++i) {
        os << std::setw(static_cast<int>(cols[i].size()) + 2) << values[i];
    }
    os << '\n';
    if (totals.estimated) {
        os << "(token counts are local estimates: ceil(characters / 4))\n";
    }
    for (const auto& c : cases) {
        if (c.skipped) {
            os << "skipped " << c.id << ": " << c.skip_reason << '\n';
        }
    }
    return os.str();
}

}  // namespace dualstream
