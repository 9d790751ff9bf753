#pragma once

// Stateful-management benchmark harness. A case seeds a runtime, drives an
// agent through a sequence of queries and, after each one, checks the runtime
// state directly (declarative assertions or a validator script).

#include "dualstream/orchestrator.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dualstream {

enum class Category { simple, object, scientific, multi_variable, multi_turn };

std::string_view to_string(Category c) noexcept;
Category category_from_string(std::string_view text);
const std::vector<Category>& all_categories();

enum class Comparator { eq, ne, lt, le, gt, ge, approx, len_eq, contains, not_contains, exists, type_is };

std::string_view to_string(Comparator c) noexcept;
Comparator comparator_from_string(std::string_view text);

/// Relative tolerance for real-valued comparisons when none is given.
inline constexpr double kRealTolerance = 1e-9;

struct Assertion {
    /// name(.attr | .method() | [int] | ['key'])*
    std::string path;
    Comparator op = Comparator::eq;
    nlohmann::json expected;
    std::optional<double> tolerance;
};

struct Validator {
    std::vector<Assertion> assertions;
    /// Alternative to assertions: a script that binds `passed` (bool) and may
    /// bind `message` (str). It runs on deep copies in a separate runtime.
    std::string source;
};

struct BenchTurn {
    std::string query;
    /// Reference solution used by the oracle backend.
    std::string oracle;
    Validator validator;
    /// Turn added to complete a scenario whose reference trace skips it.
    bool extension = false;
};

struct BenchCase {
    std::string id;
    Category category = Category::simple;
    std::string origin = "reference";  // "reference" or "extension"
    bool optional = false;
    std::vector<std::string> requires_modules;
    std::string setup_source;
    std::vector<BenchTurn> turns;
    nlohmann::json metadata = nlohmann::json::object();
};

struct AssertionOutcome {
    std::string path;
    std::string op;
    bool passed = false;
    std::string message;
};

struct ValidatorResult {
    bool passed = false;
    std::vector<AssertionOutcome> details;
    int turn_index = 0;
    std::string message;
};

struct TurnResult {
    int index = 0;  // 1-based
    ValidatorResult validation;
    FinalKind final = FinalKind::answer;
    UsageCounter usage;
    std::string failure_reason;
};

struct CaseResult {
    std::string id;
    Category category = Category::simple;
    bool skipped = false;  // optional case whose requirements are missing
    std::string skip_reason;
    std::string error;     // setup failure or agent abort
    std::vector<TurnResult> turns;
    UsageCounter usage;

    [[nodiscard]] int passed_turns() const;
    [[nodiscard]] bool executed() const { return !skipped; }
};

struct CategoryStats {
    int queries = 0;
    int successes = 0;
    [[nodiscard]] double rate() const { return queries == 0 ? 0.0 : static_cast<double>(successes) / queries; }
};

struct BenchReport {
    std::map<Category, CategoryStats> categories;
    std::vector<CaseResult> cases;
    UsageCounter totals;
    int queries = 0;
    int successes = 0;

    [[nodiscard]] double success_rate() const { return queries == 0 ? 0.0 : static_cast<double>(successes) / queries; }
    [[nodiscard]] nlohmann::json to_json() const;
    /// Category table followed by the usage row
    /// (Total Steps / Prompt Tokens / Completion Tokens / Total Tokens / Success Rate).
    [[nodiscard]] std::string table() const;
};

/// Usage column headers, in order.
const std::vector<std::string>& usage_columns();

/// Parses one case document. Throws Error(schema) naming the case and field.
BenchCase case_from_json(const nlohmann::json& j);
nlohmann::json case_to_json(const BenchCase& c);

/// A directory of case files, a single case file, or a {"cases": [...]} file.
/// The name "appendixE" refers to the bundled suite. Cases keep file order.
std::vector<BenchCase> load_suite(const std::filesystem::path& path);
std::filesystem::path resolve_suite(std::string_view name_or_path);

/// Evaluates a validator against a live runtime without mutating it.
ValidatorResult validate(Runtime& runtime, const Validator& validator, int turn_index = 0);

/// Builds the agent for one case on the given runtime (setup already applied).
using AgentFactory = std::function<AgentPtr(const BenchCase&, RuntimeHandle)>;

/// Scripted backend that answers each turn with the case's oracle code and
/// then "Done.".
BackendPtr oracle_backend(const BenchCase& bench_case);

/// Factory pairing `config` with oracle_backend().
AgentFactory oracle_factory(AgentConfig config = {});

/// Factory pairing `config` with one shared backend.
AgentFactory backend_factory(AgentConfig config, BackendPtr backend);

/// False (with a reason) when a required module cannot be imported.
bool case_available(const BenchCase& bench_case, std::string* reason = nullptr);

CaseResult run_case(const BenchCase& bench_case, const AgentFactory& factory,
                    RuntimeConfig runtime_config = {});

/// Runs cases on `jobs` worker threads; results keep case order.
std::vector<CaseResult> run_suite(const std::vector<BenchCase>& cases, const AgentFactory& factory, int jobs = 1,
                                  RuntimeConfig runtime_config = {});

/// Throws Error(contract) on an empty list.
BenchReport report(const std::vector<CaseResult>& results);

}  // namespace dualstream
