// dualstream: interactive agent REPL, state-management benchmark runner and
// standalone security check.

#include "dualstream/orchestrator.hpp"
#include "dualstream/statebench.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace ds = dualstream;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFindings = 1;
constexpr int kExitUsage = 2;
constexpr int kExitBackend = 3;

struct CliConfig {
    std::string model_id;
    std::optional<double> temperature;
    std::optional<int> max_turns;
    std::optional<std::size_t> max_output;
    std::string policy_path;
    std::string config_path;
    std::string templates_path;
    std::string backend = "live";
    std::string suite = "appendixE";
    std::string report_path;
    std::vector<std::string> categories;
    int jobs = 1;
    std::string source_path;
    std::string transcript_path = "dualstream-transcript.json";
    double timeout = 30.0;
};

// Command-line values override the config file, which overrides the defaults.
ds::AgentConfig agent_config(const CliConfig& cli) {
    ds::AgentConfig config = cli.config_path.empty() ? ds::AgentConfig{}
                                                     : ds::AgentConfig::from_json_file(cli.config_path);
    if (!cli.model_id.empty()) {
        config.model.model_id = cli.model_id;
        config.model.temperature = ds::default_temperature(cli.model_id);
    }
    if (cli.temperature) {
        config.model.temperature = *cli.temperature;
    }
    if (cli.max_turns) {
        config.T_max = *cli.max_turns;
    }
    if (cli.max_output) {
        config.L_max = *cli.max_output;
    }
    if (!cli.policy_path.empty()) {
        config.policy = ds::SecurityPolicy::from_json_file(cli.policy_path);
    }
    if (!cli.templates_path.empty()) {
        config.templates = ds::PromptTemplateSet::from_json_file(cli.templates_path);
    }
    config.validate();
    return config;
}

// "live", "scripted:<path>" or, for bench only, "oracle".
ds::BackendPtr make_backend(const std::string& spec) {
    if (spec == "live") {
        return ds::HttpChatBackend::from_environment();
    }
    if (spec.rfind("scripted:", 0) == 0) {
        return ds::ScriptedBackend::from_json_file(spec.substr(9));
    }
    throw ds::Error(ds::ErrorCode::contract, "unknown backend '" + spec + "'");
}

void print_turns(const ds::SessionResult& result, std::ostream& out) {
    for (const auto& turn : result.turns) {
        if (turn.action.kind != ds::ActionKind::code) {
            continue;
        }
        out << "[" << turn.index << "] code:\n" << turn.action.code << "\n";
        if (!turn.violations.empty()) {
            out << "[" << turn.index << "] blocked:\n";
        } else {
            out << "[" << turn.index << "] observation:\n";
        }
        if (turn.observation) {
            out << turn.observation->text;
            if (!turn.observation->text.empty() && turn.observation->text.back() != '\n') {
                out << "\n";
            }
        }
    }
    out << "answer: " << result.final_text() << "\n";
}

void print_entries(const ds::Runtime& runtime, std::ostream& out) {
    for (const auto& e : runtime.list_entries()) {
        out << e.name << " : " << e.type_name << " (" << ds::to_string(e.origin) << ") = " << e.summary << "\n";
    }
}

int cmd_repl(const CliConfig& cli) {
    auto config = agent_config(cli);
    auto backend = make_backend(cli.backend);
    ds::RuntimeConfig runtime_config;
    runtime_config.timeout_seconds = cli.timeout;
    auto runtime = ds::Runtime::create(runtime_config);
    auto agent = ds::Agent::create(config, runtime, backend);

    std::string line;
    while (true) {
        std::cout << ">>> " << std::flush;
        if (!std::getline(std::cin, line)) {
            std::cout << "\n";
            return kExitOk;
        }
        if (line.empty()) {
            continue;
        }
        if (line[0] == '/') {
            std::istringstream words(line);
            std::string command;
            std::string arg;
            words >> command;
            std::getline(words >> std::ws, arg);
            try {
                if (command == "/quit" || command == "/exit") {
                    return kExitOk;
                } else if (command == "/vars") {
                    print_entries(*runtime, std::cout);
                } else if (command == "/save" && !arg.empty()) {
                    auto snap = runtime->snapshot();
                    snap.save(arg);
                    std::cout << "saved " << snap.entries.size() << " entries to " << arg << "\n";
                    for (const auto& s : snap.skipped) {
                        std::cout << "skipped " << s.name << ": " << s.reason << "\n";
                    }
                } else if (command == "/load" && !arg.empty()) {
                    auto snap = ds::Snapshot::load(arg);
                    auto skipped = runtime->load_snapshot(snap);
                    std::cout << "loaded " << snap.entries.size() - skipped.size() << " entries from " << arg
                              << "\n";
                    for (const auto& s : skipped) {
                        std::cout << "skipped " << s.name << ": " << s.reason << "\n";
                    }
                } else if (command == "/help") {
                    std::cout << "/vars  /save <path>  /load <path>  /quit\n";
                } else {
                    std::cout << "unknown command " << command << " (try /help)\n";
                }
            } catch (const ds::Error& e) {
                std::cout << "error: " << e.what() << "\n";
            }
            continue;
        }

        ds::SessionResult result;
        try {
            result = agent->step(line);
        } catch (const ds::SessionError& e) {
            ds::export_transcript(e.partial(), cli.transcript_path);
            std::cerr << "error: " << e.what() << "\npartial transcript saved to " << cli.transcript_path << "\n";
            return kExitBackend;
        }
        print_turns(result, std::cout);
        if (result.final == ds::FinalKind::aborted) {
            ds::export_transcript(result, cli.transcript_path);
            std::cerr << "backend failure: " << result.abort_reason << "\npartial transcript saved to "
                      << cli.transcript_path << "\n";
            return kExitBackend;
        }
    }
}

int cmd_bench(const CliConfig& cli) {
    auto path = ds::resolve_suite(cli.suite);
    if (!std::filesystem::exists(path)) {
        std::cerr << "error: suite not found: " << cli.suite << "\n";
        return kExitUsage;
    }
    std::vector<ds::BenchCase> cases;
    try {
        cases = ds::load_suite(path);
    } catch (const ds::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    if (!cli.categories.empty()) {
        std::vector<ds::Category> wanted;
        for (const auto& c : cli.categories) {
            wanted.push_back(ds::category_from_string(c));
        }
        std::erase_if(cases, [&](const ds::BenchCase& c) {
            return std::find(wanted.begin(), wanted.end(), c.category) == wanted.end();
        });
        if (cases.empty()) {
            std::cerr << "error: no cases in the selected categories\n";
            return kExitUsage;
        }
    }

    auto config = agent_config(cli);
    ds::AgentFactory factory;
    int jobs = std::max(1, cli.jobs);
    if (cli.backend == "oracle") {
        factory = ds::oracle_factory(config);
    } else {
        factory = ds::backend_factory(config, make_backend(cli.backend));
        if (cli.backend != "live") {
            jobs = 1;  // a shared script must be consumed in case order
        }
    }
    ds::RuntimeConfig runtime_config;
    runtime_config.timeout_seconds = cli.timeout;
    auto results = ds::run_suite(cases, factory, jobs, runtime_config);
    auto rep = ds::report(results);
    std::cout << rep.table();
    if (!cli.report_path.empty()) {
        std::ofstream out(cli.report_path);
        if (!out) {
            std::cerr << "error: cannot write " << cli.report_path << "\n";
            return kExitUsage;
        }
        out << rep.to_json().dump(2) << "\n";
    }
    bool all_executed = std::all_of(results.begin(), results.end(), [&](const ds::CaseResult& r) {
        if (!r.error.empty()) {
            return false;
        }
        if (r.skipped) {
            auto it = std::find_if(cases.begin(), cases.end(), [&](const auto& c) { return c.id == r.id; });
            return it != cases.end() && it->optional;
        }
        return true;
    });
    return all_executed ? kExitOk : kExitFindings;
}

int cmd_check(const CliConfig& cli) {
    ds::SecurityPolicy policy = ds::default_policy();
    if (!cli.policy_path.empty()) {
        try {
            policy = ds::SecurityPolicy::from_json_file(cli.policy_path);
        } catch (const ds::Error& e) {
            std::cerr << "error: " << e.what() << "\n";
            return kExitUsage;
        }
    }
    std::ifstream in(cli.source_path, std::ios::binary);
    if (!in) {
        std::cerr << "error: cannot read " << cli.source_path << "\n";
        return kExitUsage;
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    auto violations = ds::check(buffer.str(), policy);
    for (const auto& v : violations) {
        std::cout << cli.source_path << ":" << v.location.line << ":" << v.location.column << ": "
                  << v.message << "\n";
    }
    return violations.empty() ? kExitOk : kExitFindings;
}

void add_agent_options(CLI::App* cmd, CliConfig& cli) {
    cmd->add_option("--model", cli.model_id, "Model identifier sent to the backend");
    cmd->add_option("--temperature", cli.temperature, "Sampling temperature (default depends on --model)");
    cmd->add_option("--max-turns", cli.max_turns, "Turn budget per query")->check(CLI::PositiveNumber);
    cmd->add_option("--max-output", cli.max_output, "Longest observation passed back verbatim")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--policy", cli.policy_path, "Security policy JSON")->check(CLI::ExistingFile);
    cmd->add_option("--config", cli.config_path, "Agent config JSON")->check(CLI::ExistingFile);
    cmd->add_option("--templates", cli.templates_path, "Prompt template overrides JSON")->check(CLI::ExistingFile);
    cmd->add_option("--timeout", cli.timeout, "Per-cell time limit in seconds")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Code-executing agent runtime with a persistent Python namespace"};
    app.require_subcommand(1);
    CliConfig cli;

    auto* repl = app.add_subcommand("repl", "Interactive session; lines starting with / are meta-commands");
    add_agent_options(repl, cli);
    repl->add_option("--backend", cli.backend, "live or scripted:<path>");
    repl->add_option("--transcript", cli.transcript_path, "Where a partial transcript goes on backend failure");

    auto* bench = app.add_subcommand("bench", "Run a state-management suite and report success rates");
    add_agent_options(bench, cli);
    bench->add_option("--backend", cli.backend, "oracle, live or scripted:<path>")->capture_default_str();
    bench->add_option("--suite", cli.suite, "Suite directory or file, or 'appendixE'")->capture_default_str();
    bench->add_option("--report", cli.report_path, "Write the JSON report here");
    bench->add_option("--category", cli.categories, "Only these categories")
        ->check(CLI::IsMember({"simple", "object", "scientific", "multi_variable", "multi_turn"}));
    bench->add_option("--jobs", cli.jobs, "Cases run in parallel")->check(CLI::PositiveNumber);

    auto* check = app.add_subcommand("check", "Scan a source file against the security policy");
    check->add_option("source", cli.source_path, "Python source file")->required();
    check->add_option("--policy", cli.policy_path, "Security policy JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (repl->parsed()) {
            return cmd_repl(cli);
        }
        if (bench->parsed()) {
            return cmd_bench(cli);
        }
        return cmd_check(cli);
    } catch (const ds::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.code()) {
            case ds::ErrorCode::request_failed:
            case ds::ErrorCode::script_exhausted:
            case ds::ErrorCode::kernel_dead:
            case ds::ErrorCode::startup:
                return kExitBackend;
            default:
                return kExitUsage;
        }
    }
}
