#include "support.hpp"

#include <json.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>

namespace {

struct Run {
    int code = -1;
    std::string out;
};

// Runs the CLI through the shell with `input` on stdin; stderr is discarded.
Run cli(const std::string& args, const std::string& input = "") {
    auto in_path = test::temp_path("cli-stdin.txt");
    std::ofstream(in_path) << input;
    const std::string cmd =
        std::string("'") + DUALSTREAM_CLI + "' " + args + " < '" + in_path.string() + "' 2>/dev/null";
    Run r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) {
        r.out.append(buf.data(), n);
    }
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string write_file(const std::string& name, const std::string& text) {
    auto p = test::temp_path(name);
    std::ofstream(p) << text;
    return p.string();
}

}  // namespace

TEST_CASE("check exit codes") {
    auto bad = write_file("has_os.py", "x = 1\nimport os\n");
    auto r = cli("check '" + bad + "'");
    CHECK(r.code == 1);
    CHECK(r.out.find("has_os.py:2:1: ImportRule") != std::string::npos);

    auto clean = write_file("clean.py", "x = 1\n");
    CHECK(cli("check '" + clean + "'").code == 0);

    auto policy = write_file("broken-policy.json", "{not json");
    CHECK(cli("check '" + clean + "' --policy '" + policy + "'").code == 2);
    CHECK(cli("check /definitely/not/here.py").code == 2);
    CHECK(cli("check").code == 2);
}

TEST_CASE("bench with the oracle backend") {
    auto report = test::temp_path("report.json");
    auto r = cli("bench --suite appendixE --backend oracle --jobs 2 --report '" + report.string() + "'");
    CHECK(r.code == 0);
    CHECK(r.out.find("100.0%") != std::string::npos);
    std::ifstream in(report);
    auto j = nlohmann::json::parse(in);
    for (const auto& [name, cat] : j["categories"].items()) {
        INFO(name);
        CHECK(cat["success_rate"] == 1.0);
    }
    CHECK(j["usage"].contains("Total Steps"));
}

TEST_CASE("bench category filter and usage errors") {
    auto report = test::temp_path("report-mt.json");
    auto r = cli("bench --backend oracle --category multi_turn --report '" + report.string() + "'");
    CHECK(r.code == 0);
    std::ifstream in(report);
    auto j = nlohmann::json::parse(in);
    CHECK(j["categories"].size() == 1);
    CHECK(j["categories"].contains("multi_turn"));
    for (const auto& c : j["cases"]) {
        CHECK(c["category"] == "multi_turn");
    }

    CHECK(cli("bench --suite /no/such/suite --backend oracle").code == 2);
    auto broken = write_file("broken-case.json", R"({"id": "b", "category": "simple", "turns": [{"query": "q"}]})");
    CHECK(cli("bench --suite '" + broken + "' --backend oracle").code == 2);
}

TEST_CASE("repl with a scripted backend") {
    auto script = write_file("repl-script.json",
                             R"(["```python\nx = 5\nprint(x)\n```", "x is 5.", "```python\nprint(x + 1)\n```", "6"])");
    auto snap = test::temp_path("repl.snap");
    std::filesystem::remove(snap);
    const std::string input = "set x to 5\n/vars\n/save " + snap.string() + "\nadd one\n/quit\n";
    auto first = cli("repl --backend scripted:'" + script + "'", input);
    CHECK(first.code == 0);
    CHECK(first.out.find("[1] code:\nx = 5\nprint(x)\n[1] observation:\n5\nanswer: x is 5.") != std::string::npos);
    CHECK(first.out.find("x : int (cell-created) = 5") != std::string::npos);
    CHECK(first.out.find("answer: 6") != std::string::npos);
    CHECK(std::filesystem::exists(snap));

    auto again = cli("repl --backend scripted:'" + script + "'", input);
    CHECK(again.out == first.out);

    auto other = write_file("repl-script2.json", R"(["```python\nprint(x * 10)\n```", "50"])");
    auto loaded = cli("repl --backend scripted:'" + other + "'", "/load " + snap.string() + "\nscale x\n");
    CHECK(loaded.code == 0);
    CHECK(loaded.out.find("50\n") != std::string::npos);
}

TEST_CASE("repl backend failure saves a partial transcript") {
    auto script = write_file("repl-short.json", R"(["```python\ny = 1\n```"])");
    auto transcript = test::temp_path("partial.json");
    std::filesystem::remove(transcript);
    auto r = cli("repl --backend scripted:'" + script + "' --transcript '" + transcript.string() + "'", "go\n");
    CHECK(r.code == 3);
    REQUIRE(std::filesystem::exists(transcript));
    std::ifstream in(transcript);
    auto j = nlohmann::json::parse(in);
    CHECK(j["final"] == "aborted");
    CHECK(j["turns"].size() == 1);
}
