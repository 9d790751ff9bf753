#include "support.hpp"

#include "dualstream/security.hpp"

#include <json.hpp>

#include <fstream>

using namespace dualstream;

TEST_CASE("parse_source") {
    auto ok = parse_source("a = 1 + 2");
    CHECK(ok.ok);
    CHECK(static_cast<bool>(ok.tree));
    auto bad = parse_source("def f(:");
    CHECK_FALSE(bad.ok);
    REQUIRE(bad.error_location);
    CHECK(bad.error_location->line == 1);
    CHECK(parse_source("loan_balance = loan_balance + int(loan_balance * interest_rate)").ok);
}

TEST_CASE("default policy contents") {
    auto p = default_policy();
    for (const char* m : {"os", "subprocess"}) {
        CHECK(std::find(p.banned_imports.begin(), p.banned_imports.end(), m) != p.banned_imports.end());
    }
    for (const char* c : {"eval", "exec"}) {
        CHECK(std::find(p.banned_calls.begin(), p.banned_calls.end(), c) != p.banned_calls.end());
    }
    auto rules = p.rule_set();
    REQUIRE(rules.size() == 3);
    CHECK(rules[0].kind == RuleKind::import_rule);
    CHECK(rules[1].kind == RuleKind::function_rule);
    CHECK(rules[2].kind == RuleKind::attribute_rule);
}

TEST_CASE("check finds each rule kind") {
    auto p = default_policy();
    auto imp = check("import os", p);
    REQUIRE(imp.size() == 1);
    CHECK(imp[0].rule_kind == RuleKind::import_rule);
    CHECK(imp[0].offending_name == "os");
    CHECK(imp[0].location == SourceLocation{1, 1});

    auto call = check("eval('1+1')", p);
    REQUIRE(call.size() == 1);
    CHECK(call[0].rule_kind == RuleKind::function_rule);
    CHECK(call[0].offending_name == "eval");

    auto attr = check("x.__builtins__", p);
    REQUIRE(attr.size() == 1);
    CHECK(attr[0].rule_kind == RuleKind::attribute_rule);

    CHECK(check("a = 1 + 2", p).empty());
}

TEST_CASE("violations are ordered by location") {
    auto v = check("x = 1\neval('2')\nimport os\n", default_policy());
    REQUIRE(v.size() == 2);
    CHECK(v[0].location.line == 2);
    CHECK(v[1].location.line == 3);
}

TEST_CASE("syntax error yields a single syntax violation") {
    auto v = check("import os\ndef f(:", default_policy());
    REQUIRE(v.size() == 1);
    CHECK(v[0].rule_kind == RuleKind::syntax);
    CHECK(v[0].location.line == 2);
}

TEST_CASE("empty policy never fires on parseable code") {
    SecurityPolicy empty;
    CHECK(empty.rule_set().empty());
    CHECK(check("import os\neval('1')\nx.__builtins__", empty).empty());
}

TEST_CASE("security corpus matches expectations") {
    std::ifstream in(std::string(DUALSTREAM_TEST_DATA) + "/security_corpus.json");
    REQUIRE(in);
    auto corpus = nlohmann::json::parse(in);
    auto policy = default_policy();
    for (const auto& item : corpus) {
        const auto source = item["source"].get<std::string>();
        auto v = check(source, policy);
        INFO(source);
        if (item["kind"].is_null()) {
            CHECK(v.empty());
        } else {
            REQUIRE_FALSE(v.empty());
            CHECK(to_string(v[0].rule_kind) == item["kind"].get<std::string>());
            CHECK(v[0].offending_name == item["name"].get<std::string>());
        }
    }
}

TEST_CASE("format_security_feedback") {
    auto one = format_security_feedback(check("import os", default_policy()));
    CHECK(one.find("<security_error>") != std::string::npos);
    CHECK(one.find("Code blocked for security reasons. Please modify your code to avoid this violation.") !=
          std::string::npos);
    auto three = check("import os\neval('1')\nexec('2')", default_policy());
    REQUIRE(three.size() == 3);
    auto text = format_security_feedback(three);
    auto open = text.find("<security_error>");
    auto close = text.find("</security_error>");
    for (const auto& v : three) {
        auto at = text.find(v.message);
        CHECK(at > open);
        CHECK(at < close);
    }
    CHECK_THROWS_AS(format_security_feedback({}), Error);
}

TEST_CASE("policy file loading") {
    auto good = test::temp_path("policy.json");
    std::ofstream(good) << R"({"banned_imports": ["socket", "socket"], "banned_calls": ["open"]})";
    auto p = SecurityPolicy::from_json_file(good);
    CHECK(p.banned_imports == std::vector<std::string>{"socket"});
    CHECK(p.banned_attributes.empty());
    CHECK(check("import socket\nopen('f')", p).size() == 2);

    auto bad = test::temp_path("policy-bad.json");
    std::ofstream(bad) << R"({"banned_imports": "os"})";
    try {
        SecurityPolicy::from_json_file(bad);
        FAIL("expected schema error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::schema);
    }
    try {
        SecurityPolicy::from_json_file(test::temp_path("absent.json"));
        FAIL("expected io error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::io);
    }
}
