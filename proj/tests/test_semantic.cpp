#include "support.hpp"

#include "dualstream/semantic.hpp"

#include <fstream>

using namespace dualstream;

namespace {

ExecutionOutcome with_stdout(std::string text) {
    ExecutionOutcome o;
    o.stdout_text = std::move(text);
    return o;
}

}  // namespace

TEST_CASE("token estimate is ceil(code points / 4)") {
    CHECK(estimate_tokens("") == 0);
    CHECK(estimate_tokens("abcd") == 1);
    CHECK(estimate_tokens("abcde") == 2);
    CHECK(estimate_tokens("\xC3\xA9\xC3\xA9\xC3\xA9") == 1);
}

TEST_CASE("system prompt with defaults and an empty bundle") {
    auto templates = PromptTemplateSet::defaults();
    templates.validate();
    auto msg = build_system_prompt(templates, render_context({}, {}, {}), "2026-01-01 00:00:00", "");
    CHECK(msg.role == Role::system);
    CHECK(msg.content.rfind("You are a tool-augmented agent", 0) == 0);
    CHECK(msg.content.find("Current time: 2026-01-01 00:00:00\n") != std::string::npos);
    CHECK(msg.content.find("<functions>\n</functions>") != std::string::npos);
    CHECK(msg.content.find("<variables>\n</variables>") != std::string::npos);
    CHECK(msg.content.find("<types>\n</types>") != std::string::npos);
    CHECK(msg.content.find("write all your code in only one block") != std::string::npos);
    CHECK(msg.content.find("Write your code in a python code block.") != std::string::npos);
    CHECK(msg.content.find("{python_block_identifier}") == std::string::npos);
    auto ctx = build_system_prompt(templates, render_context({}, {}, {}), "2026-01-01 00:00:00", "Project notes.");
    CHECK(ctx.content.size() > msg.content.size());
    CHECK(ctx.content.substr(ctx.content.size() - 16) == "\n\nProject notes.");
}

TEST_CASE("system prompt lists injected functions") {
    FunctionDescriptor buy{"buy_stock", {{{"symbol", "str"}, {"quantity", "int"}}, "Transaction"}, "Buy shares.", ""};
    auto msg = build_system_prompt(PromptTemplateSet::defaults(), render_context({buy}, {}, {}), "t", "");
    auto start = msg.content.find("<functions>");
    auto end = msg.content.find("</functions>");
    auto sig = msg.content.find("buy_stock(symbol: str, quantity: int) -> Transaction");
    CHECK(sig > start);
    CHECK(sig < end);
}

TEST_CASE("template validation and overrides") {
    auto t = PromptTemplateSet::defaults();
    t.execution_feedback = "no placeholder";
    CHECK_THROWS_AS(t.validate(), Error);
    t = PromptTemplateSet::defaults();
    t.block_identifier = "two words";
    CHECK_THROWS_AS(t.validate(), Error);

    auto path = test::temp_path("templates.json");
    std::ofstream(path) << R"({"block_identifier": "py", "agent_identity": "You are a tester."})";
    auto loaded = PromptTemplateSet::from_json_file(path);
    CHECK(loaded.block_identifier == "py");
    CHECK(loaded.agent_identity == "You are a tester.");
    CHECK(loaded.instructions == PromptTemplateSet::defaults().instructions);

    auto bad = test::temp_path("templates-bad.json");
    std::ofstream(bad) << R"({"colour": "blue"})";
    CHECK_THROWS_AS(PromptTemplateSet::from_json_file(bad), Error);
}

TEST_CASE("substitute is a single pass") {
    CHECK(substitute("{a} and {b}", {{"a", "{b}"}, {"b", "B"}}) == "{b} and B");
    CHECK(substitute("{unknown}", {{"a", "x"}}) == "{unknown}");
}

TEST_CASE("extract_action") {
    SUBCASE("one tagged block") {
        auto a = extract_action("Let me do it.\n```python\nx=1\n```", "python");
        CHECK(a.kind == ActionKind::code);
        CHECK(a.code == "x=1");
        CHECK_FALSE(a.multi_block);
    }
    SUBCASE("untagged and inline blocks") {
        CHECK(extract_action("```\nx=1\n```", "python").code == "x=1");
        CHECK(extract_action("```x=5\nprint(x)```", "python").code == "x=5\nprint(x)");
        CHECK(extract_action("```import os```", "python").code == "import os");
    }
    SUBCASE("plain text is a final answer") {
        auto a = extract_action("The total is 40.0", "python");
        CHECK(a.kind == ActionKind::final_answer);
        CHECK(a.answer == "The total is 40.0");
    }
    SUBCASE("two blocks run the first and flag the rest") {
        auto a = extract_action("```python\na = 1\n```\nthen\n```python\nb = 2\n```", "python");
        CHECK(a.kind == ActionKind::code);
        CHECK(a.code == "a = 1");
        CHECK(a.multi_block);
        CHECK(a.block_count == 2);
    }
    SUBCASE("other-language blocks are not code") {
        auto a = extract_action("Output:\n```text\nhello\n```", "python");
        CHECK(a.kind == ActionKind::final_answer);
    }
}

TEST_CASE("shape_observation case split") {
    auto t = PromptTemplateSet::defaults();
    auto small = shape_observation(with_stdout("5"), 4000, t);
    CHECK(small.kind == ObservationKind::output);
    CHECK(small.text == "5");
    CHECK(small.raw_length == 1);

    auto big = shape_observation(with_stdout(std::string(12000, 'x')), 4000, t);
    CHECK(big.kind == ObservationKind::size_error);
    CHECK(big.raw_length == 12000);
    CHECK(big.text.find("12000") != std::string::npos);
    CHECK(big.text.find("exceeds the maximum limit of 4000") != std::string::npos);

    auto exact = shape_observation(with_stdout(std::string(4000, 'y')), 4000, t);
    CHECK(exact.kind == ObservationKind::output);

    auto empty = shape_observation(with_stdout(""), 4000, t);
    CHECK(empty.kind == ObservationKind::output);
    CHECK(empty.text.empty());
    CHECK(make_feedback(empty, t).content.find("IMPORTANT CONTEXT REMINDER") != std::string::npos);

    CHECK_THROWS_AS(shape_observation(with_stdout("a"), 0, t), Error);
}

TEST_CASE("observable text joins streams and errors") {
    ExecutionOutcome o;
    o.stdout_text = "partial";
    o.error = CellError{CellErrorKind::runtime, "ValueError", "bad", "Traceback:\nValueError: bad\n"};
    auto text = observable_text(o);
    CHECK(text.rfind("partial\n", 0) == 0);
    CHECK(text.find("ValueError: bad") != std::string::npos);
}

TEST_CASE("feedback messages") {
    auto t = PromptTemplateSet::defaults();
    auto out = make_feedback(shape_observation(with_stdout("5"), 4000, t), t);
    CHECK(out.role == Role::user);
    CHECK(out.content.find("<execution_output>\n5\n</execution_output>") != std::string::npos);
    CHECK(out.content.find("You are in the SAME Jupyter-like session") != std::string::npos);

    auto size = make_feedback(shape_observation(with_stdout(std::string(50, 'z')), 10, t), t);
    CHECK(size.content.find("Use summary statistics instead of full data") != std::string::npos);

    auto sec = make_feedback(security_observation(check("import os", default_policy()), t), t);
    const std::string tail = "avoid this violation.";
    CHECK(sec.content.substr(sec.content.size() - tail.size()) == tail);
}

TEST_CASE("conversation history ordering") {
    ConversationHistory h({Role::system, "sys"});
    h.append({Role::user, "q"});
    CHECK_THROWS_AS(h.append({Role::user, "again"}), Error);
    const auto before = h.size();
    h.append({Role::assistant, "```x=1```"});
    h.append({Role::user, "feedback"});
    CHECK(h.size() == before + 2);
    CHECK_THROWS_AS(h.append({Role::system, "late"}), Error);
    CHECK_THROWS_AS(h.append({Role::assistant, ""}), Error);
    CHECK(h.token_estimate() == estimate_tokens("sys") + estimate_tokens("q") + estimate_tokens("```x=1```") +
                                     estimate_tokens("feedback"));
    CHECK_THROWS_AS(ConversationHistory({Role::user, "no system"}), Error);
}

TEST_CASE("timestamp format") {
    auto text = format_timestamp(std::chrono::system_clock::now());
    CHECK(text.size() == 19);
    CHECK(text[4] == '-');
    CHECK(text[13] == ':');
}
