#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "wellbench/errors.hpp"
#include "wellbench/llm.hpp"

using namespace wellbench;

namespace {

const std::string kFixtures = WELLBENCH_FIXTURE_DIR;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// The committed template transcription; editors may add a final newline.
std::string committed_template() {
    std::string text = slurp(kFixtures + "/zero_shot_template.txt");
    if (!text.empty() && text.back() == '\n') text.pop_back();
    return text;
}

std::string replace_once(std::string text, const std::string& what,
                         const std::string& with) {
    const std::size_t at = text.find(what);
    REQUIRE(at != std::string::npos);
    return text.replace(at, what.size(), with);
}

ProviderConfig fixture_provider() {
    ProviderConfig cfg;
    cfg.provider_id = "replay-fixture";
    cfg.model = "canned-model";
    cfg.temperature = 0.0;
    cfg.replay = true;
    cfg.transcript_path = kFixtures + "/llm_transcript.jsonl";
    return cfg;
}

}  // namespace

TEST_CASE("the compiled template matches the committed transcription byte for byte") {
    CHECK(zero_shot_template() == committed_template());
}

TEST_CASE("the template states each definition and the format rule exactly once") {
    const std::string& tpl = zero_shot_template();
    for (const char* marker :
         {"Physical Aspect (PA):", "Intellectual Aspect (IA):",
          "Vocational Aspect (VA):", "Social Aspect (SA):",
          "Spiritual Aspect (SpA):", "Emotional Aspect (EA):",
          "[value1, value2]", "Textual post: {post}"}) {
        const std::size_t first = tpl.find(marker);
        REQUIRE(first != std::string::npos);
        CHECK(tpl.find(marker, first + 1) == std::string::npos);
    }
}

TEST_CASE("zero-shot rendering substitutes the post and nothing else") {
    const std::string post = "my body feels strong after the morning run";
    const PromptBundle bundle = build_zero_shot_prompt(post, "p01");
    CHECK(bundle.template_id == "zero-shot/v1");
    CHECK(bundle.target_post_id == "p01");
    CHECK(bundle.rendered_text ==
          replace_once(committed_template(), "{post}", post));
    CHECK_THROWS_AS(build_zero_shot_prompt("   ", "x"), ValidationError);
}

TEST_CASE("few-shot rendering inserts class-grouped demonstrations") {
    std::vector<Shot> shots = {
        {"b", "second example post", 2, "second span"},
        {"a", "first example post", 1, "first span"},
    };
    const std::string post = "the post under test";
    const PromptBundle bundle = build_few_shot_prompt(post, shots, "t");
    CHECK(bundle.template_id == "few-shot/v1");
    const std::string expected_block =
        "Here are some examples:\n"
        "\nTextual post: first example post\nOutput: [1, \"first span\"]\n"
        "\nTextual post: second example post\nOutput: [2, \"second span\"]\n"
        "\nTextual post: " + post;
    const std::string expected = replace_once(
        committed_template(), "Textual post: {post}", expected_block);
    CHECK(bundle.rendered_text == expected);
    // Shots come back grouped by class.
    CHECK(bundle.shots[0].gold_class == 1);
    CHECK(bundle.shots[1].gold_class == 2);

    // Zero shots render byte-identically to the zero-shot prompt.
    const PromptBundle none = build_few_shot_prompt(post, {}, "t");
    CHECK(none.rendered_text == build_zero_shot_prompt(post, "t").rendered_text);

    std::vector<Shot> bad = {{"x", "text", 7, ""}};
    CHECK_THROWS_AS(build_few_shot_prompt(post, bad, "t"), ValidationError);
}

TEST_CASE("shot sampling is per-class, exact, and deterministic") {
    std::vector<AnnotatedPost> posts;
    for (int i = 0; i < 40; ++i) {
        AnnotatedPost p;
        p.id = "p" + std::to_string(i);
        p.text = "post number " + std::to_string(i);
        p.gold = LabelVector::multi_class(i % 4);
        if (i % 2 == 0) p.explanation_spans.push_back({0, 4, "post"});
        posts.push_back(p);
    }
    const auto shots = sample_shots(posts, 5, 123);
    REQUIRE(shots.size() == 20);
    int counts[4] = {0, 0, 0, 0};
    int last_class = 0;
    std::set<std::string> ids;
    for (const Shot& s : shots) {
        REQUIRE(s.gold_class >= 1);
        REQUIRE(s.gold_class <= 4);
        counts[s.gold_class - 1]++;
        CHECK(s.gold_class >= last_class);  // grouped by class
        last_class = s.gold_class;
        CHECK(ids.insert(s.post_id).second);  // no duplicates
    }
    for (int c = 0; c < 4; ++c) CHECK(counts[c] == 5);

    const auto again = sample_shots(posts, 5, 123);
    for (std::size_t i = 0; i < shots.size(); ++i) {
        CHECK(again[i].post_id == shots[i].post_id);
    }
    bool differs = false;
    const auto other = sample_shots(posts, 5, 124);
    for (std::size_t i = 0; i < shots.size(); ++i) {
        differs = differs || other[i].post_id != shots[i].post_id;
    }
    CHECK(differs);

    // Short support raises with the class named.
    std::vector<AnnotatedPost> short_support(posts.begin(), posts.begin() + 10);
    CHECK_THROWS_AS(sample_shots(short_support, 5, 1), ValidationError);
}

TEST_CASE("parse_response accepts the documented reply shapes") {
    const ParsedLLMResponse plain = parse_response("[2, \"job stress\"]");
    CHECK(plain.label == 2);
    CHECK(plain.explanation_text == "job stress");

    const ParsedLLMResponse prose = parse_response(
        "Sure! Here is my answer:\n[3, 'family dinner'] Hope that helps.");
    CHECK(prose.label == 3);
    CHECK(prose.explanation_text == "family dinner");

    const ParsedLLMResponse bare = parse_response("[1, morning run outside]");
    CHECK(bare.label == 1);
    CHECK(bare.explanation_text == "morning run outside");

    const ParsedLLMResponse padded = parse_response("  [ 4 ,  \"prayer\" ]  ");
    CHECK(padded.label == 4);
    CHECK(padded.explanation_text == "prayer");

    // Commas inside the quoted explanation stay in the explanation.
    const ParsedLLMResponse comma =
        parse_response("[2, \"exams, courses, and work\"]");
    CHECK(comma.label == 2);
    CHECK(comma.explanation_text == "exams, courses, and work");
}

TEST_CASE("parse_response rejects malformed replies with typed errors") {
    CHECK_THROWS_AS(parse_response("no list here"), ResponseParseError);
    CHECK_THROWS_AS(parse_response("[4]"), ResponseParseError);
    CHECK_THROWS_AS(parse_response(""), ResponseParseError);
    CHECK_THROWS_AS(parse_response("[5, \"out of range\"]"), InvalidLabelError);
    CHECK_THROWS_AS(parse_response("[0, \"zero\"]"), InvalidLabelError);
    CHECK_THROWS_AS(parse_response("[two, \"words\"]"), InvalidLabelError);
}

TEST_CASE("request hashes key on prompt and provider parameters") {
    ProviderConfig cfg = fixture_provider();
    const std::string h = request_hash("prompt text", cfg);
    CHECK(h.size() == 16);
    CHECK(h == request_hash("prompt text", cfg));
    CHECK(h != request_hash("prompt text!", cfg));
    ProviderConfig other_model = cfg;
    other_model.model = "different";
    CHECK(h != request_hash("prompt text", other_model));
    ProviderConfig other_temp = cfg;
    other_temp.temperature = 0.7;
    CHECK(h != request_hash("prompt text", other_temp));
    // Unrelated transport knobs do not move the hash.
    ProviderConfig other_retry = cfg;
    other_retry.max_retries = 9;
    CHECK(h == request_hash("prompt text", other_retry));
}

TEST_CASE("transcript append/load round-trip; later entries win on replay") {
    const std::string path = "/tmp/wellbench_test_transcript.jsonl";
    std::remove(path.c_str());
    ProviderConfig cfg = fixture_provider();
    cfg.transcript_path = path;

    TranscriptEntry first;
    first.request_hash = request_hash("the prompt", cfg);
    first.prompt = "the prompt";
    first.reply = "old reply";
    first.provider_id = cfg.provider_id;
    first.timestamp = "2000-01-01T00:00:00Z";
    append_transcript(path, first);
    TranscriptEntry second = first;
    second.reply = "new reply";
    append_transcript(path, second);

    const auto entries = load_transcript(path);
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].reply == "old reply");

    ReplayTransport replay(path);
    CHECK(replay.send("the prompt", cfg) == "new reply");
    CHECK_THROWS_AS(replay.send("never recorded", cfg), ReplayMissError);
    std::remove(path.c_str());
}

TEST_CASE("make_transport honors the replay switch") {
    ProviderConfig cfg = fixture_provider();
    auto transport = make_transport(cfg);
    CHECK(dynamic_cast<ReplayTransport*>(transport.get()) != nullptr);
}

TEST_CASE("replay across the committed 20-post fixture") {
    const auto posts = read_posts_jsonl(kFixtures + "/llm_posts.jsonl");
    REQUIRE(posts.size() == 20);
    ProviderConfig cfg = fixture_provider();
    ReplayTransport transport(cfg.transcript_path);
    const auto outcomes = run_llm_over_posts(posts, {}, cfg, transport);
    REQUIRE(outcomes.size() == 20);

    int parsed = 0;
    for (const auto& o : outcomes) parsed += o.parsed_ok;
    CHECK(parsed == 18);
    CHECK_FALSE(outcomes[4].parsed_ok);   // prose reply
    CHECK_FALSE(outcomes[17].parsed_ok);  // single-element list
    CHECK(outcomes[0].label == 1);
    CHECK(outcomes[0].explanation_text == "body feels strong");

    // Outcome persistence round-trip.
    const std::string path = "/tmp/wellbench_test_outcomes.jsonl";
    write_llm_outcomes(outcomes, path);
    const auto back = read_llm_outcomes(path);
    REQUIRE(back.size() == outcomes.size());
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        CHECK(back[i].sample_id == outcomes[i].sample_id);
        CHECK(back[i].parsed_ok == outcomes[i].parsed_ok);
        CHECK(back[i].label == outcomes[i].label);
        CHECK(back[i].raw_reply == outcomes[i].raw_reply);
    }
    std::remove(path.c_str());
}

TEST_CASE("evaluation over the fixture reproduces the hand-computed table") {
    const auto posts = read_posts_jsonl(kFixtures + "/llm_posts.jsonl");
    ProviderConfig cfg = fixture_provider();
    ReplayTransport transport(cfg.transcript_path);
    const auto outcomes = run_llm_over_posts(posts, {}, cfg, transport);

    const LlmEvaluation eval = evaluate_llm(outcomes, posts);
    CHECK(eval.format_failures == 2);
    // Hand-built 4x5 contingency: 13 of 20 on the diagonal.
    CHECK(eval.metrics.accuracy == 13.0 / 20.0);
    // Generalized MCC over the sentinel-extended table:
    // c=13, s=20, sum t_k p_k = 90, sum p^2 = 88, sum t^2 = 100.
    CHECK(eval.metrics.mcc == (13.0 * 20.0 - 90.0) /
                                  std::sqrt((400.0 - 88.0) * (400.0 - 100.0)));
    // One-vs-rest over the four genuine classes.
    CHECK(eval.metrics.precision ==
          doctest::Approx((0.75 + 4.0 / 6.0 + 0.75 + 0.75) / 4).epsilon(1e-12));
    CHECK(eval.metrics.recall ==
          doctest::Approx((0.6 + 0.8 + 0.6 + 0.6) / 4).epsilon(1e-12));
    CHECK(eval.metrics.f1 ==
          doctest::Approx((2.0 / 3.0 + 8.0 / 11.0 + 2.0 / 3.0 + 2.0 / 3.0) / 4)
              .epsilon(1e-12));
    // All 20 posts carry spans; the 13 correct replies echo the span text.
    REQUIRE(eval.ao.has_value());
    CHECK(*eval.ao == 13.0 / 20.0);
    REQUIRE(eval.per_sample.size() == 20);
    CHECK(eval.per_sample[0].overlap);
    CHECK_FALSE(eval.per_sample[2].overlap);  // wrong class, foreign words

    // Excluding format failures rescales accuracy to the parsed subset.
    LlmEvalOptions excl;
    excl.count_failures_as_wrong = false;
    const LlmEvaluation parsed_only = evaluate_llm(outcomes, posts, excl);
    CHECK(parsed_only.metrics.accuracy == 13.0 / 18.0);
    CHECK(parsed_only.format_failures == 2);
}

TEST_CASE("word-bag overlap needs half the explanation inside the gold spans") {
    std::vector<AnnotatedPost> posts(1);
    posts[0].id = "w";
    posts[0].text = "alpha beta gamma delta";
    posts[0].gold = LabelVector::multi_class(0);
    posts[0].explanation_spans.push_back({0, 10, "alpha beta"});

    auto outcome_with = [&](const std::string& expl) {
        LlmOutcome o;
        o.sample_id = "w";
        o.parsed_ok = true;
        o.label = 1;
        o.explanation_text = expl;
        return std::vector<LlmOutcome>{o};
    };
    // 2 of 2 words inside.
    CHECK(*evaluate_llm(outcome_with("alpha beta"), posts).ao == 1.0);
    // 1 of 2 inside: exactly half still passes.
    CHECK(*evaluate_llm(outcome_with("beta unknown"), posts).ao == 1.0);
    // 1 of 3 inside: fails.
    CHECK(*evaluate_llm(outcome_with("beta foreign words"), posts).ao == 0.0);
    // Case folding and punctuation stripping apply.
    CHECK(*evaluate_llm(outcome_with("Alpha, BETA!"), posts).ao == 1.0);
}
