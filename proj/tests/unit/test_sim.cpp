#include "doctest.h"

#include <cmath>
#include <numeric>

#include "fixtures.hpp"

#include "annoteer/classify.hpp"
#include "annoteer/prompt.hpp"
#include "annoteer/sim.hpp"

using namespace annoteer;
using namespace annoteer::sim;

namespace {

WorldSpec small_spec(std::uint64_t seed = 3) {
    WorldSpec spec;
    spec.seed = seed;
    spec.n_records = 300;
    spec.n_clusters = 12;
    return spec;
}

llm::CompletionRequest classify_request(const std::string& system, const std::string& text) {
    llm::CompletionRequest r;
    r.system_text = system;
    r.user_text = text;
    r.want_logprobs = true;
    return r;
}

}  // namespace

TEST_CASE("worlds are deterministic and serialize losslessly") {
    const auto a = SimWorld::generate(small_spec());
    const auto b = SimWorld::generate(small_spec());
    const auto c = SimWorld::generate(small_spec(4));
    CHECK(a.to_json() == b.to_json());
    CHECK(a.to_json() != c.to_json());
    const auto back = SimWorld::from_json(a.to_json());
    CHECK(back.to_json() == a.to_json());
    REQUIRE(a.records().size() == 300);
    const auto corpus = a.corpus();
    CHECK(validate_corpus(corpus).ok());
    const auto truth = a.truth();
    for (const auto& r : a.records()) {
        CHECK(truth.at(r.id) == r.true_label);
        CHECK(r.wrong_label != r.true_label);
        CHECK(r.difficulty >= 0.0);
        CHECK(r.difficulty <= 1.0);
        CHECK(a.by_text(r.text) == &r);
        CHECK(a.by_id(r.id) == &r);
    }
    CHECK(a.by_text("no such narrative") == nullptr);
}

TEST_CASE("error probability shrinks with same-cluster exemplars") {
    const auto w = SimWorld::generate(small_spec());
    const auto& r = w.records().front();
    const double d = r.difficulty;
    CHECK(w.error_probability(r, 0) == doctest::Approx(std::min(0.95, 0.8 * d * d)));
    CHECK(w.error_probability(r, 2) == doctest::Approx(std::min(0.95, 0.8 * d * d) * 0.0625));
    CHECK(w.confidence(r, 1) >= w.confidence(r, 0) - 1e-12);
}

TEST_CASE("exemplar markers round trip") {
    const std::string p = "intro\n" + exemplar_marker("s000004") + "\nmore " + exemplar_marker("s000010");
    CHECK(exemplar_ids(p) == std::vector<std::string>{"s000004", "s000010"});
    CHECK(exemplar_ids("none here").empty());
}

TEST_CASE("simulated classification answers with consistent logprobs") {
    auto world = std::make_shared<const SimWorld>(SimWorld::generate(small_spec()));
    SimBackend backend(world);
    const auto task = ClassificationTask(world->classes(), "helmet?");
    const auto prompt = llm::ScriptedBackend::default_prompt(world->classes(), "");
    int errors = 0;
    for (const auto& r : world->records()) {
        const auto resp = backend.complete(classify_request(prompt, r.text));
        const auto label = prompt::parse_answer(resp.text, task);
        CHECK(label == (r.error_draw < world->error_probability(r, 0) ? r.wrong_label : r.true_label));
        errors += label != r.true_label;
        REQUIRE(resp.token_logprobs.has_value());
        CHECK(resp.tokens.size() == resp.token_logprobs->size());
        const double conf = classify::compute_confidence(*resp.token_logprobs);
        CHECK(std::abs(conf - world->confidence(r, 0)) < 1e-12);
    }
    CHECK(errors > 0);
    CHECK_THROWS_AS(backend.complete(classify_request(prompt, "unknown narrative")), llm::RequestRejected);
}

TEST_CASE("refined prompts only remove errors") {
    auto world = std::make_shared<const SimWorld>(SimWorld::generate(small_spec()));
    SimBackend backend(world);
    const auto task = ClassificationTask(world->classes(), "helmet?");
    const auto p0 = llm::ScriptedBackend::default_prompt(world->classes(), "");
    std::vector<std::string> shots;
    for (std::size_t i = 0; i < world->records().size(); i += 25) shots.push_back(world->records()[i].text);
    llm::CompletionRequest up;
    up.purpose = llm::CallPurpose::UpdatePrompt;
    up.user_text = p0 + "\n" + std::accumulate(shots.begin(), shots.end(), std::string(),
                                              [](std::string a, const std::string& s) { return a + s + "\n"; });
    const auto p1 = backend.complete(up).text;
    CHECK(exemplar_ids(p1).size() == shots.size());
    CHECK_NOTHROW(prompt::check_generated_prompt(p1, task));
    for (const auto& r : world->records()) {
        const bool wrong0 = prompt::parse_answer(backend.complete(classify_request(p0, r.text)).text, task) != r.true_label;
        const bool wrong1 = prompt::parse_answer(backend.complete(classify_request(p1, r.text)).text, task) != r.true_label;
        if (wrong1) CHECK(wrong0);
    }
}
