#include "doctest.h"

#include <cmath>
#include <limits>

#include "fixtures.hpp"

#include "annoteer/classify.hpp"

using namespace annoteer;
using namespace annoteer::classify;

TEST_CASE("confidence is the geometric mean token probability") {
    const std::vector<double> lps = {-0.1, -0.3, -0.2};
    CHECK(compute_confidence(lps) == doctest::Approx(0.818730753).epsilon(1e-9));
    CHECK(std::abs(compute_confidence(lps) - std::exp(-0.2)) < 1e-15);
    const std::vector<double> zero = {0.0, 0.0};
    CHECK(compute_confidence(zero) == 1.0);
    const std::vector<double> one = {-2.0};
    CHECK(compute_confidence(one) == doctest::Approx(std::exp(-2.0)));
}

TEST_CASE("confidence rejects malformed logprobs") {
    auto kind_of = [](std::vector<double> v) {
        try {
            compute_confidence(v);
        } catch (const ConfidenceError& e) {
            return static_cast<int>(e.kind());
        }
        return -1;
    };
    CHECK(kind_of({}) == static_cast<int>(ConfidenceError::Kind::EmptyLogprobs));
    CHECK(kind_of({-0.1, std::numeric_limits<double>::quiet_NaN()}) ==
          static_cast<int>(ConfidenceError::Kind::NonFiniteLogprob));
    CHECK(kind_of({-std::numeric_limits<double>::infinity()}) ==
          static_cast<int>(ConfidenceError::Kind::NonFiniteLogprob));
    CHECK(kind_of({0.5}) == static_cast<int>(ConfidenceError::Kind::PositiveLogprob));
}

TEST_CASE("answer-line token scope") {
    llm::CompletionResponse r;
    r.tokens = {"Because", " reasons", "\n", "ANSWER:", " B"};
    r.token_logprobs = std::vector<double>{-1.0, -1.0, -1.0, -0.1, -0.3};
    CHECK(scoped_logprobs(r, TokenScope::AllTokens).size() == 5);
    CHECK(scoped_logprobs(r, TokenScope::AnswerLine) == std::vector<double>{-0.1, -0.3});
    r.tokens.clear();
    CHECK(scoped_logprobs(r, TokenScope::AnswerLine).size() == 5);
}

TEST_CASE("classify_all keeps order, parses answers and scores confidence") {
    const auto corpus = fixtures::numbered_corpus(30);
    auto mock = fixtures::mock_backend(fixtures::helmet_classes(), 5);
    mock->script_text(corpus->records()[3].text, {{"No Helmet", std::nullopt, {-0.1, -0.3, -0.2}}, std::nullopt, 0, 0});
    llm::Gateway g(mock);
    PromptVersion p{0, "prompt", std::nullopt, {}, 0};
    const auto out = classify_all(corpus->records(), p, fixtures::helmet_task(), g, {4, TokenScope::AllTokens});
    REQUIRE(out.size() == 30);
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i].record_id == corpus->records()[i].id);
        CHECK(out[i].ok());
        CHECK(fixtures::helmet_task().has_class(out[i].predicted_class));
        CHECK(out[i].confidence == doctest::Approx(compute_confidence(out[i].token_logprobs)));
    }
    CHECK(out[3].predicted_class == "No Helmet");
    CHECK(std::abs(out[3].confidence - std::exp(-0.2)) < 1e-15);
}

TEST_CASE("unparseable answers get one repair re-ask") {
    const auto corpus = fixtures::numbered_corpus(3);
    auto mock = fixtures::mock_backend(fixtures::helmet_classes());
    llm::ScriptedReply garbled{"", std::string("I cannot decide."), {-0.5, -0.5}};
    llm::ScriptedReply fixed{"Not mentioned", std::nullopt, {-0.05, -0.05, -0.05}};
    mock->script_text(corpus->records()[0].text, {garbled, fixed, 0, 0});
    mock->script_text(corpus->records()[1].text, {garbled, garbled, 0, 0});
    llm::Gateway g(mock);
    PromptVersion p{0, "prompt", std::nullopt, {}, 0};
    const auto out = classify_all(corpus->records(), p, fixtures::helmet_task(), g);
    CHECK(out[0].predicted_class == "Not mentioned");
    CHECK(out[0].confidence == doctest::Approx(std::exp(-0.05)));
    CHECK(out[1].predicted_class == kParseFailure);
    CHECK(out[1].ok());
    CHECK(out[1].confidence == doctest::Approx(std::exp(-0.5)));
    CHECK(mock->call_count() == 3 + 2);
}

TEST_CASE("gateway failures become per-record error markers") {
    const auto corpus = fixtures::numbered_corpus(4);
    auto mock = fixtures::mock_backend(fixtures::helmet_classes());
    mock->script_text(corpus->records()[2].text, {{"No Helmet", std::nullopt, {-0.1}}, std::nullopt, 100, 0});
    llm::RetryPolicy retry;
    retry.max_attempts = 2;
    llm::Gateway g(mock, retry, [](std::chrono::milliseconds) {});
    PromptVersion p{0, "prompt", std::nullopt, {}, 0};
    const auto out = classify_all(corpus->records(), p, fixtures::helmet_task(), g);
    CHECK_FALSE(out[2].ok());
    CHECK(out[2].predicted_class == kParseFailure);
    CHECK(out[2].error->find("TransportError") != std::string::npos);
    CHECK(out[0].ok());
    CHECK(out[3].ok());
}
