#include "doctest.h"

#include <atomic>
#include <thread>

#include "httplib.h"

#include "annoteer/hash.hpp"
#include "annoteer/llm.hpp"
#include "annoteer/mock_backend.hpp"
#include "annoteer/openai_backend.hpp"
#include "annoteer/rng.hpp"

using namespace annoteer;
using namespace annoteer::llm;

namespace {

CompletionRequest classify_request(const std::string& text) {
    CompletionRequest r;
    r.system_text = "prompt";
    r.user_text = text;
    r.want_logprobs = true;
    return r;
}

struct Sleeps {
    std::shared_ptr<std::vector<long>> ms = std::make_shared<std::vector<long>>();
    Gateway::Sleeper sleeper() {
        auto v = ms;
        return [v](std::chrono::milliseconds d) { v->push_back(static_cast<long>(d.count())); };
    }
};

class ThrowingBackend : public Backend {
public:
    ThrowingBackend(ErrorKind kind, int failures) : kind_(kind), failures_(failures) {}
    CompletionResponse complete(const CompletionRequest&) override {
        if (calls++ < failures_) {
            switch (kind_) {
                case ErrorKind::Auth: throw AuthError("nope");
                case ErrorKind::RateLimited: throw RateLimited("slow down");
                case ErrorKind::Rejected: throw RequestRejected("bad");
                default: throw TransportError("net");
            }
        }
        CompletionResponse r;
        r.text = "ANSWER: x";
        r.token_logprobs = std::vector<double>{-0.5};
        return r;
    }
    BackendCapabilities capabilities() const override { return {true, 16}; }
    std::atomic<int> calls{0};

private:
    ErrorKind kind_;
    int failures_;
};

// Echoes the user text after a random delay and records peak concurrency.
class ProbeBackend : public Backend {
public:
    explicit ProbeBackend(int cap = 64) : cap_(cap) {}
    CompletionResponse complete(const CompletionRequest& req) override {
        const int now = ++in_flight;
        int prev = peak.load();
        while (now > prev && !peak.compare_exchange_weak(prev, now)) {
        }
        const auto delay = sha256_u64(req.user_text) % 3;
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        --in_flight;
        if (req.user_text == "fail") throw AuthError("denied");
        CompletionResponse r;
        r.text = req.user_text;
        r.token_logprobs = std::vector<double>{-0.1};
        return r;
    }
    BackendCapabilities capabilities() const override { return {true, cap_}; }
    std::atomic<int> in_flight{0};
    std::atomic<int> peak{0};

private:
    int cap_;
};

}  // namespace

TEST_CASE("request defaults") {
    CompletionRequest r;
    CHECK(r.temperature == 0.0);
    CHECK(r.top_p == 1.0);
    CHECK(r.max_tokens == kClassifyMaxTokens);
    CHECK(kClassifyMaxTokens == 1024);
    CHECK(kMetaPromptMaxTokens == 4096);
}

TEST_CASE("scripted mock echoes scripted label and logprobs") {
    auto mock = std::make_shared<ScriptedBackend>(MockOptions{1, {"Helmet present", "No Helmet"}, true, 16});
    mock->script_text("rider fell", {{"No Helmet", std::nullopt, {-0.1, -0.2}}, std::nullopt, 0, 0});
    Gateway g(mock);
    const auto resp = g.complete(classify_request("rider fell"));
    REQUIRE(resp.token_logprobs);
    CHECK(*resp.token_logprobs == std::vector<double>{-0.1, -0.2});
    CHECK(resp.text.find("ANSWER: No Helmet") != std::string::npos);
}

TEST_CASE("scripted mock is deterministic for unscripted texts") {
    MockOptions mo{42, {"A", "B", "C"}, true, 16};
    auto m1 = std::make_shared<ScriptedBackend>(mo);
    auto m2 = std::make_shared<ScriptedBackend>(mo);
    for (int i = 0; i < 20; ++i) {
        const auto req = classify_request("text " + std::to_string(i));
        const auto a = m1->complete(req);
        const auto b = m1->complete(req);
        const auto c = m2->complete(req);
        CHECK(a.text == b.text);
        CHECK(a.text == c.text);
        CHECK(*a.token_logprobs == *c.token_logprobs);
        for (double lp : *a.token_logprobs) CHECK(lp <= 0.0);
    }
}

TEST_CASE("scripted mock tokens concatenate back to the text") {
    auto mock = std::make_shared<ScriptedBackend>(MockOptions{3, {"A", "B"}, true, 16});
    const auto resp = mock->complete(classify_request("xyz"));
    std::string joined;
    for (const auto& t : resp.tokens) joined += t;
    CHECK(joined == resp.text);
    CHECK(resp.tokens.size() == resp.token_logprobs->size());
}

TEST_CASE("mock script file accepts record ids and digests") {
    Corpus corpus("c", {{"r1", "first text", {}}, {"r2", "second text", {}}});
    nlohmann::json script = {{"records",
                              {{"r1", {{"label", "A"}, {"logprobs", {-0.3}}}},
                               {sha256_hex("second text"), {{"label", "B"}, {"logprobs", {-0.4, -0.6}}}}}},
                             {"classes", {"A", "B"}},
                             {"seed", 5}};
    auto mock = ScriptedBackend::from_json(script, &corpus);
    CHECK(*mock->complete(classify_request("first text")).token_logprobs == std::vector<double>{-0.3});
    CHECK(*mock->complete(classify_request("second text")).token_logprobs == std::vector<double>{-0.4, -0.6});
    nlohmann::json bad = {{"not-an-id", {{"label", "A"}, {"logprobs", {-0.1}}}}};
    CHECK_THROWS_AS(ScriptedBackend::from_json(bad, &corpus), ValidationError);
}

TEST_CASE("capability gate") {
    auto mock = std::make_shared<ScriptedBackend>(MockOptions{1, {"A", "B"}, false, 16});
    Gateway g(mock);
    CHECK_THROWS_AS(g.complete(classify_request("x")), CapabilityError);
    CHECK(mock->call_count() == 0);
    auto slots = g.complete_batch({classify_request("x")}, 4);
    CHECK(slots[0].error_kind == ErrorKind::Capability);
}

TEST_CASE("transient failures are retried with exponential backoff") {
    auto mock = std::make_shared<ScriptedBackend>(MockOptions{1, {"A", "B"}, true, 16});
    mock->script_text("flaky", {{"A", std::nullopt, {-0.2}}, std::nullopt, 1, 0});
    Sleeps sleeps;
    Gateway g(mock, {}, sleeps.sleeper());
    auto slots = g.complete_batch({classify_request("flaky")}, 1);
    REQUIRE(slots[0].ok());
    CHECK(slots[0].attempts == 2);
    CHECK(*sleeps.ms == std::vector<long>{500});

    mock->script_text("down", {{"A", std::nullopt, {-0.2}}, std::nullopt, 100, 0});
    sleeps.ms->clear();
    CHECK_THROWS_AS(g.complete(classify_request("down")), TransportError);
    CHECK(*sleeps.ms == std::vector<long>{500, 1000, 2000, 4000});
}

TEST_CASE("rate limits are retried, auth and rejection are not") {
    Sleeps sleeps;
    auto rl = std::make_shared<ThrowingBackend>(ErrorKind::RateLimited, 2);
    CHECK(Gateway(rl, {}, sleeps.sleeper()).complete(classify_request("x")).text == "ANSWER: x");
    CHECK(rl->calls == 3);

    auto auth = std::make_shared<ThrowingBackend>(ErrorKind::Auth, 10);
    CHECK_THROWS_AS(Gateway(auth, {}, sleeps.sleeper()).complete(classify_request("x")), AuthError);
    CHECK(auth->calls == 1);

    auto rej = std::make_shared<ThrowingBackend>(ErrorKind::Rejected, 10);
    CHECK_THROWS_AS(Gateway(rej, {}, sleeps.sleeper()).complete(classify_request("x")), RequestRejected);
    CHECK(rej->calls == 1);
}

TEST_CASE("batch preserves order and bounds concurrency") {
    std::vector<CompletionRequest> reqs;
    for (int i = 0; i < 100; ++i) reqs.push_back(classify_request("item-" + std::to_string(i)));
    for (int limit : {1, 3, 8}) {
        auto probe = std::make_shared<ProbeBackend>();
        Gateway g(probe);
        const auto slots = g.complete_batch(reqs, limit);
        REQUIRE(slots.size() == 100);
        for (int i = 0; i < 100; ++i) CHECK(slots[static_cast<std::size_t>(i)].response->text == "item-" + std::to_string(i));
        CHECK(probe->peak.load() <= limit);
        if (limit == 1) CHECK(probe->peak.load() == 1);
    }
}

TEST_CASE("batch respects the backend parallelism limit") {
    std::vector<CompletionRequest> reqs;
    for (int i = 0; i < 40; ++i) reqs.push_back(classify_request("v" + std::to_string(i)));
    auto probe = std::make_shared<ProbeBackend>(2);
    Gateway(probe).complete_batch(reqs, 16);
    CHECK(probe->peak.load() <= 2);
}

TEST_CASE("a failing slot does not abort the batch") {
    auto probe = std::make_shared<ProbeBackend>();
    Gateway g(probe);
    const auto slots = g.complete_batch({classify_request("a"), classify_request("fail"), classify_request("c")}, 3);
    CHECK(slots[0].ok());
    CHECK_FALSE(slots[1].ok());
    CHECK(slots[1].error_kind == ErrorKind::Auth);
    CHECK(slots[2].ok());
    CHECK_THROWS(g.complete_batch({}, 0));
}

TEST_CASE("chat request body") {
    auto req = classify_request("note");
    const auto body = make_chat_request_body(req, "m1");
    CHECK(body["model"] == "m1");
    CHECK(body["messages"][0]["role"] == "system");
    CHECK(body["messages"][0]["content"] == "prompt");
    CHECK(body["messages"][1]["content"] == "note");
    CHECK(body["temperature"] == 0.0);
    CHECK(body["top_p"] == 1.0);
    CHECK(body["max_tokens"] == 1024);
    CHECK(body["logprobs"] == true);
}

TEST_CASE("chat response parsing") {
    nlohmann::json body = {
        {"model", "m"},
        {"choices",
         {{{"message", {{"content", "ANSWER: A"}}},
           {"logprobs", {{"content", {{{"token", "ANSWER:"}, {"logprob", -0.01}}, {{"token", " A"}, {"logprob", -0.2}}}}}}}}},
        {"usage", {{"prompt_tokens", 10}, {"completion_tokens", 2}}}};
    const auto r = parse_chat_response_body(body);
    CHECK(r.text == "ANSWER: A");
    CHECK(*r.token_logprobs == std::vector<double>{-0.01, -0.2});
    CHECK(r.tokens == std::vector<std::string>{"ANSWER:", " A"});
    CHECK(r.usage.prompt_tokens == 10);
    CHECK_THROWS_AS(parse_chat_response_body(nlohmann::json{{"choices", nlohmann::json::array()}}), RequestRejected);
    CHECK_THROWS_AS(parse_chat_response_body(nlohmann::json{{"x", 1}}), RequestRejected);
}

TEST_CASE("HTTP status mapping") {
    CHECK_NOTHROW(throw_for_status(200, ""));
    CHECK_THROWS_AS(throw_for_status(401, ""), AuthError);
    CHECK_THROWS_AS(throw_for_status(403, ""), AuthError);
    CHECK_THROWS_AS(throw_for_status(429, ""), RateLimited);
    CHECK_THROWS_AS(throw_for_status(500, ""), TransportError);
    CHECK_THROWS_AS(throw_for_status(503, ""), TransportError);
    CHECK_THROWS_AS(throw_for_status(408, ""), TransportError);
    CHECK_THROWS_AS(throw_for_status(400, ""), RequestRejected);
}

TEST_CASE("openai-compatible client against a local server") {
    httplib::Server server;
    std::atomic<int> hits{0};
    std::string seen_auth, seen_model;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        const int n = ++hits;
        seen_auth = req.get_header_value("Authorization");
        const auto body = nlohmann::json::parse(req.body);
        seen_model = body["model"];
        if (body["messages"][1]["content"] == "limited" && n == 1) {
            res.status = 429;
            res.set_content("{}", "application/json");
            return;
        }
        if (body["messages"][1]["content"] == "denied") {
            res.status = 401;
            return;
        }
        nlohmann::json out = {
            {"model", "local"},
            {"choices",
             {{{"message", {{"content", "reasoning\nANSWER: B"}}},
               {"logprobs", {{"content", {{{"token", "x"}, {"logprob", -0.5}}, {{"token", "y"}, {"logprob", -0.25}}}}}}}}}};
        res.set_content(out.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    OpenAiConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1/";
    cfg.api_key = "sk-test";
    cfg.model = "tiny";
    cfg.timeout_seconds = 5;
    auto backend = std::make_shared<OpenAiBackend>(cfg);
    Sleeps sleeps;
    Gateway g(backend, {}, sleeps.sleeper());

    const auto r = g.complete(classify_request("note"));
    CHECK(r.text == "reasoning\nANSWER: B");
    CHECK(*r.token_logprobs == std::vector<double>{-0.5, -0.25});
    CHECK(seen_auth == "Bearer sk-test");
    CHECK(seen_model == "tiny");

    hits = 0;
    CHECK(g.complete(classify_request("limited")).text == "reasoning\nANSWER: B");
    CHECK(hits == 2);
    CHECK(*sleeps.ms == std::vector<long>{500});

    CHECK_THROWS_AS(g.complete(classify_request("denied")), AuthError);

    server.stop();
    t.join();

    cfg.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    auto offline = std::make_shared<OpenAiBackend>(cfg);
    RetryPolicy once;
    once.max_attempts = 1;
    CHECK_THROWS_AS(Gateway(offline, once).complete(classify_request("note")), TransportError);
}
