#include "doctest.h"

#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "fixtures.hpp"

#include "annoteer/io.hpp"
#include "annoteer/service.hpp"

using namespace annoteer;
using json = nlohmann::json;

namespace {

std::string corpus_csv(std::size_t n) {
    std::string csv = "id,narrative,Sex\n";
    for (std::size_t i = 0; i < n; ++i) {
        csv += "c" + std::to_string(i) + ",patient " + std::to_string(i) + " fell from bicycle," +
               (i % 3 ? "Male" : "") + "\n";
    }
    return csv;
}

json create_body(std::size_t n = 120) {
    return {{"corpus_csv", corpus_csv(n)},
            {"task", {{"classes", fixtures::helmet_classes()}, {"request", "Was a helmet worn?"}}},
            {"params", {{"text_column", "narrative"}, {"id_column", "id"}, {"metadata_columns", {"Sex"}}, {"seed", 4}}}};
}

struct Harness {
    fixtures::TempDir dir;
    std::unique_ptr<service::Service> svc;
    std::unique_ptr<httplib::Client> client;
    bool bad_meta = false;
    int port = 0;

    explicit Harness(std::string token = {}) { boot(std::move(token)); }

    void boot(std::string token = {}) {
        client.reset();
        svc.reset();
        service::ServiceConfig cfg;
        cfg.data_dir = dir.path();
        cfg.auth_token = token;
        cfg.logical_clock = true;
        cfg.retry.initial_backoff = std::chrono::milliseconds(0);
        svc = std::make_unique<service::Service>(cfg, [this](const Corpus&, const ClassificationTask& task) {
            auto b = fixtures::mock_backend(task.classes(), 6);
            if (bad_meta) b->push_meta_response(llm::CallPurpose::GenerateInitialPrompt, "unhelpful");
            return b;
        });
        port = svc->start("127.0.0.1", 0);
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        if (!token.empty()) client->set_bearer_token_auth(token);
    }

    httplib::Result post(const std::string& path, const json& body) {
        return client->Post(path, body.dump(), "application/json");
    }

    std::string create() {
        auto r = post("/sessions", create_body());
        REQUIRE(r);
        REQUIRE(r->status == 201);
        return json::parse(r->body).at("session_id");
    }

    json ready_batch(const std::string& id) {
        auto r = client->Post("/sessions/" + id + "/batches");
        REQUIRE(r);
        REQUIRE(r->status == 202);
        svc->wait_idle();
        auto g = client->Get("/sessions/" + id + "/batches/current");
        REQUIRE(g);
        REQUIRE(g->status == 200);
        return json::parse(g->body);
    }

    static json labels_for(const json& batch) {
        json labels = json::object();
        for (const auto& item : batch.at("items")) {
            const std::string m = item.at("model_label");
            labels[item.at("record_id").get<std::string>()] = m == kParseFailure ? "Not mentioned" : m;
        }
        return labels;
    }
};

}  // namespace

TEST_CASE("listen address parsing") {
    const auto a = service::ListenAddress::parse("0.0.0.0:9000");
    CHECK(a.host == "0.0.0.0");
    CHECK(a.port == 9000);
    CHECK(service::ListenAddress::parse(":81").port == 81);
    CHECK_THROWS_AS(service::ListenAddress::parse("host"), ValidationError);
    CHECK_THROWS_AS(service::ListenAddress::parse("h:99999"), ValidationError);
}

TEST_CASE("session creation") {
    Harness h;
    CHECK(h.client->Get("/health")->status == 200);
    auto r = h.post("/sessions", create_body());
    REQUIRE(r->status == 201);
    const auto body = json::parse(r->body);
    CHECK(body["status"] == "ReadyToSample");
    CHECK(body["prompt"]["version_index"] == 0);
    CHECK(r->get_header_value("Location") == "/sessions/" + body["session_id"].get<std::string>());
    CHECK(std::filesystem::exists(h.dir.path() / (body["session_id"].get<std::string>() + ".jsonl")));
    const auto list = json::parse(h.client->Get("/sessions")->body);
    CHECK(list.size() == 1);
    CHECK(h.client->Get("/sessions/nope")->status == 404);

    auto bad = create_body();
    bad["params"]["text_column"] = "text";
    auto e = h.post("/sessions", bad);
    CHECK(e->status == 400);
    CHECK(json::parse(e->body)["error"] == "invalid_csv");
    auto bad_task = create_body();
    bad_task["task"]["classes"] = {"only"};
    CHECK(h.post("/sessions", bad_task)->status == 400);
    CHECK(h.client->Post("/sessions", "{oops", "application/json")->status == 400);
    CHECK(h.svc->session_count() == 1);
}

TEST_CASE("multipart session creation") {
    Harness h;
    httplib::MultipartFormDataItems items = {
        {"corpus", corpus_csv(30), "corpus.csv", "text/csv"},
        {"task", json{{"classes", fixtures::helmet_classes()}, {"request", "helmet?"}}.dump(), "", "application/json"},
        {"params", json{{"text_column", "narrative"}}.dump(), "", "application/json"}};
    auto r = h.client->Post("/sessions", items);
    CHECK(r->status == 201);
    httplib::MultipartFormDataItems missing = {{"corpus", corpus_csv(3), "corpus.csv", "text/csv"}};
    CHECK(h.client->Post("/sessions", missing)->status == 400);
}

TEST_CASE("failed prompt generation creates nothing") {
    Harness h;
    h.bad_meta = true;
    auto r = h.post("/sessions", create_body());
    CHECK(r->status == 502);
    CHECK(json::parse(r->body)["error"] == "prompt_generation_rejected");
    CHECK(h.svc->session_count() == 0);
    CHECK(std::filesystem::is_empty(h.dir.path()));
}

TEST_CASE("the labeling state machine over HTTP") {
    Harness h;
    const auto id = h.create();
    const auto base = "/sessions/" + id;
    CHECK(h.client->Get(base + "/batches/current")->status == 409);
    CHECK(h.post(base + "/labels", json{{"labels", json::object()}})->status == 409);
    CHECK(h.client->Get(base + "/results")->status == 409);

    const auto batch = h.ready_batch(id);
    CHECK(batch["status"] == "ready");
    CHECK(batch["iteration"] == 0);
    CHECK(batch["groups"].is_object());
    CHECK(json::parse(h.client->Get(base)->body)["status"] == "AwaitingLabels");
    CHECK(h.client->Post(base + "/batches")->status == 409);
    CHECK(h.client->Post(base + "/finalize")->status == 409);

    auto labels = Harness::labels_for(batch);
    auto partial = labels;
    partial.erase(partial.begin());
    auto pr = h.post(base + "/labels", json{{"labels", partial}});
    CHECK(pr->status == 400);
    CHECK(json::parse(pr->body)["error"] == "IncompleteBatch");
    CHECK(json::parse(h.client->Get(base)->body)["status"] == "AwaitingLabels");
    auto invalid = labels;
    invalid.begin().value() = "Maybe";
    CHECK(json::parse(h.post(base + "/labels", json{{"labels", invalid}})->body)["error"] == "InvalidClassLabel");

    auto flipped = labels;
    flipped.begin().value() = flipped.begin().value() == "No Helmet" ? "Helmet present" : "No Helmet";
    auto lr = h.post(base + "/labels", json{{"labels", flipped}});
    REQUIRE(lr->status == 200);
    const auto lb = json::parse(lr->body);
    CHECK(lb["n_mismatches"] == 1);
    CHECK(lb["prompt_changed"] == true);
    CHECK(lb["new_prompt_version"] == 1);
    CHECK(lb["diff"]["added_lines"].get<int>() > 0);
    CHECK(json::parse(h.client->Get(base + "/prompts")->body).size() == 2);

    auto fr = h.client->Post(base + "/finalize");
    REQUIRE(fr->status == 200);
    CHECK(h.client->Post(base + "/finalize")->status == 200);
    CHECK(h.client->Post(base + "/batches")->status == 409);
    auto results = h.client->Get(base + "/results?format=csv");
    REQUIRE(results->status == 200);
    CHECK(io::parse_csv(results->body).rows.size() == 120);
    auto lcsv = h.client->Get(base + "/labels?format=csv");
    CHECK(io::parse_csv(lcsv->body).rows.size() == labels.size());

    json truth = json::object();
    for (int i = 0; i < 120; ++i) truth["c" + std::to_string(i)] = "Not mentioned";
    auto ev = h.post(base + "/evaluate", json{{"truth", truth}, {"resamples", 50}, {"slice_column", "Sex"}});
    REQUIRE(ev->status == 200);
    const auto eb = json::parse(ev->body);
    CHECK(eb["n_truth"] == 120);
    CHECK(eb["n_excluded_labeled"] == labels.size());
    CHECK(eb["n_evaluated"] == 120 - labels.size());
    CHECK(eb["prompt_version"] == 1);
    CHECK(eb["bias_slices"]["groups"].contains("Not Specified"));
    CHECK(eb["confidence_intervals"]["macro_f1"].contains("lower_95"));
    truth["zzz"] = "No Helmet";
    CHECK(json::parse(h.post(base + "/evaluate", json{{"truth", truth}})->body)["error"] == "unknown_record_ids");
}

TEST_CASE("batch build failures are reported on the poll") {
    Harness h;
    auto small = create_body(3);
    small["params"]["sample_fraction"] = 1.0;
    auto r = h.post("/sessions", small);
    const std::string sid = json::parse(r->body)["session_id"];
    auto batch = h.ready_batch(sid);
    REQUIRE(h.post("/sessions/" + sid + "/labels", Harness::labels_for(batch))->status == 200);
    REQUIRE(h.client->Post("/sessions/" + sid + "/batches")->status == 202);
    h.svc->wait_idle();
    auto g = h.client->Get("/sessions/" + sid + "/batches/current");
    CHECK(g->status == 409);
    CHECK(json::parse(g->body)["error"] == "empty_pool");
    CHECK(json::parse(h.client->Get("/sessions/" + sid)->body)["status"] == "ReadyToSample");
}

TEST_CASE("bearer token authentication") {
    Harness h("sekrit");
    CHECK(h.client->Get("/sessions")->status == 200);
    httplib::Client anon("127.0.0.1", h.port);
    CHECK(anon.Get("/sessions")->status == 401);
    CHECK(anon.Get("/health")->status == 200);
}

TEST_CASE("sessions survive a restart") {
    Harness h;
    const auto id = h.create();
    const auto batch = h.ready_batch(id);
    const auto before = json::parse(h.client->Get("/sessions/" + id)->body);
    h.boot();
    CHECK(h.svc->session_count() == 0);
    CHECK(h.svc->load_existing().empty());
    CHECK(h.svc->session_count() == 1);
    CHECK(json::parse(h.client->Get("/sessions/" + id)->body) == before);
    auto g = h.client->Get("/sessions/" + id + "/batches/current");
    REQUIRE(g->status == 200);
    CHECK(json::parse(g->body)["items"] == batch["items"]);
    CHECK(h.post("/sessions/" + id + "/labels", json{{"labels", Harness::labels_for(batch)}})->status == 200);

    std::ofstream(h.dir.path() / "junk.jsonl") << "garbage\n";
    h.boot();
    const auto problems = h.svc->load_existing();
    CHECK(problems.size() == 1);
    CHECK(h.svc->session_count() == 1);
}
