#include "annoteer/service.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "annoteer/io.hpp"
#include "annoteer/prompt.hpp"
#include "annoteer/samplease.hpp"
#include "annoteer/stats.hpp"

namespace annoteer::service {

namespace fs = std::filesystem;
using nlohmann::json;
using samplease::Session;

ListenAddress ListenAddress::parse(const std::string& text) {
    const auto colon = text.rfind(':');
    if (colon == std::string::npos) throw ValidationError("listen address must be host:port, got '" + text + "'");
    ListenAddress a;
    if (colon > 0) a.host = text.substr(0, colon);
    try {
        std::size_t used = 0;
        a.port = std::stoi(text.substr(colon + 1), &used);
        if (used != text.size() - colon - 1 || a.port < 0 || a.port > 65535) throw std::out_of_range("port");
    } catch (const std::exception&) {
        throw ValidationError("bad port in listen address '" + text + "'");
    }
    return a;
}

ListenAddress ListenAddress::from_environment() {
    const char* v = std::getenv("ANNOTEER_LISTEN");
    return v && *v ? parse(v) : ListenAddress{};
}

namespace {

class HttpError : public Error {
public:
    HttpError(int status, std::string code, const std::string& what, json detail = nullptr)
        : Error(what), status(status), code(std::move(code)), detail(std::move(detail)) {}
    int status;
    std::string code;
    json detail;
};

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                const json& detail = nullptr) {
    json body = {{"error", code}, {"message", message}};
    if (!detail.is_null()) body["detail"] = detail;
    send_json(res, status, body);
}

// Maps engine exceptions onto HTTP statuses.
void send_exception(httplib::Response& res) {
    try {
        throw;
    } catch (const HttpError& e) {
        send_error(res, e.status, e.code, e.what(), e.detail);
    } catch (const samplease::LabelError& e) {
        send_error(res, 400, std::string(samplease::to_string(e.kind())), e.what());
    } catch (const samplease::StateError& e) {
        send_error(res, 409, "illegal_state", e.what());
    } catch (const samplease::EmptyPool& e) {
        send_error(res, 409, "empty_pool", e.what());
    } catch (const io::CsvError& e) {
        send_error(res, 400, "invalid_csv", e.what(), json{{"rows", e.rows()}});
    } catch (const ValidationError& e) {
        send_error(res, 400, "validation_failed", e.what());
    } catch (const stats::StatsError& e) {
        send_error(res, 400, "invalid_evaluation_input", e.what());
    } catch (const json::exception& e) {
        send_error(res, 400, "malformed_json", e.what());
    } catch (const llm::GatewayError& e) {
        send_error(res, 502, "gateway_" + std::string(llm::to_string(e.kind())), e.what());
    } catch (const prompt::GenerationRejected& e) {
        send_error(res, 502, "prompt_generation_rejected", e.what());
    } catch (const samplease::BatchBuildFailed& e) {
        send_error(res, 502, "batch_build_failed", e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
    }
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) throw HttpError(400, "malformed_json", "request body is empty");
    return json::parse(req.body);
}

std::string new_session_id() {
    static std::mutex mu;
    static std::mt19937_64 gen{std::random_device{}()};
    std::lock_guard lock(mu);
    char buf[24];
    std::snprintf(buf, sizeof buf, "s-%012llx", static_cast<unsigned long long>(gen() & 0xffffffffffffULL));
    return buf;
}

json line_diff(const std::string& before, const std::string& after) {
    auto lines = [](const std::string& s) {
        std::multiset<std::string> out;
        std::istringstream in(s);
        std::string line;
        while (std::getline(in, line)) out.insert(line);
        return out;
    };
    const auto a = lines(before);
    const auto b = lines(after);
    std::vector<std::string> added, removed;
    std::set_difference(b.begin(), b.end(), a.begin(), a.end(), std::back_inserter(added));
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(removed));
    return {{"added_lines", added.size()},
            {"removed_lines", removed.size()},
            {"added", std::vector<std::string>(added.begin(), added.begin() + std::min<std::size_t>(added.size(), 20))},
            {"chars_before", before.size()},
            {"chars_after", after.size()}};
}

struct Entry {
    std::string id;
    std::shared_ptr<io::EventLog> log;
    samplease::Engine engine;

    mutable std::mutex mu;  // guards the fields below
    std::shared_ptr<const Session> committed;
    bool busy = false;
    bool building = false;
    std::optional<std::pair<int, json>> build_error;  // status, error body
    std::thread worker;

    ~Entry() {
        if (worker.joinable()) worker.join();
    }

    std::shared_ptr<const Session> snapshot() const {
        std::lock_guard lock(mu);
        return committed;
    }
};

// Holds the per-session mutation guard for one request.
class Mutation {
public:
    explicit Mutation(Entry& e) : e_(e) {
        std::lock_guard lock(e_.mu);
        if (e_.busy) throw HttpError(409, "busy", "another operation on this session is in progress");
        e_.busy = true;
        base_ = e_.committed;
    }
    ~Mutation() {
        if (!released_) {
            std::lock_guard lock(e_.mu);
            e_.busy = false;
        }
    }
    const Session& base() const { return *base_; }
    void publish(Session s) {
        std::lock_guard lock(e_.mu);
        e_.committed = std::make_shared<const Session>(std::move(s));
        e_.busy = false;
        released_ = true;
    }
    // Ownership of the guard passes to a background task.
    void detach() { released_ = true; }

private:
    Entry& e_;
    std::shared_ptr<const Session> base_;
    bool released_ = false;
};

SamplingParams params_from_request(const json& p) {
    SamplingParams params;
    params.sample_fraction = p.value("sample_fraction", params.sample_fraction);
    params.per_class_quota = p.value("quota", params.per_class_quota);
    if (p.contains("strategy")) {
        try {
            params.strategy = sampling_strategy_from_string(p.at("strategy").get<std::string>());
        } catch (const Error& e) {
            throw ValidationError(e.what());
        }
    }
    return params;
}

}  // namespace

struct Service::Impl {
    ServiceConfig config;
    BackendProvider backends;
    httplib::Server server;
    std::thread server_thread;

    mutable std::mutex registry_mu;
    std::map<std::string, std::shared_ptr<Entry>> sessions;

    std::mutex builds_mu;
    std::condition_variable builds_cv;
    int builds_running = 0;

    Impl(ServiceConfig c, BackendProvider b) : config(std::move(c)), backends(std::move(b)) {
        if (!backends) throw ValidationError("service needs a backend provider");
        install_routes();
    }

    samplease::Engine make_engine(const Corpus& corpus, const ClassificationTask& task,
                                  const std::shared_ptr<io::EventLog>& log) const {
        prompt::PromptEngine prompts;
        if (config.logical_clock) prompts.clock = prompt::logical_clock();
        auto gateway = std::make_shared<const llm::Gateway>(backends(corpus, task), config.retry);
        return {gateway, std::move(prompts), config.classify, log->sink()};
    }

    std::shared_ptr<Entry> find(const std::string& id) const {
        std::lock_guard lock(registry_mu);
        auto it = sessions.find(id);
        if (it == sessions.end()) throw HttpError(404, "unknown_session", "no session '" + id + "'");
        return it->second;
    }

    fs::path log_path(const std::string& id) const { return config.data_dir / (id + ".jsonl"); }

    std::vector<std::string> load_existing() {
        std::vector<std::string> problems;
        if (!fs::exists(config.data_dir)) return problems;
        std::vector<fs::path> paths;
        for (const auto& f : fs::directory_iterator(config.data_dir)) {
            if (f.path().extension() == ".jsonl") paths.push_back(f.path());
        }
        std::sort(paths.begin(), paths.end());
        for (const auto& p : paths) {
            try {
                auto loaded = io::load_session(p);
                auto entry = std::make_shared<Entry>();
                entry->id = loaded.session.id();
                entry->log = std::make_shared<io::EventLog>(p);
                entry->engine = make_engine(loaded.session.corpus(), loaded.session.task(), entry->log);
                entry->committed = std::make_shared<const Session>(std::move(loaded.session));
                std::lock_guard lock(registry_mu);
                sessions[entry->id] = std::move(entry);
            } catch (const std::exception& e) {
                problems.push_back(p.string() + ": " + e.what());
            }
        }
        return problems;
    }

    template <class F>
    auto guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (...) {
                send_exception(res);
            }
        };
    }

    void install_routes() {
        if (config.static_dir) server.set_mount_point("/ui", config.static_dir->string());

        server.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            if (config.auth_token.empty() || req.path.rfind("/sessions", 0) != 0) {
                return httplib::Server::HandlerResponse::Unhandled;
            }
            if (req.get_header_value("Authorization") != "Bearer " + config.auth_token) {
                send_error(res, 401, "unauthorized", "missing or wrong bearer token");
                return httplib::Server::HandlerResponse::Handled;
            }
            return httplib::Server::HandlerResponse::Unhandled;
        });

        server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, {{"status", "ok"}});
        });

        server.Get("/sessions", guarded([this](const httplib::Request&, httplib::Response& res) {
            json list = json::array();
            std::vector<std::shared_ptr<Entry>> entries;
            {
                std::lock_guard lock(registry_mu);
                for (const auto& [id, e] : sessions) entries.push_back(e);
            }
            for (const auto& e : entries) list.push_back(io::session_summary_json(*e->snapshot()));
            send_json(res, 200, list);
        }));

        server.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
            create_session(req, res);
        }));

        server.Get(R"(/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto e = find(req.matches[1]);
            auto body = io::session_summary_json(*e->snapshot());
            std::lock_guard lock(e->mu);
            body["building"] = e->building;
            send_json(res, 200, body);
        }));

        server.Post(R"(/sessions/([^/]+)/batches)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            start_batch(find(req.matches[1]), res);
        }));

        server.Get(R"(/sessions/([^/]+)/batches/current)",
                   guarded([this](const httplib::Request& req, httplib::Response& res) {
                       current_batch(*find(req.matches[1]), res);
                   }));

        server.Post(R"(/sessions/([^/]+)/labels)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            submit_labels(*find(req.matches[1]), parse_body(req), res);
        }));

        server.Post(R"(/sessions/([^/]+)/finalize)",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        auto e = find(req.matches[1]);
                        Mutation m(*e);
                        Session working = m.base();
                        const auto& outcomes = samplease::finalize(working, e->engine);
                        json body = {{"status", to_string(working.status())},
                                     {"prompt_version", working.final_prompt_version()},
                                     {"n_results", outcomes.size()}};
                        m.publish(std::move(working));
                        send_json(res, 200, body);
                    }));

        server.Get(R"(/sessions/([^/]+)/prompts)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, io::prompts_json(find(req.matches[1])->snapshot()->prompt_history()));
        }));

        server.Get(R"(/sessions/([^/]+)/labels)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto s = find(req.matches[1])->snapshot();
            if (req.get_param_value("format") == "csv") {
                res.set_content(io::labels_csv_text(s->labeled_data()), "text/csv");
                return;
            }
            json rows = json::array();
            for (const auto& l : s->labeled_data()) {
                rows.push_back({{"record_id", l.record_id},
                                {"expert_label", l.expert_label},
                                {"model_label_at_sampling", l.model_label_at_sampling},
                                {"confidence_at_sampling", l.confidence_at_sampling},
                                {"iteration_labeled", l.iteration_labeled}});
            }
            send_json(res, 200, rows);
        }));

        server.Get(R"(/sessions/([^/]+)/results)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto s = find(req.matches[1])->snapshot();
            if (s->status() != SessionStatus::Finalized) {
                throw HttpError(409, "illegal_state", "results are available after finalize");
            }
            if (req.get_param_value("format") == "csv") {
                res.set_header("Content-Disposition", "attachment; filename=\"results.csv\"");
                res.set_content(io::results_csv_text(*s->final_outcomes(), s->final_prompt_version()), "text/csv");
                return;
            }
            json rows = json::array();
            for (const auto& o : *s->final_outcomes()) {
                rows.push_back(
                    {{"record_id", o.record_id}, {"predicted_class", o.predicted_class}, {"confidence", o.confidence}});
            }
            send_json(res, 200, {{"prompt_version", s->final_prompt_version()}, {"results", std::move(rows)}});
        }));

        server.Post(R"(/sessions/([^/]+)/evaluate)",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        evaluate(*find(req.matches[1])->snapshot(), parse_body(req), res);
                    }));
    }

    void create_session(const httplib::Request& req, httplib::Response& res) {
        std::string csv_text;
        json task_json, params_json = json::object();
        if (req.is_multipart_form_data()) {
            if (!req.has_file("corpus")) throw HttpError(400, "missing_field", "multipart field 'corpus' is required");
            if (!req.has_file("task")) throw HttpError(400, "missing_field", "multipart field 'task' is required");
            csv_text = req.get_file_value("corpus").content;
            task_json = json::parse(req.get_file_value("task").content);
            if (req.has_file("params")) params_json = json::parse(req.get_file_value("params").content);
        } else {
            const auto body = parse_body(req);
            csv_text = body.at("corpus_csv").get<std::string>();
            task_json = body.at("task");
            params_json = body.value("params", json::object());
        }

        io::CorpusColumns columns;
        columns.text_column = params_json.value("text_column", std::string("text"));
        if (params_json.contains("id_column")) columns.id_column = params_json.at("id_column").get<std::string>();
        columns.metadata_columns = params_json.value("metadata_columns", std::vector<std::string>{});
        const std::string source = params_json.value("source_name", std::string("upload.csv"));
        auto corpus = std::make_shared<const Corpus>(io::corpus_from_csv(io::parse_csv(csv_text), columns, source));

        ClassificationTask task(task_json.at("classes").get<std::vector<std::string>>(),
                                task_json.value("request", std::string{}));
        const auto params = params_from_request(params_json);
        const std::uint64_t seed =
            params_json.contains("seed") ? params_json.at("seed").get<std::uint64_t>() : std::random_device{}();

        std::string id = new_session_id();
        {
            std::lock_guard lock(registry_mu);
            while (sessions.count(id) || fs::exists(log_path(id))) id = new_session_id();
        }
        auto entry = std::make_shared<Entry>();
        entry->id = id;
        entry->log = std::make_shared<io::EventLog>(log_path(id));
        entry->engine = make_engine(*corpus, task, entry->log);
        // Nothing reaches the log unless P_0 generation succeeds.
        auto session = samplease::start_session(entry->engine, corpus, std::move(task), seed, params, id);
        json body = {{"session_id", id},
                     {"status", to_string(session.status())},
                     {"prompt", io::to_json(session.current_prompt())}};
        entry->committed = std::make_shared<const Session>(std::move(session));
        {
            std::lock_guard lock(registry_mu);
            sessions[id] = entry;
        }
        res.set_header("Location", "/sessions/" + id);
        send_json(res, 201, body);
    }

    void start_batch(const std::shared_ptr<Entry>& e, httplib::Response& res) {
        Mutation m(*e);
        if (m.base().status() != SessionStatus::ReadyToSample) {
            throw HttpError(409, "illegal_state",
                            "batch requires status ReadyToSample, session is " +
                                std::string(to_string(m.base().status())));
        }
        if (e->worker.joinable()) e->worker.join();
        {
            std::lock_guard lock(e->mu);
            e->building = true;
            e->build_error.reset();
        }
        {
            std::lock_guard lock(builds_mu);
            ++builds_running;
        }
        m.detach();
        Entry* raw = e.get();
        raw->worker = std::thread([this, raw, base = m.base()]() mutable {
            std::optional<std::pair<int, json>> failure;
            try {
                samplease::build_sample_batch(base, raw->engine);
            } catch (...) {
                httplib::Response tmp;
                send_exception(tmp);
                failure.emplace(tmp.status, json::parse(tmp.body));
            }
            {
                std::lock_guard lock(raw->mu);
                if (!failure) raw->committed = std::make_shared<const Session>(std::move(base));
                raw->build_error = std::move(failure);
                raw->building = false;
                raw->busy = false;
            }
            std::lock_guard lock(builds_mu);
            --builds_running;
            builds_cv.notify_all();
        });
        const auto poll = "/sessions/" + e->id + "/batches/current";
        res.set_header("Location", poll);
        send_json(res, 202, {{"status", "building"}, {"poll", poll}});
    }

    void current_batch(const Entry& e, httplib::Response& res) {
        std::shared_ptr<const Session> s;
        {
            std::lock_guard lock(e.mu);
            if (e.building) {
                send_json(res, 202, {{"status", "building"}});
                return;
            }
            if (e.build_error) {
                send_json(res, e.build_error->first, e.build_error->second);
                return;
            }
            s = e.committed;
        }
        if (!s->pending_batch()) throw HttpError(409, "no_pending_batch", "no batch is awaiting labels");
        auto body = io::to_json(*s->pending_batch());
        json groups = json::object();
        for (const auto& item : s->pending_batch()->items) groups[item.class_bucket].push_back(item.record_id);
        body["groups"] = std::move(groups);
        body["status"] = "ready";
        send_json(res, 200, body);
    }

    void submit_labels(Entry& e, const json& body, httplib::Response& res) {
        const json& labels_json = body.contains("labels") && body.at("labels").is_object() ? body.at("labels") : body;
        std::map<std::string, std::string> labels;
        for (const auto& [id, v] : labels_json.items()) {
            if (!v.is_string()) throw HttpError(400, "malformed_labels", "label for '" + id + "' is not a string");
            labels[id] = v.get<std::string>();
        }
        Mutation m(e);
        Session working = m.base();
        const auto before = working.current_prompt().text;
        const auto outcome = samplease::submit_labels(working, labels, e.engine);
        json out = {{"n_mismatches", outcome.few_shots.size()},
                    {"prompt_changed", outcome.prompt_changed},
                    {"new_prompt_version", outcome.new_prompt_version},
                    {"diff", line_diff(before, working.current_prompt().text)}};
        m.publish(std::move(working));
        send_json(res, 200, out);
    }

    void evaluate(const Session& s, const json& body, httplib::Response& res) const {
        if (s.status() != SessionStatus::Finalized) {
            throw HttpError(409, "illegal_state", "evaluate requires a finalized session");
        }
        std::map<std::string, std::string> truth;
        if (body.contains("truth_csv")) {
            const auto table = io::parse_csv(body.at("truth_csv").get<std::string>());
            if (table.header.size() < 2) throw HttpError(400, "malformed_truth", "truth CSV needs id and label columns");
            for (const auto& row : table.rows) truth[row[0]] = row[1];
        } else {
            for (const auto& [id, v] : body.at("truth").items()) truth[id] = v.get<std::string>();
        }
        std::vector<std::string> unknown_ids, bad_labels;
        for (auto& [id, label] : truth) {
            if (!s.corpus().find(id)) unknown_ids.push_back(id);
            if (auto c = s.task().canonical(label)) label = *c;
            else bad_labels.push_back(id);
        }
        if (!unknown_ids.empty()) {
            throw HttpError(400, "unknown_record_ids", "ground truth names records not in the corpus",
                            json{{"record_ids", unknown_ids}});
        }
        if (!bad_labels.empty()) {
            throw HttpError(400, "invalid_truth_labels", "ground truth labels are not task classes",
                            json{{"record_ids", bad_labels}});
        }

        const std::string slice_column = body.value("slice_column", std::string{});
        std::map<std::string, std::string> explicit_groups;
        if (body.contains("groups")) {
            for (const auto& [id, v] : body.at("groups").items()) explicit_groups[id] = v.get<std::string>();
        }
        stats::LabeledRun run;
        std::vector<std::string> groups;
        long excluded = 0;
        for (const auto& o : *s.final_outcomes()) {
            auto it = truth.find(o.record_id);
            if (it == truth.end()) continue;
            if (s.is_labeled(o.record_id)) {
                ++excluded;
                continue;
            }
            run.truths.push_back(it->second);
            run.predictions.push_back(o.predicted_class);
            if (!explicit_groups.empty()) {
                auto g = explicit_groups.find(o.record_id);
                groups.push_back(g == explicit_groups.end() ? std::string{} : g->second);
            } else if (!slice_column.empty()) {
                const auto* rec = s.corpus().find(o.record_id);
                auto g = rec->metadata.find(slice_column);
                groups.push_back(g == rec->metadata.end() ? std::string{} : g->second);
            }
        }
        if (run.truths.empty()) {
            throw HttpError(400, "nothing_to_evaluate", "no ground-truth records remain after excluding labeled ones");
        }

        const auto& classes = s.task().classes();
        const auto report = stats::metrics(stats::confusion_matrix(classes, run.truths, run.predictions));
        const int resamples = body.value("resamples", stats::kDefaultResamples);
        const std::uint64_t seed = body.value("seed", std::uint64_t{1});
        json cis = json::object();
        for (const char* metric : {"macro_f1", "accuracy"}) {
            cis[metric] = io::to_json(
                stats::bootstrap_ci_pooled(classes, {run}, stats::MetricSelector::parse(metric), resamples, seed));
        }
        json per_class = json::object();
        for (const auto& c : classes) {
            if (report.per_class.at(c).support == 0) continue;
            per_class[c] = io::to_json(stats::bootstrap_ci_stratified(
                classes, {run}, c, stats::MetricSelector{stats::MetricKind::ClassF1, c}, resamples, seed));
        }
        cis["per_class_f1_stratified"] = std::move(per_class);

        json out = {{"n_truth", truth.size()},
                    {"n_excluded_labeled", excluded},
                    {"n_evaluated", run.truths.size()},
                    {"prompt_version", s.final_prompt_version()},
                    {"metrics", io::to_json(report)},
                    {"confidence_intervals", std::move(cis)}};
        if (!groups.empty()) {
            const long min_size = body.value("min_slice_size", stats::kDefaultMinSliceSize);
            out["bias_slices"] = {{"column", slice_column.empty() ? "groups" : slice_column},
                                  {"groups", io::to_json(stats::bias_slices(classes, run.truths, run.predictions,
                                                                            groups, min_size))}};
        }
        send_json(res, 200, out);
    }

    void wait_idle() {
        std::unique_lock lock(builds_mu);
        builds_cv.wait(lock, [this] { return builds_running == 0; });
    }
};

Service::Service(ServiceConfig config, BackendProvider backends)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(backends))) {}

Service::~Service() {
    stop();
    impl_->wait_idle();
}

std::vector<std::string> Service::load_existing() { return impl_->load_existing(); }

int Service::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound <= 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void Service::run(const std::string& host, int port) {
    if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

void Service::stop() {
    impl_->server.stop();
    if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

void Service::wait_idle() { impl_->wait_idle(); }

std::size_t Service::session_count() const {
    std::lock_guard lock(impl_->registry_mu);
    return impl_->sessions.size();
}

}  // namespace annoteer::service
