// annoteer: command-line driver for labeling sessions, offline experiments,
// evaluation gates and the HTTP service.

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "annoteer/classify.hpp"
#include "annoteer/core.hpp"
#include "annoteer/experiments.hpp"
#include "annoteer/io.hpp"
#include "annoteer/llm.hpp"
#include "annoteer/mock_backend.hpp"
#include "annoteer/openai_backend.hpp"
#include "annoteer/prompt.hpp"
#include "annoteer/samplease.hpp"
#include "annoteer/service.hpp"
#include "annoteer/sim.hpp"
#include "annoteer/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace annoteer;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitGateway = 3;
constexpr int kExitGate = 4;

class ConfigError : public Error {
public:
    using Error::Error;
};

class GateFailure : public Error {
public:
    using Error::Error;
};

struct CommonOpts {
    std::string corpus;
    std::string text_col = "text";
    std::string id_col;
    std::vector<std::string> meta_cols;
    std::vector<std::string> classes;
    std::string request;
    std::string backend = "openai-compatible";
    std::string model;
    double sample_fraction = 0.10;
    int quota = 10;
    std::string strategy = "samplease";
    std::uint64_t seed = 1;
    std::string clock = "system";
    int max_in_flight = 16;
    std::string token_scope = "all";
    std::string initial_template;
    std::string update_template;
};

void add_corpus_opts(CLI::App* app, CommonOpts& o) {
    app->add_option("--corpus", o.corpus, "Corpus CSV");
    app->add_option("--text-col", o.text_col, "Text column")->capture_default_str();
    app->add_option("--id-col", o.id_col, "Record id column (ids are synthesized when absent)");
    app->add_option("--meta-cols", o.meta_cols, "Metadata columns kept for slicing")->delimiter(',');
}

void add_common(CLI::App* app, CommonOpts& o, bool sampling) {
    add_corpus_opts(app, o);
    app->add_option("--classes", o.classes, "Comma-separated class names")->delimiter(',');
    app->add_option("--request", o.request, "Natural-language classification request");
    app->add_option("--backend", o.backend, "openai-compatible | mock[:SCRIPT] | sim:WORLD")->capture_default_str();
    app->add_option("--model", o.model, "Model id for openai-compatible backends");
    app->add_option("--seed", o.seed, "Root RNG seed")->capture_default_str();
    app->add_option("--max-in-flight", o.max_in_flight, "Concurrent completion requests")->capture_default_str();
    app->add_option("--token-scope", o.token_scope, "Confidence token scope: all | answer")
        ->check(CLI::IsMember({"all", "answer"}))
        ->capture_default_str();
    if (!sampling) return;
    app->add_option("--sample-fraction", o.sample_fraction, "Subsample fraction")->capture_default_str();
    app->add_option("--quota", o.quota, "Records per predicted class")->capture_default_str();
    app->add_option("--strategy", o.strategy, "samplease | random")
        ->check(CLI::IsMember({"samplease", "random"}))
        ->capture_default_str();
    app->add_option("--clock", o.clock, "Prompt timestamps: system | logical")
        ->check(CLI::IsMember({"system", "logical"}))
        ->capture_default_str();
    app->add_option("--initial-template", o.initial_template, "Meta-prompt template for P_0");
    app->add_option("--update-template", o.update_template, "Meta-prompt template for refinement");
}

struct Context {
    std::shared_ptr<const Corpus> corpus;
    ClassificationTask task;
    std::shared_ptr<const sim::SimWorld> world;
    // Fresh backend per call; validated up front.
    std::function<std::shared_ptr<llm::Backend>()> make_backend;
};

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

io::CorpusColumns columns_of(const CommonOpts& o) {
    io::CorpusColumns c;
    c.text_column = o.text_col;
    if (!o.id_col.empty()) c.id_column = o.id_col;
    c.metadata_columns = o.meta_cols;
    return c;
}

Context resolve(const CommonOpts& o, bool need_task = true) {
    Context ctx;
    if (starts_with(o.backend, "sim:")) {
        ctx.world = std::make_shared<const sim::SimWorld>(sim::SimWorld::load(o.backend.substr(4)));
    }
    if (!o.corpus.empty()) {
        ctx.corpus = std::make_shared<const Corpus>(io::load_corpus_csv(o.corpus, columns_of(o)));
    } else if (ctx.world) {
        ctx.corpus = std::make_shared<const Corpus>(ctx.world->corpus());
    } else {
        throw ConfigError("--corpus is required");
    }
    if (need_task) {
        auto classes = o.classes;
        if (classes.empty() && ctx.world) classes = ctx.world->classes();
        if (classes.empty()) throw ConfigError("--classes is required");
        auto request = o.request;
        if (request.empty() && ctx.world) request = "Assign each record to one of the classes.";
        ctx.task = ClassificationTask(classes, request);
    }

    if (ctx.world) {
        auto world = ctx.world;
        ctx.make_backend = [world] { return std::make_shared<sim::SimBackend>(world); };
    } else if (starts_with(o.backend, "mock")) {
        llm::MockOptions mo;
        mo.seed = o.seed;
        mo.classes = ctx.task.classes();
        if (o.backend == "mock") {
            ctx.make_backend = [mo] { return std::make_shared<llm::ScriptedBackend>(mo); };
        } else if (starts_with(o.backend, "mock:")) {
            std::ifstream in(o.backend.substr(5));
            if (!in) throw ConfigError("cannot open mock script " + o.backend.substr(5));
            const auto script = json::parse(in);
            auto corpus = ctx.corpus;
            llm::ScriptedBackend::from_json(script, corpus.get(), mo);  // validate now
            ctx.make_backend = [script, corpus, mo] { return llm::ScriptedBackend::from_json(script, corpus.get(), mo); };
        } else {
            throw ConfigError("unknown backend '" + o.backend + "'");
        }
    } else if (o.backend == "openai-compatible") {
        auto cfg = llm::OpenAiConfig::from_environment();
        if (!o.model.empty()) cfg.model = o.model;
        if (cfg.api_key.empty()) throw ConfigError("ANNOTEER_API_KEY is not set");
        auto shared = std::make_shared<llm::OpenAiBackend>(cfg);
        ctx.make_backend = [shared] { return shared; };
    } else {
        throw ConfigError("unknown backend '" + o.backend + "'");
    }
    return ctx;
}

SamplingParams params_of(const CommonOpts& o) {
    SamplingParams p;
    p.sample_fraction = o.sample_fraction;
    p.per_class_quota = o.quota;
    p.strategy = sampling_strategy_from_string(o.strategy);
    if (auto r = validate_sampling_params(p); !r.ok()) throw ConfigError("invalid sampling parameters: " + r.summary());
    return p;
}

classify::ClassifyOptions classify_of(const CommonOpts& o) {
    classify::ClassifyOptions c;
    c.max_in_flight = o.max_in_flight;
    c.token_scope = o.token_scope == "answer" ? classify::TokenScope::AnswerLine : classify::TokenScope::AllTokens;
    return c;
}

prompt::PromptEngine prompts_of(const CommonOpts& o) {
    prompt::PromptEngine e;
    e.templates = prompt::MetaPromptTemplates::load(o.initial_template, o.update_template);
    if (o.clock == "logical") e.clock = prompt::logical_clock();
    return e;
}

std::map<std::string, std::string> load_labels_any(const std::string& path) {
    if (fs::path(path).extension() == ".json") {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open " + path);
        return json::parse(in).get<std::map<std::string, std::string>>();
    }
    return io::load_label_csv(path);
}

// Canonicalizes labels against the task; unknown classes are a config error.
std::map<std::string, std::string> canonical_truth(std::map<std::string, std::string> truth,
                                                   const ClassificationTask& task, const std::string& source) {
    for (auto& [id, label] : truth) {
        auto c = task.canonical(label);
        if (!c) throw ConfigError(source + ": label '" + label + "' for " + id + " is not a class");
        label = *c;
    }
    return truth;
}

std::map<std::string, std::string> truth_for(const std::string& path, const Context& ctx) {
    if (!path.empty()) return canonical_truth(load_labels_any(path), ctx.task, path);
    if (ctx.world) return ctx.world->truth();
    throw ConfigError("--truth is required unless the backend is a simulation world");
}

experiments::Expert tty_expert(bool show_model) {
    return [show_model](const samplease::SampleBatch& batch, const ClassificationTask& task) {
        std::map<std::string, std::string> labels;
        std::cout << "\nBatch for iteration " << batch.iteration << ": " << batch.items.size() << " records\n";
        std::cout << "Classes:";
        for (std::size_t i = 0; i < task.classes().size(); ++i) std::cout << "  [" << i + 1 << "] " << task.classes()[i];
        std::cout << "\n";
        for (std::size_t n = 0; n < batch.items.size(); ++n) {
            const auto& item = batch.items[n];
            std::cout << "\n(" << n + 1 << "/" << batch.items.size() << ") " << item.record_id << "\n" << item.text << "\n";
            if (show_model) {
                std::cout << "model: " << item.model_label << "  confidence: " << std::fixed << std::setprecision(3)
                          << item.confidence << std::defaultfloat << "\n";
            }
            for (;;) {
                std::cout << "label> " << std::flush;
                std::string line;
                if (!std::getline(std::cin, line)) throw Error("expert input ended before the batch was labeled");
                const auto t = trim(line);
                std::optional<std::string> chosen;
                if (!t.empty() && std::all_of(t.begin(), t.end(), ::isdigit)) {
                    const auto idx = std::stoul(t);
                    if (idx >= 1 && idx <= task.classes().size()) chosen = task.classes()[idx - 1];
                } else {
                    chosen = task.canonical(t);
                }
                if (chosen) {
                    labels[item.record_id] = *chosen;
                    break;
                }
                std::cout << "not a class; type a class name or its number\n";
            }
        }
        return labels;
    };
}

experiments::Expert expert_for(const std::string& spec, const Context& ctx, bool show_model) {
    if (spec == "tty") return tty_expert(show_model);
    if (spec == "oracle") {
        if (!ctx.world) throw ConfigError("--expert oracle without a path needs a simulation backend");
        return experiments::oracle_expert(ctx.world->truth());
    }
    for (const char* prefix : {"script:", "oracle:"}) {
        if (starts_with(spec, prefix)) {
            const auto path = spec.substr(std::strlen(prefix));
            return experiments::oracle_expert(canonical_truth(load_labels_any(path), ctx.task, path));
        }
    }
    throw ConfigError("unknown expert '" + spec + "' (tty | script:PATH | oracle:PATH)");
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io::IoError("cannot write " + path.string());
    out << text;
}

void emit_report(const json& report, const std::string& out) {
    if (out.empty()) {
        std::cout << report.dump(2) << "\n";
    } else {
        write_text(out, report.dump(2) + "\n");
        std::cerr << "report written to " << out << "\n";
    }
}

// ---- run ---------------------------------------------------------------------

struct RunOpts {
    std::string expert = "tty";
    int iterations = 2;
    std::string out = "annoteer-run";
    std::string session_id = "run";
    bool hide_model = false;
};

int cmd_run(const CommonOpts& o, const RunOpts& r) {
    if (r.iterations < 0) throw ConfigError("--iterations must be >= 0");
    const auto ctx = resolve(o);
    const auto params = params_of(o);
    const auto expert = expert_for(r.expert, ctx, !r.hide_model);
    const auto prompts = prompts_of(o);
    const fs::path out = r.out;
    fs::create_directories(out);
    fs::remove(out / "events.jsonl");
    io::EventLog log(out / "events.jsonl");
    samplease::Engine engine{std::make_shared<const llm::Gateway>(ctx.make_backend()), prompts, classify_of(o),
                             log.sink()};
    const auto session =
        experiments::run_session(engine, ctx.corpus, ctx.task, o.seed, params, r.session_id, expert, r.iterations);
    io::export_session(session, out);
    write_text(out / "summary.json", io::session_summary_json(session).dump(2) + "\n");
    std::cout << "session " << session.id() << ": " << session.prompt_history().size() << " prompt versions, "
              << session.labeled_data().size() << " labeled records, results under prompt P_"
              << session.final_prompt_version() << "\n"
              << "artifacts in " << out.string() << "\n";
    return 0;
}

// ---- classify with a fixed prompt ---------------------------------------------

int cmd_classify(const CommonOpts& o, const std::string& prompt_file, const std::string& out) {
    std::ifstream in(prompt_file);
    if (!in) throw ConfigError("cannot open prompt file " + prompt_file);
    std::stringstream ss;
    ss << in.rdbuf();
    const auto ctx = resolve(o);
    PromptVersion p;
    p.text = ss.str();
    llm::Gateway gateway(ctx.make_backend());
    const auto outcomes = classify::classify_all(ctx.corpus->records(), p, ctx.task, gateway, classify_of(o));
    write_text(out, io::results_csv_text(outcomes, 0));
    long failures = 0;
    for (const auto& oc : outcomes) failures += is_parse_failure(oc.predicted_class) ? 1 : 0;
    std::cout << outcomes.size() << " records classified, " << failures << " parse failures, written to " << out << "\n";
    return 0;
}

// ---- experiments ---------------------------------------------------------------

struct ExperimentOpts {
    std::string truth;
    int runs = 6;
    int iterations = 2;
    int resamples = stats::kDefaultResamples;
    int permutations = stats::kDefaultPermutations;
    std::vector<std::string> strategies = {"samplease", "random"};
    std::string out;
};

experiments::ExperimentConfig experiment_config(const CommonOpts& o, const ExperimentOpts& e, const Context& ctx) {
    experiments::ExperimentConfig c;
    c.corpus = ctx.corpus;
    c.task = ctx.task;
    c.truth = truth_for(e.truth, ctx);
    auto make = ctx.make_backend;
    c.backend = [make](std::size_t) { return make(); };
    c.params = params_of(o);
    c.seed = o.seed;
    c.runs = e.runs;
    c.resamples = e.resamples;
    c.permutations = e.permutations;
    c.classify = classify_of(o);
    return c;
}

int cmd_experiment_refinement(const CommonOpts& o, const ExperimentOpts& e) {
    const auto ctx = resolve(o);
    const auto report = experiments::experiment_refinement(experiment_config(o, e, ctx), e.iterations);
    std::cout << "version  mean_macro_f1  ci_low   ci_high\n";
    for (std::size_t v = 0; v < report.mean_macro_f1.size(); ++v) {
        std::printf("P_%-6zu %.4f         %.4f   %.4f\n", v, report.mean_macro_f1[v], report.macro_f1_ci[v].lower_95,
                    report.macro_f1_ci[v].upper_95);
    }
    std::printf("P_%d - P_0: %+.4f, permutation p = %.4g, monotone in every run: %s\n", report.iterations,
                report.first_vs_last.statistic, report.first_vs_last.p_value,
                report.monotone_every_run ? "yes" : "no");
    if (!e.out.empty()) emit_report(experiments::to_json(report), e.out);
    return 0;
}

int cmd_experiment_sampling(const CommonOpts& o, const ExperimentOpts& e) {
    const auto ctx = resolve(o);
    std::vector<SamplingStrategy> strategies;
    for (const auto& s : e.strategies) strategies.push_back(sampling_strategy_from_string(s));
    const auto cmp = experiments::experiment_sampling(experiment_config(o, e, ctx), strategies);
    for (const auto& s : cmp.strategies) {
        std::cout << to_string(s.strategy) << ":";
        for (const auto& [m, v] : s.medians) std::printf("  median %s=%.4f", m.c_str(), v);
        std::cout << "\n";
    }
    if (cmp.mann_whitney) {
        for (const auto& [m, t] : *cmp.mann_whitney) {
            std::printf("mann-whitney %s: U=%.1f p=%.4g (%s)\n", m.c_str(), t.u, t.p_two_sided,
                        t.exact ? "exact" : "normal approximation");
        }
    }
    if (!e.out.empty()) emit_report(experiments::to_json(cmp), e.out);
    return 0;
}

// ---- evaluate ------------------------------------------------------------------

struct EvaluateOpts {
    std::string results;
    std::string truth;
    std::string labels;
    std::vector<std::string> slice_cols;
    std::vector<std::string> floors;
    std::vector<std::string> classes;
    int resamples = stats::kDefaultResamples;
    std::uint64_t seed = 1;
    long min_slice = stats::kDefaultMinSliceSize;
    std::string out;
};

int cmd_evaluate(const CommonOpts& o, const EvaluateOpts& e) {
    if (e.results.empty() || e.truth.empty()) throw ConfigError("--results and --truth are required");
    std::vector<std::pair<stats::MetricSelector, double>> floors;
    for (const auto& f : e.floors) {
        const auto eq = f.find('=');
        if (eq == std::string::npos) throw ConfigError("--floor expects metric=value, got '" + f + "'");
        try {
            floors.emplace_back(stats::MetricSelector::parse(f.substr(0, eq)), std::stod(f.substr(eq + 1)));
        } catch (const std::invalid_argument&) {
            throw ConfigError("bad floor value in '" + f + "'");
        } catch (const stats::StatsError& err) {
            throw ConfigError(err.what());
        }
    }
    const auto rows = io::load_results_csv(e.results);
    auto truth = load_labels_any(e.truth);
    std::set<std::string> exclude;
    if (!e.labels.empty()) {
        for (const auto& [id, l] : io::load_label_csv(e.labels)) exclude.insert(id);
    }
    std::vector<std::string> classes = e.classes;
    if (classes.empty()) {
        std::set<std::string> seen;
        for (const auto& [id, l] : truth) seen.insert(trim(l));
        classes.assign(seen.begin(), seen.end());
    }
    const ClassificationTask task(classes, "evaluation");
    truth = canonical_truth(std::move(truth), task, e.truth);

    std::map<std::string, const io::ResultRow*> by_id;
    for (const auto& r : rows) by_id[r.record_id] = &r;
    std::vector<std::string> missing;
    for (const auto& [id, l] : truth) {
        if (!by_id.count(id)) missing.push_back(id);
    }
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 20); ++i) list += (i ? ", " : "") + missing[i];
        throw ConfigError("IdMismatch: " + std::to_string(missing.size()) + " truth ids have no result: " + list);
    }

    std::optional<Corpus> corpus;
    if (!e.slice_cols.empty()) {
        if (o.corpus.empty()) throw ConfigError("--slice-cols needs --corpus with --meta-cols");
        corpus = io::load_corpus_csv(o.corpus, columns_of(o));
    }
    stats::LabeledRun run;
    std::vector<std::string> ids;
    for (const auto& [id, label] : truth) {
        if (exclude.count(id)) continue;
        ids.push_back(id);
        run.truths.push_back(label);
        auto pred = task.canonical(by_id.at(id)->predicted_class);
        run.predictions.push_back(pred ? *pred : by_id.at(id)->predicted_class);
    }
    if (run.truths.empty()) throw ConfigError("no records left to evaluate");
    const auto report = stats::metrics(stats::confusion_matrix(task.classes(), run.truths, run.predictions));
    json out = {{"n_truth", truth.size()},
                {"n_excluded_labeled", truth.size() - ids.size()},
                {"n_evaluated", ids.size()},
                {"metrics", io::to_json(report)}};
    json cis = json::object();
    for (const char* m : {"macro_f1", "accuracy"}) {
        cis[m] = io::to_json(
            stats::bootstrap_ci_pooled(task.classes(), {run}, stats::MetricSelector::parse(m), e.resamples, e.seed));
    }
    out["confidence_intervals"] = std::move(cis);
    if (corpus) {
        json slices = json::object();
        for (const auto& col : e.slice_cols) {
            std::vector<std::string> groups;
            for (const auto& id : ids) {
                const auto* rec = corpus->find(id);
                if (!rec) throw ConfigError("IdMismatch: record " + id + " is not in the corpus");
                auto it = rec->metadata.find(col);
                if (it == rec->metadata.end() && std::find(o.meta_cols.begin(), o.meta_cols.end(), col) == o.meta_cols.end()) {
                    throw ConfigError("slice column '" + col + "' is not among --meta-cols");
                }
                groups.push_back(it == rec->metadata.end() ? std::string{} : it->second);
            }
            slices[col] = io::to_json(stats::bias_slices(task.classes(), run.truths, run.predictions, groups, e.min_slice));
        }
        out["bias_slices"] = std::move(slices);
    }
    json gate = json::array();
    bool failed = false;
    for (const auto& [sel, floor] : floors) {
        const double v = sel(report);
        const bool pass = v >= floor;
        failed |= !pass;
        gate.push_back({{"metric", sel.name()}, {"value", v}, {"floor", floor}, {"pass", pass}});
    }
    if (!floors.empty()) out["gate"] = gate;
    emit_report(out, e.out);
    if (failed) {
        for (const auto& g : gate) {
            if (!g["pass"].get<bool>()) {
                std::cerr << "gate failed: " << g["metric"].get<std::string>() << " = " << g["value"].get<double>()
                          << " < " << g["floor"].get<double>() << "\n";
            }
        }
        throw GateFailure("metric floor not met");
    }
    return 0;
}

// ---- serve -----------------------------------------------------------------------

struct ServeOpts {
    std::string listen;
    std::string data_dir = "annoteer-data";
    std::string static_dir;
    bool logical_clock = false;
};

int cmd_serve(const CommonOpts& o, const ServeOpts& s) {
    const auto addr = s.listen.empty() ? service::ListenAddress::from_environment() : service::ListenAddress::parse(s.listen);
    service::BackendProvider provider;
    if (starts_with(o.backend, "sim:")) {
        auto world = std::make_shared<const sim::SimWorld>(sim::SimWorld::load(o.backend.substr(4)));
        provider = [world](const Corpus&, const ClassificationTask&) { return std::make_shared<sim::SimBackend>(world); };
    } else if (starts_with(o.backend, "mock")) {
        json script = json::object();
        if (starts_with(o.backend, "mock:")) {
            std::ifstream in(o.backend.substr(5));
            if (!in) throw ConfigError("cannot open mock script " + o.backend.substr(5));
            script = json::parse(in);
        } else if (o.backend != "mock") {
            throw ConfigError("unknown backend '" + o.backend + "'");
        }
        const auto seed = o.seed;
        provider = [script, seed](const Corpus& corpus, const ClassificationTask& task) -> std::shared_ptr<llm::Backend> {
            llm::MockOptions mo;
            mo.seed = seed;
            mo.classes = task.classes();
            return llm::ScriptedBackend::from_json(script, &corpus, mo);
        };
    } else if (o.backend == "openai-compatible") {
        auto cfg = llm::OpenAiConfig::from_environment();
        if (!o.model.empty()) cfg.model = o.model;
        if (cfg.api_key.empty()) throw ConfigError("ANNOTEER_API_KEY is not set");
        auto shared = std::make_shared<llm::OpenAiBackend>(cfg);
        provider = [shared](const Corpus&, const ClassificationTask&) { return shared; };
    } else {
        throw ConfigError("unknown backend '" + o.backend + "'");
    }
    service::ServiceConfig cfg;
    cfg.data_dir = s.data_dir;
    if (const char* tok = std::getenv("ANNOTEER_AUTH_TOKEN"); tok && *tok) cfg.auth_token = tok;
    if (!s.static_dir.empty()) cfg.static_dir = s.static_dir;
    cfg.classify = classify_of(o);
    cfg.logical_clock = s.logical_clock;
    service::Service svc(cfg, provider);
    for (const auto& problem : svc.load_existing()) std::cerr << "skipped session log " << problem << "\n";
    std::cerr << "annoteer listening on " << addr.host << ":" << addr.port << " (" << svc.session_count()
              << " sessions restored)\n";
    svc.run(addr.host, addr.port);
    return 0;
}

// ---- gen-sim / replay -------------------------------------------------------------

struct GenSimOpts {
    std::string out = "world.json";
    std::string corpus_csv;
    std::string truth_csv;
    sim::WorldSpec spec;
};

int cmd_gen_sim(const GenSimOpts& g) {
    const auto world = sim::SimWorld::generate(g.spec);
    world.save(g.out);
    if (!g.corpus_csv.empty()) {
        std::string csv = io::csv_line({"id", "text", "Sex", "Race"});
        for (const auto& r : world.records()) {
            csv += io::csv_line({r.id, r.text, r.metadata.at("Sex"), r.metadata.at("Race")});
        }
        write_text(g.corpus_csv, csv);
    }
    if (!g.truth_csv.empty()) {
        std::string csv = io::csv_line({"id", "label"});
        for (const auto& r : world.records()) csv += io::csv_line({r.id, r.true_label});
        write_text(g.truth_csv, csv);
    }
    std::cout << world.records().size() << " synthetic records written to " << g.out << "\n";
    return 0;
}

int cmd_replay(const std::string& log, const std::string& out, bool salvage) {
    const auto loaded = io::load_session(log, salvage);
    if (loaded.corrupt_line) std::cerr << "dropped events from line " << *loaded.corrupt_line << " on\n";
    if (!out.empty()) {
        if (loaded.session.status() == SessionStatus::Finalized) {
            io::export_session(loaded.session, out);
        } else {
            std::cerr << "session is not finalized; only summary.json written\n";
        }
        write_text(fs::path(out) / "summary.json", io::session_summary_json(loaded.session).dump(2) + "\n");
    }
    std::cout << io::session_summary_json(loaded.session).dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"annoteer: expert-in-the-loop LLM text classification"};
    app.set_config("--config", "", "TOML/INI file mirroring the command-line flags");
    app.require_subcommand(1);

    CommonOpts common;
    RunOpts run_opts;
    ExperimentOpts exp_opts;
    EvaluateOpts eval_opts;
    ServeOpts serve_opts;
    GenSimOpts gen_opts;
    std::string prompt_file, classify_out = "results.csv", replay_log, replay_out;
    bool replay_salvage = false;
    std::function<int()> action;

    auto* run = app.add_subcommand("run", "Run a labeling session: start, iterate, finalize, export");
    add_common(run, common, true);
    run->add_option("--expert", run_opts.expert, "tty | script:PATH | oracle:PATH | oracle")->capture_default_str();
    run->add_option("--iterations", run_opts.iterations, "Labeling iterations")->capture_default_str();
    run->add_option("--out", run_opts.out, "Output directory")->capture_default_str();
    run->add_option("--session-id", run_opts.session_id, "Session id")->capture_default_str();
    run->add_flag("--hide-model-output", run_opts.hide_model, "Do not show model labels to a tty expert");
    run->callback([&] { action = [&] { return cmd_run(common, run_opts); }; });

    auto* cls = app.add_subcommand("classify", "Classify the corpus with a fixed, user-written prompt");
    add_common(cls, common, false);
    cls->add_option("--prompt-file", prompt_file, "Prompt text file")->required();
    cls->add_option("--out", classify_out, "Results CSV")->capture_default_str();
    cls->callback([&] { action = [&] { return cmd_classify(common, prompt_file, classify_out); }; });

    auto add_experiment_opts = [&](CLI::App* sub) {
        add_common(sub, common, true);
        sub->add_option("--truth", exp_opts.truth, "Ground-truth labels (CSV id,label or JSON map)");
        sub->add_option("--runs", exp_opts.runs, "Independent runs")->capture_default_str();
        sub->add_option("--resamples", exp_opts.resamples, "Bootstrap resamples")->capture_default_str();
        sub->add_option("--permutations", exp_opts.permutations, "Permutation draws")->capture_default_str();
        sub->add_option("--out", exp_opts.out, "JSON report path");
    };
    auto* refine = app.add_subcommand("experiment-refinement", "P_0 -> P_k on a shared held-out set");
    add_experiment_opts(refine);
    refine->add_option("--iterations", exp_opts.iterations, "Refinement iterations")->capture_default_str();
    refine->callback([&] { action = [&] { return cmd_experiment_refinement(common, exp_opts); }; });

    auto* sampling = app.add_subcommand("experiment-sampling", "Lowest-confidence versus random selection");
    add_experiment_opts(sampling);
    sampling->add_option("--strategies", exp_opts.strategies, "samplease,random")
        ->delimiter(',')
        ->check(CLI::IsMember({"samplease", "random"}));
    sampling->callback([&] { action = [&] { return cmd_experiment_sampling(common, exp_opts); }; });

    auto* eval = app.add_subcommand("evaluate", "Metrics, confidence intervals, slices and floor gates");
    add_corpus_opts(eval, common);
    eval->add_option("--results", eval_opts.results, "results.csv from a run")->required();
    eval->add_option("--truth", eval_opts.truth, "Ground-truth labels")->required();
    eval->add_option("--labels", eval_opts.labels, "labels.csv whose records are excluded");
    eval->add_option("--classes", eval_opts.classes, "Class list (default: labels found in truth)")->delimiter(',');
    eval->add_option("--slice-cols", eval_opts.slice_cols, "Metadata columns to slice by")->delimiter(',');
    eval->add_option("--min-slice-size", eval_opts.min_slice, "Groups below this size are flagged")->capture_default_str();
    eval->add_option("--floor", eval_opts.floors, "metric=value, e.g. macro_f1=0.9 (repeatable)");
    eval->add_option("--resamples", eval_opts.resamples, "Bootstrap resamples")->capture_default_str();
    eval->add_option("--seed", eval_opts.seed, "Bootstrap seed")->capture_default_str();
    eval->add_option("--out", eval_opts.out, "JSON report path (default stdout)");
    eval->callback([&] { action = [&] { return cmd_evaluate(common, eval_opts); }; });

    auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
    serve->add_option("--backend", common.backend, "openai-compatible | mock[:SCRIPT] | sim:WORLD")->capture_default_str();
    serve->add_option("--model", common.model, "Model id for openai-compatible backends");
    serve->add_option("--seed", common.seed, "Mock backend seed")->capture_default_str();
    serve->add_option("--max-in-flight", common.max_in_flight, "Concurrent completion requests")->capture_default_str();
    serve->add_option("--listen", serve_opts.listen, "host:port (default ANNOTEER_LISTEN or 127.0.0.1:8787)");
    serve->add_option("--data-dir", serve_opts.data_dir, "Session log directory")->capture_default_str();
    serve->add_option("--static-dir", serve_opts.static_dir, "Built UI served under /ui/");
    serve->add_flag("--logical-clock", serve_opts.logical_clock, "Deterministic prompt timestamps");
    serve->callback([&] { action = [&] { return cmd_serve(common, serve_opts); }; });

    auto* gen = app.add_subcommand("gen-sim", "Generate a synthetic world for the sim backend");
    gen->add_option("--out", gen_opts.out, "World JSON")->capture_default_str();
    gen->add_option("--records", gen_opts.spec.n_records, "Records")->capture_default_str();
    gen->add_option("--clusters", gen_opts.spec.n_clusters, "Clusters")->capture_default_str();
    gen->add_option("--hard-fraction", gen_opts.spec.hard_cluster_fraction, "Share of hard clusters")->capture_default_str();
    gen->add_option("--seed", gen_opts.spec.seed, "World seed")->capture_default_str();
    gen->add_option("--corpus-csv", gen_opts.corpus_csv, "Also write the corpus as CSV");
    gen->add_option("--truth-csv", gen_opts.truth_csv, "Also write the ground truth as CSV");
    gen->callback([&] { action = [&] { return cmd_gen_sim(gen_opts); }; });

    auto* replay = app.add_subcommand("replay", "Rebuild a session from its event log and re-export");
    replay->add_option("--log", replay_log, "events.jsonl")->required();
    replay->add_option("--out", replay_out, "Export directory");
    replay->add_flag("--salvage", replay_salvage, "Keep events before a corrupt line");
    replay->callback([&] { action = [&] { return cmd_replay(replay_log, replay_out, replay_salvage); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        return action();
    } catch (const GateFailure&) {
        return kExitGate;
    } catch (const llm::GatewayError& e) {
        std::cerr << "gateway failure: " << e.what() << "\n";
        return kExitGateway;
    } catch (const prompt::GenerationRejected& e) {
        std::cerr << "gateway failure: " << e.what() << "\n";
        return kExitGateway;
    } catch (const samplease::BatchBuildFailed& e) {
        std::cerr << "gateway failure: " << e.what() << "\n";
        return kExitGateway;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ValidationError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const io::CsvError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const io::IoError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const io::CorruptLog& e) {
        std::cerr << "corrupt event log at line " << e.line() << ": " << e.what() << "\n";
        return kExitConfig;
    } catch (const io::VersionMismatch& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const json::exception& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
