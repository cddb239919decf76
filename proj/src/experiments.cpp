#include "annoteer/experiments.hpp"

#include <algorithm>
#include <numeric>

#include "annoteer/io.hpp"
#include "annoteer/rng.hpp"

namespace annoteer::experiments {

using nlohmann::json;

Expert oracle_expert(std::map<std::string, std::string> truth) {
    auto shared = std::make_shared<const std::map<std::string, std::string>>(std::move(truth));
    return [shared](const samplease::SampleBatch& batch, const ClassificationTask&) {
        std::map<std::string, std::string> labels;
        for (const auto& item : batch.items) {
            auto it = shared->find(item.record_id);
            if (it == shared->end()) throw ValidationError("no ground truth for record " + item.record_id);
            labels[item.record_id] = it->second;
        }
        return labels;
    };
}

samplease::Session run_session(const samplease::Engine& engine, std::shared_ptr<const Corpus> corpus,
                               const ClassificationTask& task, std::uint64_t seed, const SamplingParams& params,
                               const std::string& session_id, const Expert& expert, int iterations,
                               bool finalize) {
    auto session = samplease::start_session(engine, std::move(corpus), task, seed, params, session_id);
    for (int i = 0; i < iterations; ++i) {
        const auto batch = samplease::build_sample_batch(session, engine);
        samplease::submit_labels(session, expert(batch, session.task()), engine);
    }
    if (finalize) samplease::finalize(session, engine);
    return session;
}

std::uint64_t run_seed(std::uint64_t base_seed, std::size_t run) {
    return Rng({base_seed, stream_tag("experiment-run"), run}).next();
}

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

struct RunContext {
    std::shared_ptr<const llm::Gateway> gateway;
    samplease::Engine engine;
};

RunContext make_context(const ExperimentConfig& config, std::size_t run) {
    if (!config.backend) throw ValidationError("experiment needs a backend factory");
    auto gateway = std::make_shared<const llm::Gateway>(config.backend(run), config.retry);
    samplease::Engine engine{gateway, prompt::PromptEngine{prompt::MetaPromptTemplates::defaults(),
                                                           prompt::logical_clock()},
                             config.classify, {}};
    return {gateway, std::move(engine)};
}

void check_config(const ExperimentConfig& config) {
    if (!config.corpus) throw ValidationError("experiment needs a corpus");
    if (config.runs < 1) throw ValidationError("experiment needs at least one run");
    std::vector<std::string> missing;
    for (const auto& r : config.corpus->records()) {
        if (!config.truth.count(r.id)) missing.push_back(r.id);
    }
    if (!missing.empty()) {
        throw ValidationError("ground truth missing for " + std::to_string(missing.size()) + " records, first " +
                              missing.front());
    }
    for (const auto& [id, label] : config.truth) {
        if (!config.task.has_class(label)) throw ValidationError("truth label '" + label + "' for " + id + " is not a class");
    }
}

std::vector<const Record*> heldout_records(const samplease::Session& session) {
    std::vector<const Record*> out;
    for (const auto& r : session.corpus().records()) {
        if (!session.is_labeled(r.id)) out.push_back(&r);
    }
    return out;
}

RunEvaluation evaluate(const ExperimentConfig& config, const RunContext& ctx, const samplease::Session& session,
                       const std::vector<const Record*>& heldout, const PromptVersion& version, std::size_t run,
                       std::uint64_t seed) {
    RunEvaluation ev;
    ev.run = run;
    ev.seed = seed;
    ev.strategy = session.sampling_params().strategy;
    ev.prompt_version = version.version_index;
    ev.n_labeled = session.labeled_data().size();
    ev.n_fewshots = version.fewshot_ids.size();
    const auto outcomes = classify::classify_all(heldout, version, config.task, *ctx.gateway, config.classify);
    for (std::size_t i = 0; i < heldout.size(); ++i) {
        ev.heldout_ids.push_back(heldout[i]->id);
        ev.predictions.truths.push_back(config.truth.at(heldout[i]->id));
        ev.predictions.predictions.push_back(outcomes[i].predicted_class);
    }
    ev.report = stats::metrics(
        stats::confusion_matrix(config.task.classes(), ev.predictions.truths, ev.predictions.predictions));
    return ev;
}

}  // namespace

RefinementReport experiment_refinement(const ExperimentConfig& config, int iterations) {
    check_config(config);
    if (iterations < 1) throw ValidationError("refinement needs at least one iteration");
    RefinementReport report;
    report.iterations = iterations;
    auto params = config.params;
    params.strategy = SamplingStrategy::LowestConfidence;
    const auto expert = oracle_expert(config.truth);

    for (std::size_t run = 0; run < static_cast<std::size_t>(config.runs); ++run) {
        const auto seed = run_seed(config.seed, run);
        const auto ctx = make_context(config, run);
        const auto session = run_session(ctx.engine, config.corpus, config.task, seed, params,
                                         "refinement-" + std::to_string(run), expert, iterations, false);
        const auto heldout = heldout_records(session);
        std::vector<RunEvaluation> per_version;
        for (const auto& version : session.prompt_history()) {
            per_version.push_back(evaluate(config, ctx, session, heldout, version, run, seed));
        }
        for (std::size_t v = 1; v < per_version.size(); ++v) {
            if (per_version[v].report.macro.f1 < per_version[v - 1].report.macro.f1) report.monotone_every_run = false;
        }
        report.runs.push_back(std::move(per_version));
    }

    const auto n_versions = static_cast<std::size_t>(iterations) + 1;
    std::vector<double> first, last;
    for (std::size_t v = 0; v < n_versions; ++v) {
        double sum = 0.0;
        std::vector<stats::LabeledRun> runs;
        for (const auto& r : report.runs) {
            sum += r[v].report.macro.f1;
            runs.push_back(r[v].predictions);
        }
        report.mean_macro_f1.push_back(sum / static_cast<double>(report.runs.size()));
        report.macro_f1_ci.push_back(stats::bootstrap_ci_pooled(config.task.classes(), runs, stats::MetricSelector{},
                                                                config.resamples, config.seed));
    }
    for (const auto& r : report.runs) {
        first.push_back(r.front().report.macro.f1);
        last.push_back(r.back().report.macro.f1);
        report.first_last_deltas.push_back(last.back() - first.back());
    }
    report.first_vs_last = stats::permutation_test(first, last, config.permutations, config.seed);
    return report;
}

SamplingComparison experiment_sampling(const ExperimentConfig& config, const std::vector<SamplingStrategy>& strategies) {
    check_config(config);
    if (strategies.empty()) throw ValidationError("no sampling strategy selected");
    SamplingComparison out;
    const auto expert = oracle_expert(config.truth);
    for (const auto strategy : strategies) {
        StrategySummary summary;
        summary.strategy = strategy;
        auto params = config.params;
        params.strategy = strategy;
        for (std::size_t run = 0; run < static_cast<std::size_t>(config.runs); ++run) {
            const auto seed = run_seed(config.seed, run);
            const auto ctx = make_context(config, run);
            const auto session =
                run_session(ctx.engine, config.corpus, config.task, seed, params,
                            std::string(to_string(strategy)) + "-" + std::to_string(run), expert, 1, false);
            summary.runs.push_back(
                evaluate(config, ctx, session, heldout_records(session), session.current_prompt(), run, seed));
        }
        for (const auto& metric : kComparedMetrics) {
            const auto sel = stats::MetricSelector::parse(metric);
            std::vector<double> values;
            for (const auto& r : summary.runs) values.push_back(sel(r.report));
            summary.medians[metric] = median(values);
        }
        out.strategies.push_back(std::move(summary));
    }

    const StrategySummary* low = nullptr;
    const StrategySummary* rnd = nullptr;
    for (const auto& s : out.strategies) {
        if (s.strategy == SamplingStrategy::LowestConfidence && !low) low = &s;
        if (s.strategy == SamplingStrategy::Random && !rnd) rnd = &s;
    }
    if (low && rnd) {
        std::map<std::string, stats::MannWhitneyResult> tests;
        for (const auto& metric : kComparedMetrics) {
            const auto sel = stats::MetricSelector::parse(metric);
            std::vector<double> a, b;
            for (const auto& r : low->runs) a.push_back(sel(r.report));
            for (const auto& r : rnd->runs) b.push_back(sel(r.report));
            tests[metric] = stats::mann_whitney_u(a, b);
        }
        out.mann_whitney = std::move(tests);
    }
    return out;
}

json to_json(const RunEvaluation& r) {
    return {{"run", r.run},
            {"seed", r.seed},
            {"strategy", to_string(r.strategy)},
            {"prompt_version", r.prompt_version},
            {"n_labeled", r.n_labeled},
            {"n_fewshots", r.n_fewshots},
            {"n_heldout", r.heldout_ids.size()},
            {"metrics", io::to_json(r.report)}};
}

json to_json(const RefinementReport& r) {
    json runs = json::array();
    for (const auto& per_version : r.runs) {
        json versions = json::array();
        for (const auto& ev : per_version) versions.push_back(to_json(ev));
        runs.push_back(std::move(versions));
    }
    json versions = json::array();
    for (std::size_t v = 0; v < r.mean_macro_f1.size(); ++v) {
        versions.push_back({{"prompt_version", v},
                            {"mean_macro_f1", r.mean_macro_f1[v]},
                            {"macro_f1_ci", io::to_json(r.macro_f1_ci[v])}});
    }
    return {{"experiment", "refinement"},
            {"iterations", r.iterations},
            {"versions", std::move(versions)},
            {"first_last_deltas", r.first_last_deltas},
            {"first_vs_last_permutation", io::to_json(r.first_vs_last)},
            {"monotone_every_run", r.monotone_every_run},
            {"runs", std::move(runs)}};
}

json to_json(const SamplingComparison& c) {
    json strategies = json::array();
    for (const auto& s : c.strategies) {
        json runs = json::array();
        for (const auto& r : s.runs) runs.push_back(to_json(r));
        strategies.push_back({{"strategy", to_string(s.strategy)}, {"medians", s.medians}, {"runs", std::move(runs)}});
    }
    json j = {{"experiment", "sampling"}, {"strategies", std::move(strategies)}};
    if (c.mann_whitney) {
        json tests = json::object();
        for (const auto& [metric, m] : *c.mann_whitney) tests[metric] = io::to_json(m);
        j["mann_whitney"] = std::move(tests);
    }
    return j;
}

}  // namespace annoteer::experiments
