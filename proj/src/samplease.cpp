#include "annoteer/samplease.hpp"

#include <algorithm>
#include <cmath>

#include "annoteer/rng.hpp"

namespace annoteer::samplease {

std::string_view event_type_name(const Event& event) {
    struct Visitor {
        std::string_view operator()(const SessionStarted&) const { return "SessionStarted"; }
        std::string_view operator()(const BatchBuilt&) const { return "BatchBuilt"; }
        std::string_view operator()(const LabelsSubmitted&) const { return "LabelsSubmitted"; }
        std::string_view operator()(const PromptAdvanced&) const { return "PromptAdvanced"; }
        std::string_view operator()(const Finalized&) const { return "Finalized"; }
    };
    return std::visit(Visitor{}, event);
}

std::string_view to_string(LabelError::Kind kind) {
    switch (kind) {
        case LabelError::Kind::UnknownRecordId: return "UnknownRecordId";
        case LabelError::Kind::IncompleteBatch: return "IncompleteBatch";
        case LabelError::Kind::InvalidClassLabel: return "InvalidClassLabel";
    }
    return "UnknownRecordId";
}

// ---- Session ----------------------------------------------------------------

bool Session::operator==(const Session& o) const {
    const bool corpus_eq = (corpus_ == o.corpus_) || (corpus_ && o.corpus_ && *corpus_ == *o.corpus_);
    return started_ == o.started_ && id_ == o.id_ && corpus_eq && task_ == o.task_ && prompts_ == o.prompts_ &&
           labeled_ == o.labeled_ && iteration_ == o.iteration_ && seed_ == o.seed_ && status_ == o.status_ &&
           params_ == o.params_ && pending_ == o.pending_ && warnings_ == o.warnings_ && draws_ == o.draws_ &&
           final_outcomes_ == o.final_outcomes_ && final_prompt_version_ == o.final_prompt_version_;
}

void Session::apply(const Event& event) {
    struct Applier {
        Session& s;

        void operator()(const SessionStarted& e) const {
            if (s.started_) throw StateError("session already started");
            if (e.schema_version != kSchemaVersion) throw StateError("unsupported schema version");
            if (!e.corpus) throw StateError("SessionStarted without corpus");
            if (e.initial_prompt.version_index != 0 || e.initial_prompt.parent_version) {
                throw StateError("initial prompt must be version 0 without parent");
            }
            s.started_ = true;
            s.id_ = e.session_id;
            s.corpus_ = e.corpus;
            s.task_ = e.task;
            s.seed_ = e.rng_seed;
            s.params_ = e.params;
            s.prompts_ = {e.initial_prompt};
            s.iteration_ = 0;
            s.status_ = SessionStatus::ReadyToSample;
        }

        void operator()(const BatchBuilt& e) const {
            require_started();
            if (s.status_ != SessionStatus::ReadyToSample) throw StateError("batch built while not ReadyToSample");
            if (e.iteration != s.iteration_) throw StateError("batch iteration does not match session");
            if (e.draw_index != s.draws_) throw StateError("batch draw index out of sequence");
            for (const auto& item : e.batch.items) {
                if (s.is_labeled(item.record_id)) throw StateError("batch contains labeled record " + item.record_id);
            }
            s.pending_ = e.batch;
            s.draws_ = e.draw_index + 1;
            for (const auto& w : e.warnings) s.warnings_.push_back(w);
            s.status_ = SessionStatus::AwaitingLabels;
        }

        void operator()(const LabelsSubmitted& e) const {
            require_started();
            if (s.status_ != SessionStatus::AwaitingLabels || !s.pending_) {
                throw StateError("labels submitted while no batch is pending");
            }
            if (e.labels.size() != s.pending_->items.size()) throw StateError("labels do not cover pending batch");
            for (const auto& l : e.labels) {
                if (!s.labeled_ids_.insert(l.record_id).second) {
                    throw StateError("record labeled twice: " + l.record_id);
                }
                s.labeled_.push_back(l);
            }
            s.pending_.reset();
            s.status_ = SessionStatus::ReadyToSample;
        }

        void operator()(const PromptAdvanced& e) const {
            require_started();
            if (s.status_ != SessionStatus::ReadyToSample) throw StateError("prompt advanced in wrong state");
            const auto& prev = s.prompts_.back();
            if (e.version.version_index != prev.version_index + 1 || e.version.parent_version != prev.version_index) {
                throw StateError("prompt lineage broken");
            }
            s.prompts_.push_back(e.version);
            s.iteration_ += 1;
        }

        void operator()(const Finalized& e) const {
            require_started();
            if (s.status_ == SessionStatus::AwaitingLabels) throw StateError("finalize while labels are pending");
            if (s.status_ == SessionStatus::Finalized) throw StateError("session already finalized");
            s.final_outcomes_ = e.outcomes;
            s.final_prompt_version_ = e.prompt_version;
            s.status_ = SessionStatus::Finalized;
        }

        void require_started() const {
            if (!s.started_) throw StateError("event before SessionStarted");
        }
    };
    std::visit(Applier{*this}, event);
}

Session Session::replay(const std::vector<Event>& events) {
    Session s;
    for (const auto& e : events) s.apply(e);
    return s;
}

// ---- helpers ----------------------------------------------------------------

namespace {

void commit(Session& session, const Engine& engine, std::vector<Event> events) {
    // Validate against a copy first so a rejected event never reaches the log.
    Session next = session;
    for (const auto& e : events) next.apply(e);
    if (engine.sink) engine.sink(events);
    session = std::move(next);
}

BatchItem make_item(const ClassificationOutcome& o, const Corpus& corpus, const std::string& bucket) {
    const auto* rec = corpus.find(o.record_id);
    return {o.record_id, rec ? rec->text : std::string{}, o.predicted_class, o.confidence, bucket};
}

bool by_confidence_then_id(const ClassificationOutcome* a, const ClassificationOutcome* b) {
    if (a->confidence != b->confidence) return a->confidence < b->confidence;
    return a->record_id < b->record_id;
}

// Bucket names in order: task classes, then the parse-failure pseudo-bucket.
std::vector<std::string> bucket_names(const ClassificationTask& task) {
    auto names = task.classes();
    names.emplace_back(kParseFailure);
    return names;
}

std::map<std::string, std::vector<const ClassificationOutcome*>> bucketize(
    const std::vector<ClassificationOutcome>& outcomes, const ClassificationTask& task) {
    std::map<std::string, std::vector<const ClassificationOutcome*>> buckets;
    for (const auto& o : outcomes) {
        if (!o.ok()) continue;
        std::string key = std::string(kParseFailure);
        if (!is_parse_failure(o.predicted_class)) {
            if (auto c = task.canonical(o.predicted_class)) key = *c;
        }
        buckets[key].push_back(&o);
    }
    return buckets;
}

}  // namespace

// ---- operations ---------------------------------------------------------------

Session start_session(const Engine& engine, std::shared_ptr<const Corpus> corpus, ClassificationTask task,
                      std::uint64_t rng_seed, SamplingParams params, std::string session_id) {
    if (!corpus) throw ValidationError("start_session needs a corpus");
    if (auto report = validate_corpus(*corpus); !report.ok()) {
        throw ValidationError("invalid corpus: " + report.summary());
    }
    if (auto report = validate_sampling_params(params); !report.ok()) {
        throw ValidationError("invalid sampling parameters: " + report.summary());
    }
    auto p0 = prompt::generate_initial_prompt(engine.prompts, task, *corpus, *engine.gateway, rng_seed);
    SessionStarted ev;
    ev.session_id = std::move(session_id);
    ev.corpus = std::move(corpus);
    ev.task = std::move(task);
    ev.rng_seed = rng_seed;
    ev.params = params;
    ev.initial_prompt = std::move(p0);
    Session s;
    commit(s, engine, {std::move(ev)});
    return s;
}

std::size_t subsample_size(double fraction, std::size_t pool) {
    if (pool == 0) return 0;
    // The epsilon absorbs representation error such as 0.1 * 1000 = 100.00000000000001.
    const double raw = std::ceil(fraction * static_cast<double>(pool) - 1e-9);
    const auto n = static_cast<std::size_t>(std::max(1.0, raw));
    return std::min(n, pool);
}

std::vector<const Record*> draw_subsample(const Session& session) {
    return draw_subsample(session, session.draws());
}

std::vector<const Record*> draw_subsample(const Session& session, std::uint64_t draw_index) {
    std::vector<const Record*> pool;
    for (const auto& r : session.corpus().records()) {
        if (!session.is_labeled(r.id)) pool.push_back(&r);
    }
    if (pool.empty()) throw EmptyPool("every record is already labeled");
    const auto k = subsample_size(session.sampling_params().sample_fraction, pool.size());
    Rng rng({session.rng_seed(), stream_tag("subsample"), draw_index});
    auto picked = rng.choose(pool.size(), k);
    std::sort(picked.begin(), picked.end());
    std::vector<const Record*> out;
    out.reserve(picked.size());
    for (auto i : picked) out.push_back(pool[i]);
    return out;
}

std::vector<BatchItem> select_lowest_confidence(const std::vector<ClassificationOutcome>& outcomes,
                                                const ClassificationTask& task, const Corpus& corpus, int quota) {
    auto buckets = bucketize(outcomes, task);
    std::vector<BatchItem> items;
    for (const auto& name : bucket_names(task)) {
        auto it = buckets.find(name);
        if (it == buckets.end()) continue;
        auto& members = it->second;
        const auto take = std::min<std::size_t>(members.size(), static_cast<std::size_t>(quota));
        std::partial_sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end(),
                          by_confidence_then_id);
        for (std::size_t i = 0; i < take; ++i) items.push_back(make_item(*members[i], corpus, name));
    }
    return items;
}

std::vector<BatchItem> select_random(const std::vector<ClassificationOutcome>& outcomes,
                                     const ClassificationTask& task, const Corpus& corpus, int quota,
                                     std::uint64_t rng_seed, std::uint64_t draw_index) {
    const auto target = select_lowest_confidence(outcomes, task, corpus, quota).size();
    auto buckets = bucketize(outcomes, task);
    // Flatten in bucket order so the draw does not depend on outcome order.
    std::vector<std::pair<std::string, const ClassificationOutcome*>> candidates;
    for (const auto& name : bucket_names(task)) {
        auto it = buckets.find(name);
        if (it == buckets.end()) continue;
        auto members = it->second;
        std::sort(members.begin(), members.end(),
                  [](auto* a, auto* b) { return a->record_id < b->record_id; });
        for (auto* m : members) candidates.emplace_back(name, m);
    }
    Rng rng({rng_seed, stream_tag("random-selection"), draw_index});
    auto picked = rng.choose(candidates.size(), target);
    std::sort(picked.begin(), picked.end());
    std::vector<BatchItem> items;
    items.reserve(picked.size());
    for (auto i : picked) items.push_back(make_item(*candidates[i].second, corpus, candidates[i].first));
    return items;
}

SampleBatch build_sample_batch(Session& session, const Engine& engine) {
    if (session.status() != SessionStatus::ReadyToSample) {
        throw StateError("cannot build a batch while session is " + std::string(to_string(session.status())));
    }
    const auto draw_index = session.draws();
    const auto subsample = draw_subsample(session, draw_index);
    auto outcomes = classify::classify_all(subsample, session.current_prompt(), session.task(), *engine.gateway,
                                           engine.classify);
    const auto failed = static_cast<std::size_t>(
        std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return !o.ok(); }));
    if (failed == outcomes.size()) {
        throw BatchBuildFailed("every classification in the subsample failed: " + outcomes.front().error.value_or(""));
    }

    const auto& params = session.sampling_params();
    SampleBatch batch;
    batch.iteration = session.iteration();
    batch.created_from_prompt = session.current_prompt().version_index;
    batch.items = params.strategy == SamplingStrategy::Random
                      ? select_random(outcomes, session.task(), session.corpus(), params.per_class_quota,
                                      session.rng_seed(), draw_index)
                      : select_lowest_confidence(outcomes, session.task(), session.corpus(), params.per_class_quota);

    BatchBuilt ev;
    ev.iteration = session.iteration();
    ev.draw_index = draw_index;
    for (const auto* r : subsample) ev.subsample_ids.push_back(r->id);
    if (failed > 0) {
        ev.warnings.push_back("iteration " + std::to_string(session.iteration()) + ": " + std::to_string(failed) +
                              " subsample records failed classification and were skipped");
    }
    for (const auto& c : session.task().classes()) {
        const bool any = std::any_of(batch.items.begin(), batch.items.end(),
                                     [&](const BatchItem& i) { return i.class_bucket == c; });
        if (!any) {
            ev.warnings.push_back("iteration " + std::to_string(session.iteration()) + ": no candidates predicted as " +
                                  c);
        }
    }
    ev.outcomes = std::move(outcomes);
    ev.batch = batch;
    commit(session, engine, {std::move(ev)});
    return batch;
}

std::vector<prompt::FewShotExample> mismatched(const SampleBatch& batch,
                                               const std::map<std::string, std::string>& canonical_labels) {
    std::vector<prompt::FewShotExample> out;
    for (const auto& item : batch.items) {
        const auto& expert = canonical_labels.at(item.record_id);
        if (item.model_label != expert) out.push_back({item.record_id, item.text, item.model_label, expert});
    }
    return out;
}

IterationOutcome submit_labels(Session& session, const std::map<std::string, std::string>& labels,
                               const Engine& engine) {
    if (session.status() != SessionStatus::AwaitingLabels || !session.pending_batch()) {
        throw StateError("no batch is awaiting labels");
    }
    const auto& batch = *session.pending_batch();
    std::set<std::string> batch_ids;
    for (const auto& i : batch.items) batch_ids.insert(i.record_id);
    for (const auto& [id, label] : labels) {
        if (!batch_ids.count(id)) {
            throw LabelError(LabelError::Kind::UnknownRecordId, "record " + id + " is not in the pending batch");
        }
    }
    for (const auto& id : batch_ids) {
        if (!labels.count(id)) {
            throw LabelError(LabelError::Kind::IncompleteBatch, "no label for pending record " + id);
        }
    }
    std::map<std::string, std::string> canonical;
    for (const auto& [id, label] : labels) {
        auto c = session.task().canonical(label);
        if (!c) {
            throw LabelError(LabelError::Kind::InvalidClassLabel,
                             "label \"" + label + "\" for record " + id + " is not a task class");
        }
        canonical.emplace(id, *c);
    }

    IterationOutcome result;
    result.few_shots = mismatched(batch, canonical);

    LabelsSubmitted labels_ev;
    labels_ev.iteration = session.iteration();
    for (const auto& item : batch.items) {
        labels_ev.labels.push_back(
            {item.record_id, canonical.at(item.record_id), item.model_label, item.confidence, session.iteration()});
    }
    for (const auto& fs : result.few_shots) labels_ev.fewshot_ids.push_back(fs.record_id);

    PromptAdvanced advance;
    const auto& previous = session.current_prompt();
    if (result.few_shots.empty()) {
        advance.version = previous;
        advance.version.version_index = previous.version_index + 1;
        advance.version.parent_version = previous.version_index;
        advance.version.fewshot_ids.clear();
        advance.version.created_at_ms = engine.prompts.clock();
        advance.carried_over = true;
    } else {
        advance.version =
            prompt::update_prompt(engine.prompts, previous, result.few_shots, session.task(), *engine.gateway);
    }
    result.new_prompt_version = advance.version.version_index;
    result.prompt_changed = !advance.carried_over;
    commit(session, engine, {std::move(labels_ev), std::move(advance)});
    return result;
}

const std::vector<ClassificationOutcome>& finalize(Session& session, const Engine& engine) {
    if (session.status() == SessionStatus::Finalized) return *session.final_outcomes();
    if (session.status() == SessionStatus::AwaitingLabels) {
        throw StateError("cannot finalize while a batch is awaiting labels");
    }
    Finalized ev;
    ev.prompt_version = session.current_prompt().version_index;
    ev.outcomes = classify::classify_all(session.corpus().records(), session.current_prompt(), session.task(),
                                         *engine.gateway, engine.classify);
    commit(session, engine, {std::move(ev)});
    return *session.final_outcomes();
}

}  // namespace annoteer::samplease
