#pragma once

// The expert-in-the-loop refinement loop.
//
// A Session is driven only by events: every operation first computes the
// events describing its effect, hands them to the EventSink (the append-only
// log), and only then applies them. Replaying a log through Session::apply
// therefore reconstructs exactly the state the live run produced, and a
// failing operation leaves the session untouched.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "annoteer/classify.hpp"
#include "annoteer/core.hpp"
#include "annoteer/llm.hpp"
#include "annoteer/prompt.hpp"

namespace annoteer::samplease {

inline constexpr int kSchemaVersion = 1;

struct BatchItem {
    std::string record_id;
    std::string text;
    std::string model_label;
    double confidence = 0.0;
    std::string class_bucket;

    bool operator==(const BatchItem&) const = default;
};

struct SampleBatch {
    int iteration = 0;
    std::vector<BatchItem> items;
    int created_from_prompt = 0;

    bool operator==(const SampleBatch&) const = default;
};

// ---- events -------------------------------------------------------------

struct SessionStarted {
    int schema_version = kSchemaVersion;
    std::string session_id;
    std::shared_ptr<const Corpus> corpus;
    ClassificationTask task;
    std::uint64_t rng_seed = 0;
    SamplingParams params;
    PromptVersion initial_prompt;
};

struct BatchBuilt {
    int iteration = 0;
    std::uint64_t draw_index = 0;
    std::vector<std::string> subsample_ids;
    std::vector<ClassificationOutcome> outcomes;  // classifications of the whole subsample
    SampleBatch batch;
    std::vector<std::string> warnings;
};

struct LabelsSubmitted {
    int iteration = 0;
    std::vector<LabeledExample> labels;  // batch order
    std::vector<std::string> fewshot_ids;
};

struct PromptAdvanced {
    PromptVersion version;
    bool carried_over = false;  // no mismatches: same text, no meta-call
};

struct Finalized {
    int prompt_version = 0;
    std::vector<ClassificationOutcome> outcomes;  // corpus order
};

using Event = std::variant<SessionStarted, BatchBuilt, LabelsSubmitted, PromptAdvanced, Finalized>;

std::string_view event_type_name(const Event& event);

// Persists a group of events atomically; throwing aborts the operation.
using EventSink = std::function<void(const std::vector<Event>&)>;

// ---- errors ---------------------------------------------------------------

class StateError : public Error {
public:
    using Error::Error;
};

class EmptyPool : public Error {
public:
    using Error::Error;
};

class BatchBuildFailed : public Error {
public:
    using Error::Error;
};

class LabelError : public Error {
public:
    enum class Kind { UnknownRecordId, IncompleteBatch, InvalidClassLabel };
    LabelError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

std::string_view to_string(LabelError::Kind kind);

// ---- session state --------------------------------------------------------

class Session {
public:
    Session() = default;

    // Applies one event. Throws StateError if the event is illegal in the
    // current state (used to reject corrupt or reordered logs).
    void apply(const Event& event);

    static Session replay(const std::vector<Event>& events);

    const std::string& id() const { return id_; }
    const Corpus& corpus() const { return *corpus_; }
    std::shared_ptr<const Corpus> corpus_ptr() const { return corpus_; }
    const ClassificationTask& task() const { return task_; }
    const std::vector<PromptVersion>& prompt_history() const { return prompts_; }
    const PromptVersion& current_prompt() const { return prompts_.back(); }
    const std::vector<LabeledExample>& labeled_data() const { return labeled_; }
    bool is_labeled(const std::string& record_id) const { return labeled_ids_.count(record_id) != 0; }
    int iteration() const { return iteration_; }
    std::uint64_t rng_seed() const { return seed_; }
    SessionStatus status() const { return status_; }
    const SamplingParams& sampling_params() const { return params_; }
    const std::optional<SampleBatch>& pending_batch() const { return pending_; }
    const std::vector<std::string>& warnings() const { return warnings_; }
    std::uint64_t draws() const { return draws_; }
    bool started() const { return started_; }
    const std::optional<std::vector<ClassificationOutcome>>& final_outcomes() const { return final_outcomes_; }
    int final_prompt_version() const { return final_prompt_version_; }

    bool operator==(const Session& other) const;

private:
    bool started_ = false;
    std::string id_;
    std::shared_ptr<const Corpus> corpus_;
    ClassificationTask task_;
    std::vector<PromptVersion> prompts_;
    std::vector<LabeledExample> labeled_;
    std::set<std::string> labeled_ids_;
    int iteration_ = 0;
    std::uint64_t seed_ = 0;
    SessionStatus status_ = SessionStatus::ReadyToSample;
    SamplingParams params_;
    std::optional<SampleBatch> pending_;
    std::vector<std::string> warnings_;
    std::uint64_t draws_ = 0;
    std::optional<std::vector<ClassificationOutcome>> final_outcomes_;
    int final_prompt_version_ = 0;
};

// ---- operations -----------------------------------------------------------

struct Engine {
    std::shared_ptr<const llm::Gateway> gateway;
    prompt::PromptEngine prompts;
    classify::ClassifyOptions classify;
    EventSink sink;  // may be empty
};

Session start_session(const Engine& engine, std::shared_ptr<const Corpus> corpus, ClassificationTask task,
                      std::uint64_t rng_seed, SamplingParams params, std::string session_id);

// ceil(fraction * pool), at least 1, at most pool.
std::size_t subsample_size(double fraction, std::size_t pool);

// Records of the next subsample, drawn from the unlabeled pool with the
// stream keyed by (seed, draw index). The index advances with each built batch.
std::vector<const Record*> draw_subsample(const Session& session);
std::vector<const Record*> draw_subsample(const Session& session, std::uint64_t draw_index);

// Lowest-confidence selection per predicted class, ties by record_id; parse
// failures form a last pseudo-bucket. Errored outcomes are never selected.
std::vector<BatchItem> select_lowest_confidence(const std::vector<ClassificationOutcome>& outcomes,
                                                const ClassificationTask& task, const Corpus& corpus, int quota);

// Same batch size as select_lowest_confidence, chosen uniformly.
std::vector<BatchItem> select_random(const std::vector<ClassificationOutcome>& outcomes,
                                     const ClassificationTask& task, const Corpus& corpus, int quota,
                                     std::uint64_t rng_seed, std::uint64_t draw_index);

SampleBatch build_sample_batch(Session& session, const Engine& engine);

struct IterationOutcome {
    std::vector<prompt::FewShotExample> few_shots;
    int new_prompt_version = 0;
    bool prompt_changed = false;
};

// The few-shot examples a labeled batch yields: items whose stored model
// label differs from the expert's.
std::vector<prompt::FewShotExample> mismatched(const SampleBatch& batch,
                                               const std::map<std::string, std::string>& canonical_labels);

IterationOutcome submit_labels(Session& session, const std::map<std::string, std::string>& labels,
                               const Engine& engine);

const std::vector<ClassificationOutcome>& finalize(Session& session, const Engine& engine);

}  // namespace annoteer::samplease
