#pragma once

// Domain types shared by every part of the engine. No I/O and no LLM calls.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace annoteer {

// Prediction value for completions that could not be mapped to a class.
// Task validation guarantees no class can carry this name.
inline constexpr std::string_view kParseFailure = "<PARSE_FAILURE>";

inline bool is_parse_failure(std::string_view label) { return label == kParseFailure; }

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

// String helpers used wherever class names or CSV cells are compared.
std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
bool iequals_trimmed(std::string_view a, std::string_view b);

struct Record {
    std::string id;
    std::string text;
    std::map<std::string, std::string> metadata;

    bool operator==(const Record&) const = default;
};

class Corpus {
public:
    Corpus() = default;
    Corpus(std::string source_name, std::vector<Record> records);

    const std::string& source_name() const { return source_name_; }
    const std::vector<Record>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    // Returns nullptr when the id is unknown. Duplicate ids resolve to the first row.
    const Record* find(std::string_view id) const;

    bool operator==(const Corpus& other) const {
        return source_name_ == other.source_name_ && records_ == other.records_;
    }

private:
    std::string source_name_;
    std::vector<Record> records_;
    std::unordered_map<std::string, std::size_t> index_;
};

class ClassificationTask {
public:
    ClassificationTask() = default;
    ClassificationTask(std::vector<std::string> classes, std::string request);

    const std::vector<std::string>& classes() const { return classes_; }
    const std::string& request() const { return request_; }

    // Case-insensitive, whitespace-trimmed lookup returning the canonical casing.
    std::optional<std::string> canonical(std::string_view name) const;
    bool has_class(std::string_view name) const { return canonical(name).has_value(); }

    bool operator==(const ClassificationTask&) const = default;

private:
    std::vector<std::string> classes_;
    std::string request_;
};

struct PromptVersion {
    int version_index = 0;
    std::string text;
    std::optional<int> parent_version;
    std::vector<std::string> fewshot_ids;
    std::int64_t created_at_ms = 0;

    bool operator==(const PromptVersion&) const = default;
};

struct ClassificationOutcome {
    std::string record_id;
    std::string predicted_class;  // class name or kParseFailure
    std::vector<double> token_logprobs;
    double confidence = 0.0;
    std::string raw_completion;
    std::optional<std::string> error;  // gateway failure after retries; outcome unusable for selection

    bool ok() const { return !error.has_value(); }
    bool operator==(const ClassificationOutcome&) const = default;
};

struct LabeledExample {
    std::string record_id;
    std::string expert_label;
    std::string model_label_at_sampling;
    double confidence_at_sampling = 0.0;
    int iteration_labeled = 0;

    bool operator==(const LabeledExample&) const = default;
};

enum class SessionStatus { ReadyToSample, AwaitingLabels, Finalized };

std::string_view to_string(SessionStatus status);
SessionStatus session_status_from_string(std::string_view s);

enum class SamplingStrategy { LowestConfidence, Random };

std::string_view to_string(SamplingStrategy strategy);
SamplingStrategy sampling_strategy_from_string(std::string_view s);

struct SamplingParams {
    double sample_fraction = 0.10;
    int per_class_quota = 10;
    SamplingStrategy strategy = SamplingStrategy::LowestConfidence;

    bool operator==(const SamplingParams&) const = default;
};

struct ValidationIssue {
    std::string rule;
    std::string record_id;  // empty when the issue is not tied to a record
    std::string message;

    bool operator==(const ValidationIssue&) const = default;
};

struct ValidationReport {
    std::vector<ValidationIssue> issues;

    bool ok() const { return issues.empty(); }
    std::string summary() const;
};

ValidationReport validate_corpus(const Corpus& corpus);
ValidationReport validate_task(const std::vector<std::string>& classes, std::string_view request);
ValidationReport validate_sampling_params(const SamplingParams& params);

}  // namespace annoteer
