#include "annoteer/core.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace annoteer {

std::string trim(std::string_view s) {
    auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

bool iequals_trimmed(std::string_view a, std::string_view b) {
    return to_lower(trim(a)) == to_lower(trim(b));
}

Corpus::Corpus(std::string source_name, std::vector<Record> records)
    : source_name_(std::move(source_name)), records_(std::move(records)) {
    index_.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
        index_.emplace(records_[i].id, i);
    }
}

const Record* Corpus::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &records_[it->second];
}

ClassificationTask::ClassificationTask(std::vector<std::string> classes, std::string request) {
    auto report = validate_task(classes, request);
    if (!report.ok()) {
        throw ValidationError("invalid classification task: " + report.summary());
    }
    classes_.reserve(classes.size());
    for (auto& c : classes) classes_.push_back(trim(c));
    request_ = trim(request);
}

std::optional<std::string> ClassificationTask::canonical(std::string_view name) const {
    const std::string key = to_lower(trim(name));
    for (const auto& c : classes_) {
        if (to_lower(c) == key) return c;
    }
    return std::nullopt;
}

std::string_view to_string(SessionStatus status) {
    switch (status) {
        case SessionStatus::ReadyToSample: return "ReadyToSample";
        case SessionStatus::AwaitingLabels: return "AwaitingLabels";
        case SessionStatus::Finalized: return "Finalized";
    }
    return "ReadyToSample";
}

SessionStatus session_status_from_string(std::string_view s) {
    if (s == "ReadyToSample") return SessionStatus::ReadyToSample;
    if (s == "AwaitingLabels") return SessionStatus::AwaitingLabels;
    if (s == "Finalized") return SessionStatus::Finalized;
    throw ValidationError("unknown session status: " + std::string(s));
}

std::string_view to_string(SamplingStrategy strategy) {
    return strategy == SamplingStrategy::Random ? "random" : "samplease";
}

SamplingStrategy sampling_strategy_from_string(std::string_view s) {
    const auto key = to_lower(trim(s));
    if (key == "samplease" || key == "lowest-confidence") return SamplingStrategy::LowestConfidence;
    if (key == "random") return SamplingStrategy::Random;
    throw ValidationError("unknown sampling strategy: " + std::string(s));
}

std::string ValidationReport::summary() const {
    std::ostringstream out;
    for (std::size_t i = 0; i < issues.size(); ++i) {
        if (i) out << "; ";
        out << issues[i].rule;
        if (!issues[i].record_id.empty()) out << " [" << issues[i].record_id << "]";
        out << ": " << issues[i].message;
    }
    return out.str();
}

ValidationReport validate_corpus(const Corpus& corpus) {
    ValidationReport report;
    if (corpus.empty()) {
        report.issues.push_back({"non_empty_corpus", "", "corpus has no records"});
    }
    std::set<std::string> seen;
    for (const auto& r : corpus.records()) {
        if (r.id.empty()) {
            report.issues.push_back({"non_empty_id", "", "record with empty id"});
        } else if (!seen.insert(r.id).second) {
            report.issues.push_back({"unique_record_id", r.id, "duplicate record id"});
        }
        if (trim(r.text).empty()) {
            report.issues.push_back({"non_empty_text", r.id, "text is empty after trimming"});
        }
    }
    return report;
}

ValidationReport validate_task(const std::vector<std::string>& classes, std::string_view request) {
    ValidationReport report;
    if (classes.size() < 2) {
        report.issues.push_back({"min_two_classes", "", "a task needs at least two classes"});
    }
    std::set<std::string> seen;
    for (const auto& c : classes) {
        const auto t = trim(c);
        if (t.empty()) {
            report.issues.push_back({"non_empty_class", "", "class name is empty"});
            continue;
        }
        if (t == kParseFailure) {
            report.issues.push_back({"reserved_class", t, "class name is reserved"});
        }
        if (!seen.insert(to_lower(t)).second) {
            report.issues.push_back({"distinct_classes", t, "class names must differ ignoring case"});
        }
    }
    if (trim(request).empty()) {
        report.issues.push_back({"non_empty_request", "", "classification request is empty"});
    }
    return report;
}

ValidationReport validate_sampling_params(const SamplingParams& params) {
    ValidationReport report;
    if (!(params.sample_fraction > 0.0 && params.sample_fraction <= 1.0)) {
        report.issues.push_back({"sample_fraction_range", "", "sample_fraction must be in (0, 1]"});
    }
    if (params.per_class_quota < 1) {
        report.issues.push_back({"quota_positive", "", "per_class_quota must be at least 1"});
    }
    return report;
}

}  // namespace annoteer
