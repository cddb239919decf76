#include "annoteer/classify.hpp"

#include <cmath>

#include "annoteer/prompt.hpp"

namespace annoteer::classify {

double compute_confidence(std::span<const double> token_logprobs) {
    if (token_logprobs.empty()) {
        throw ConfidenceError(ConfidenceError::Kind::EmptyLogprobs, "confidence needs at least one token logprob");
    }
    double sum = 0.0;
    for (double lp : token_logprobs) {
        if (!std::isfinite(lp)) {
            throw ConfidenceError(ConfidenceError::Kind::NonFiniteLogprob, "token logprob is not finite");
        }
        if (lp > 0.0) {
            throw ConfidenceError(ConfidenceError::Kind::PositiveLogprob, "token logprob is positive");
        }
        sum += lp;
    }
    return std::exp(sum / static_cast<double>(token_logprobs.size()));
}

std::vector<double> scoped_logprobs(const llm::CompletionResponse& response, TokenScope scope) {
    std::vector<double> lps = response.token_logprobs.value_or(std::vector<double>{});
    if (scope == TokenScope::AllTokens || response.tokens.size() != lps.size()) return lps;
    for (std::size_t i = lps.size(); i-- > 0;) {
        if (to_lower(response.tokens[i]).find("answer") != std::string::npos) {
            return {lps.begin() + static_cast<std::ptrdiff_t>(i), lps.end()};
        }
    }
    return lps;
}

namespace {

ClassificationOutcome to_outcome(const Record& record, const llm::SlotResult& slot, const ClassificationTask& task,
                                 TokenScope scope) {
    ClassificationOutcome o;
    o.record_id = record.id;
    o.predicted_class = std::string(kParseFailure);
    if (!slot.ok()) {
        o.error = std::string(llm::to_string(*slot.error_kind)) + ": " + slot.error_message;
        return o;
    }
    const auto& resp = *slot.response;
    o.raw_completion = resp.text;
    o.predicted_class = prompt::parse_answer(resp.text, task);
    o.token_logprobs = scoped_logprobs(resp, scope);
    try {
        o.confidence = compute_confidence(o.token_logprobs);
    } catch (const ConfidenceError& e) {
        o.error = std::string("ConfidenceError: ") + e.what();
        o.confidence = 0.0;
    }
    return o;
}

}  // namespace

std::vector<ClassificationOutcome> classify_all(const std::vector<const Record*>& records,
                                                const PromptVersion& prompt, const ClassificationTask& task,
                                                const llm::Gateway& gateway, const ClassifyOptions& options) {
    if (records.empty()) throw ValidationError("classify_all needs at least one record");
    std::vector<llm::CompletionRequest> requests;
    requests.reserve(records.size());
    for (const auto* r : records) requests.push_back(prompt::render_classification_messages(prompt, *r));

    const auto slots = gateway.complete_batch(requests, options.max_in_flight);
    std::vector<ClassificationOutcome> out;
    out.reserve(records.size());
    std::vector<std::size_t> to_repair;
    for (std::size_t i = 0; i < records.size(); ++i) {
        out.push_back(to_outcome(*records[i], slots[i], task, options.token_scope));
        if (out.back().ok() && is_parse_failure(out.back().predicted_class)) to_repair.push_back(i);
    }
    if (to_repair.empty()) return out;

    std::vector<llm::CompletionRequest> repairs;
    repairs.reserve(to_repair.size());
    for (auto i : to_repair) repairs.push_back(prompt::render_repair_messages(prompt, *records[i], task));
    const auto repaired = gateway.complete_batch(repairs, options.max_in_flight);
    for (std::size_t k = 0; k < to_repair.size(); ++k) {
        const auto i = to_repair[k];
        if (!repaired[k].ok()) continue;  // keep the first attempt's outcome
        out[i] = to_outcome(*records[i], repaired[k], task, options.token_scope);
    }
    return out;
}

std::vector<ClassificationOutcome> classify_all(const std::vector<Record>& records, const PromptVersion& prompt,
                                                const ClassificationTask& task, const llm::Gateway& gateway,
                                                const ClassifyOptions& options) {
    std::vector<const Record*> ptrs;
    ptrs.reserve(records.size());
    for (const auto& r : records) ptrs.push_back(&r);
    return classify_all(ptrs, prompt, task, gateway, options);
}

}  // namespace annoteer::classify
