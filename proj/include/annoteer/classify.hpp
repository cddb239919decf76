#pragma once

#include <span>
#include <vector>

#include "annoteer/core.hpp"
#include "annoteer/llm.hpp"

namespace annoteer::classify {

class ConfidenceError : public Error {
public:
    enum class Kind { EmptyLogprobs, NonFiniteLogprob, PositiveLogprob };
    ConfidenceError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Geometric mean of the per-token probabilities: exp(mean(logprobs)).
double compute_confidence(std::span<const double> token_logprobs);

// Which completion tokens enter the confidence. AllTokens follows the
// definition over the whole completion; AnswerLine keeps only the tokens from
// the final "ANSWER" token onward (requires token strings from the backend,
// otherwise falls back to all tokens).
enum class TokenScope { AllTokens, AnswerLine };

struct ClassifyOptions {
    int max_in_flight = 16;
    TokenScope token_scope = TokenScope::AllTokens;
};

std::vector<double> scoped_logprobs(const llm::CompletionResponse& response, TokenScope scope);

// One outcome per record, in input order. Unparseable answers get a single
// repair re-ask; gateway failures become per-record error markers.
std::vector<ClassificationOutcome> classify_all(const std::vector<const Record*>& records,
                                                const PromptVersion& prompt, const ClassificationTask& task,
                                                const llm::Gateway& gateway, const ClassifyOptions& options = {});

std::vector<ClassificationOutcome> classify_all(const std::vector<Record>& records, const PromptVersion& prompt,
                                                const ClassificationTask& task, const llm::Gateway& gateway,
                                                const ClassifyOptions& options = {});

}  // namespace annoteer::classify
