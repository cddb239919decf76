#pragma once

// Classification prompt lifecycle: initial generation, mismatch-driven
// refinement, per-record message rendering and answer parsing.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "annoteer/core.hpp"
#include "annoteer/llm.hpp"

namespace annoteer::prompt {

class GenerationRejected : public Error {
public:
    using Error::Error;
};

struct FewShotExample {
    std::string record_id;
    std::string text;
    std::string wrong_model_label;  // class name or kParseFailure
    std::string correct_expert_label;
};

// A `{{slot}}` template whose declared slots each occur exactly once.
class SlotTemplate {
public:
    SlotTemplate() = default;
    // Throws ValidationError if a declared slot is missing or repeated, or an
    // undeclared slot appears.
    SlotTemplate(std::string text, std::vector<std::string> slots);

    // Throws ValidationError if a slot value is missing.
    std::string render(const std::map<std::string, std::string>& values) const;

    const std::string& text() const { return text_; }
    const std::vector<std::string>& slots() const { return slots_; }

private:
    std::string text_;
    std::vector<std::string> slots_;
};

struct MetaPromptTemplates {
    SlotTemplate initial_generation;  // slots: classes, request, corpus_sample
    SlotTemplate update;              // slots: previous_prompt, fewshot_block

    static MetaPromptTemplates defaults();
    // Empty paths keep the built-in template for that slot.
    static MetaPromptTemplates load(const std::string& initial_path, const std::string& update_path);
};

inline constexpr std::size_t kCorpusSampleSize = 5;
inline constexpr std::size_t kFewShotMaxChars = 1500;
inline constexpr std::string_view kTruncationMarker = " [...truncated]";

using Clock = std::function<std::int64_t()>;  // milliseconds since epoch

std::int64_t system_clock_ms();

// Deterministic clock for reproducible logs: returns 0, 1, 2, ... per instance.
Clock logical_clock();

struct PromptEngine {
    MetaPromptTemplates templates = MetaPromptTemplates::defaults();
    Clock clock = system_clock_ms;
};

// The meta-call request GenerateInitialPrompt sends; exposed so callers and
// tests can inspect the seeded corpus sample it embeds.
llm::CompletionRequest initial_prompt_request(const PromptEngine& engine, const ClassificationTask& task,
                                              const Corpus& corpus, std::uint64_t rng_seed);

std::vector<std::size_t> corpus_sample_indices(const Corpus& corpus, std::uint64_t rng_seed);

PromptVersion generate_initial_prompt(const PromptEngine& engine, const ClassificationTask& task,
                                      const Corpus& corpus, const llm::Gateway& gateway, std::uint64_t rng_seed);

llm::CompletionRequest update_prompt_request(const PromptEngine& engine, const PromptVersion& previous,
                                             const std::vector<FewShotExample>& few_shots);

// `task` drives the structural check of the reply.
PromptVersion update_prompt(const PromptEngine& engine, const PromptVersion& previous,
                            const std::vector<FewShotExample>& few_shots, const ClassificationTask& task,
                            const llm::Gateway& gateway);

// Throws GenerationRejected unless `text` is non-empty, mentions every class
// and contains the literal "ANSWER:".
void check_generated_prompt(const std::string& text, const ClassificationTask& task);

std::string render_fewshot_block(const std::vector<FewShotExample>& few_shots);

llm::CompletionRequest render_classification_messages(const PromptVersion& prompt, const Record& record);

// Variant used for the single repair retry after an unparseable answer.
llm::CompletionRequest render_repair_messages(const PromptVersion& prompt, const Record& record,
                                              const ClassificationTask& task);

// Returns the canonical class name, or kParseFailure.
std::string parse_answer(std::string_view completion, const ClassificationTask& task);

}  // namespace annoteer::prompt
