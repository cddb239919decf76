#pragma once

// Deterministic scripted backend for offline tests and demos.
//
// Classification calls are keyed by the SHA-256 of the user text (the record
// narrative). Unscripted texts get a label and logprob vector derived from
// (seed, text hash), so the same request always yields the same response.
// Meta-prompt calls consume a per-purpose queue of scripted prompt texts and
// fall back to a generated chain-of-thought prompt over the configured classes.

#include <atomic>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "annoteer/core.hpp"
#include "annoteer/llm.hpp"

namespace annoteer::llm {

struct ScriptedReply {
    std::string label;                      // rendered as a final "ANSWER: <label>" line
    std::optional<std::string> completion;  // raw completion text; overrides `label`
    std::vector<double> logprobs;
};

struct ScriptEntry {
    ScriptedReply reply;
    std::optional<ScriptedReply> repair;  // answer to the parse-repair re-ask
    int fail_times = 0;                   // TransportErrors raised before the first success
    int delay_ms = 0;
};

struct MockOptions {
    std::uint64_t seed = 0;
    std::vector<std::string> classes;
    bool supports_logprobs = true;
    int max_parallel_requests = 16;
};

class ScriptedBackend : public Backend {
public:
    explicit ScriptedBackend(MockOptions options);

    // Script file: either a bare map {key: {label, logprobs[], ...}} or an
    // object {"seed", "classes", "supports_logprobs", "records": {...},
    // "meta": {"initial": [...], "update": [...]}}. Keys are record ids
    // (resolved through `corpus`) or SHA-256 hex digests of record texts.
    static std::shared_ptr<ScriptedBackend> from_json(const nlohmann::json& script, const Corpus* corpus,
                                                      MockOptions defaults = {});
    static std::shared_ptr<ScriptedBackend> from_file(const std::string& path, const Corpus* corpus,
                                                      MockOptions defaults = {});

    void script_text(const std::string& text, ScriptEntry entry);
    void script_text_hash(const std::string& sha256, ScriptEntry entry);
    void push_meta_response(CallPurpose purpose, std::string text);

    CompletionResponse complete(const CompletionRequest& request) override;
    BackendCapabilities capabilities() const override;

    int call_count() const { return calls_.load(); }
    int meta_call_count() const { return meta_calls_.load(); }
    // User texts of every meta-prompt call, in call order.
    std::vector<std::string> meta_user_texts() const;

    static std::string default_prompt(const std::vector<std::string>& classes, std::string_view request);

private:
    CompletionResponse render(const ScriptedReply& reply) const;
    ScriptedReply fallback(const std::string& text) const;
    CompletionResponse meta(const CompletionRequest& request);

    MockOptions options_;
    mutable std::mutex mu_;
    std::map<std::string, ScriptEntry> by_hash_;
    std::map<std::string, int> failures_served_;
    std::map<CallPurpose, std::deque<std::string>> meta_queue_;
    std::vector<std::string> meta_user_texts_;
    std::atomic<int> calls_{0};
    std::atomic<int> meta_calls_{0};
};

}  // namespace annoteer::llm
