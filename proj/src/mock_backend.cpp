#include "annoteer/mock_backend.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "annoteer/hash.hpp"
#include "annoteer/rng.hpp"

namespace annoteer::llm {

using nlohmann::json;

namespace {

ScriptedReply parse_reply(const json& j) {
    ScriptedReply r;
    r.label = j.value("label", std::string{});
    if (j.contains("completion")) r.completion = j.at("completion").get<std::string>();
    if (j.contains("logprobs")) r.logprobs = j.at("logprobs").get<std::vector<double>>();
    return r;
}

ScriptEntry parse_entry(const json& j) {
    ScriptEntry e;
    e.reply = parse_reply(j);
    if (j.contains("repair")) e.repair = parse_reply(j.at("repair"));
    e.fail_times = j.value("fail_times", 0);
    e.delay_ms = j.value("delay_ms", 0);
    return e;
}

bool looks_like_sha256(const std::string& key) {
    if (key.size() != 64) return false;
    for (char c : key) {
        if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
    }
    return true;
}

}  // namespace

ScriptedBackend::ScriptedBackend(MockOptions options) : options_(std::move(options)) {}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_json(const json& script, const Corpus* corpus,
                                                            MockOptions defaults) {
    const json* records = &script;
    if (script.contains("records")) {
        records = &script.at("records");
        defaults.seed = script.value("seed", defaults.seed);
        if (script.contains("classes")) defaults.classes = script.at("classes").get<std::vector<std::string>>();
        defaults.supports_logprobs = script.value("supports_logprobs", defaults.supports_logprobs);
        defaults.max_parallel_requests = script.value("max_parallel_requests", defaults.max_parallel_requests);
    }
    auto backend = std::make_shared<ScriptedBackend>(defaults);
    for (const auto& [key, value] : records->items()) {
        auto entry = parse_entry(value);
        if (corpus) {
            if (const auto* rec = corpus->find(key)) {
                backend->script_text(rec->text, std::move(entry));
                continue;
            }
        }
        if (!looks_like_sha256(key)) {
            throw ValidationError("mock script key is neither a corpus record id nor a SHA-256 digest: " + key);
        }
        backend->script_text_hash(key, std::move(entry));
    }
    if (script.contains("meta")) {
        const auto& meta = script.at("meta");
        for (const auto& t : meta.value("initial", json::array())) {
            backend->push_meta_response(CallPurpose::GenerateInitialPrompt, t.get<std::string>());
        }
        for (const auto& t : meta.value("update", json::array())) {
            backend->push_meta_response(CallPurpose::UpdatePrompt, t.get<std::string>());
        }
    }
    return backend;
}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_file(const std::string& path, const Corpus* corpus,
                                                            MockOptions defaults) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open mock script: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("mock script is not valid JSON: " + std::string(e.what()));
    }
    return from_json(j, corpus, std::move(defaults));
}

void ScriptedBackend::script_text(const std::string& text, ScriptEntry entry) {
    script_text_hash(sha256_hex(text), std::move(entry));
}

void ScriptedBackend::script_text_hash(const std::string& sha256, ScriptEntry entry) {
    std::lock_guard lock(mu_);
    by_hash_[sha256] = std::move(entry);
}

void ScriptedBackend::push_meta_response(CallPurpose purpose, std::string text) {
    std::lock_guard lock(mu_);
    meta_queue_[purpose].push_back(std::move(text));
}

BackendCapabilities ScriptedBackend::capabilities() const {
    return {options_.supports_logprobs, options_.max_parallel_requests};
}

std::vector<std::string> ScriptedBackend::meta_user_texts() const {
    std::lock_guard lock(mu_);
    return meta_user_texts_;
}

std::string ScriptedBackend::default_prompt(const std::vector<std::string>& classes, std::string_view request) {
    std::ostringstream out;
    out << "You classify short free-text records.\n";
    if (!request.empty()) out << "Task: " << request << "\n";
    out << "Possible classes:\n";
    for (const auto& c : classes) out << "- " << c << "\n";
    out << "Think step by step about the evidence in the record, then finish with a final line of the form\n"
        << "ANSWER: <class>\n";
    return out.str();
}

CompletionResponse ScriptedBackend::render(const ScriptedReply& reply) const {
    CompletionResponse resp;
    std::string reasoning;
    if (reply.completion) {
        resp.text = *reply.completion;
    } else {
        reasoning = "Scripted reasoning.\n";
        resp.text = reasoning + "ANSWER: " + reply.label;
    }
    resp.model_id = "scripted-mock";
    const auto n = reply.logprobs.size();
    if (options_.supports_logprobs) resp.token_logprobs = reply.logprobs;
    // Token strings concatenate back to the text; the last two carry the answer line.
    if (!reply.completion && n >= 3) {
        const std::string answer = " " + reply.label;
        const std::size_t k = n - 2;
        const std::size_t chunk = (reasoning.size() + k - 1) / k;
        for (std::size_t i = 0; i < k; ++i) {
            const auto start = std::min(reasoning.size(), i * chunk);
            resp.tokens.push_back(reasoning.substr(start, chunk));
        }
        resp.tokens.push_back("ANSWER:");
        resp.tokens.push_back(answer);
    }
    resp.usage.completion_tokens = static_cast<int>(n);
    return resp;
}

ScriptedReply ScriptedBackend::fallback(const std::string& text) const {
    const auto h = sha256_u64(text);
    Rng rng({options_.seed, h, stream_tag("mock-fallback")});
    ScriptedReply r;
    if (options_.classes.empty()) {
        r.label = "unknown";
    } else {
        r.label = options_.classes[rng.below(options_.classes.size())];
    }
    const auto n = 8 + rng.below(24);
    r.logprobs.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) r.logprobs.push_back(-2.0 * rng.unit());
    return r;
}

CompletionResponse ScriptedBackend::meta(const CompletionRequest& request) {
    const int call_no = ++meta_calls_;
    std::string text;
    {
        std::lock_guard lock(mu_);
        meta_user_texts_.push_back(request.user_text);
        auto& q = meta_queue_[request.purpose];
        if (!q.empty()) {
            text = std::move(q.front());
            q.pop_front();
        }
    }
    if (text.empty() && !options_.classes.empty()) {
        text = default_prompt(options_.classes, "");
        if (request.purpose == CallPurpose::UpdatePrompt) {
            text += "Revision " + std::to_string(call_no) + " (" + sha256_hex(request.user_text).substr(0, 12) +
                    "): re-read the corrected examples before answering.\n";
        }
    }
    CompletionResponse resp;
    resp.text = std::move(text);
    resp.model_id = "scripted-mock";
    return resp;
}

CompletionResponse ScriptedBackend::complete(const CompletionRequest& request) {
    ++calls_;
    if (request.want_logprobs && !options_.supports_logprobs) {
        throw CapabilityError("scripted backend configured without logprob support");
    }
    if (request.purpose == CallPurpose::GenerateInitialPrompt || request.purpose == CallPurpose::UpdatePrompt) {
        return meta(request);
    }
    const auto key = sha256_hex(request.user_text);
    std::optional<ScriptEntry> entry;
    {
        std::lock_guard lock(mu_);
        auto it = by_hash_.find(key);
        if (it != by_hash_.end()) {
            entry = it->second;
            auto& served = failures_served_[key];
            if (served < it->second.fail_times) {
                ++served;
                throw TransportError("injected transport failure");
            }
        }
    }
    if (entry && entry->delay_ms > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(entry->delay_ms));
    }
    if (request.purpose == CallPurpose::RepairAnswer) {
        if (entry && entry->repair) return render(*entry->repair);
        if (entry) return render(entry->reply);
        return render(fallback(request.user_text));
    }
    return render(entry ? entry->reply : fallback(request.user_text));
}

}  // namespace annoteer::llm
