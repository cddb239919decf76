#include "httplib.h"

#include "annoteer/openai_backend.hpp"

#include <cstdlib>

namespace annoteer::llm {

using nlohmann::json;

OpenAiConfig OpenAiConfig::from_environment() {
    OpenAiConfig cfg;
    if (const char* base = std::getenv("ANNOTEER_BASE_URL"); base && *base) cfg.base_url = base;
    if (const char* key = std::getenv("ANNOTEER_API_KEY"); key && *key) cfg.api_key = key;
    return cfg;
}

json make_chat_request_body(const CompletionRequest& request, const std::string& model) {
    json body = {
        {"model", model},
        {"messages",
         json::array({{{"role", "system"}, {"content", request.system_text}},
                      {{"role", "user"}, {"content", request.user_text}}})},
        {"temperature", request.temperature},
        {"top_p", request.top_p},
        {"max_tokens", request.max_tokens},
        {"stream", false},
    };
    if (request.want_logprobs) body["logprobs"] = true;
    return body;
}

CompletionResponse parse_chat_response_body(const json& body) {
    CompletionResponse resp;
    try {
        const auto& choices = body.at("choices");
        if (!choices.is_array() || choices.empty()) throw RequestRejected("response has no choices");
        const auto& choice = choices.at(0);
        const auto& content = choice.at("message").at("content");
        resp.text = content.is_null() ? std::string{} : content.get<std::string>();
        if (choice.contains("logprobs") && choice.at("logprobs").is_object() &&
            choice.at("logprobs").contains("content") && choice.at("logprobs").at("content").is_array()) {
            std::vector<double> lps;
            for (const auto& tok : choice.at("logprobs").at("content")) {
                lps.push_back(tok.at("logprob").get<double>());
                resp.tokens.push_back(tok.value("token", std::string{}));
            }
            resp.token_logprobs = std::move(lps);
        }
        resp.model_id = body.value("model", std::string{});
        if (body.contains("usage") && body.at("usage").is_object()) {
            resp.usage.prompt_tokens = body.at("usage").value("prompt_tokens", 0);
            resp.usage.completion_tokens = body.at("usage").value("completion_tokens", 0);
        }
    } catch (const json::exception& e) {
        throw RequestRejected(std::string("malformed chat completion response: ") + e.what());
    }
    return resp;
}

void throw_for_status(int status, const std::string& body) {
    if (status >= 200 && status < 300) return;
    const std::string msg = "HTTP " + std::to_string(status) + ": " + body.substr(0, 512);
    if (status == 401 || status == 403) throw AuthError(msg);
    if (status == 429) throw RateLimited(msg);
    if (status == 408 || status >= 500) throw TransportError(msg);
    throw RequestRejected(msg);
}

struct OpenAiBackend::Endpoint {
    std::string scheme_host_port;
    std::string path_prefix;
};

namespace {

// Splits "https://host:port/v1" into ("https://host:port", "/v1").
std::pair<std::string, std::string> split_base_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    const auto slash = url.find('/', host_start);
    if (slash == std::string::npos) return {url, ""};
    std::string prefix = url.substr(slash);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, slash), prefix};
}

}  // namespace

OpenAiBackend::OpenAiBackend(OpenAiConfig config) : config_(std::move(config)), endpoint_(std::make_unique<Endpoint>()) {
    auto [host, prefix] = split_base_url(config_.base_url);
    endpoint_->scheme_host_port = std::move(host);
    endpoint_->path_prefix = std::move(prefix);
}

OpenAiBackend::~OpenAiBackend() = default;

BackendCapabilities OpenAiBackend::capabilities() const {
    return {config_.supports_logprobs, config_.max_parallel_requests};
}

CompletionResponse OpenAiBackend::complete(const CompletionRequest& request) {
    httplib::Client client(endpoint_->scheme_host_port);
    client.set_connection_timeout(config_.timeout_seconds);
    client.set_read_timeout(config_.timeout_seconds);
    client.set_write_timeout(config_.timeout_seconds);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

    const auto body = make_chat_request_body(request, config_.model).dump();
    auto res = client.Post(endpoint_->path_prefix + "/chat/completions", headers, body, "application/json");
    if (!res) {
        throw TransportError("request to " + config_.base_url + " failed: " + httplib::to_string(res.error()));
    }
    throw_for_status(res->status, res->body);
    json parsed;
    try {
        parsed = json::parse(res->body);
    } catch (const json::exception& e) {
        throw TransportError(std::string("unparseable response body: ") + e.what());
    }
    auto resp = parse_chat_response_body(parsed);
    if (request.want_logprobs && !resp.token_logprobs) {
        throw CapabilityError("backend returned no logprobs although they were requested");
    }
    if (!request.want_logprobs) resp.token_logprobs.reset();
    return resp;
}

}  // namespace annoteer::llm
