#pragma once

#include <memory>
#include <string>

#include "json.hpp"

#include "annoteer/llm.hpp"

namespace annoteer::llm {

struct OpenAiConfig {
    std::string base_url = "https://api.openai.com/v1";  // ANNOTEER_BASE_URL
    std::string api_key;                                 // ANNOTEER_API_KEY
    std::string model = "gpt-4o-mini-2024-07-18";
    int timeout_seconds = 120;
    int max_parallel_requests = 16;
    bool supports_logprobs = true;

    // Reads ANNOTEER_BASE_URL and ANNOTEER_API_KEY over the defaults.
    static OpenAiConfig from_environment();
};

// Builds the JSON body POSTed to {base_url}/chat/completions.
nlohmann::json make_chat_request_body(const CompletionRequest& request, const std::string& model);

// Parses a chat-completions response body. Throws RequestRejected on schema violations.
CompletionResponse parse_chat_response_body(const nlohmann::json& body);

// Maps an HTTP status and body to the gateway's error taxonomy; no-op for 2xx.
void throw_for_status(int status, const std::string& body);

class OpenAiBackend : public Backend {
public:
    explicit OpenAiBackend(OpenAiConfig config);
    ~OpenAiBackend() override;

    CompletionResponse complete(const CompletionRequest& request) override;
    BackendCapabilities capabilities() const override;

private:
    struct Endpoint;
    OpenAiConfig config_;
    std::unique_ptr<Endpoint> endpoint_;
};

}  // namespace annoteer::llm
