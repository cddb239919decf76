#pragma once

// Chat-completion gateway: the backend interface, retrying single calls and
// an order-preserving, bounded-concurrency batch primitive.

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "annoteer/core.hpp"

namespace annoteer::llm {

// Lets backends that need it (mock, simulator) tell meta-prompt calls apart
// from per-record classification calls. Not sent over the wire.
enum class CallPurpose { Classify, RepairAnswer, GenerateInitialPrompt, UpdatePrompt };

inline constexpr int kClassifyMaxTokens = 1024;
inline constexpr int kMetaPromptMaxTokens = 4096;

struct CompletionRequest {
    std::string system_text;
    std::string user_text;
    double temperature = 0.0;
    double top_p = 1.0;
    bool want_logprobs = false;
    int max_tokens = kClassifyMaxTokens;
    CallPurpose purpose = CallPurpose::Classify;
};

struct Usage {
    int prompt_tokens = 0;
    int completion_tokens = 0;
};

struct CompletionResponse {
    std::string text;
    std::optional<std::vector<double>> token_logprobs;
    std::vector<std::string> tokens;  // token strings when the backend reports them
    std::string model_id;
    Usage usage;
};

struct BackendCapabilities {
    bool supports_logprobs = true;
    int max_parallel_requests = 16;
};

enum class ErrorKind { Transport, RateLimited, Auth, Capability, Rejected };

std::string_view to_string(ErrorKind kind);

class GatewayError : public Error {
public:
    GatewayError(ErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
    ErrorKind kind() const { return kind_; }
    bool retryable() const { return kind_ == ErrorKind::Transport || kind_ == ErrorKind::RateLimited; }

private:
    ErrorKind kind_;
};

class TransportError : public GatewayError {
public:
    explicit TransportError(const std::string& what) : GatewayError(ErrorKind::Transport, what) {}
};

class RateLimited : public GatewayError {
public:
    explicit RateLimited(const std::string& what) : GatewayError(ErrorKind::RateLimited, what) {}
};

class AuthError : public GatewayError {
public:
    explicit AuthError(const std::string& what) : GatewayError(ErrorKind::Auth, what) {}
};

class CapabilityError : public GatewayError {
public:
    explicit CapabilityError(const std::string& what) : GatewayError(ErrorKind::Capability, what) {}
};

// Non-retryable request refusal (HTTP 4xx other than auth/rate limit, malformed body).
class RequestRejected : public GatewayError {
public:
    explicit RequestRejected(const std::string& what) : GatewayError(ErrorKind::Rejected, what) {}
};

// A completion backend. Implementations must be safe to call concurrently.
class Backend {
public:
    virtual ~Backend() = default;
    virtual CompletionResponse complete(const CompletionRequest& request) = 0;
    virtual BackendCapabilities capabilities() const = 0;
};

struct RetryPolicy {
    int max_attempts = 5;
    std::chrono::milliseconds initial_backoff{500};
    double multiplier = 2.0;
};

struct SlotResult {
    std::optional<CompletionResponse> response;
    std::optional<ErrorKind> error_kind;
    std::string error_message;
    int attempts = 0;

    bool ok() const { return response.has_value(); }
};

class Gateway {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    explicit Gateway(std::shared_ptr<Backend> backend, RetryPolicy policy = {}, Sleeper sleeper = {});

    // Single call with retries on Transport/RateLimited. Throws the last error.
    CompletionResponse complete(const CompletionRequest& request) const;

    // One slot per request, same order. Never throws for per-slot failures.
    // Concurrency is bounded by max_in_flight and the backend's own limit.
    std::vector<SlotResult> complete_batch(const std::vector<CompletionRequest>& requests,
                                           int max_in_flight) const;

    BackendCapabilities capabilities() const { return backend_->capabilities(); }
    const RetryPolicy& retry_policy() const { return policy_; }

private:
    SlotResult attempt(const CompletionRequest& request) const;

    std::shared_ptr<Backend> backend_;
    RetryPolicy policy_;
    Sleeper sleeper_;
};

}  // namespace annoteer::llm
