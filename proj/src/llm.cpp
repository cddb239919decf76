#include "annoteer/llm.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

namespace annoteer::llm {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Transport: return "TransportError";
        case ErrorKind::RateLimited: return "RateLimited";
        case ErrorKind::Auth: return "AuthError";
        case ErrorKind::Capability: return "CapabilityError";
        case ErrorKind::Rejected: return "RequestRejected";
    }
    return "TransportError";
}

Gateway::Gateway(std::shared_ptr<Backend> backend, RetryPolicy policy, Sleeper sleeper)
    : backend_(std::move(backend)), policy_(policy), sleeper_(std::move(sleeper)) {
    if (!backend_) throw Error("gateway requires a backend");
    if (policy_.max_attempts < 1) policy_.max_attempts = 1;
    if (!sleeper_) {
        sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }
}

SlotResult Gateway::attempt(const CompletionRequest& request) const {
    SlotResult slot;
    if (request.want_logprobs && !backend_->capabilities().supports_logprobs) {
        slot.error_kind = ErrorKind::Capability;
        slot.error_message = "backend does not report token log-probabilities";
        return slot;
    }
    auto backoff = policy_.initial_backoff;
    for (int i = 1; i <= policy_.max_attempts; ++i) {
        slot.attempts = i;
        try {
            slot.response = backend_->complete(request);
            slot.error_kind.reset();
            slot.error_message.clear();
            return slot;
        } catch (const GatewayError& e) {
            slot.error_kind = e.kind();
            slot.error_message = e.what();
            if (!e.retryable() || i == policy_.max_attempts) return slot;
        } catch (const std::exception& e) {
            slot.error_kind = ErrorKind::Transport;
            slot.error_message = e.what();
            if (i == policy_.max_attempts) return slot;
        }
        sleeper_(backoff);
        backoff = std::chrono::milliseconds(
            static_cast<std::chrono::milliseconds::rep>(static_cast<double>(backoff.count()) * policy_.multiplier));
    }
    return slot;
}

namespace {

[[noreturn]] void rethrow(const SlotResult& slot) {
    switch (*slot.error_kind) {
        case ErrorKind::Transport: throw TransportError(slot.error_message);
        case ErrorKind::RateLimited: throw RateLimited(slot.error_message);
        case ErrorKind::Auth: throw AuthError(slot.error_message);
        case ErrorKind::Capability: throw CapabilityError(slot.error_message);
        case ErrorKind::Rejected: throw RequestRejected(slot.error_message);
    }
    throw TransportError(slot.error_message);
}

}  // namespace

CompletionResponse Gateway::complete(const CompletionRequest& request) const {
    auto slot = attempt(request);
    if (!slot.ok()) rethrow(slot);
    return std::move(*slot.response);
}

std::vector<SlotResult> Gateway::complete_batch(const std::vector<CompletionRequest>& requests,
                                                int max_in_flight) const {
    if (max_in_flight < 1) throw Error("max_in_flight must be at least 1");
    std::vector<SlotResult> out(requests.size());
    if (requests.empty()) return out;

    const int backend_limit = std::max(1, backend_->capabilities().max_parallel_requests);
    const auto workers =
        std::min<std::size_t>(static_cast<std::size_t>(std::min(max_in_flight, backend_limit)), requests.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next.fetch_add(1); i < requests.size(); i = next.fetch_add(1)) {
            out[i] = attempt(requests[i]);
        }
    };
    if (workers == 1) {
        work();
        return out;
    }
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    }
    return out;
}

}  // namespace annoteer::llm
