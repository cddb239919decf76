#pragma once

// HTTP/JSON facade over the engine. Sessions live in an in-process registry
// backed by one JSONL event log each; logs found in the data directory are
// replayed on startup. Routes are listed in docs/api.md.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "annoteer/classify.hpp"
#include "annoteer/core.hpp"
#include "annoteer/llm.hpp"

namespace annoteer::service {

// Creates the backend for a session; gets the corpus and task so scripted
// backends can resolve record ids and fall back to the task's classes.
using BackendProvider =
    std::function<std::shared_ptr<llm::Backend>(const Corpus& corpus, const ClassificationTask& task)>;

struct ServiceConfig {
    std::filesystem::path data_dir = "annoteer-data";
    std::string auth_token;  // empty disables authentication
    std::optional<std::filesystem::path> static_dir;  // served under /ui/
    classify::ClassifyOptions classify;
    llm::RetryPolicy retry;
    bool logical_clock = false;
};

struct ListenAddress {
    std::string host = "127.0.0.1";
    int port = 8787;

    // "host:port" or ":port"; throws ValidationError.
    static ListenAddress parse(const std::string& text);
    // ANNOTEER_LISTEN, or the default.
    static ListenAddress from_environment();
};

class Service {
public:
    Service(ServiceConfig config, BackendProvider backends);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Replays every *.jsonl log in the data directory. Returns the messages
    // for logs that failed to load; those sessions are skipped.
    std::vector<std::string> load_existing();

    // Binds and serves on a background thread. Port 0 picks a free port.
    // Returns the bound port; throws Error if binding fails.
    int start(const std::string& host, int port);
    // Binds and serves on the calling thread until stop().
    void run(const std::string& host, int port);
    void stop();

    // Blocks until no batch build is running (for tests and shutdown).
    void wait_idle();

    std::size_t session_count() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace annoteer::service
