#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "annoteer/core.hpp"
#include "annoteer/llm.hpp"
#include "annoteer/mock_backend.hpp"
#include "annoteer/prompt.hpp"
#include "annoteer/rng.hpp"
#include "annoteer/samplease.hpp"

namespace fixtures {

using namespace annoteer;

inline std::vector<std::string> helmet_classes() { return {"Helmet present", "No Helmet", "Not mentioned"}; }

inline ClassificationTask helmet_task() {
    return ClassificationTask(helmet_classes(), "Was the patient wearing a helmet?");
}

inline std::shared_ptr<const Corpus> numbered_corpus(std::size_t n, const std::string& prefix = "r") {
    std::vector<Record> recs;
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "%s%04zu", prefix.c_str(), i);
        recs.push_back({id, "narrative " + std::to_string(i) + " fell off scooter", {{"Sex", i % 2 ? "Male" : "Female"}}});
    }
    return std::make_shared<const Corpus>("fixture", std::move(recs));
}

// Labels derived from record ids so oracle experts and scripts agree.
inline std::map<std::string, std::string> hashed_truth(const Corpus& c, const std::vector<std::string>& classes,
                                                      std::uint64_t seed) {
    std::map<std::string, std::string> out;
    for (const auto& r : c.records()) {
        Rng rng({seed, stream_tag(r.id)});
        out[r.id] = classes[rng.below(classes.size())];
    }
    return out;
}

struct EventCollector {
    std::shared_ptr<std::vector<samplease::Event>> events = std::make_shared<std::vector<samplease::Event>>();
    samplease::EventSink sink() {
        auto e = events;
        return [e](const std::vector<samplease::Event>& group) { e->insert(e->end(), group.begin(), group.end()); };
    }
};

inline samplease::Engine mock_engine(std::shared_ptr<llm::Backend> backend, samplease::EventSink sink = {},
                                     llm::RetryPolicy retry = {}) {
    auto gateway = std::make_shared<const llm::Gateway>(std::move(backend), retry, [](std::chrono::milliseconds) {});
    return {gateway, prompt::PromptEngine{prompt::MetaPromptTemplates::defaults(), prompt::logical_clock()}, {},
            std::move(sink)};
}

inline std::shared_ptr<llm::ScriptedBackend> mock_backend(const std::vector<std::string>& classes,
                                                          std::uint64_t seed = 1) {
    llm::MockOptions mo;
    mo.seed = seed;
    mo.classes = classes;
    return std::make_shared<llm::ScriptedBackend>(mo);
}

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("annoteer-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace fixtures
