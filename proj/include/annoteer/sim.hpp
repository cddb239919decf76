#pragma once

// Calibrated simulation world for offline experiments.
//
// Every synthetic record has a latent difficulty d in [0, 1] and a cluster id.
// The simulated model errs on a record when its fixed uniform draw falls below
//
//     p_err = min(max_error, error_scale * d^2) * exemplar_decay^m
//
// where m counts the few-shot exemplars from the same cluster baked into the
// prompt. Its confidence is 1 - d * exemplar_decay^m plus fixed per-record
// noise. Because draws are fixed per record and p_err only falls as exemplars
// accumulate, the set of misclassified records under a refined prompt is a
// subset of the set under its parent.
//
// Prompts carry their exemplars in-band as "[sim-exemplar:<record id>]"
// markers; the simulator adds markers for every world narrative it finds in an
// update request.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "annoteer/core.hpp"
#include "annoteer/llm.hpp"

namespace annoteer::sim {

struct SimRecord {
    std::string id;
    std::string text;
    std::string true_label;
    std::string wrong_label;
    int cluster = 0;
    double difficulty = 0.0;
    double error_draw = 0.0;  // uniform [0, 1)
    double confidence_noise = 0.0;
    std::map<std::string, std::string> metadata;
};

struct WorldSpec {
    std::uint64_t seed = 1;
    std::size_t n_records = 2000;
    int n_clusters = 40;
    double hard_cluster_fraction = 0.25;
    std::vector<std::string> classes = {"Helmet present", "No Helmet", "Not mentioned"};
    std::vector<double> class_weights = {0.3, 0.3, 0.4};
};

struct ModelParams {
    double error_scale = 0.8;
    double max_error = 0.95;
    double exemplar_decay = 0.25;
    double noise_amplitude = 0.05;
};

class SimWorld {
public:
    static SimWorld generate(const WorldSpec& spec);
    static SimWorld from_json(const nlohmann::json& j);
    static SimWorld load(const std::string& path);
    nlohmann::json to_json() const;
    void save(const std::string& path) const;

    const std::vector<SimRecord>& records() const { return records_; }
    const std::vector<std::string>& classes() const { return classes_; }
    const ModelParams& model() const { return model_; }
    void set_model(const ModelParams& m) { model_ = m; }

    Corpus corpus() const;
    std::map<std::string, std::string> truth() const;

    const SimRecord* by_text(const std::string& text) const;
    const SimRecord* by_id(const std::string& id) const;

    double error_probability(const SimRecord& r, int exemplars_in_cluster) const;
    double confidence(const SimRecord& r, int exemplars_in_cluster) const;

private:
    void index();

    std::vector<std::string> classes_;
    std::vector<SimRecord> records_;
    ModelParams model_;
    std::unordered_map<std::string, std::size_t> by_hash_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

std::string exemplar_marker(const std::string& record_id);
std::vector<std::string> exemplar_ids(const std::string& prompt_text);

class SimBackend : public llm::Backend {
public:
    explicit SimBackend(std::shared_ptr<const SimWorld> world);

    llm::CompletionResponse complete(const llm::CompletionRequest& request) override;
    llm::BackendCapabilities capabilities() const override { return {true, 16}; }

private:
    llm::CompletionResponse classify(const llm::CompletionRequest& request) const;
    llm::CompletionResponse refine(const llm::CompletionRequest& request) const;

    std::shared_ptr<const SimWorld> world_;
};

}  // namespace annoteer::sim
