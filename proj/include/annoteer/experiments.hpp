#pragma once

// Headless session driver and the two offline experiment protocols:
// iterative refinement (P_0 -> P_k on one held-out set) and lowest-confidence
// versus random selection.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "annoteer/classify.hpp"
#include "annoteer/core.hpp"
#include "annoteer/llm.hpp"
#include "annoteer/prompt.hpp"
#include "annoteer/samplease.hpp"
#include "annoteer/stats.hpp"

namespace annoteer::experiments {

// Returns a class label for every item of the batch.
using Expert =
    std::function<std::map<std::string, std::string>(const samplease::SampleBatch&, const ClassificationTask&)>;

// Answers from a ground-truth map. Throws ValidationError when a batch item
// has no truth entry.
Expert oracle_expert(std::map<std::string, std::string> truth);

// start -> [batch -> labels] x iterations -> finalize (when requested).
samplease::Session run_session(const samplease::Engine& engine, std::shared_ptr<const Corpus> corpus,
                               const ClassificationTask& task, std::uint64_t seed, const SamplingParams& params,
                               const std::string& session_id, const Expert& expert, int iterations,
                               bool finalize = true);

// A fresh backend for each run index.
using BackendFactory = std::function<std::shared_ptr<llm::Backend>(std::size_t run)>;

struct ExperimentConfig {
    std::shared_ptr<const Corpus> corpus;
    ClassificationTask task;
    std::map<std::string, std::string> truth;
    BackendFactory backend;
    SamplingParams params;
    std::uint64_t seed = 1;
    int runs = 6;
    int resamples = stats::kDefaultResamples;
    int permutations = stats::kDefaultPermutations;
    classify::ClassifyOptions classify;
    llm::RetryPolicy retry;
};

std::uint64_t run_seed(std::uint64_t base_seed, std::size_t run);

struct RunEvaluation {
    std::size_t run = 0;
    std::uint64_t seed = 0;
    SamplingStrategy strategy = SamplingStrategy::LowestConfidence;
    int prompt_version = 0;
    std::size_t n_labeled = 0;
    std::size_t n_fewshots = 0;
    std::vector<std::string> heldout_ids;
    stats::LabeledRun predictions;
    stats::MetricsReport report;
};

struct RefinementReport {
    int iterations = 0;
    std::vector<std::vector<RunEvaluation>> runs;  // [run][version]
    std::vector<double> mean_macro_f1;             // per version
    std::vector<stats::CIResult> macro_f1_ci;      // per version, pooled over runs
    std::vector<double> first_last_deltas;         // per run: F1(P_k) - F1(P_0)
    stats::PermutationResult first_vs_last;        // paired sign flip over runs
    bool monotone_every_run = true;
};

RefinementReport experiment_refinement(const ExperimentConfig& config, int iterations = 2);

inline const std::vector<std::string> kComparedMetrics = {"macro_f1", "macro_precision", "macro_recall", "accuracy"};

struct StrategySummary {
    SamplingStrategy strategy = SamplingStrategy::LowestConfidence;
    std::vector<RunEvaluation> runs;
    std::map<std::string, double> medians;  // by metric name
};

struct SamplingComparison {
    std::vector<StrategySummary> strategies;
    // Present only when both strategies ran. Group a is lowest-confidence.
    std::optional<std::map<std::string, stats::MannWhitneyResult>> mann_whitney;
};

SamplingComparison experiment_sampling(const ExperimentConfig& config,
                                       const std::vector<SamplingStrategy>& strategies = {
                                           SamplingStrategy::LowestConfidence, SamplingStrategy::Random});

double median(std::vector<double> values);

nlohmann::json to_json(const RunEvaluation& r);
nlohmann::json to_json(const RefinementReport& r);
nlohmann::json to_json(const SamplingComparison& c);

}  // namespace annoteer::experiments
