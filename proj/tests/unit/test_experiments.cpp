#include "doctest.h"

#include <set>

#include "fixtures.hpp"

#include "annoteer/experiments.hpp"
#include "annoteer/sim.hpp"

using namespace annoteer;
using namespace annoteer::experiments;

namespace {

ExperimentConfig small_config() {
    sim::WorldSpec spec;
    spec.seed = 21;
    spec.n_records = 400;
    spec.n_clusters = 16;
    auto world = std::make_shared<const sim::SimWorld>(sim::SimWorld::generate(spec));
    ExperimentConfig cfg{std::make_shared<const Corpus>(world->corpus()),
                         ClassificationTask(world->classes(), "helmet?"),
                         world->truth(),
                         [world](std::size_t) { return std::make_shared<sim::SimBackend>(world); }};
    cfg.runs = 3;
    cfg.resamples = 100;
    cfg.permutations = 500;
    return cfg;
}

}  // namespace

TEST_CASE("oracle expert requires truth for every item") {
    const auto expert = oracle_expert({{"a", "X"}});
    samplease::SampleBatch b;
    b.items = {{"a", "t", "Y", 0.1, "Y"}};
    const ClassificationTask task({"X", "Y"}, "q");
    CHECK(expert(b, task).at("a") == "X");
    b.items.push_back({"b", "t", "Y", 0.1, "Y"});
    CHECK_THROWS_AS(expert(b, task), ValidationError);
}

TEST_CASE("run seeds differ per run") {
    CHECK(run_seed(1, 0) != run_seed(1, 1));
    CHECK(run_seed(1, 0) == run_seed(1, 0));
    CHECK(median({3, 1, 2}) == 2);
    CHECK(median({4, 1, 2, 3}) == 2.5);
}

TEST_CASE("refinement experiment evaluates every version on one held-out set") {
    const auto cfg = small_config();
    const auto r = experiment_refinement(cfg, 2);
    REQUIRE(r.runs.size() == 3);
    CHECK(r.mean_macro_f1.size() == 3);
    CHECK(r.macro_f1_ci.size() == 3);
    CHECK(r.first_last_deltas.size() == 3);
    for (const auto& run : r.runs) {
        REQUIRE(run.size() == 3);
        std::set<std::string> labeled_ids;
        for (std::size_t v = 0; v < run.size(); ++v) {
            CHECK(run[v].prompt_version == static_cast<int>(v));
            CHECK(run[v].heldout_ids == run[0].heldout_ids);
            CHECK(run[v].report.n_evaluated == static_cast<long>(run[0].heldout_ids.size()));
        }
        CHECK(run[0].heldout_ids.size() + run[0].n_labeled == cfg.corpus->size());
    }
    CHECK(r.mean_macro_f1.back() > r.mean_macro_f1.front());
    const auto j = to_json(r);
    CHECK(j.contains("first_vs_last_permutation"));
}

TEST_CASE("sampling experiment compares both strategies") {
    const auto cfg = small_config();
    const auto c = experiment_sampling(cfg);
    REQUIRE(c.strategies.size() == 2);
    REQUIRE(c.mann_whitney.has_value());
    for (const auto& m : kComparedMetrics) {
        CHECK(c.mann_whitney->count(m) == 1);
        for (const auto& s : c.strategies) CHECK(s.medians.count(m) == 1);
    }
    CHECK(c.strategies[0].strategy == SamplingStrategy::LowestConfidence);
    CHECK(c.strategies[1].strategy == SamplingStrategy::Random);
    for (const auto& s : c.strategies) CHECK(s.runs.size() == 3);
    const auto one = experiment_sampling(cfg, {SamplingStrategy::Random});
    CHECK_FALSE(one.mann_whitney.has_value());
}

TEST_CASE("experiment configuration is checked") {
    auto cfg = small_config();
    cfg.truth.erase(cfg.truth.begin());
    CHECK_THROWS_AS(experiment_refinement(cfg, 1), ValidationError);
}
