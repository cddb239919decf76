#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>

#include "annoteer/rng.hpp"
#include "annoteer/stats.hpp"

using namespace annoteer;
using namespace annoteer::stats;

namespace {

const std::vector<std::string> kAB = {"A", "B"};

std::vector<std::string> repeat(const std::string& v, int n) { return std::vector<std::string>(n, v); }

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST_CASE("precision, recall and F1 for a known confusion") {
    const auto truths = concat(repeat("A", 8), repeat("B", 2));
    const auto preds = repeat("A", 10);
    const auto r = metrics(confusion_matrix(kAB, truths, preds));
    CHECK(std::abs(r.per_class.at("A").precision - 0.8) < 1e-12);
    CHECK(std::abs(r.per_class.at("A").recall - 1.0) < 1e-12);
    CHECK(std::abs(r.per_class.at("A").f1 - 16.0 / 18.0) < 1e-12);
    CHECK(r.per_class.at("A").support == 8);
    CHECK(r.per_class.at("B").precision == 0.0);
    CHECK(r.per_class.at("B").precision_undefined);
    CHECK_FALSE(r.per_class.at("B").recall_undefined);
    CHECK(std::abs(r.macro.f1 - 8.0 / 18.0) < 1e-12);
    CHECK(std::abs(r.accuracy - 0.8) < 1e-12);
    CHECK(std::find(r.flags.begin(), r.flags.end(), "precision_undefined:B") != r.flags.end());
}

TEST_CASE("a class absent from truth and predictions is flagged, not dropped") {
    const std::vector<std::string> classes = {"A", "B", "C"};
    const auto r = metrics(confusion_matrix(classes, std::vector<std::string>{"A", "B"}, std::vector<std::string>{"A", "B"}));
    CHECK(r.per_class.at("C").precision_undefined);
    CHECK(r.per_class.at("C").recall_undefined);
    CHECK(r.per_class.at("C").f1_undefined);
    CHECK(std::abs(r.macro.f1 - 2.0 / 3.0) < 1e-12);
}

TEST_CASE("parse failures and unknown predictions count against recall") {
    const std::vector<std::string> truths = {"A", "A", "b", "B"};
    const std::vector<std::string> preds = {"A", std::string(kParseFailure), "B", "zebra"};
    const auto cm = confusion_matrix(kAB, truths, preds);
    CHECK(cm.total() == 4);
    CHECK(cm.parse_failures == std::vector<long>{1, 1});
    const auto r = metrics(cm);
    CHECK(r.parse_failures == 2);
    CHECK(r.n_evaluated == 4);
    CHECK(r.per_class.at("A").recall == 0.5);
    CHECK(r.per_class.at("A").precision == 1.0);
    CHECK(r.accuracy == 0.5);
    CHECK_THROWS_AS(confusion_matrix(kAB, std::vector<std::string>{"C"}, std::vector<std::string>{"A"}), StatsError);
    CHECK_THROWS_AS(confusion_matrix(kAB, std::vector<std::string>{"A"}, std::vector<std::string>{}), StatsError);
}

TEST_CASE("metric selectors") {
    const auto r = metrics(confusion_matrix(kAB, concat(repeat("A", 8), repeat("B", 2)), repeat("A", 10)));
    CHECK(MetricSelector::parse("accuracy")(r) == doctest::Approx(0.8));
    CHECK(MetricSelector::parse("f1:a")(r) == doctest::Approx(16.0 / 18.0));
    CHECK(MetricSelector::parse("recall:B")(r) == 0.0);
    CHECK(MetricSelector::parse("macro_precision").name() == "macro_precision");
    CHECK_THROWS_AS(MetricSelector::parse("f2"), StatsError);
}

TEST_CASE("type-7 quantile") {
    CHECK(quantile({4, 1, 3, 2}, 0.25) == doctest::Approx(1.75));
    CHECK(quantile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.975) == doctest::Approx(9.775));
    CHECK(quantile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.025) == doctest::Approx(1.225));
    CHECK(quantile({5}, 0.5) == 5);
    CHECK(quantile({1, 3}, 0.0) == 1);
    CHECK(quantile({1, 3}, 1.0) == 3);
}

TEST_CASE("Mann-Whitney exact small cases") {
    const std::vector<double> a = {1, 2, 3}, b = {4, 5, 6};
    const auto r = mann_whitney_u(a, b);
    CHECK(r.exact);
    CHECK(r.u == 0.0);
    CHECK(std::abs(r.p_two_sided - 0.1) < 1e-12);
    const auto flipped = mann_whitney_u(b, a);
    CHECK(flipped.u == 9.0);
    CHECK(std::abs(flipped.p_two_sided - 0.1) < 1e-12);
    const std::vector<double> same = {2, 2, 2};
    CHECK(mann_whitney_u(same, same).p_two_sided == doctest::Approx(1.0));
    const std::vector<double> ta = {1, 2, 2}, tb = {2, 3};
    CHECK(mann_whitney_u(ta, tb).u == 1.0);
}

TEST_CASE("Mann-Whitney normal approximation") {
    std::vector<double> a, b;
    for (int i = 1; i <= 10; ++i) a.push_back(i);
    for (int i = 11; i <= 20; ++i) b.push_back(i);
    const auto r = mann_whitney_u(a, b);
    CHECK_FALSE(r.exact);
    CHECK(r.p_two_sided == doctest::Approx(0.00018267179110955).epsilon(1e-9));
    const std::vector<double> c = {1, 2, 2, 3, 5, 7, 7, 8, 9, 9}, d = {2, 4, 4, 6, 8, 10, 10, 11, 12, 13, 14};
    const auto t = mann_whitney_u(c, d);
    CHECK(t.u == 27.5);
    CHECK(t.p_two_sided == doctest::Approx(0.0565383434805448).epsilon(1e-9));
}

TEST_CASE("paired permutation test") {
    const std::vector<int> wrong(20, 0), right(20, 1);
    const auto r = permutation_test_paired(wrong, right, 10000, 1);
    CHECK(r.statistic == 1.0);
    CHECK(r.p_value <= 0.001);
    CHECK(r.n_perms == 10000);
    const auto same = permutation_test_paired(right, right, 500, 1);
    CHECK(same.p_value == 1.0);
    const auto again = permutation_test_paired(wrong, right, 10000, 1);
    CHECK(again.p_value == r.p_value);
    const std::vector<double> x = {0.5, 0.6}, y = {0.7};
    CHECK_THROWS_AS(permutation_test(x, y, 10, 1), StatsError);
    CHECK_NOTHROW(permutation_test(x, y, 10, 1, PermutationScheme::UnpairedShuffle));
}

TEST_CASE("sign-flip p-value approaches the exact enumeration") {
    const std::vector<double> a = {0.1, 0.4, 0.3, 0.2, 0.5, 0.35}, b = {0.3, 0.35, 0.5, 0.45, 0.6, 0.4};
    const std::size_t n = a.size();
    double obs = 0;
    for (std::size_t i = 0; i < n; ++i) obs += b[i] - a[i];
    int extreme = 0;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += ((mask >> i) & 1u ? -1 : 1) * (b[i] - a[i]);
        if (std::abs(s) >= std::abs(obs) - 1e-12) ++extreme;
    }
    const double exact = static_cast<double>(extreme) / static_cast<double>(1u << n);
    const auto r = permutation_test(a, b, 20000, 4);
    CHECK(std::abs(r.p_value - exact) < 0.01);
}

TEST_CASE("bootstrap is reproducible and respects strata") {
    const std::vector<std::string> classes = {"A", "B", "C"};
    Rng rng({5});
    LabeledRun run;
    for (int i = 0; i < 60; ++i) {
        run.truths.push_back(classes[rng.below(3)]);
        run.predictions.push_back(rng.below(4) ? run.truths.back() : classes[rng.below(3)]);
    }
    const std::vector<LabeledRun> runs = {run, run};
    const auto m = MetricSelector::parse("macro_f1");
    const auto c1 = bootstrap_ci_pooled(classes, runs, m, 200, 9);
    const auto c2 = bootstrap_ci_pooled(classes, runs, m, 200, 9);
    CHECK(c1.distribution == c2.distribution);
    CHECK(c1.distribution.size() == 400);
    CHECK(c1.lower_95 <= c1.point_estimate);
    CHECK(c1.point_estimate <= c1.upper_95);
    CHECK(c1.lower_95 == quantile(c1.distribution, 0.025));

    std::map<std::string, int> want;
    for (const auto& t : run.truths) ++want[t];
    for (int b = 0; b < 50; ++b) {
        const auto idx = stratified_resample(classes, run.truths, 9, 0, b);
        std::map<std::string, int> got;
        for (auto i : idx) ++got[run.truths[i]];
        CHECK(got == want);
    }
    const auto s = bootstrap_ci_stratified(classes, runs, "b", MetricSelector::parse("f1:A"), 100, 2);
    CHECK(s.method == CIMethod::Stratified);
    LabeledRun no_c{{"A", "B"}, {"A", "B"}};
    CHECK_THROWS_AS(bootstrap_ci_stratified(classes, {no_c}, "C", m, 10, 1), StatsError);
    CHECK_THROWS_AS(bootstrap_ci_pooled(classes, {}, m, 10, 1), StatsError);
}

TEST_CASE("bias slices group missing values as not specified") {
    const std::vector<std::string> truths = {"A", "B", "A", "B", "A"};
    const std::vector<std::string> preds = {"A", "A", "A", "B", "B"};
    const std::vector<std::string> groups = {"White", "", "White", "  ", "Black"};
    const auto s = bias_slices(kAB, truths, preds, groups, 2);
    REQUIRE(s.size() == 3);
    CHECK(s.at("White").n == 2);
    CHECK(s.at("White").report.accuracy == 1.0);
    CHECK_FALSE(s.at("White").low_n);
    CHECK(s.at(std::string(kNotSpecified)).n == 2);
    CHECK(s.at(std::string(kNotSpecified)).report.accuracy == 0.5);
    CHECK(s.at("Black").low_n);
    CHECK_THROWS_AS(bias_slices(kAB, truths, preds, {"x"}), StatsError);
}
