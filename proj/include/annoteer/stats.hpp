#pragma once

// Evaluation statistics: confusion matrices, per-class and macro metrics,
// percentile bootstrap intervals (pooled across runs, or stratified by true
// class), paired permutation tests, the Mann-Whitney U test and demographic
// slicing.
//
// Every stochastic routine takes a seed; each resample / permutation draws
// from its own stream keyed by (seed, run, index), so results are identical
// regardless of evaluation order.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "annoteer/core.hpp"

namespace annoteer::stats {

class StatsError : public Error {
public:
    enum class Kind { LengthMismatch, UnknownTruthLabel, EmptyRun, MissingClassInRun, EmptyGroup, BadSelector };
    StatsError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

struct ConfusionMatrix {
    std::vector<std::string> classes;
    std::vector<std::vector<long>> counts;  // [true][predicted]
    std::vector<long> parse_failures;       // per true class

    long total() const;
};

// Truth labels are matched to `classes` ignoring case. Predictions that are
// kParseFailure, or not a class at all, count as parse failures.
ConfusionMatrix confusion_matrix(const std::vector<std::string>& classes, std::span<const std::string> truths,
                                 std::span<const std::string> predictions);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long support = 0;  // true instances
    bool precision_undefined = false;
    bool recall_undefined = false;
    bool f1_undefined = false;
};

struct MacroMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct MetricsReport {
    std::vector<std::string> classes;
    std::map<std::string, ClassMetrics> per_class;
    MacroMetrics macro;
    double accuracy = 0.0;
    long n_evaluated = 0;
    long parse_failures = 0;
    std::vector<std::string> flags;  // 0/0 conventions applied, e.g. "precision_undefined:No Helmet"
};

// 0/0 ratios are defined as 0 and flagged; the class stays in the macro mean.
MetricsReport metrics(const ConfusionMatrix& cm);

enum class MetricKind { MacroF1, MacroPrecision, MacroRecall, Accuracy, ClassF1, ClassPrecision, ClassRecall };

struct MetricSelector {
    MetricKind kind = MetricKind::MacroF1;
    std::string class_name;  // for Class* kinds

    double operator()(const MetricsReport& report) const;
    std::string name() const;

    // "macro_f1", "macro_precision", "macro_recall", "accuracy",
    // "f1:<class>", "precision:<class>", "recall:<class>".
    static MetricSelector parse(std::string_view spec);
};

struct LabeledRun {
    std::vector<std::string> truths;
    std::vector<std::string> predictions;
};

enum class CIMethod { Pooled, Stratified };

struct CIResult {
    double point_estimate = 0.0;
    double lower_95 = 0.0;
    double upper_95 = 0.0;
    int n_resamples = 0;
    CIMethod method = CIMethod::Pooled;
    std::vector<double> distribution;  // pooled bootstrap values, run-major
};

inline constexpr int kDefaultResamples = 1000;

// Linear-interpolation quantile (R type 7). `values` need not be sorted.
double quantile(std::vector<double> values, double q);

std::vector<std::size_t> bootstrap_resample(std::size_t n, std::uint64_t seed, std::size_t run, int resample);

// Resample drawn within each true-class stratum; per-class counts of the run are preserved.
std::vector<std::size_t> stratified_resample(const std::vector<std::string>& classes,
                                             const std::vector<std::string>& truths, std::uint64_t seed,
                                             std::size_t run, int resample);

CIResult bootstrap_ci_pooled(const std::vector<std::string>& classes, const std::vector<LabeledRun>& runs,
                             const MetricSelector& metric, int n_resamples, std::uint64_t seed);

CIResult bootstrap_ci_stratified(const std::vector<std::string>& classes, const std::vector<LabeledRun>& runs,
                                 const std::string& target_class, const MetricSelector& metric, int n_resamples,
                                 std::uint64_t seed);

enum class PermutationScheme { PairedSignFlip, UnpairedShuffle };

struct PermutationResult {
    double statistic = 0.0;  // mean(b) - mean(a)
    double p_value = 1.0;    // two-sided, (count + 1) / (n_perms + 1)
    int n_perms = 0;
};

inline constexpr int kDefaultPermutations = 10000;

// Inputs are per-item scores for the same items under A and B (0/1 correctness,
// or per-run metric values).
PermutationResult permutation_test(std::span<const double> a, std::span<const double> b, int n_perms,
                                   std::uint64_t seed, PermutationScheme scheme = PermutationScheme::PairedSignFlip);

PermutationResult permutation_test_paired(std::span<const int> correct_a, std::span<const int> correct_b,
                                          int n_perms, std::uint64_t seed,
                                          PermutationScheme scheme = PermutationScheme::PairedSignFlip);

inline constexpr std::size_t kMannWhitneyExactMaxN = 16;

struct MannWhitneyResult {
    double u = 0.0;  // U of group_a: pairs (a, b) with a > b, ties counting one half
    double p_two_sided = 1.0;
    bool exact = false;
};

// Exact enumeration over all group assignments of the pooled midranks when
// n_a + n_b <= 16, otherwise the normal approximation with tie and continuity
// corrections.
MannWhitneyResult mann_whitney_u(std::span<const double> group_a, std::span<const double> group_b);

inline constexpr std::string_view kNotSpecified = "Not Specified";
inline constexpr long kDefaultMinSliceSize = 10;

struct SliceReport {
    MetricsReport report;
    long n = 0;
    bool low_n = false;
};

// Groups are the metadata values per record; empty values fall into "Not Specified".
std::map<std::string, SliceReport> bias_slices(const std::vector<std::string>& classes,
                                               const std::vector<std::string>& truths,
                                               const std::vector<std::string>& predictions,
                                               const std::vector<std::string>& groups,
                                               long min_size = kDefaultMinSliceSize);

}  // namespace annoteer::stats
