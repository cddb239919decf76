#include "annoteer/stats.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "annoteer/rng.hpp"

namespace annoteer::stats {

namespace {

std::vector<std::string> lowered(const std::vector<std::string>& classes) {
    std::vector<std::string> out;
    out.reserve(classes.size());
    for (const auto& c : classes) out.push_back(to_lower(trim(c)));
    return out;
}

long class_index(const std::vector<std::string>& lowered_classes, std::string_view label) {
    const auto key = to_lower(trim(label));
    for (std::size_t i = 0; i < lowered_classes.size(); ++i) {
        if (lowered_classes[i] == key) return static_cast<long>(i);
    }
    return -1;
}

// Label vectors as class indices; -1 marks a parse failure on the prediction side.
struct IndexedRun {
    std::vector<long> truths;
    std::vector<long> predictions;
};

IndexedRun index_run(const std::vector<std::string>& classes, std::span<const std::string> truths,
                     std::span<const std::string> predictions) {
    if (truths.size() != predictions.size()) {
        throw StatsError(StatsError::Kind::LengthMismatch, "truths and predictions differ in length");
    }
    const auto lc = lowered(classes);
    IndexedRun run;
    run.truths.reserve(truths.size());
    run.predictions.reserve(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const auto t = class_index(lc, truths[i]);
        if (t < 0) throw StatsError(StatsError::Kind::UnknownTruthLabel, "unknown truth label: " + truths[i]);
        run.truths.push_back(t);
        run.predictions.push_back(is_parse_failure(predictions[i]) ? -1 : class_index(lc, predictions[i]));
    }
    return run;
}

ConfusionMatrix tally(const std::vector<std::string>& classes, const IndexedRun& run,
                      const std::vector<std::size_t>* sample) {
    const auto k = classes.size();
    ConfusionMatrix cm{classes, std::vector<std::vector<long>>(k, std::vector<long>(k, 0)), std::vector<long>(k, 0)};
    auto add = [&](std::size_t i) {
        const auto t = static_cast<std::size_t>(run.truths[i]);
        const auto p = run.predictions[i];
        if (p < 0) {
            ++cm.parse_failures[t];
        } else {
            ++cm.counts[t][static_cast<std::size_t>(p)];
        }
    };
    if (sample) {
        for (auto i : *sample) add(i);
    } else {
        for (std::size_t i = 0; i < run.truths.size(); ++i) add(i);
    }
    return cm;
}

double ratio(long num, long den, bool& undefined) {
    if (den == 0) {
        undefined = true;
        return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

long ConfusionMatrix::total() const {
    long t = 0;
    for (const auto& row : counts) t += std::accumulate(row.begin(), row.end(), 0L);
    return t + std::accumulate(parse_failures.begin(), parse_failures.end(), 0L);
}

ConfusionMatrix confusion_matrix(const std::vector<std::string>& classes, std::span<const std::string> truths,
                                 std::span<const std::string> predictions) {
    return tally(classes, index_run(classes, truths, predictions), nullptr);
}

MetricsReport metrics(const ConfusionMatrix& cm) {
    MetricsReport r;
    r.classes = cm.classes;
    const auto k = cm.classes.size();
    long trace = 0;
    for (std::size_t c = 0; c < k; ++c) {
        const long tp = cm.counts[c][c];
        long predicted = 0;
        long actual = cm.parse_failures[c];
        for (std::size_t o = 0; o < k; ++o) {
            predicted += cm.counts[o][c];
            actual += cm.counts[c][o];
        }
        ClassMetrics m;
        m.support = actual;
        m.precision = ratio(tp, predicted, m.precision_undefined);
        m.recall = ratio(tp, actual, m.recall_undefined);
        if (m.precision + m.recall > 0.0) {
            m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        } else {
            m.f1 = 0.0;
            m.f1_undefined = true;
        }
        const auto& name = cm.classes[c];
        if (m.precision_undefined) r.flags.push_back("precision_undefined:" + name);
        if (m.recall_undefined) r.flags.push_back("recall_undefined:" + name);
        if (m.f1_undefined) r.flags.push_back("f1_undefined:" + name);
        r.macro.precision += m.precision;
        r.macro.recall += m.recall;
        r.macro.f1 += m.f1;
        r.per_class[name] = m;
        trace += tp;
        r.parse_failures += cm.parse_failures[c];
    }
    if (k > 0) {
        r.macro.precision /= static_cast<double>(k);
        r.macro.recall /= static_cast<double>(k);
        r.macro.f1 /= static_cast<double>(k);
    }
    r.n_evaluated = cm.total();
    r.accuracy = r.n_evaluated > 0 ? static_cast<double>(trace) / static_cast<double>(r.n_evaluated) : 0.0;
    return r;
}

double MetricSelector::operator()(const MetricsReport& report) const {
    switch (kind) {
        case MetricKind::MacroF1: return report.macro.f1;
        case MetricKind::MacroPrecision: return report.macro.precision;
        case MetricKind::MacroRecall: return report.macro.recall;
        case MetricKind::Accuracy: return report.accuracy;
        default: break;
    }
    auto it = std::find_if(report.per_class.begin(), report.per_class.end(),
                           [&](const auto& kv) { return to_lower(kv.first) == to_lower(trim(class_name)); });
    if (it == report.per_class.end()) {
        throw StatsError(StatsError::Kind::BadSelector, "metric selector names unknown class " + class_name);
    }
    switch (kind) {
        case MetricKind::ClassF1: return it->second.f1;
        case MetricKind::ClassPrecision: return it->second.precision;
        default: return it->second.recall;
    }
}

std::string MetricSelector::name() const {
    switch (kind) {
        case MetricKind::MacroF1: return "macro_f1";
        case MetricKind::MacroPrecision: return "macro_precision";
        case MetricKind::MacroRecall: return "macro_recall";
        case MetricKind::Accuracy: return "accuracy";
        case MetricKind::ClassF1: return "f1:" + class_name;
        case MetricKind::ClassPrecision: return "precision:" + class_name;
        case MetricKind::ClassRecall: return "recall:" + class_name;
    }
    return "macro_f1";
}

MetricSelector MetricSelector::parse(std::string_view spec) {
    const auto s = trim(spec);
    if (s == "macro_f1") return {MetricKind::MacroF1, {}};
    if (s == "macro_precision") return {MetricKind::MacroPrecision, {}};
    if (s == "macro_recall") return {MetricKind::MacroRecall, {}};
    if (s == "accuracy") return {MetricKind::Accuracy, {}};
    const auto colon = s.find(':');
    if (colon != std::string::npos) {
        const auto head = s.substr(0, colon);
        const auto cls = s.substr(colon + 1);
        if (head == "f1") return {MetricKind::ClassF1, cls};
        if (head == "precision") return {MetricKind::ClassPrecision, cls};
        if (head == "recall") return {MetricKind::ClassRecall, cls};
    }
    throw StatsError(StatsError::Kind::BadSelector, "unknown metric selector: " + s);
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(values.size() - 1, lo + 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<std::size_t> bootstrap_resample(std::size_t n, std::uint64_t seed, std::size_t run, int resample) {
    Rng rng({seed, stream_tag("bootstrap"), run, static_cast<std::uint64_t>(resample)});
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
    return idx;
}

std::vector<std::size_t> stratified_resample(const std::vector<std::string>& classes,
                                             const std::vector<std::string>& truths, std::uint64_t seed,
                                             std::size_t run, int resample) {
    const auto lc = lowered(classes);
    std::vector<std::vector<std::size_t>> strata(classes.size());
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const auto t = class_index(lc, truths[i]);
        if (t < 0) throw StatsError(StatsError::Kind::UnknownTruthLabel, "unknown truth label: " + truths[i]);
        strata[static_cast<std::size_t>(t)].push_back(i);
    }
    Rng rng({seed, stream_tag("stratified-bootstrap"), run, static_cast<std::uint64_t>(resample)});
    std::vector<std::size_t> idx;
    idx.reserve(truths.size());
    for (const auto& stratum : strata) {
        for (std::size_t k = 0; k < stratum.size(); ++k) idx.push_back(stratum[rng.below(stratum.size())]);
    }
    return idx;
}

namespace {

CIResult bootstrap(const std::vector<std::string>& classes, const std::vector<LabeledRun>& runs,
                   const MetricSelector& metric, int n_resamples, std::uint64_t seed, CIMethod method) {
    if (runs.empty()) throw StatsError(StatsError::Kind::EmptyRun, "bootstrap needs at least one run");
    if (n_resamples < 1) throw StatsError(StatsError::Kind::EmptyRun, "bootstrap needs at least one resample");
    CIResult ci;
    ci.n_resamples = n_resamples;
    ci.method = method;
    ci.distribution.reserve(runs.size() * static_cast<std::size_t>(n_resamples));
    double point_sum = 0.0;
    for (std::size_t r = 0; r < runs.size(); ++r) {
        if (runs[r].truths.empty()) throw StatsError(StatsError::Kind::EmptyRun, "run " + std::to_string(r) + " is empty");
        const auto indexed = index_run(classes, runs[r].truths, runs[r].predictions);
        point_sum += metric(metrics(tally(classes, indexed, nullptr)));
        for (int b = 0; b < n_resamples; ++b) {
            const auto sample = method == CIMethod::Stratified
                                    ? stratified_resample(classes, runs[r].truths, seed, r, b)
                                    : bootstrap_resample(indexed.truths.size(), seed, r, b);
            ci.distribution.push_back(metric(metrics(tally(classes, indexed, &sample))));
        }
    }
    ci.point_estimate = point_sum / static_cast<double>(runs.size());
    ci.lower_95 = quantile(ci.distribution, 0.025);
    ci.upper_95 = quantile(ci.distribution, 0.975);
    return ci;
}

}  // namespace

CIResult bootstrap_ci_pooled(const std::vector<std::string>& classes, const std::vector<LabeledRun>& runs,
                             const MetricSelector& metric, int n_resamples, std::uint64_t seed) {
    return bootstrap(classes, runs, metric, n_resamples, seed, CIMethod::Pooled);
}

CIResult bootstrap_ci_stratified(const std::vector<std::string>& classes, const std::vector<LabeledRun>& runs,
                                 const std::string& target_class, const MetricSelector& metric, int n_resamples,
                                 std::uint64_t seed) {
    const auto lc = lowered(classes);
    const auto target = class_index(lc, target_class);
    if (target < 0) throw StatsError(StatsError::Kind::BadSelector, "unknown target class " + target_class);
    for (std::size_t r = 0; r < runs.size(); ++r) {
        const bool present = std::any_of(runs[r].truths.begin(), runs[r].truths.end(),
                                         [&](const std::string& t) { return class_index(lc, t) == target; });
        if (!present) {
            throw StatsError(StatsError::Kind::MissingClassInRun,
                             "class " + target_class + " has no true instances in run " + std::to_string(r));
        }
    }
    auto selector = metric;
    if (selector.kind == MetricKind::ClassF1 || selector.kind == MetricKind::ClassPrecision ||
        selector.kind == MetricKind::ClassRecall) {
        selector.class_name = classes[static_cast<std::size_t>(target)];
    }
    return bootstrap(classes, runs, selector, n_resamples, seed, CIMethod::Stratified);
}

PermutationResult permutation_test(std::span<const double> a, std::span<const double> b, int n_perms,
                                   std::uint64_t seed, PermutationScheme scheme) {
    if (a.size() != b.size() && scheme == PermutationScheme::PairedSignFlip) {
        throw StatsError(StatsError::Kind::LengthMismatch, "paired permutation test needs equal lengths");
    }
    if (a.empty() || b.empty()) throw StatsError(StatsError::Kind::EmptyGroup, "permutation test on empty input");
    PermutationResult res;
    res.n_perms = n_perms;
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    res.statistic = std::accumulate(b.begin(), b.end(), 0.0) / nb - std::accumulate(a.begin(), a.end(), 0.0) / na;
    const double observed = std::abs(res.statistic);
    const double tol = 1e-12 * std::max(1.0, observed);
    long extreme = 0;
    if (scheme == PermutationScheme::PairedSignFlip) {
        std::vector<double> diff(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) diff[i] = b[i] - a[i];
        for (int p = 0; p < n_perms; ++p) {
            Rng rng({seed, stream_tag("paired-permutation"), static_cast<std::uint64_t>(p)});
            double s = 0.0;
            for (double d : diff) s += rng.coin() ? -d : d;
            if (std::abs(s / na) >= observed - tol) ++extreme;
        }
    } else {
        std::vector<double> pooled(a.begin(), a.end());
        pooled.insert(pooled.end(), b.begin(), b.end());
        for (int p = 0; p < n_perms; ++p) {
            Rng rng({seed, stream_tag("unpaired-permutation"), static_cast<std::uint64_t>(p)});
            auto order = rng.choose(pooled.size(), pooled.size());
            double sa = 0.0;
            double sb = 0.0;
            for (std::size_t i = 0; i < order.size(); ++i) (i < a.size() ? sa : sb) += pooled[order[i]];
            if (std::abs(sb / nb - sa / na) >= observed - tol) ++extreme;
        }
    }
    res.p_value = static_cast<double>(extreme + 1) / static_cast<double>(n_perms + 1);
    return res;
}

PermutationResult permutation_test_paired(std::span<const int> correct_a, std::span<const int> correct_b,
                                          int n_perms, std::uint64_t seed, PermutationScheme scheme) {
    if (correct_a.size() != correct_b.size()) {
        throw StatsError(StatsError::Kind::LengthMismatch, "correctness vectors differ in length");
    }
    std::vector<double> a(correct_a.begin(), correct_a.end());
    std::vector<double> b(correct_b.begin(), correct_b.end());
    return permutation_test(a, b, n_perms, seed, scheme);
}

MannWhitneyResult mann_whitney_u(std::span<const double> group_a, std::span<const double> group_b) {
    if (group_a.empty() || group_b.empty()) {
        throw StatsError(StatsError::Kind::EmptyGroup, "Mann-Whitney U needs two non-empty groups");
    }
    const std::size_t na = group_a.size();
    const std::size_t nb = group_b.size();
    const std::size_t n = na + nb;
    std::vector<std::pair<double, std::size_t>> pooled;
    pooled.reserve(n);
    for (std::size_t i = 0; i < na; ++i) pooled.emplace_back(group_a[i], i);
    for (std::size_t i = 0; i < nb; ++i) pooled.emplace_back(group_b[i], na + i);
    std::sort(pooled.begin(), pooled.end());

    // Doubled midranks keep everything in integers.
    std::vector<long> rank2(n);
    double tie_term = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && pooled[j].first == pooled[i].first) ++j;
        const long mid2 = static_cast<long>(i + 1 + j);  // 2 * (i+1 + j) / 2
        for (std::size_t k = i; k < j; ++k) rank2[pooled[k].second] = mid2;
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    long ra2 = 0;
    for (std::size_t i = 0; i < na; ++i) ra2 += rank2[i];
    const long u2 = ra2 - static_cast<long>(na * (na + 1));  // 2U
    const long center2 = static_cast<long>(na * nb);          // 2 * mean of U

    MannWhitneyResult res;
    res.u = static_cast<double>(u2) / 2.0;
    if (n <= kMannWhitneyExactMaxN) {
        res.exact = true;
        const long observed = std::labs(u2 - center2);
        long extreme = 0;
        long total = 0;
        const std::uint32_t limit = 1u << n;
        for (std::uint32_t mask = 0; mask < limit; ++mask) {
            if (static_cast<std::size_t>(std::popcount(mask)) != na) continue;
            long s2 = 0;
            for (std::size_t k = 0; k < n; ++k) {
                if (mask & (1u << k)) s2 += rank2[k];
            }
            ++total;
            if (std::labs(s2 - static_cast<long>(na * (na + 1)) - center2) >= observed) ++extreme;
        }
        res.p_two_sided = static_cast<double>(extreme) / static_cast<double>(total);
        return res;
    }
    const double dna = static_cast<double>(na);
    const double dnb = static_cast<double>(nb);
    const double dn = static_cast<double>(n);
    const double var = dna * dnb / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
    if (var <= 0.0) {
        res.p_two_sided = 1.0;
        return res;
    }
    const double dev = std::abs(res.u - dna * dnb / 2.0);
    const double z = (dev - 0.5) / std::sqrt(var);
    res.p_two_sided = z <= 0.0 ? 1.0 : std::min(1.0, 2.0 * normal_sf(z));
    return res;
}

std::map<std::string, SliceReport> bias_slices(const std::vector<std::string>& classes,
                                               const std::vector<std::string>& truths,
                                               const std::vector<std::string>& predictions,
                                               const std::vector<std::string>& groups, long min_size) {
    if (truths.size() != predictions.size() || truths.size() != groups.size()) {
        throw StatsError(StatsError::Kind::LengthMismatch, "bias_slices inputs differ in length");
    }
    std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> parts;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        auto g = trim(groups[i]);
        if (g.empty()) g = std::string(kNotSpecified);
        auto& [t, p] = parts[g];
        t.push_back(truths[i]);
        p.push_back(predictions[i]);
    }
    std::map<std::string, SliceReport> out;
    for (const auto& [g, tp] : parts) {
        SliceReport s;
        s.report = metrics(confusion_matrix(classes, tp.first, tp.second));
        s.n = static_cast<long>(tp.first.size());
        s.low_n = s.n < min_size;
        out.emplace(g, std::move(s));
    }
    return out;
}

}  // namespace annoteer::stats
