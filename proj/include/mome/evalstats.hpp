#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mome/common.hpp"
#include "mome/parallel.hpp"
#include "mome/rng.hpp"

namespace mome {

struct ScoredCase {
    std::string id;
    double score = 0.0;
    int label = 0;
    std::map<std::string, std::string> tags;
};

using Cohort = std::vector<ScoredCase>;

// Metrics return nullopt where the paper would print "-" (undefined ratio,
// single-class cohort, degenerate region).
using MetricFn = std::function<std::optional<double>(const Cohort&)>;

// ---------------------------------------------------------------------------
// Threshold metrics
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::size_t total() const { return tp + fp + fn + tn; }
};

// Predicted positive iff score > threshold (the "larger than 0.5" rule).
inline ConfusionCounts confusion_counts(const Cohort& cohort, double threshold) {
    ConfusionCounts c;
    for (const ScoredCase& s : cohort) {
        const bool pred = s.score > threshold;
        if (s.label == 1)
            pred ? ++c.tp : ++c.fn;
        else
            pred ? ++c.fp : ++c.tn;
    }
    return c;
}

struct ConfusionMetrics {
    std::optional<double> accuracy, f1, sensitivity, specificity, ppv, npv, mcc;
};

inline ConfusionMetrics confusion_metrics(const Cohort& cohort, double threshold) {
    if (cohort.empty()) throw DataError("confusion_metrics: empty cohort");
    const ConfusionCounts c = confusion_counts(cohort, threshold);
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
    ConfusionMetrics m;
    m.accuracy = (tp + tn) / static_cast<double>(c.total());
    if (2 * c.tp + c.fp + c.fn > 0) m.f1 = 2.0 * tp / (2.0 * tp + fp + fn);
    if (c.tp + c.fn > 0) m.sensitivity = tp / (tp + fn);
    if (c.tn + c.fp > 0) m.specificity = tn / (tn + fp);
    if (c.tp + c.fp > 0) m.ppv = tp / (tp + fp);
    if (c.tn + c.fn > 0) m.npv = tn / (tn + fn);
    const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (denom > 0.0) m.mcc = (tp * tn - fp * fn) / std::sqrt(denom);
    return m;
}

// ---------------------------------------------------------------------------
// Rank metrics
// ---------------------------------------------------------------------------

// P(random positive outscores random negative), ties counted half. Average
// ranks make this exactly the pairwise concordance value.
inline std::optional<double> auroc(const Cohort& cohort) {
    std::size_t pos = 0, neg = 0;
    for (const ScoredCase& s : cohort) (s.label == 1 ? pos : neg)++;
    if (pos == 0 || neg == 0) return std::nullopt;
    std::vector<std::size_t> idx(cohort.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return cohort[a].score < cohort[b].score; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && cohort[idx[j]].score == cohort[idx[i]].score) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t k = i; k < j; ++k)
            if (cohort[idx[k]].label == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);
}

// Average precision: sum of (R_k - R_{k-1}) * P_k over descending distinct
// score thresholds, tied scores processed as one block.
inline std::optional<double> auprc(const Cohort& cohort) {
    std::size_t pos = 0;
    for (const ScoredCase& s : cohort) pos += s.label == 1;
    if (pos == 0) return std::nullopt;
    std::vector<std::size_t> idx(cohort.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return cohort[a].score > cohort[b].score; });
    double ap = 0.0, prev_recall = 0.0;
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && cohort[idx[j]].score == cohort[idx[i]].score) ++j;
        for (std::size_t k = i; k < j; ++k) (cohort[idx[k]].label == 1 ? tp : fp)++;
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

struct RocPoint {
    double threshold, fpr, tpr;
};

// Staircase from (0,0) to (1,1) over descending distinct thresholds; tied
// blocks become single (possibly diagonal) segments.
inline std::vector<RocPoint> roc_points(const Cohort& cohort) {
    std::size_t pos = 0, neg = 0;
    for (const ScoredCase& s : cohort) (s.label == 1 ? pos : neg)++;
    std::vector<std::size_t> idx(cohort.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return cohort[a].score > cohort[b].score; });
    std::vector<RocPoint> out;
    out.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && cohort[idx[j]].score == cohort[idx[i]].score) ++j;
        for (std::size_t k = i; k < j; ++k) (cohort[idx[k]].label == 1 ? tp : fp)++;
        out.push_back({cohort[idx[i]].score, neg ? static_cast<double>(fp) / static_cast<double>(neg) : 0.0,
                       pos ? static_cast<double>(tp) / static_cast<double>(pos) : 0.0});
        i = j;
    }
    return out;
}

enum class PartialConstraint { SensitivityAtLeast, SpecificityAtLeast };

// Trapezoidal ROC area restricted to the constrained band, standardized to
// [0.5, 1] McClish-style: 0.5 * (1 + (pA - A_min) / (A_max - A_min)).
inline std::optional<double> partial_auroc(const Cohort& cohort, PartialConstraint kind, double level = 0.9) {
    std::size_t pos = 0, neg = 0;
    for (const ScoredCase& s : cohort) (s.label == 1 ? pos : neg)++;
    if (pos == 0 || neg == 0) return std::nullopt;
    const double width = 1.0 - level;
    if (width <= 0.0) return std::nullopt;
    const auto pts = roc_points(cohort);

    double area = 0.0;
    if (kind == PartialConstraint::SpecificityAtLeast) {
        // integrate tpr dx over fpr in [0, width]
        for (std::size_t i = 1; i < pts.size(); ++i) {
            double x0 = pts[i - 1].fpr, y0 = pts[i - 1].tpr;
            double x1 = pts[i].fpr, y1 = pts[i].tpr;
            if (x1 <= 0.0 && x0 <= 0.0) continue;
            const double lo = std::max(0.0, std::min(x0, x1));
            const double hi = std::min(width, std::max(x0, x1));
            if (hi <= lo) continue;
            auto y_at = [&](double x) { return x1 == x0 ? y1 : y0 + (y1 - y0) * (x - x0) / (x1 - x0); };
            area += 0.5 * (y_at(lo) + y_at(hi)) * (hi - lo);
        }
    } else {
        // integrate (1 - fpr) dy over tpr in [level, 1]
        for (std::size_t i = 1; i < pts.size(); ++i) {
            double y0 = pts[i - 1].tpr, x0 = pts[i - 1].fpr;
            double y1 = pts[i].tpr, x1 = pts[i].fpr;
            const double lo = std::max(level, std::min(y0, y1));
            const double hi = std::min(1.0, std::max(y0, y1));
            if (hi <= lo) continue;
            auto x_at = [&](double y) { return y1 == y0 ? x1 : x0 + (x1 - x0) * (y - y0) / (y1 - y0); };
            area += 0.5 * ((1.0 - x_at(lo)) + (1.0 - x_at(hi))) * (hi - lo);
        }
    }
    const double a_max = width;
    const double a_min = 0.5 * width * width;
    return 0.5 * (1.0 + (area - a_min) / (a_max - a_min));
}

// ---------------------------------------------------------------------------
// Bootstrap machinery
// ---------------------------------------------------------------------------

struct BootstrapCI {
    double point = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    std::size_t skipped = 0;  // resamples where the metric was undefined
};

namespace detail {

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Nearest-rank percentile at q per mille over sorted values.
inline double nearest_rank(const std::vector<double>& sorted, std::size_t permille) {
    const std::size_t m = sorted.size();
    std::size_t rank = std::max<std::size_t>(1, ceil_div(m * permille, 1000));
    return sorted[std::min(rank, m) - 1];
}

inline Cohort resample(const Cohort& cohort, Rng& rng) {
    Cohort out(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) out[i] = cohort[rng.uniform_int(cohort.size())];
    return out;
}

}  // namespace detail

// Point estimate on the full cohort; percentile CI (nearest rank, 2.5/97.5)
// over with-replacement resamples at cohort size. Resamples where the metric
// is undefined are skipped and counted. Bit-deterministic for a given
// (seed, n_boot) and independent of the thread cap.
inline BootstrapCI bootstrap_ci(const Cohort& cohort, const MetricFn& metric, std::size_t n_boot, std::uint64_t seed) {
    if (n_boot < 2) throw ConfigError("bootstrap_ci: n_boot must be >= 2");
    if (cohort.empty()) throw DataError("bootstrap_ci: empty cohort");
    const auto point = metric(cohort);
    if (!point) throw DataError("bootstrap_ci: metric undefined on the full cohort");
    std::vector<std::optional<double>> values(n_boot);
    parallel_for(n_boot, [&](std::size_t i) {
        Rng rng = Rng::derive(seed, i);
        values[i] = metric(detail::resample(cohort, rng));
    });
    std::vector<double> valid;
    valid.reserve(n_boot);
    std::size_t skipped = 0;
    for (const auto& v : values) v ? (void)valid.push_back(*v) : (void)++skipped;
    if (valid.empty()) throw DataError("bootstrap_ci: metric undefined on every resample");
    std::sort(valid.begin(), valid.end());
    return {*point, detail::nearest_rank(valid, 25), detail::nearest_rank(valid, 975), skipped};
}

struct PairedBootstrap {
    double diff = 0.0;      // metric(a) - metric(b) on the full cohorts
    double lo = 0.0, hi = 0.0;
    double pvalue = 1.0;    // two-sided, clipped to [2/(n_boot+1), 1]
    std::size_t skipped = 0;
    bool significant() const { return lo > 0.0 || hi < 0.0; }
};

// Paired resampling of case indices shared by both score vectors.
inline PairedBootstrap paired_bootstrap(const Cohort& a, const Cohort& b, const MetricFn& metric, std::size_t n_boot,
                                        std::uint64_t seed) {
    if (a.size() != b.size()) throw DataError("paired bootstrap: cohorts differ in size");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].id != b[i].id)
            throw DataError("paired bootstrap: case id mismatch at " + a[i].id + " vs " + b[i].id);
    if (n_boot < 2) throw ConfigError("paired bootstrap: n_boot must be >= 2");
    const auto ma = metric(a);
    const auto mb = metric(b);
    if (!ma || !mb) throw DataError("paired bootstrap: metric undefined on the full cohorts");
    std::vector<std::optional<double>> diffs(n_boot);
    parallel_for(n_boot, [&](std::size_t i) {
        Rng rng = Rng::derive(seed, i);
        Cohort ra(a.size()), rb(b.size());
        for (std::size_t k = 0; k < a.size(); ++k) {
            const std::size_t j = rng.uniform_int(a.size());
            ra[k] = a[j];
            rb[k] = b[j];
        }
        const auto va = metric(ra);
        const auto vb = metric(rb);
        if (va && vb) diffs[i] = *va - *vb;
    });
    PairedBootstrap out;
    out.diff = *ma - *mb;
    std::vector<double> valid;
    valid.reserve(n_boot);
    std::size_t le = 0, ge = 0;
    for (const auto& d : diffs) {
        if (!d) {
            ++out.skipped;
            continue;
        }
        valid.push_back(*d);
        if (*d <= 0.0) ++le;
        if (*d >= 0.0) ++ge;
    }
    if (valid.empty()) throw DataError("paired bootstrap: metric undefined on every resample");
    std::sort(valid.begin(), valid.end());
    out.lo = detail::nearest_rank(valid, 25);
    out.hi = detail::nearest_rank(valid, 975);
    const double m = static_cast<double>(valid.size());
    double p = 2.0 * std::min(static_cast<double>(le) / m, static_cast<double>(ge) / m);
    const double floor_p = 2.0 / (static_cast<double>(n_boot) + 1.0);
    out.pvalue = std::min(1.0, std::max(p, floor_p));
    return out;
}

inline double bootstrap_pvalue(const Cohort& a, const Cohort& b, const MetricFn& metric, std::size_t n_boot,
                               std::uint64_t seed) {
    return paired_bootstrap(a, b, metric, n_boot, seed).pvalue;
}

// ---------------------------------------------------------------------------
// Decision curves
// ---------------------------------------------------------------------------

enum class DecisionScenario { Treat, AvoidIntervention };

struct DecisionPoint {
    double threshold = 0.0;
    double net_benefit = 0.0;
    double lo = 0.0, hi = 0.0;
    double treat_all = 0.0;   // reference: intervene on everyone
    double treat_none = 0.0;  // reference: intervene on no one
};

// Inside decision curves a case counts as predicted positive iff score >= t.
inline double net_benefit(const Cohort& cohort, DecisionScenario scenario, double t) {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (const ScoredCase& s : cohort) {
        const bool pred = s.score >= t;
        if (s.label == 1)
            pred ? ++tp : ++fn;
        else
            pred ? ++fp : ++tn;
    }
    const double n = static_cast<double>(cohort.size());
    if (scenario == DecisionScenario::Treat)
        return static_cast<double>(tp) / n - static_cast<double>(fp) / n * (t / (1.0 - t));
    return static_cast<double>(tn) / n - static_cast<double>(fn) / n * ((1.0 - t) / t);
}

inline std::vector<DecisionPoint> decision_curve(const Cohort& cohort, DecisionScenario scenario,
                                                 const std::vector<double>& thresholds, std::size_t n_boot,
                                                 std::uint64_t seed) {
    if (cohort.empty()) throw DataError("decision_curve: empty cohort");
    double prev = 0.0;
    for (const ScoredCase& s : cohort) prev += s.label == 1;
    prev /= static_cast<double>(cohort.size());
    std::vector<DecisionPoint> out;
    for (double t : thresholds) {
        if (!(t > 0.0 && t < 1.0)) continue;  // endpoints are excluded from the grid
        MetricFn nb = [scenario, t](const Cohort& c) -> std::optional<double> { return net_benefit(c, scenario, t); };
        const BootstrapCI ci = bootstrap_ci(cohort, nb, n_boot, seed);
        DecisionPoint p;
        p.threshold = t;
        p.net_benefit = ci.point;
        p.lo = ci.lo;
        p.hi = ci.hi;
        p.treat_all = prev - (1.0 - prev) * (t / (1.0 - t));
        p.treat_none = 0.0;
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subgroups
// ---------------------------------------------------------------------------

struct SubgroupReport {
    std::size_t n = 0, positives = 0;
    std::optional<BootstrapCI> auroc, auprc, sensitivity, specificity;
};

inline std::map<std::string, SubgroupReport> subgroup_report(const Cohort& cohort, const std::string& tag_key,
                                                             double threshold, std::size_t n_boot,
                                                             std::uint64_t seed) {
    std::map<std::string, Cohort> groups;
    for (const ScoredCase& s : cohort) {
        auto it = s.tags.find(tag_key);
        if (it == s.tags.end()) throw DataError("subgroup_report: case " + s.id + " lacks tag " + tag_key);
        groups[it->second].push_back(s);
    }
    std::map<std::string, SubgroupReport> out;
    for (const auto& [value, group] : groups) {
        SubgroupReport rep;
        rep.n = group.size();
        for (const ScoredCase& s : group) rep.positives += s.label == 1;
        auto guarded = [&](const MetricFn& f) -> std::optional<BootstrapCI> {
            if (!f(group)) return std::nullopt;
            return bootstrap_ci(group, f, n_boot, seed);
        };
        rep.auroc = guarded([](const Cohort& c) { return auroc(c); });
        rep.auprc = guarded([](const Cohort& c) { return auprc(c); });
        rep.sensitivity = guarded([threshold](const Cohort& c) { return confusion_metrics(c, threshold).sensitivity; });
        rep.specificity = guarded([threshold](const Cohort& c) { return confusion_metrics(c, threshold).specificity; });
        out[value] = rep;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Operating-point transfer
// ---------------------------------------------------------------------------

struct OperatingPointResult {
    double threshold = 0.0;
    double dev_sensitivity = 0.0;
    ConfusionCounts applied;
    std::size_t downgraded_benign = 0;  // true negatives at the frozen threshold
    std::size_t missed_positives = 0;   // false negatives at the frozen threshold
};

// Largest threshold on the dev cohort whose sensitivity still meets the
// target, then applied frozen to the second cohort.
inline OperatingPointResult operating_point_transfer(const Cohort& dev, double target_sensitivity,
                                                     const Cohort& apply) {
    if (dev.empty() || apply.empty()) throw DataError("operating_point_transfer: empty cohort");
    std::vector<double> candidates{0.0};
    for (const ScoredCase& s : dev) candidates.push_back(s.score);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    auto sens_at = [&](double t) -> std::optional<double> { return confusion_metrics(dev, t).sensitivity; };
    std::optional<double> chosen;
    for (auto it = candidates.rbegin(); it != candidates.rend(); ++it) {
        const auto s = sens_at(*it);
        if (s && *s >= target_sensitivity) {
            chosen = *it;
            break;
        }
    }
    if (!chosen) {
        const auto best = sens_at(0.0);
        throw DataError("operating_point_transfer: no threshold reaches sensitivity " +
                        std::to_string(target_sensitivity) + "; best achievable is " +
                        std::to_string(best.value_or(0.0)));
    }
    OperatingPointResult out;
    out.threshold = *chosen;
    out.dev_sensitivity = *sens_at(*chosen);
    out.applied = confusion_counts(apply, *chosen);
    out.downgraded_benign = out.applied.tn;
    out.missed_positives = out.applied.fn;
    return out;
}

// ---------------------------------------------------------------------------
// Reader comparison
// ---------------------------------------------------------------------------

struct ReaderComparison {
    PairedBootstrap f1;
    PairedBootstrap mcc;
};

// Paired bootstrap of (model - reader) F1 and MCC; the model is thresholded
// at 0.5, reader calls are already binary.
inline ReaderComparison reader_compare(const Cohort& model, const std::vector<int>& reader_calls, std::size_t n_boot,
                                       std::uint64_t seed) {
    if (model.size() != reader_calls.size()) throw DataError("reader_compare: call count does not match cohort");
    Cohort reader = model;
    for (std::size_t i = 0; i < reader.size(); ++i) reader[i].score = reader_calls[i] ? 1.0 : 0.0;
    MetricFn f1 = [](const Cohort& c) { return confusion_metrics(c, 0.5).f1; };
    MetricFn mcc = [](const Cohort& c) { return confusion_metrics(c, 0.5).mcc; };
    return {paired_bootstrap(model, reader, f1, n_boot, seed), paired_bootstrap(model, reader, mcc, n_boot, seed)};
}

}  // namespace mome
