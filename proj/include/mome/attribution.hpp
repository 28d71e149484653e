#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mome/data.hpp"
#include "mome/model.hpp"
#include "mome/parallel.hpp"
#include "mome/train.hpp"

namespace mome {

// ---------------------------------------------------------------------------
// Integrated gradients
// ---------------------------------------------------------------------------

struct AttributionMap {
    std::map<std::string, Tensor> maps;  // shaped like each input volume
    std::string baseline = "zeros";
    std::size_t steps = 0;
    double delta_f = 0.0;                // F(x) - F(baseline)
    double completeness_residual = 0.0;  // |sum(maps) - delta_f|
};

namespace detail {

// Midpoint-rule path integral of grad F along the straight line from the
// baseline to the input, for an arbitrary scalar head over several inputs.
struct IgCore {
    std::vector<Tensor> maps;
    double delta_f = 0.0;
    double residual = 0.0;
};

inline IgCore integrated_gradients_fn(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                      const std::vector<Tensor>& inputs, const std::vector<Tensor>& baselines,
                                      std::size_t steps) {
    if (steps < 2) throw ConfigError("integrated_gradients: steps must be >= 2");
    if (inputs.size() != baselines.size()) throw ConfigError("integrated_gradients: baseline count mismatch");
    for (std::size_t i = 0; i < inputs.size(); ++i)
        if (inputs[i].valid() != baselines[i].valid() ||
            (inputs[i].valid() && inputs[i].shape() != baselines[i].shape()))
            throw ConfigError("integrated_gradients: baseline shape mismatch");

    std::vector<std::vector<double>> grad_sum(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i)
        if (inputs[i].valid()) grad_sum[i].assign(inputs[i].numel(), 0.0);

    for (std::size_t s = 1; s <= steps; ++s) {
        const double alpha = (static_cast<double>(s) - 0.5) / static_cast<double>(steps);
        std::vector<Tensor> point(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (!inputs[i].valid()) continue;
            Tensor t(inputs[i].shape());
            const double* x = inputs[i].ptr();
            const double* b = baselines[i].ptr();
            double* p = t.mutable_ptr();
            for (std::size_t k = 0; k < t.numel(); ++k) p[k] = b[k] + alpha * (x[k] - b[k]);
            t.set_requires_grad(true);
            point[i] = t;
        }
        GradTape tape;
        TapeScope scope(tape);
        Tensor value = f(point);
        tape.backward(value);
        for (std::size_t i = 0; i < inputs.size(); ++i)
            if (point[i].valid() && point[i].has_grad()) {
                const auto& g = point[i].grad();
                for (std::size_t k = 0; k < g.size(); ++k) grad_sum[i][k] += g[k];
            }
        tape.clear();
    }

    IgCore out;
    out.maps.resize(inputs.size());
    double total = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].valid()) continue;
        Tensor m(inputs[i].shape());
        const double* x = inputs[i].ptr();
        const double* b = baselines[i].ptr();
        double* p = m.mutable_ptr();
        for (std::size_t k = 0; k < m.numel(); ++k) {
            p[k] = (x[k] - b[k]) * grad_sum[i][k] / static_cast<double>(steps);
            total += p[k];
        }
        out.maps[i] = m;
    }
    {
        NoGradScope off;
        out.delta_f = f(inputs).item() - f(baselines).item();
    }
    out.residual = std::abs(total - out.delta_f);
    return out;
}

}  // namespace detail

enum class IgBaseline { Zeros, Custom };

// Attribution target is the pre-softmax logit margin (positive minus
// negative class), evaluated on the standardized, center-padded inputs.
// Padding voxels attribute exactly zero, so maps crop back to content shape.
inline AttributionMap integrated_gradients(const StudyRecord& rec, const std::vector<bool>& present,
                                           const ModelState& state, IgBaseline baseline_kind, std::size_t steps,
                                           const std::vector<Tensor>* custom_baseline = nullptr) {
    const MomeConfig& cfg = state.config();
    std::vector<Tensor> inputs = model_inputs(rec, cfg, present);
    std::vector<Tensor> baselines(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].valid()) continue;
        if (baseline_kind == IgBaseline::Custom) {
            if (!custom_baseline || custom_baseline->size() != inputs.size() || !(*custom_baseline)[i].valid())
                throw ConfigError("integrated_gradients: custom baseline missing for a present modality");
            baselines[i] = (*custom_baseline)[i];
        } else {
            baselines[i] = Tensor::zeros(inputs[i].shape());
        }
    }

    auto margin = [&](const std::vector<Tensor>& vols) {
        Tensor logits = forward_logits(state, vols, present);
        Tensor pos = slice_cols(logits, 1, 1);
        Tensor neg = slice_cols(logits, 0, 1);
        return sum(sub(pos, neg));
    };
    detail::IgCore core = detail::integrated_gradients_fn(margin, inputs, baselines, steps);

    AttributionMap out;
    out.baseline = baseline_kind == IgBaseline::Zeros ? "zeros" : "custom";
    out.steps = steps;
    out.delta_f = core.delta_f;
    out.completeness_residual = core.residual;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!core.maps[i].valid()) continue;
        const ModalityDesc& md = cfg.modalities[i];
        const Tensor& content = rec.volumes.at(md.name);
        const std::array<std::size_t, 3> canvas{md.depth, md.height, md.width};
        const auto off = centered_offset(content, canvas);
        Tensor cropped(content.shape());
        const double* src = core.maps[i].ptr();
        double* dst = cropped.mutable_ptr();
        const std::size_t c = content.dim(3);
        for (std::size_t z = 0; z < content.dim(0); ++z)
            for (std::size_t y = 0; y < content.dim(1); ++y) {
                const std::size_t srow =
                    (((z + off[0]) * canvas[1] + (y + off[1])) * canvas[2] + off[2]) * c;
                std::memcpy(dst + ((z * content.dim(1) + y) * content.dim(2)) * c, src + srow,
                            content.dim(2) * c * sizeof(double));
            }
        out.maps[md.name] = cropped;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shapley values over modalities
// ---------------------------------------------------------------------------

struct ShapleyResult {
    std::map<std::string, double> phi;
    double v_empty = 0.0;
    double v_full = 0.0;
    std::map<std::string, double> subset_scores;  // "" is the empty coalition
    double efficiency_residual = 0.0;
    std::string empty_rule = "fixed-half";
};

enum class EmptyCoalitionRule { FixedHalf, Prevalence };

// Exact Shapley allocation for a characteristic function over n players:
// phi_i = sum over S not containing i of |S|!(n-1-|S|)!/n! * (v(S+i) - v(S)).
inline std::vector<double> shapley_from_characteristic(std::size_t n,
                                                       const std::function<double(std::uint32_t)>& v) {
    if (n == 0 || n > 20) throw ConfigError("shapley: player count out of range");
    std::vector<double> fact(n + 1, 1.0);
    for (std::size_t i = 1; i <= n; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
    std::vector<double> cache(1u << n);
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) cache[mask] = v(mask);
    std::vector<double> phi(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
            if (mask & (1u << i)) continue;
            const std::size_t s = static_cast<std::size_t>(__builtin_popcount(mask));
            const double weight = fact[s] * fact[n - 1 - s] / fact[n];
            phi[i] += weight * (cache[mask | (1u << i)] - cache[mask]);
        }
    }
    return phi;
}

// v(S) is the (TTA-free by default) forward score with modality subset S;
// the empty coalition takes the configured rule's value.
inline ShapleyResult shapley_modalities(const StudyRecord& rec, const ModelState& state,
                                        EmptyCoalitionRule rule = EmptyCoalitionRule::FixedHalf,
                                        double prevalence = 0.5, bool use_tta = false) {
    const MomeConfig& cfg = state.config();
    const std::size_t n = cfg.modalities.size();
    const double v_empty = rule == EmptyCoalitionRule::FixedHalf ? 0.5 : prevalence;

    std::vector<double> scores(1u << n, v_empty);
    std::vector<std::uint32_t> masks;
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) masks.push_back(mask);
    parallel_for(masks.size(), [&](std::size_t k) {
        const std::uint32_t mask = masks[k];
        std::vector<bool> present(n, false);
        for (std::size_t i = 0; i < n; ++i) present[i] = (mask >> i) & 1u;
        if (use_tta) {
            scores[mask] = tta_predict(rec, present, state);
        } else {
            std::vector<Tensor> inputs = model_inputs(rec, cfg, present);
            scores[mask] = positive_score(state, inputs, present);
        }
    });

    ShapleyResult out;
    out.v_empty = v_empty;
    out.v_full = scores[(1u << n) - 1];
    out.empty_rule = rule == EmptyCoalitionRule::FixedHalf ? "fixed-half" : "prevalence";
    const std::vector<double> phi =
        shapley_from_characteristic(n, [&](std::uint32_t mask) { return scores[mask]; });
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out.phi[cfg.modalities[i].name] = phi[i];
        total += phi[i];
    }
    out.efficiency_residual = std::abs(total - (out.v_full - out.v_empty));
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        std::string key;
        for (std::size_t i = 0; i < n; ++i)
            if ((mask >> i) & 1u) {
                if (!key.empty()) key += '+';
                key += cfg.modalities[i].name;
            }
        out.subset_scores[key] = scores[mask];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Global Shapley
// ---------------------------------------------------------------------------

struct GlobalShapley {
    // predicted class ("malignant"/"benign") -> modality -> mean local phi
    std::map<std::string, std::map<std::string, double>> mean_phi;
    std::map<std::string, std::size_t> group_sizes;
    std::vector<std::string> warnings;
};

inline GlobalShapley global_shapley(const std::vector<ShapleyResult>& results, double threshold = 0.5) {
    if (results.empty()) throw DataError("global_shapley: no results");
    GlobalShapley out;
    std::map<std::string, std::map<std::string, double>> sums;
    for (const ShapleyResult& r : results) {
        const std::string group = r.v_full > threshold ? "malignant" : "benign";
        ++out.group_sizes[group];
        for (const auto& [mod, phi] : r.phi) sums[group][mod] += phi;
    }
    for (const char* g : {"benign", "malignant"})
        if (!out.group_sizes.count(g)) out.warnings.push_back(std::string("no cases predicted ") + g);
    for (const auto& [group, mods] : sums)
        for (const auto& [mod, total] : mods)
            out.mean_phi[group][mod] = total / static_cast<double>(out.group_sizes[group]);
    return out;
}

}  // namespace mome
