#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mome/config.hpp"
#include "mome/data.hpp"
#include "mome/evalstats.hpp"
#include "mome/model.hpp"
#include "mome/parallel.hpp"

namespace mome {

// ---------------------------------------------------------------------------
// Loss and schedule
// ---------------------------------------------------------------------------

// -w_label * log(score_label), scores clamped at 1e-12 before the log.
inline Tensor weighted_cross_entropy(const Tensor& scores, std::size_t label, const std::vector<double>& weights) {
    if (label >= scores.numel()) throw ConfigError("weighted_cross_entropy: label out of range");
    if (weights.size() != scores.numel())
        throw ConfigError("weighted_cross_entropy: expected " + std::to_string(scores.numel()) + " class weights");
    constexpr double kClamp = 1e-12;
    const double s = scores.values()[label];
    const double w = weights[label];
    Tensor loss = Tensor::scalar(-w * std::log(std::max(s, kClamp)));
    if (detail::wants_grad({&scores})) {
        detail::mark_recorded(
            loss,
            [scores, loss, label, w] {
                const double g = loss.grad()[0];
                const double sv = scores.values()[label];
                if (sv > kClamp) scores.grad_ref()[label] += g * (-w / sv);
            },
            {scores});
    }
    return loss;
}

// Prevalence weighting: w_c = N_total / (n_classes * N_c).
inline std::vector<double> class_weights(ClassWeighting mode, const Dataset& data, std::size_t n_classes) {
    std::vector<double> w(n_classes, 1.0);
    if (mode == ClassWeighting::Uniform) return w;
    std::vector<std::size_t> counts(n_classes, 0);
    for (const StudyRecord& r : data) {
        if (r.label < 0 || static_cast<std::size_t>(r.label) >= n_classes)
            throw DataError("label " + std::to_string(r.label) + " out of range in " + r.study_id);
        ++counts[r.label];
    }
    for (std::size_t c = 0; c < n_classes; ++c)
        w[c] = counts[c] == 0 ? 0.0
                              : static_cast<double>(data.size()) /
                                    (static_cast<double>(n_classes) * static_cast<double>(counts[c]));
    return w;
}

inline double cosine_lr(std::size_t epoch, const TrainConfig& cfg) {
    if (epoch >= cfg.epochs) throw ConfigError("cosine_lr: epoch out of range");
    if (cfg.epochs == 1) return cfg.lr_max;
    const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

// Moments exist only for trainable parameters; frozen tensors are never
// visited. A parameter without a grad this step is treated as zero-gradient.
class AdamOptimizer {
public:
    AdamOptimizer(ModelState& state, const TrainConfig& cfg) : state_(&state), cfg_(cfg) {
        for (std::size_t idx : state.trainable_indices()) {
            slots_.push_back({idx, std::vector<double>(state.params()[idx].tensor.numel(), 0.0),
                              std::vector<double>(state.params()[idx].tensor.numel(), 0.0)});
        }
    }

    std::size_t step_count() const { return t_; }

    void step(double lr) {
        ++t_;
        const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (Slot& s : slots_) {
            Param& p = state_->params()[s.index];
            auto& data = p.tensor.mutable_values();
            const bool has = p.tensor.has_grad();
            const std::vector<double>* g = has ? &p.tensor.grad() : nullptr;
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double gi = g ? (*g)[i] : 0.0;
                s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
                s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
            }
        }
    }

private:
    struct Slot {
        std::size_t index;
        std::vector<double> m, v;
    };
    ModelState* state_;
    TrainConfig cfg_;
    std::vector<Slot> slots_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Augmentation and input preparation
// ---------------------------------------------------------------------------

struct FlipMask {
    bool d = false, h = false, w = false;
    bool operator==(const FlipMask&) const = default;
};

inline Tensor flip_volume(const Tensor& vol, const FlipMask& f) {
    if (vol.rank() != 4) throw ConfigError("flip_volume expects [DxHxWxC], got " + shape_str(vol.shape()));
    if (!f.d && !f.h && !f.w) return vol;
    const std::size_t D = vol.dim(0), H = vol.dim(1), W = vol.dim(2), C = vol.dim(3);
    Tensor out(vol.shape());
    const double* pv = vol.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t z = 0; z < D; ++z) {
        const std::size_t sz = f.d ? D - 1 - z : z;
        for (std::size_t y = 0; y < H; ++y) {
            const std::size_t sy = f.h ? H - 1 - y : y;
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t sx = f.w ? W - 1 - x : x;
                std::memcpy(po + ((z * H + y) * W + x) * C, pv + ((sz * H + sy) * W + sx) * C, C * sizeof(double));
            }
        }
    }
    return out;
}

// Random <=2-axis flip plus random placement inside each modality's canvas.
// With both knobs off this is the identity.
inline StudyRecord augment_train(const StudyRecord& rec, const MomeConfig& cfg, const TrainConfig& tcfg, Rng& rng) {
    StudyRecord out;
    out.study_id = rec.study_id;
    out.label = rec.label;
    out.tags = rec.tags;
    FlipMask flip;
    if (tcfg.augment_flips) {
        // uniform over the 7 subsets of size <= 2 (identity included)
        static constexpr std::array<std::array<bool, 3>, 7> kMasks{
            {{false, false, false},
             {true, false, false},
             {false, true, false},
             {false, false, true},
             {true, true, false},
             {true, false, true},
             {false, true, true}}};
        const auto& m = kMasks[rng.uniform_int(kMasks.size())];
        flip = {m[0], m[1], m[2]};
    }
    for (const ModalityDesc& md : cfg.modalities) {
        auto it = rec.volumes.find(md.name);
        if (it == rec.volumes.end()) throw DataError("record " + rec.study_id + " lacks modality " + md.name);
        Tensor vol = flip_volume(it->second, flip);
        if (tcfg.augment_pad_jitter) {
            const std::array<std::size_t, 3> canvas{md.depth, md.height, md.width};
            std::array<std::size_t, 3> offset{};
            for (int a = 0; a < 3; ++a) {
                const std::size_t slack = canvas[a] - vol.dim(a);
                offset[a] = slack == 0 ? 0 : rng.uniform_int(slack + 1);
            }
            vol = pad_to(vol, canvas, offset);
        }
        out.volumes[md.name] = std::move(vol);
    }
    return out;
}

// Standardize per channel, flip, then place on the zero canvas.
inline std::vector<Tensor> model_inputs(const StudyRecord& rec, const MomeConfig& cfg,
                                        const std::vector<bool>& present, const FlipMask& flip = {},
                                        const std::array<std::size_t, 3>* placement_sel = nullptr) {
    std::vector<Tensor> out(cfg.modalities.size());
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
        if (!present[i]) continue;
        const ModalityDesc& md = cfg.modalities[i];
        auto it = rec.volumes.find(md.name);
        if (it == rec.volumes.end()) throw DataError("record " + rec.study_id + " lacks modality " + md.name);
        Tensor vol = flip_volume(standardize(it->second), flip);
        const std::array<std::size_t, 3> canvas{md.depth, md.height, md.width};
        std::array<std::size_t, 3> offset = centered_offset(vol, canvas);
        if (placement_sel) {
            // in-plane axes take start/center/end placements, depth stays centered
            for (int a = 1; a < 3; ++a) {
                const std::size_t slack = canvas[a] - vol.dim(a);
                offset[a] = (*placement_sel)[a] == 0 ? 0 : ((*placement_sel)[a] == 1 ? slack / 2 : slack);
            }
        }
        out[i] = pad_to(vol, canvas, offset);
    }
    return out;
}

inline std::vector<bool> all_present(const MomeConfig& cfg) { return std::vector<bool>(cfg.modalities.size(), true); }

inline double positive_score(const ModelState& state, const std::vector<Tensor>& inputs,
                             const std::vector<bool>& present) {
    NoGradScope off;
    Tensor scores = forward_scores(state, inputs, present);
    return scores.values()[scores.numel() >= 2 ? 1 : 0];
}

// ---------------------------------------------------------------------------
// Test-time augmentation: 9 placements x 6 flips = 54 deterministic variants
// ---------------------------------------------------------------------------

struct TtaVariant {
    std::array<std::size_t, 3> placement;  // {depth(center), h sel, w sel}, sels in {0,1,2}
    FlipMask flip;
};

inline std::vector<TtaVariant> tta_variants() {
    static constexpr std::array<std::array<bool, 3>, 6> kFlips{{{true, false, false},
                                                                {false, true, false},
                                                                {false, false, true},
                                                                {true, true, false},
                                                                {true, false, true},
                                                                {false, true, true}}};
    std::vector<TtaVariant> out;
    out.reserve(54);
    for (std::size_t ph = 0; ph < 3; ++ph)
        for (std::size_t pw = 0; pw < 3; ++pw)
            for (const auto& f : kFlips) out.push_back({{1, ph, pw}, {f[0], f[1], f[2]}});
    return out;
}

// Averages the positive-class score over the 54 variants (compensated
// summation in a fixed order).
inline double tta_predict(const StudyRecord& rec, const std::vector<bool>& present, const ModelState& state) {
    const auto variants = tta_variants();
    std::vector<double> scores(variants.size());
    parallel_for(variants.size(), [&](std::size_t i) {
        const TtaVariant& v = variants[i];
        std::vector<Tensor> inputs = model_inputs(rec, state.config(), present, v.flip, &v.placement);
        scores[i] = positive_score(state, inputs, present);
    });
    double s = 0.0, c = 0.0;
    for (double x : scores) {
        const double t = s + x;
        if (std::abs(s) >= std::abs(x))
            c += (s - t) + x;
        else
            c += (x - t) + s;
        s = t;
    }
    return (s + c) / static_cast<double>(variants.size());
}

// ---------------------------------------------------------------------------
// Cohort scoring
// ---------------------------------------------------------------------------

inline Cohort score_cohort(const ModelState& state, const Dataset& data, const std::vector<bool>& present,
                           bool use_tta) {
    Cohort cohort(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        const StudyRecord& rec = data[i];
        double score;
        if (use_tta) {
            score = tta_predict(rec, present, state);
        } else {
            std::vector<Tensor> inputs = model_inputs(rec, state.config(), present);
            score = positive_score(state, inputs, present);
        }
        cohort[i] = {rec.study_id, score, rec.label, rec.tags};
    });
    return cohort;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochTrace {
    std::size_t epoch;
    double lr;
    double mean_loss;
    double val_auroc;
};

struct TrainResult {
    ModelState best_state;
    std::vector<EpochTrace> trace;
    std::size_t best_epoch = 0;
    double best_val_auroc = 0.0;
};

// Shuffled single-record (or small-batch) steps with the cosine schedule;
// returns the checkpoint with the best validation AUROC, earliest epoch on
// ties.
inline TrainResult train(const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                         const MomeConfig& model_cfg) {
    cfg.validate();
    model_cfg.validate();
    if (train_set.empty() || val_set.empty()) throw DataError("train: empty train or validation split");

    ModelState state = ModelState::init(model_cfg, cfg.seed);
    AdamOptimizer opt(state, cfg);
    const std::vector<double> weights = class_weights(cfg.class_weighting, train_set, model_cfg.classifier_classes);
    const std::vector<bool> present = all_present(model_cfg);
    Rng rng = Rng::derive(cfg.seed, 0x7261696e);

    TrainResult result;
    result.best_state = state.clone();
    result.best_val_auroc = -1.0;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg);
        rng.shuffle(order);
        double loss_sum = 0.0, loss_comp = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t bsz = std::min(cfg.batch_size, order.size() - start);
            GradTape tape;
            TapeScope scope(tape);
            Tensor batch_loss;
            for (std::size_t b = 0; b < bsz; ++b) {
                const StudyRecord& rec = train_set[order[start + b]];
                StudyRecord pre = rec;
                for (auto& [name, vol] : pre.volumes) vol = standardize(vol);
                StudyRecord aug = augment_train(pre, model_cfg, cfg, rng);
                std::vector<Tensor> inputs(model_cfg.modalities.size());
                for (std::size_t i = 0; i < model_cfg.modalities.size(); ++i) {
                    const ModalityDesc& md = model_cfg.modalities[i];
                    const Tensor& vol = aug.volumes.at(md.name);
                    const std::array<std::size_t, 3> canvas{md.depth, md.height, md.width};
                    inputs[i] = vol.dim(0) == canvas[0] && vol.dim(1) == canvas[1] && vol.dim(2) == canvas[2]
                                    ? vol
                                    : pad_to(vol, canvas, centered_offset(vol, canvas));
                }
                Tensor scores = forward_scores(state, inputs, present);
                Tensor loss = weighted_cross_entropy(scores, static_cast<std::size_t>(rec.label), weights);
                if (!std::isfinite(loss.item()))
                    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                       std::to_string(start + b));
                {  // compensated accumulation of the displayed loss
                    const double x = loss.item();
                    const double t = loss_sum + x;
                    loss_comp += std::abs(loss_sum) >= std::abs(x) ? (loss_sum - t) + x : (x - t) + loss_sum;
                    loss_sum = t;
                }
                Tensor scaled = scale(loss, 1.0 / static_cast<double>(bsz));
                batch_loss = batch_loss.valid() ? add(batch_loss, scaled) : scaled;
            }
            tape.backward(batch_loss);
            opt.step(lr);
            tape.clear();
        }
        const double mean_loss = (loss_sum + loss_comp) / static_cast<double>(train_set.size());

        Cohort val_cohort = score_cohort(state, val_set, present, false);
        const auto val_auroc = auroc(val_cohort);
        const double va = val_auroc.value_or(0.0);
        result.trace.push_back({epoch, lr, mean_loss, va});
        if (va > result.best_val_auroc) {
            result.best_val_auroc = va;
            result.best_epoch = epoch;
            result.best_state = state.clone();
        }
    }
    return result;
}

inline std::string trace_csv(const std::vector<EpochTrace>& trace) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,lr,mean_loss,val_auroc\n";
    for (const EpochTrace& t : trace) os << t.epoch << ',' << t.lr << ',' << t.mean_loss << ',' << t.val_auroc << '\n';
    return os.str();
}

}  // namespace mome
