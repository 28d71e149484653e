#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mome/binio.hpp"
#include "mome/common.hpp"

namespace mome {

struct ModalityDesc {
    std::string name;
    std::size_t depth = 0, height = 0, width = 0, channels = 1;
};

struct TokenGrid {
    std::size_t depth = 0, height = 0, width = 0;
    std::size_t count() const { return depth * height * width; }
};

struct MomeConfig {
    std::vector<ModalityDesc> modalities;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t tokenizer_stages = 2;  // conv stages (stride 2 each) + final maxpool (stride 2)
    std::size_t n_blocks = 4;
    std::size_t n_sparse_blocks = 3;
    std::size_t soft_experts = 8;
    std::size_t slots_per_expert = 1;
    std::size_t adapter_hidden = 16;
    std::size_t classifier_classes = 2;

    static MomeConfig desk_default() {
        MomeConfig c;
        c.modalities = {{"dce", 48, 32, 16, 6}, {"dwi", 32, 32, 16, 1}, {"t2", 32, 32, 8, 1}};
        return c;
    }

    std::size_t modality_index(const std::string& name) const {
        for (std::size_t i = 0; i < modalities.size(); ++i)
            if (modalities[i].name == name) return i;
        throw ConfigError("unknown modality: " + name);
    }

    // Every stage halves with ceil, so each dimension always survives to >= 1.
    static std::size_t halved(std::size_t v, std::size_t times) {
        for (std::size_t i = 0; i < times; ++i) v = (v + 1) / 2;
        return v;
    }

    TokenGrid token_grid(std::size_t modality) const {
        const ModalityDesc& m = modalities.at(modality);
        const std::size_t h = tokenizer_stages + 1;  // convs + pool
        return {halved(m.depth, h), halved(m.height, h), halved(m.width, h)};
    }

    std::size_t token_count(std::size_t modality) const { return token_grid(modality).count(); }

    std::size_t soft_hidden() const { return d_model / 2; }
    std::size_t ffn_hidden() const { return 4 * d_model; }

    // Conv channel plan: doubling per stage, ending at d_model.
    std::vector<std::size_t> tokenizer_channels() const {
        std::vector<std::size_t> out(tokenizer_stages);
        for (std::size_t s = 0; s < tokenizer_stages; ++s) out[tokenizer_stages - 1 - s] = d_model >> s;
        return out;
    }

    void validate() const {
        if (modalities.empty()) throw ConfigError("config: at least one modality required");
        for (const auto& m : modalities) {
            if (m.name.empty()) throw ConfigError("config: modality with empty name");
            if (m.depth == 0 || m.height == 0 || m.width == 0 || m.channels == 0)
                throw ConfigError("config: modality " + m.name + " has a zero dimension");
        }
        for (std::size_t i = 0; i < modalities.size(); ++i)
            for (std::size_t j = i + 1; j < modalities.size(); ++j)
                if (modalities[i].name == modalities[j].name)
                    throw ConfigError("config: duplicate modality " + modalities[i].name);
        if (d_model == 0 || heads == 0 || d_model % heads != 0)
            throw ConfigError("config: d_model " + std::to_string(d_model) + " not divisible by heads " +
                              std::to_string(heads));
        if (n_blocks == 0 || n_sparse_blocks == 0 || n_sparse_blocks > n_blocks)
            throw ConfigError("config: need 1 <= n_sparse_blocks <= n_blocks, got " +
                              std::to_string(n_sparse_blocks) + "/" + std::to_string(n_blocks));
        if (soft_experts == 0 || slots_per_expert == 0)
            throw ConfigError("config: soft_experts and slots_per_expert must be >= 1");
        if (adapter_hidden == 0) throw ConfigError("config: adapter_hidden must be >= 1");
        if (classifier_classes < 2) throw ConfigError("config: classifier_classes must be >= 2");
        if (tokenizer_stages == 0) throw ConfigError("config: tokenizer_stages must be >= 1");
        if (tokenizer_stages > 1 && (d_model % (1u << (tokenizer_stages - 1))) != 0)
            throw ConfigError("config: d_model must divide evenly across " + std::to_string(tokenizer_stages) +
                              " doubling conv stages");
        if (soft_hidden() == 0) throw ConfigError("config: d_model too small for the soft expert bottleneck");
        for (std::size_t i = 0; i < modalities.size(); ++i)
            if (token_count(i) == 0)
                throw ConfigError("config: modality " + modalities[i].name + " yields no tokens");
    }

    void serialize(ByteWriter& w) const {
        w.u32(static_cast<std::uint32_t>(modalities.size()));
        for (const auto& m : modalities) {
            w.str(m.name);
            w.u32(static_cast<std::uint32_t>(m.depth));
            w.u32(static_cast<std::uint32_t>(m.height));
            w.u32(static_cast<std::uint32_t>(m.width));
            w.u32(static_cast<std::uint32_t>(m.channels));
        }
        for (std::size_t v : {d_model, heads, tokenizer_stages, n_blocks, n_sparse_blocks, soft_experts,
                              slots_per_expert, adapter_hidden, classifier_classes})
            w.u32(static_cast<std::uint32_t>(v));
    }

    static MomeConfig deserialize(ByteReader& r) {
        MomeConfig c;
        const std::uint32_t nm = r.u32("modality count");
        if (nm > 64) r.fail("implausible modality count");
        c.modalities.resize(nm);
        for (auto& m : c.modalities) {
            m.name = r.str("modality name");
            m.depth = r.u32("modality depth");
            m.height = r.u32("modality height");
            m.width = r.u32("modality width");
            m.channels = r.u32("modality channels");
        }
        std::array<std::size_t*, 9> fields{&c.d_model,      &c.heads,           &c.tokenizer_stages,
                                           &c.n_blocks,     &c.n_sparse_blocks, &c.soft_experts,
                                           &c.slots_per_expert, &c.adapter_hidden,  &c.classifier_classes};
        for (auto* f : fields) *f = r.u32("config field");
        return c;
    }

    bool operator==(const MomeConfig& o) const {
        if (modalities.size() != o.modalities.size()) return false;
        for (std::size_t i = 0; i < modalities.size(); ++i) {
            const auto& a = modalities[i];
            const auto& b = o.modalities[i];
            if (a.name != b.name || a.depth != b.depth || a.height != b.height || a.width != b.width ||
                a.channels != b.channels)
                return false;
        }
        return d_model == o.d_model && heads == o.heads && tokenizer_stages == o.tokenizer_stages &&
               n_blocks == o.n_blocks && n_sparse_blocks == o.n_sparse_blocks && soft_experts == o.soft_experts &&
               slots_per_expert == o.slots_per_expert && adapter_hidden == o.adapter_hidden &&
               classifier_classes == o.classifier_classes;
    }
};

enum class ClassWeighting { Uniform, Prevalence };

struct TrainConfig {
    std::size_t epochs = 100;
    double lr_max = 1e-4;
    double lr_min = 1e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 1;
    ClassWeighting class_weighting = ClassWeighting::Uniform;
    std::uint64_t seed = 42;
    bool augment_pad_jitter = true;
    bool augment_flips = true;

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(lr_min <= lr_max)) throw ConfigError("train: lr_min must not exceed lr_max");
        if (!(lr_max >= 0.0)) throw ConfigError("train: learning rates must be nonnegative");
    }
};

struct GenConfig {
    std::size_t n_studies = 1000;
    double class_prevalence = 0.5;
    std::map<std::string, double> modality_signal = {{"dce", 1.0}, {"dwi", 0.6}, {"t2", 0.3}};
    double noise_sigma = 0.25;
    std::size_t lesion_radius_min = 3;
    std::size_t lesion_radius_max = 5;
    std::uint64_t seed = 42;
    std::size_t content_margin = 4;  // canvas minus content, per spatial axis
    std::map<std::string, double> site_effects;  // site tag value -> intensity shift

    void validate() const {
        if (n_studies == 0) throw ConfigError("gen: n_studies must be >= 1");
        if (!(class_prevalence > 0.0 && class_prevalence < 1.0))
            throw ConfigError("gen: class_prevalence must lie in (0, 1)");
        for (const auto& [k, v] : modality_signal)
            if (v < 0.0) throw ConfigError("gen: signal amplitude for " + k + " must be >= 0");
        if (noise_sigma < 0.0) throw ConfigError("gen: noise_sigma must be >= 0");
        if (lesion_radius_min < 1 || lesion_radius_max < lesion_radius_min)
            throw ConfigError("gen: invalid lesion radius range");
    }
};

}  // namespace mome
