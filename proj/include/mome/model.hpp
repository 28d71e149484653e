#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mome/config.hpp"
#include "mome/tensor.hpp"

namespace mome {

constexpr double kLayerNormEps = 1e-5;

struct Param {
    std::string name;
    Tensor tensor;
    bool frozen = false;
};

// All model parameters, partitioned into the frozen backbone set and the
// trainable adapter/tokenizer/head set. Frozen tensors never require grad and
// the optimizer never touches them.
class ModelState {
public:
    ModelState() = default;
    ModelState(MomeConfig config) : config_(std::move(config)) { config_.validate(); }

    const MomeConfig& config() const { return config_; }

    void add(const std::string& name, Tensor t, bool frozen) {
        if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
        t.set_requires_grad(!frozen);
        index_[name] = params_.size();
        params_.push_back({name, std::move(t), frozen});
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("missing parameter " + name);
        return params_[it->second].tensor;
    }

    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params() { return params_; }

    std::vector<std::size_t> trainable_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (!params_[i].frozen) out.push_back(i);
        return out;
    }

    ModelState clone() const {
        ModelState s(config_);
        for (const Param& p : params_) s.add(p.name, p.tensor.clone(), p.frozen);
        return s;
    }

    // Frozen backbone initialization stands in for pre-trained weights: a
    // seeded Gaussian with std 0.02 (norm scales centered at 1 so the blocks
    // keep mixing signal). Adapter output stages start at zero, so the whole
    // model initially equals the frozen backbone path.
    static ModelState init(const MomeConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelState s(cfg);
        Rng rng(seed);
        const std::size_t d = cfg.d_model;

        auto gauss = [&rng](Shape shape, double std_, double mean = 0.0) {
            return Tensor::randn(std::move(shape), rng, std_, mean);
        };
        auto he = [&rng](Shape shape, std::size_t fan_in) {
            return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
        };

        // frozen backbone blocks
        for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
            const std::string pre = "block" + std::to_string(b) + ".";
            s.add(pre + "ln1.gamma", gauss({d}, 0.02, 1.0), true);
            s.add(pre + "ln1.beta", gauss({d}, 0.02), true);
            for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) s.add(pre + w, gauss({d, d}, 0.02), true);
            for (const char* v : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) s.add(pre + v, gauss({d}, 0.02), true);
            s.add(pre + "ln2.gamma", gauss({d}, 0.02, 1.0), true);
            s.add(pre + "ln2.beta", gauss({d}, 0.02), true);
            s.add(pre + "ffn.w1", gauss({d, cfg.ffn_hidden()}, 0.02), true);
            s.add(pre + "ffn.b1", gauss({cfg.ffn_hidden()}, 0.02), true);
            s.add(pre + "ffn.w2", gauss({cfg.ffn_hidden(), d}, 0.02), true);
            s.add(pre + "ffn.b2", gauss({d}, 0.02), true);
        }

        // tokenizers (conv stages carry no bias; instance norm removes it)
        const auto channels = cfg.tokenizer_channels();
        for (const auto& m : cfg.modalities) {
            std::size_t cin = m.channels;
            for (std::size_t st = 0; st < cfg.tokenizer_stages; ++st) {
                const std::size_t cout = channels[st];
                s.add("tok." + m.name + ".conv" + std::to_string(st) + ".kernel",
                      he({3, 3, 3, cin, cout}, 27 * cin), false);
                cin = cout;
            }
        }

        // CLS token and per-modality positional embeddings
        s.add("cls", gauss({1, d}, 0.02), false);
        s.add("pos.cls", gauss({1, d}, 0.02), false);
        for (std::size_t i = 0; i < cfg.modalities.size(); ++i)
            s.add("pos." + cfg.modalities[i].name, gauss({cfg.token_count(i), d}, 0.02), false);

        // sparse modality experts, one per (block, modality)
        for (std::size_t b = 0; b < cfg.n_sparse_blocks; ++b)
            for (const auto& m : cfg.modalities) {
                const std::string pre = "sparse" + std::to_string(b) + "." + m.name + ".";
                s.add(pre + "down.w", he({d, cfg.adapter_hidden}, d), false);
                s.add(pre + "down.b", Tensor::zeros({cfg.adapter_hidden}), false);
                s.add(pre + "up.w", Tensor::zeros({cfg.adapter_hidden, d}), false);
                s.add(pre + "up.b", Tensor::zeros({d}), false);
                s.add(pre + "ln.gamma", Tensor::ones({d}), false);
                s.add(pre + "ln.beta", Tensor::zeros({d}), false);
            }

        // soft mixture blocks
        const std::size_t dh = cfg.soft_hidden();
        const std::size_t slots = cfg.soft_experts * cfg.slots_per_expert;
        for (std::size_t b = cfg.n_sparse_blocks; b < cfg.n_blocks; ++b) {
            const std::string pre = "soft" + std::to_string(b) + ".";
            s.add(pre + "down.w", he({d, dh}, d), false);
            s.add(pre + "down.b", Tensor::zeros({dh}), false);
            s.add(pre + "phi", gauss({dh, slots}, 0.02), false);
            for (std::size_t e = 0; e < cfg.soft_experts; ++e) {
                s.add(pre + "expert" + std::to_string(e) + ".w", he({dh, dh}, dh), false);
                s.add(pre + "expert" + std::to_string(e) + ".b", Tensor::zeros({dh}), false);
            }
            s.add(pre + "up.w", Tensor::zeros({dh, d}), false);
            s.add(pre + "up.b", Tensor::zeros({d}), false);
            s.add(pre + "ln.gamma", Tensor::ones({d}), false);
            s.add(pre + "ln.beta", Tensor::zeros({d}), false);
        }

        // classification head on the CLS token
        s.add("head.ln.gamma", Tensor::ones({d}), false);
        s.add("head.ln.beta", Tensor::zeros({d}), false);
        s.add("head.w", gauss({d, cfg.classifier_classes}, 0.02), false);
        s.add("head.b", Tensor::zeros({cfg.classifier_classes}), false);
        return s;
    }

private:
    MomeConfig config_;
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

struct SeqSpan {
    std::size_t modality = 0;
    std::size_t offset = 0;
    std::size_t length = 0;  // includes the CLS slot when hosted here
    bool hosts_cls = false;
};

struct TokenSequence {
    Tensor tokens;  // [m x d_model]
    std::vector<SeqSpan> spans;
    std::size_t cls_pos = 0;
    std::vector<bool> present;
};

struct ForwardOptions {
    bool skip_adapters = false;  // frozen-backbone-only path, for collapse checks
};

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_rowvec(matmul(x, w), b); }

inline AttentionParams attn_params(const ModelState& s, const std::string& pre) {
    return {s.at(pre + "attn.wq"), s.at(pre + "attn.bq"), s.at(pre + "attn.wk"), s.at(pre + "attn.bk"),
            s.at(pre + "attn.wv"), s.at(pre + "attn.bv"), s.at(pre + "attn.wo"), s.at(pre + "attn.bo")};
}

}  // namespace detail

// Conv(+instance norm+relu) stages then a stride-2 maxpool; the spatial grid
// flattens to a token sequence of width d_model.
inline Tensor tokenize(const Tensor& volume, std::size_t modality, const ModelState& state) {
    const MomeConfig& cfg = state.config();
    const ModalityDesc& m = cfg.modalities.at(modality);
    if (volume.rank() != 4 || volume.dim(0) != m.depth || volume.dim(1) != m.height || volume.dim(2) != m.width ||
        volume.dim(3) != m.channels)
        throw DataError("volume " + shape_str(volume.shape()) + " does not match descriptor for " + m.name + " [" +
                        std::to_string(m.depth) + "x" + std::to_string(m.height) + "x" + std::to_string(m.width) +
                        "x" + std::to_string(m.channels) + "]");
    Tensor x = volume;
    for (std::size_t st = 0; st < cfg.tokenizer_stages; ++st) {
        const Tensor& k = state.at("tok." + m.name + ".conv" + std::to_string(st) + ".kernel");
        x = relu(instance_norm(conv3d(x, k, Tensor(), 2)));
    }
    x = maxpool3d(x, 2, 2);
    const TokenGrid grid = cfg.token_grid(modality);
    return reshape(x, {grid.count(), cfg.d_model});
}

// Z = x + MSA*(LN*(x)); out = Z + FFN*(LN*(Z)) + adapter(LN*(Z)), where the
// adapter is LN(LP(GELU(LP(.)))) for this block and modality.
inline Tensor sparse_block_forward(const Tensor& x, std::size_t block, std::size_t modality, const ModelState& state,
                                   const ForwardOptions& opts = {}) {
    const MomeConfig& cfg = state.config();
    if (block >= cfg.n_sparse_blocks) throw ConfigError("sparse_block_forward: block index beyond sparse stage");
    if (modality >= cfg.modalities.size()) throw ConfigError("sparse_block_forward: unknown modality index");
    const std::string pre = "block" + std::to_string(block) + ".";
    Tensor n1 = layer_norm(x, state.at(pre + "ln1.gamma"), state.at(pre + "ln1.beta"), kLayerNormEps);
    Tensor z = add(x, multi_head_self_attention(n1, detail::attn_params(state, pre), cfg.heads));
    Tensor n2 = layer_norm(z, state.at(pre + "ln2.gamma"), state.at(pre + "ln2.beta"), kLayerNormEps);
    Tensor ffn = detail::linear(gelu(detail::linear(n2, state.at(pre + "ffn.w1"), state.at(pre + "ffn.b1"))),
                                state.at(pre + "ffn.w2"), state.at(pre + "ffn.b2"));
    Tensor out = add(z, ffn);
    if (!opts.skip_adapters) {
        const std::string apre = "sparse" + std::to_string(block) + "." + cfg.modalities[modality].name + ".";
        Tensor a = detail::linear(gelu(detail::linear(n2, state.at(apre + "down.w"), state.at(apre + "down.b"))),
                                  state.at(apre + "up.w"), state.at(apre + "up.b"));
        a = layer_norm(a, state.at(apre + "ln.gamma"), state.at(apre + "ln.beta"), kLayerNormEps);
        out = add(out, a);
    }
    return out;
}

struct LinearExpert {
    Tensor w, b;
};

// Soft mixture of experts. Dispatch weights are a softmax over tokens per
// slot column, combine weights a softmax over slots per token row; slot j is
// processed by expert floor(j/p).
inline Tensor soft_moe(const Tensor& x, const Tensor& phi, const std::vector<LinearExpert>& experts,
                       std::size_t slots_per_expert) {
    if (x.rank() != 2 || phi.rank() != 2 || x.dim(1) != phi.dim(0))
        throw ConfigError("soft_moe: token width " + shape_str(x.shape()) + " does not match phi " +
                          shape_str(phi.shape()));
    const std::size_t slots = phi.dim(1);
    if (experts.empty() || slots_per_expert == 0 || slots != experts.size() * slots_per_expert)
        throw ConfigError("soft_moe: phi provides " + std::to_string(slots) + " slots but " +
                          std::to_string(experts.size()) + " experts x " + std::to_string(slots_per_expert) +
                          " were configured");
    Tensor logits = matmul(x, phi);                            // [m x slots]
    Tensor dispatch = softmax(logits, 0);                      // column-normalized over tokens
    Tensor slot_in = matmul_canonical(transpose(dispatch), x); // [slots x d]
    std::vector<Tensor> slot_out;
    slot_out.reserve(experts.size());
    for (std::size_t e = 0; e < experts.size(); ++e) {
        Tensor rows = slice_rows(slot_in, e * slots_per_expert, slots_per_expert);
        slot_out.push_back(detail::linear(rows, experts[e].w, experts[e].b));
    }
    Tensor processed = slot_out.size() == 1 ? slot_out[0] : concat_rows(slot_out);
    Tensor combine = softmax(logits, 1);  // row-normalized over slots
    return matmul(combine, processed);
}

// Z = x + MSA*(LN*(x)); out = Z + FFN*(LN*(Z)) + LN(LP(soft_moe(GELU(LP(LN*(Z)))))).
inline Tensor soft_block_forward(const Tensor& x, std::size_t block, const ModelState& state,
                                 const ForwardOptions& opts = {}) {
    const MomeConfig& cfg = state.config();
    if (block < cfg.n_sparse_blocks || block >= cfg.n_blocks)
        throw ConfigError("soft_block_forward: block index outside the soft stage");
    if (x.numel() == 0 || x.dim(0) == 0) throw ConfigError("soft_block_forward: empty sequence");
    const std::string pre = "block" + std::to_string(block) + ".";
    Tensor n1 = layer_norm(x, state.at(pre + "ln1.gamma"), state.at(pre + "ln1.beta"), kLayerNormEps);
    Tensor z = add(x, multi_head_self_attention(n1, detail::attn_params(state, pre), cfg.heads));
    Tensor n2 = layer_norm(z, state.at(pre + "ln2.gamma"), state.at(pre + "ln2.beta"), kLayerNormEps);
    Tensor ffn = detail::linear(gelu(detail::linear(n2, state.at(pre + "ffn.w1"), state.at(pre + "ffn.b1"))),
                                state.at(pre + "ffn.w2"), state.at(pre + "ffn.b2"));
    Tensor out = add(z, ffn);
    if (!opts.skip_adapters) {
        const std::string spre = "soft" + std::to_string(block) + ".";
        std::vector<LinearExpert> experts(cfg.soft_experts);
        for (std::size_t e = 0; e < cfg.soft_experts; ++e) {
            experts[e].w = state.at(spre + "expert" + std::to_string(e) + ".w");
            experts[e].b = state.at(spre + "expert" + std::to_string(e) + ".b");
        }
        Tensor t = gelu(detail::linear(n2, state.at(spre + "down.w"), state.at(spre + "down.b")));
        t = soft_moe(t, state.at(spre + "phi"), experts, cfg.slots_per_expert);
        t = detail::linear(t, state.at(spre + "up.w"), state.at(spre + "up.b"));
        t = layer_norm(t, state.at(spre + "ln.gamma"), state.at(spre + "ln.beta"), kLayerNormEps);
        out = add(out, t);
    }
    return out;
}

// The CLS token lives at the end of its host span: the modality named "dce"
// when present, otherwise the first present modality in config order.
inline std::size_t cls_host(const MomeConfig& cfg, const std::vector<bool>& present) {
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i)
        if (present[i] && cfg.modalities[i].name == "dce") return i;
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i)
        if (present[i]) return i;
    throw ConfigError("no modality present");
}

// volumes[i] must be a canvas-sized volume for every present modality;
// absent entries are never read.
inline TokenSequence build_sequence(const ModelState& state, const std::vector<Tensor>& volumes,
                                    const std::vector<bool>& present, const ForwardOptions& opts = {}) {
    const MomeConfig& cfg = state.config();
    if (present.size() != cfg.modalities.size() || volumes.size() != cfg.modalities.size())
        throw ConfigError("forward: expected one volume slot per configured modality");
    bool any = false;
    for (bool p : present) any = any || p;
    if (!any) throw ConfigError("no modality present");

    TokenSequence seq;
    seq.present = present;
    const std::size_t host = cls_host(cfg, present);
    std::vector<Tensor> parts;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
        if (!present[i]) continue;
        Tensor tok = add(tokenize(volumes[i], i, state), state.at("pos." + cfg.modalities[i].name));
        SeqSpan span{i, offset, tok.dim(0), false};
        if (i == host) {
            Tensor cls = add(state.at("cls"), state.at("pos.cls"));
            tok = concat_rows({tok, cls});
            span.length = tok.dim(0);
            span.hosts_cls = true;
            seq.cls_pos = offset + span.length - 1;
        }
        parts.push_back(tok);
        offset += span.length;
        seq.spans.push_back(span);
    }
    // Sparse stage: each modality's span attends only to itself (plus the CLS
    // it hosts); nothing crosses modalities until the soft stage.
    for (std::size_t p = 0; p < parts.size(); ++p)
        for (std::size_t b = 0; b < cfg.n_sparse_blocks; ++b)
            parts[p] = sparse_block_forward(parts[p], b, seq.spans[p].modality, state, opts);
    seq.tokens = parts.size() == 1 ? parts[0] : concat_rows(parts);
    return seq;
}

inline Tensor forward_logits(const ModelState& state, const std::vector<Tensor>& volumes,
                             const std::vector<bool>& present, const ForwardOptions& opts = {}) {
    const MomeConfig& cfg = state.config();
    TokenSequence seq = build_sequence(state, volumes, present, opts);
    Tensor x = seq.tokens;
    for (std::size_t b = cfg.n_sparse_blocks; b < cfg.n_blocks; ++b) x = soft_block_forward(x, b, state, opts);
    Tensor cls = slice_rows(x, seq.cls_pos, 1);
    cls = layer_norm(cls, state.at("head.ln.gamma"), state.at("head.ln.beta"), kLayerNormEps);
    return detail::linear(cls, state.at("head.w"), state.at("head.b"));
}

inline Tensor forward_scores(const ModelState& state, const std::vector<Tensor>& volumes,
                             const std::vector<bool>& present, const ForwardOptions& opts = {}) {
    return softmax(forward_logits(state, volumes, present, opts), 1);
}

// Test helper: zeroing every adapter/soft-mixture output stage makes the full
// forward coincide with the frozen-backbone-only path.
inline void collapse_adapter_outputs(ModelState& state) {
    for (Param& p : state.params()) {
        const bool sparse_out = p.name.rfind("sparse", 0) == 0 &&
                                (p.name.find(".up.") != std::string::npos || p.name.find(".ln.") != std::string::npos);
        const bool soft_out = p.name.rfind("soft", 0) == 0 &&
                              (p.name.find(".up.") != std::string::npos || p.name.find(".ln.") != std::string::npos);
        if (sparse_out || soft_out)
            for (double& v : p.tensor.mutable_values()) v = 0.0;
    }
}

}  // namespace mome
