#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mome/checkpoint.hpp"
#include "mome/model.hpp"
#include "mome/train.hpp"

using namespace mome;

namespace {

MomeConfig tiny_config() {
    MomeConfig c;
    c.modalities = {{"dce", 8, 8, 4, 2}, {"dwi", 4, 4, 4, 1}, {"t2", 4, 4, 2, 1}};
    c.d_model = 8;
    c.heads = 2;
    c.tokenizer_stages = 1;
    c.n_blocks = 2;
    c.n_sparse_blocks = 1;
    c.soft_experts = 2;
    c.slots_per_expert = 1;
    c.adapter_hidden = 2;
    c.classifier_classes = 2;
    return c;
}

std::vector<Tensor> random_inputs(const MomeConfig& cfg, Rng& rng, const std::vector<bool>& present) {
    std::vector<Tensor> vols(cfg.modalities.size());
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
        if (!present[i]) continue;
        const auto& m = cfg.modalities[i];
        vols[i] = Tensor::randn({m.depth, m.height, m.width, m.channels}, rng);
    }
    return vols;
}

}  // namespace

TEST_CASE("token grid arithmetic", "[model]") {
    // full-size geometry: 384x256x128 DCE through 3 conv stages + pool
    MomeConfig paper;
    paper.modalities = {{"dce", 384, 256, 128, 6}};
    paper.d_model = 768;
    paper.heads = 12;
    paper.tokenizer_stages = 3;
    paper.n_blocks = 12;
    paper.n_sparse_blocks = 9;
    paper.soft_experts = 128;
    paper.adapter_hidden = 192;
    paper.validate();
    const TokenGrid g = paper.token_grid(0);
    CHECK(g.depth == 24);
    CHECK(g.height == 16);
    CHECK(g.width == 8);
    CHECK(g.count() == 3072);

    // desk geometry: 48x32x16 through 2 conv stages + pool
    const MomeConfig desk = MomeConfig::desk_default();
    CHECK(desk.token_count(desk.modality_index("dce")) == 48);
}

TEST_CASE("config validation", "[model]") {
    MomeConfig bad = tiny_config();
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.n_sparse_blocks = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.modalities[0].depth = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("state init is deterministic and partitioned", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState a = ModelState::init(cfg, 7);
    ModelState b = ModelState::init(cfg, 7);
    REQUIRE(a.params().size() == b.params().size());
    std::size_t frozen = 0, trainable = 0;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params()[i].name == b.params()[i].name);
        CHECK(a.params()[i].tensor.values() == b.params()[i].tensor.values());
        CHECK(a.params()[i].tensor.requires_grad() == !a.params()[i].frozen);
        (a.params()[i].frozen ? frozen : trainable)++;
    }
    CHECK(frozen > 0);
    CHECK(trainable > 0);
}

TEST_CASE("tokenize zero volume to zero tokens", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 3);
    Tensor zero({8, 8, 4, 2}, 0.0);
    Tensor toks = tokenize(zero, 0, state);
    REQUIRE(toks.shape() == Shape{cfg.token_count(0), cfg.d_model});
    for (double v : toks.values()) CHECK(v == 0.0);
}

TEST_CASE("tokenize validates descriptor dims", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 3);
    Tensor wrong({4, 8, 4, 2}, 0.0);
    CHECK_THROWS_AS(tokenize(wrong, 0, state), DataError);
}

TEST_CASE("sparse block matches hand-composed primitives", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 11);
    Rng rng(19);
    Tensor x = Tensor::randn({5, cfg.d_model}, rng);

    Tensor got = sparse_block_forward(x, 0, 1, state);

    Tensor n1 = layer_norm(x, state.at("block0.ln1.gamma"), state.at("block0.ln1.beta"), kLayerNormEps);
    AttentionParams ap{state.at("block0.attn.wq"), state.at("block0.attn.bq"), state.at("block0.attn.wk"),
                       state.at("block0.attn.bk"), state.at("block0.attn.wv"), state.at("block0.attn.bv"),
                       state.at("block0.attn.wo"), state.at("block0.attn.bo")};
    Tensor z = add(x, multi_head_self_attention(n1, ap, cfg.heads));
    Tensor n2 = layer_norm(z, state.at("block0.ln2.gamma"), state.at("block0.ln2.beta"), kLayerNormEps);
    Tensor ffn = add_rowvec(
        matmul(gelu(add_rowvec(matmul(n2, state.at("block0.ffn.w1")), state.at("block0.ffn.b1"))),
               state.at("block0.ffn.w2")),
        state.at("block0.ffn.b2"));
    Tensor ad = add_rowvec(matmul(n2, state.at("sparse0.dwi.down.w")), state.at("sparse0.dwi.down.b"));
    ad = add_rowvec(matmul(gelu(ad), state.at("sparse0.dwi.up.w")), state.at("sparse0.dwi.up.b"));
    ad = layer_norm(ad, state.at("sparse0.dwi.ln.gamma"), state.at("sparse0.dwi.ln.beta"), kLayerNormEps);
    Tensor expect = add(add(z, ffn), ad);
    REQUIRE(got.shape() == expect.shape());
    for (std::size_t i = 0; i < got.numel(); ++i)
        CHECK(got.values()[i] == Catch::Approx(expect.values()[i]).margin(1e-9));
}

TEST_CASE("zeroed adapter output equals backbone block", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 13);
    collapse_adapter_outputs(state);
    Rng rng(23);
    Tensor x = Tensor::randn({4, cfg.d_model}, rng);
    Tensor with = sparse_block_forward(x, 0, 0, state);
    Tensor without = sparse_block_forward(x, 0, 0, state, {true});
    for (std::size_t i = 0; i < with.numel(); ++i) CHECK(with.values()[i] == without.values()[i]);

    Tensor swith = soft_block_forward(x, 1, state);
    Tensor swithout = soft_block_forward(x, 1, state, {true});
    for (std::size_t i = 0; i < swith.numel(); ++i) CHECK(swith.values()[i] == swithout.values()[i]);
}

TEST_CASE("soft_moe with zero phi and identity experts is mean pooling", "[model]") {
    const std::size_t m = 4, d = 2;
    Rng rng(29);
    Tensor x = Tensor::randn({m, d}, rng);
    Tensor phi = Tensor::zeros({d, 2});
    std::vector<LinearExpert> experts(2);
    for (auto& e : experts) {
        e.w = Tensor({d, d}, {1, 0, 0, 1});
        e.b = Tensor::zeros({d});
    }
    Tensor y = soft_moe(x, phi, experts, 1);

    // token mean per column, canonical order, exact for power-of-two m
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> col(m);
        for (std::size_t i = 0; i < m; ++i) col[i] = x.values()[i * d + j] * (1.0 / m);
        const double mean = detail::canonical_sum(col);
        for (std::size_t i = 0; i < m; ++i) CHECK(y.values()[i * d + j] == mean);
    }
}

TEST_CASE("soft_moe single token", "[model]") {
    Rng rng(31);
    Tensor x = Tensor::randn({1, 3}, rng);
    Tensor phi = Tensor::randn({3, 2}, rng);
    std::vector<LinearExpert> experts(2);
    for (auto& e : experts) {
        e.w = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        e.b = Tensor::zeros({3});
    }
    // with one token every dispatch column is exactly 1, so each slot equals
    // the token and the output equals the token
    Tensor y = soft_moe(x, phi, experts, 1);
    for (std::size_t j = 0; j < 3; ++j) CHECK(y.values()[j] == Catch::Approx(x.values()[j]).margin(1e-12));
}

TEST_CASE("soft_moe matches fully hand-unrolled oracle", "[model]") {
    // m=2, d=1, n=2, p=1 with hand-set weights
    Tensor x({2, 1}, {0.5, -1.2});
    Tensor phi({1, 2}, {0.7, -0.3});
    std::vector<LinearExpert> experts(2);
    experts[0].w = Tensor({1, 1}, {1.3});
    experts[0].b = Tensor({1}, {0.2});
    experts[1].w = Tensor({1, 1}, {-0.8});
    experts[1].b = Tensor({1}, {-0.1});
    Tensor y = soft_moe(x, phi, experts, 1);

    const double l[2][2] = {{0.5 * 0.7, 0.5 * -0.3}, {-1.2 * 0.7, -1.2 * -0.3}};
    double dcol[2][2];
    for (int j = 0; j < 2; ++j) {
        const double e0 = std::exp(l[0][j]), e1 = std::exp(l[1][j]);
        dcol[0][j] = e0 / (e0 + e1);
        dcol[1][j] = e1 / (e0 + e1);
    }
    const double slot0 = dcol[0][0] * 0.5 + dcol[1][0] * -1.2;
    const double slot1 = dcol[0][1] * 0.5 + dcol[1][1] * -1.2;
    const double y0 = slot0 * 1.3 + 0.2;
    const double y1 = slot1 * -0.8 - 0.1;
    for (int i = 0; i < 2; ++i) {
        const double e0 = std::exp(l[i][0]), e1 = std::exp(l[i][1]);
        const double c0 = e0 / (e0 + e1), c1 = e1 / (e0 + e1);
        CHECK(y.values()[i] == Catch::Approx(c0 * y0 + c1 * y1).margin(1e-12));
    }
}

TEST_CASE("soft_moe dispatch and combine normalization", "[model]") {
    Rng rng(37);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t m = 2 + rng.uniform_int(6), d = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
        Tensor x = Tensor::randn({m, d}, rng);
        Tensor phi = Tensor::randn({d, n}, rng);
        Tensor logits = matmul(x, phi);
        Tensor dispatch = softmax(logits, 0);
        Tensor combine = softmax(logits, 1);
        for (std::size_t j = 0; j < n; ++j) {
            double col = 0.0;
            for (std::size_t i = 0; i < m; ++i) col += dispatch.values()[i * n + j];
            CHECK(std::abs(col - 1.0) <= 1e-12);
        }
        for (std::size_t i = 0; i < m; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < n; ++j) row += combine.values()[i * n + j];
            CHECK(std::abs(row - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("soft_moe permutation equivariance is exact", "[model]") {
    Rng rng(41);
    const std::size_t m = 6, d = 3, n = 4;
    Tensor x = Tensor::randn({m, d}, rng);
    Tensor phi = Tensor::randn({d, n}, rng);
    std::vector<LinearExpert> experts(n);
    for (auto& e : experts) {
        e.w = Tensor::randn({d, d}, rng);
        e.b = Tensor::randn({d}, rng);
    }
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Tensor xp({m, d});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) xp.mutable_values()[i * d + j] = x.values()[perm[i] * d + j];

    Tensor y = soft_moe(x, phi, experts, 1);
    Tensor yp = soft_moe(xp, phi, experts, 1);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) CHECK(yp.values()[i * d + j] == y.values()[perm[i] * d + j]);

    // slot values are unchanged by the permutation
    Tensor slots = matmul_canonical(transpose(softmax(matmul(x, phi), 0)), x);
    Tensor slots_p = matmul_canonical(transpose(softmax(matmul(xp, phi), 0)), xp);
    for (std::size_t i = 0; i < slots.numel(); ++i) CHECK(slots.values()[i] == slots_p.values()[i]);
}

TEST_CASE("soft block matches composition oracle", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 43);
    // give the zero-initialized output stages some life for the comparison
    for (Param& p : state.params())
        if (p.name.rfind("soft1.", 0) == 0 && p.name.find("up.") != std::string::npos) {
            Rng r(5);
            p.tensor = Tensor::randn(p.tensor.shape(), r, 0.3);
            p.tensor.set_requires_grad(true);
        }
    Rng rng(47);
    Tensor x = Tensor::randn({6, cfg.d_model}, rng);
    Tensor got = soft_block_forward(x, 1, state);

    Tensor n1 = layer_norm(x, state.at("block1.ln1.gamma"), state.at("block1.ln1.beta"), kLayerNormEps);
    AttentionParams ap{state.at("block1.attn.wq"), state.at("block1.attn.bq"), state.at("block1.attn.wk"),
                       state.at("block1.attn.bk"), state.at("block1.attn.wv"), state.at("block1.attn.bv"),
                       state.at("block1.attn.wo"), state.at("block1.attn.bo")};
    Tensor z = add(x, multi_head_self_attention(n1, ap, cfg.heads));
    Tensor n2 = layer_norm(z, state.at("block1.ln2.gamma"), state.at("block1.ln2.beta"), kLayerNormEps);
    Tensor ffn = add_rowvec(
        matmul(gelu(add_rowvec(matmul(n2, state.at("block1.ffn.w1")), state.at("block1.ffn.b1"))),
               state.at("block1.ffn.w2")),
        state.at("block1.ffn.b2"));
    std::vector<LinearExpert> experts(cfg.soft_experts);
    for (std::size_t e = 0; e < cfg.soft_experts; ++e)
        experts[e] = {state.at("soft1.expert" + std::to_string(e) + ".w"),
                      state.at("soft1.expert" + std::to_string(e) + ".b")};
    Tensor t = gelu(add_rowvec(matmul(n2, state.at("soft1.down.w")), state.at("soft1.down.b")));
    t = soft_moe(t, state.at("soft1.phi"), experts, cfg.slots_per_expert);
    t = add_rowvec(matmul(t, state.at("soft1.up.w")), state.at("soft1.up.b"));
    t = layer_norm(t, state.at("soft1.ln.gamma"), state.at("soft1.ln.beta"), kLayerNormEps);
    Tensor expect = add(add(z, ffn), t);
    for (std::size_t i = 0; i < got.numel(); ++i)
        CHECK(got.values()[i] == Catch::Approx(expect.values()[i]).margin(1e-9));
}

TEST_CASE("forward span arithmetic and score normalization", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 53);
    Rng rng(59);
    std::vector<bool> present{true, true, true};
    auto vols = random_inputs(cfg, rng, present);
    TokenSequence seq = build_sequence(state, vols, present);
    const std::size_t expect_m = cfg.token_count(0) + cfg.token_count(1) + cfg.token_count(2) + 1;
    CHECK(seq.tokens.dim(0) == expect_m);
    CHECK(seq.cls_pos == cfg.token_count(0));  // CLS rides at the end of the DCE span
    CHECK(seq.spans.size() == 3);

    Tensor scores = forward_scores(state, vols, present);
    REQUIRE(scores.shape() == Shape{1, 2});
    double total = 0.0;
    for (double v : scores.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        total += v;
    }
    CHECK(total == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("forward requires a modality", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 1);
    std::vector<Tensor> vols(3);
    CHECK_THROWS_WITH(forward_scores(state, vols, {false, false, false}),
                      Catch::Matchers::ContainsSubstring("no modality"));
}

TEST_CASE("missing-modality independence over all subsets", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 61);
    Rng rng(67);
    std::vector<bool> all{true, true, true};
    auto base = random_inputs(cfg, rng, all);
    for (unsigned mask = 1; mask < 8; ++mask) {
        std::vector<bool> present(3);
        for (int i = 0; i < 3; ++i) present[i] = (mask >> i) & 1u;
        Tensor ref = forward_scores(state, base, present);
        for (double v : ref.values()) CHECK(std::isfinite(v));
        // perturb every absent modality's volume; the output must not move a bit
        auto perturbed = base;
        bool changed = false;
        for (int i = 0; i < 3; ++i)
            if (!present[i]) {
                perturbed[i] = Tensor::randn(base[i].shape(), rng, 5.0);
                changed = true;
            }
        if (!changed) continue;
        Tensor again = forward_scores(state, perturbed, present);
        for (std::size_t j = 0; j < ref.numel(); ++j) CHECK(again.values()[j] == ref.values()[j]);
    }
}

TEST_CASE("CLS host falls back when dce is absent", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 71);
    Rng rng(73);
    std::vector<bool> present{false, true, true};
    auto vols = random_inputs(cfg, rng, present);
    TokenSequence seq = build_sequence(state, vols, present);
    CHECK(seq.spans[0].modality == 1);
    CHECK(seq.spans[0].hosts_cls);
    CHECK(seq.cls_pos == cfg.token_count(1));
}

TEST_CASE("full zero-adapter collapse on the forward pass", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 79);
    collapse_adapter_outputs(state);
    Rng rng(83);
    std::vector<bool> present{true, true, true};
    auto vols = random_inputs(cfg, rng, present);
    Tensor full = forward_scores(state, vols, present);
    Tensor backbone = forward_scores(state, vols, present, {true});
    for (std::size_t i = 0; i < full.numel(); ++i)
        CHECK(std::abs(full.values()[i] - backbone.values()[i]) <= 1e-12);
}

TEST_CASE("full-model gradient check on the tiny config", "[model]") {
    const MomeConfig cfg = tiny_config();
    ModelState state = ModelState::init(cfg, 89);
    // exercise the zero-initialized stages so their gradients are nontrivial
    Rng wrng(97);
    for (Param& p : state.params())
        if (!p.frozen && (p.name.find("up.w") != std::string::npos || p.name.find("up.b") != std::string::npos)) {
            p.tensor = Tensor::randn(p.tensor.shape(), wrng, 0.2);
            p.tensor.set_requires_grad(true);
        }
    Rng rng(101);
    std::vector<bool> present{true, true, true};
    auto vols = random_inputs(cfg, rng, present);
    const std::vector<double> weights{1.0, 1.0};

    auto check_param = [&](const std::string& name) {
        ModelState probe_state = state.clone();
        std::size_t idx = 0;
        for (std::size_t i = 0; i < probe_state.params().size(); ++i)
            if (probe_state.params()[i].name == name) idx = i;
        auto f = [&](const Tensor& t) {
            probe_state.params()[idx].tensor = t;
            Tensor scores = forward_scores(probe_state, vols, present);
            return weighted_cross_entropy(scores, 1, weights);
        };
        return grad_check(f, probe_state.at(name), 1e-5);
    };
    CHECK(check_param("head.w") < 1e-3);
    CHECK(check_param("cls") < 1e-3);
    CHECK(check_param("sparse0.dce.down.w") < 1e-3);
    CHECK(check_param("soft1.phi") < 1e-3);

    // gradient with respect to an input volume
    auto f_input = [&](const Tensor& t) {
        auto v = vols;
        v[2] = t;
        Tensor scores = forward_scores(state, v, present);
        return weighted_cross_entropy(scores, 0, weights);
    };
    CHECK(grad_check(f_input, vols[2], 1e-5) < 1e-3);
}
