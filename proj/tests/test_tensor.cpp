#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mome/tensor.hpp"

using namespace mome;

namespace {

// Standard normal CDF by Simpson quadrature, independent of std::erf.
double normal_cdf_quadrature(double x) {
    const double lo = -12.0;
    const int n = 28000;  // even
    const double h = (x - lo) / n;
    auto pdf = [](double t) { return std::exp(-0.5 * t * t) * 0.3989422804014326779; };
    double s = pdf(lo) + pdf(x);
    for (int i = 1; i < n; ++i) s += pdf(lo + i * h) * (i % 2 ? 4.0 : 2.0);
    return s * h / 3.0;
}

Tensor mat2(double a, double b, double c, double d) { return Tensor({2, 2}, {a, b, c, d}); }

}  // namespace

TEST_CASE("matmul identity and annihilator", "[tensor]") {
    Tensor eye = mat2(1, 0, 0, 1);
    Tensor a = mat2(3.5, -2, 7, 0.25);
    Tensor prod = matmul(eye, a);
    for (std::size_t i = 0; i < 4; ++i) CHECK(prod.values()[i] == a.values()[i]);

    Tensor zero = Tensor::zeros({2, 2});
    Tensor z = matmul(zero, a);
    for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul hand expansion", "[tensor]") {
    Tensor a = mat2(1, 2, 3, 4);
    Tensor b = mat2(5, 6, 7, 8);
    Tensor c = matmul(a, b);
    CHECK(c.values() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul rejects mismatched shapes", "[tensor]") {
    Tensor a({2, 3}, 1.0);
    Tensor b({2, 2}, 1.0);
    CHECK_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("[2x3]") &&
                                        Catch::Matchers::ContainsSubstring("[2x2]"));
}

TEST_CASE("softmax basics", "[tensor]") {
    Tensor c({4}, {1.7, 1.7, 1.7, 1.7});
    Tensor u = softmax(c, 0);
    for (double v : u.values()) CHECK(v == Catch::Approx(0.25).margin(1e-15));

    Tensor one({1}, {42.0});
    CHECK(softmax(one, 0).values()[0] == Catch::Approx(1.0).margin(1e-15));

    Tensor x({2}, {0.0, std::log(3.0)});
    Tensor y = softmax(x, 0);
    CHECK(y.values()[0] == Catch::Approx(0.25).margin(1e-12));
    CHECK(y.values()[1] == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("softmax shift invariance", "[tensor]") {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t n = 2 + rng.uniform_int(6);
        Tensor x = Tensor::randn({n}, rng, 2.0);
        const double c = rng.uniform(-50.0, 50.0);
        Tensor shifted = x.clone();
        for (double& v : shifted.mutable_values()) v += c;
        Tensor a = softmax(x, 0);
        Tensor b = softmax(shifted, 0);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) <= 1e-12);
    }
}

TEST_CASE("layer_norm examples", "[tensor]") {
    Tensor gamma({3}, {1, 1, 1});
    Tensor beta({3}, {0, 0, 0});
    Tensor c({3}, {5, 5, 5});
    Tensor ln = layer_norm(c, gamma, beta, 1e-5);
    for (double v : ln.values()) CHECK(v == 0.0);

    Tensor g2({2}, {1, 1});
    Tensor b2({2}, {0, 0});
    Tensor x({2}, {1, 3});
    Tensor y = layer_norm(x, g2, b2, 1e-12);
    CHECK(y.values()[0] == Catch::Approx(-1.0).margin(1e-9));
    CHECK(y.values()[1] == Catch::Approx(1.0).margin(1e-9));

    Rng rng(3);
    Tensor any = Tensor::randn({4, 3}, rng);
    Tensor g0({3}, {0, 0, 0});
    Tensor b3({3}, {0.5, -1.5, 2.0});
    Tensor z = layer_norm(any, g0, b3, 1e-5);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 3; ++j) CHECK(z.values()[r * 3 + j] == b3.values()[j]);
}

TEST_CASE("instance_norm examples", "[tensor]") {
    // constant channel -> zeros
    Tensor c({2, 2, 1, 1}, {3, 3, 3, 3});
    Tensor nc = instance_norm(c);
    for (double v : nc.values()) CHECK(v == 0.0);

    // two-voxel channel [1,3] -> [-1,1], same oracle as layer_norm
    Tensor two({2, 1, 1, 1}, {1, 3});
    Tensor y = instance_norm(two, 1e-12);
    CHECK(y.values()[0] == Catch::Approx(-1.0).margin(1e-9));
    CHECK(y.values()[1] == Catch::Approx(1.0).margin(1e-9));

    // channels normalized independently: normalizing one channel does not
    // depend on the other channel's values
    Tensor a({2, 1, 1, 2}, {1, 100, 3, 200});
    Tensor b({2, 1, 1, 2}, {1, -7, 3, 13});
    Tensor na = instance_norm(a, 1e-12);
    Tensor nb = instance_norm(b, 1e-12);
    CHECK(na.values()[0] == nb.values()[0]);
    CHECK(na.values()[2] == nb.values()[2]);
}

TEST_CASE("activations", "[tensor]") {
    Tensor x({4}, {-1.0, 2.0, 0.0, 0.5});
    Tensor r = relu(x);
    CHECK(r.values()[0] == 0.0);
    CHECK(r.values()[1] == 2.0);

    CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);

    for (double v : {1.0, -1.0, 2.0, -2.0}) {
        const double expected = v * normal_cdf_quadrature(v);
        CHECK(gelu(Tensor::scalar(v)).item() == Catch::Approx(expected).margin(1e-9));
    }
}

TEST_CASE("conv3d identity kernel", "[tensor]") {
    Rng rng(11);
    Tensor x = Tensor::randn({3, 4, 2, 1}, rng);
    Tensor k({1, 1, 1, 1, 1}, {1.0});
    Tensor y = conv3d(x, k, Tensor(), 1);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv3d zero input broadcasts bias", "[tensor]") {
    Tensor x = Tensor::zeros({4, 4, 4, 2});
    Tensor k = Tensor::zeros({3, 3, 3, 2, 3});
    Tensor b({3}, {0.5, -1.0, 2.0});
    Tensor y = conv3d(x, k, b, 2);
    REQUIRE(y.shape() == Shape{2, 2, 2, 3});
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.values()[i] == b.values()[i % 3]);
}

TEST_CASE("conv3d ones oracle", "[tensor]") {
    // 2x2x2 ones kernel over 4x4x4 ones input, stride 2, no bias: with
    // same-ceil padding every window is fully interior, so each output is 8.
    Tensor x = Tensor::ones({4, 4, 4, 1});
    Tensor k = Tensor::ones({2, 2, 2, 1, 1});
    Tensor y = conv3d(x, k, Tensor(), 2);
    REQUIRE(y.shape() == Shape{2, 2, 2, 1});
    for (double v : y.values()) CHECK(v == 8.0);
}

TEST_CASE("conv3d channel mismatch", "[tensor]") {
    Tensor x({2, 2, 2, 3}, 1.0);
    Tensor k = Tensor::ones({1, 1, 1, 2, 1});
    CHECK_THROWS_AS(conv3d(x, k, Tensor(), 1), ConfigError);
}

TEST_CASE("conv3d adjoint identity", "[tensor]") {
    // <conv(x), y> == <x, conv_adjoint(y)> where the adjoint is the tape's
    // backward-to-input map.
    Rng rng(5);
    Tensor x = Tensor::randn({4, 3, 5, 2}, rng);
    Tensor k = Tensor::randn({3, 3, 3, 2, 3}, rng);
    x.set_requires_grad(true);
    GradTape tape;
    TapeScope scope(tape);
    Tensor cx = conv3d(x, k, Tensor(), 1);
    Tensor y = Tensor::randn(cx.shape(), rng);
    Tensor inner = sum(mul(cx, y));
    tape.backward(inner);
    double lhs = 0.0;
    for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx.values()[i] * y.values()[i];
    double rhs = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.values()[i] * x.grad()[i];
    CHECK(lhs == Catch::Approx(rhs).margin(1e-9));
    tape.clear();
}

TEST_CASE("maxpool3d examples", "[tensor]") {
    Tensor c = Tensor::full({4, 4, 2, 1}, 3.25);
    Tensor pc = maxpool3d(c, 2, 2);
    for (double v : pc.values()) CHECK(v == 3.25);

    Rng rng(2);
    Tensor x = Tensor::randn({3, 2, 2, 2}, rng);
    Tensor same = maxpool3d(x, 1, 1);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.values()[i] == x.values()[i]);

    // [[1,2],[3,4]] replicated along depth, window 2 stride 2 -> 4
    Tensor rep({2, 2, 2, 1}, {1, 2, 3, 4, 1, 2, 3, 4});
    Tensor pooled = maxpool3d(rep, 2, 2);
    REQUIRE(pooled.numel() == 1);
    CHECK(pooled.values()[0] == 4.0);
}

TEST_CASE("maxpool3d dominates covered inputs", "[tensor]") {
    Rng rng(17);
    for (int rep = 0; rep < 10; ++rep) {
        Shape s{2 + rng.uniform_int(4), 2 + rng.uniform_int(4), 2 + rng.uniform_int(4), 1 + rng.uniform_int(2)};
        Tensor x = Tensor::randn(s, rng);
        Tensor y = maxpool3d(x, 2, 2);
        double out_max = -1e300, in_max = -1e300;
        for (double v : y.values()) out_max = std::max(out_max, v);
        for (double v : x.values()) in_max = std::max(in_max, v);
        CHECK(out_max == in_max);  // window=stride=2 covers everything once
        for (double v : y.values()) CHECK(v <= in_max);
    }
}

TEST_CASE("attention single token", "[tensor]") {
    Rng rng(23);
    const std::size_t d = 4;
    AttentionParams p;
    p.wq = Tensor::randn({d, d}, rng);
    p.bq = Tensor::randn({d}, rng);
    p.wk = Tensor::randn({d, d}, rng);
    p.bk = Tensor::randn({d}, rng);
    p.wv = Tensor::randn({d, d}, rng);
    p.bv = Tensor::randn({d}, rng);
    p.wo = Tensor::randn({d, d}, rng);
    p.bo = Tensor::randn({d}, rng);
    Tensor x = Tensor::randn({1, d}, rng);
    Tensor out = multi_head_self_attention(x, p, 2);
    // with one token the attention weight is exactly 1, so the output is
    // the value projection followed by the output projection
    Tensor v = add_rowvec(matmul(x, p.wv), p.bv);
    Tensor expect = add_rowvec(matmul(v, p.wo), p.bo);
    for (std::size_t i = 0; i < d; ++i) CHECK(out.values()[i] == Catch::Approx(expect.values()[i]).margin(1e-12));
}

TEST_CASE("attention duplicate tokens give identical rows", "[tensor]") {
    Rng rng(29);
    const std::size_t d = 6;
    AttentionParams p;
    p.wq = Tensor::randn({d, d}, rng);
    p.bq = Tensor::randn({d}, rng);
    p.wk = Tensor::randn({d, d}, rng);
    p.bk = Tensor::randn({d}, rng);
    p.wv = Tensor::randn({d, d}, rng);
    p.bv = Tensor::randn({d}, rng);
    p.wo = Tensor::randn({d, d}, rng);
    p.bo = Tensor::randn({d}, rng);
    std::vector<double> row(d);
    for (auto& v : row) v = rng.normal();
    std::vector<double> data;
    for (int i = 0; i < 3; ++i) data.insert(data.end(), row.begin(), row.end());
    Tensor x({3, d}, data);
    Tensor out = multi_head_self_attention(x, p, 3);
    for (std::size_t i = 1; i < 3; ++i)
        for (std::size_t j = 0; j < d; ++j) CHECK(out.values()[i * d + j] == out.values()[j]);
}

TEST_CASE("attention matches hand-unrolled oracle", "[tensor]") {
    // m=2, d=2, one head, fixed weights; oracle is plain scalar arithmetic.
    AttentionParams p;
    p.wq = mat2(0.3, -0.1, 0.2, 0.5);
    p.bq = Tensor({2}, {0.05, -0.02});
    p.wk = mat2(-0.4, 0.6, 0.1, 0.2);
    p.bk = Tensor({2}, {0.0, 0.1});
    p.wv = mat2(0.7, 0.3, -0.2, 0.4);
    p.bv = Tensor({2}, {-0.1, 0.2});
    p.wo = mat2(1.1, -0.5, 0.25, 0.8);
    p.bo = Tensor({2}, {0.01, 0.02});
    Tensor x = mat2(0.9, -0.3, 0.4, 1.2);

    Tensor out = multi_head_self_attention(x, p, 1);

    auto dot2 = [](const double* a, const double* b) { return a[0] * b[0] + a[1] * b[1]; };
    double q[2][2], k[2][2], v[2][2];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double colq[2] = {p.wq.values()[j], p.wq.values()[2 + j]};
            double colk[2] = {p.wk.values()[j], p.wk.values()[2 + j]};
            double colv[2] = {p.wv.values()[j], p.wv.values()[2 + j]};
            const double* xi = x.values().data() + 2 * i;
            q[i][j] = dot2(xi, colq) + p.bq.values()[j];
            k[i][j] = dot2(xi, colk) + p.bk.values()[j];
            v[i][j] = dot2(xi, colv) + p.bv.values()[j];
        }
    const double s = 1.0 / std::sqrt(2.0);
    double o[2][2];
    for (int i = 0; i < 2; ++i) {
        double s0 = dot2(q[i], k[0]) * s;
        double s1 = dot2(q[i], k[1]) * s;
        double m = std::max(s0, s1);
        double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
        double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        for (int j = 0; j < 2; ++j) o[i][j] = a0 * v[0][j] + a1 * v[1][j];
    }
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double colo[2] = {p.wo.values()[j], p.wo.values()[2 + j]};
            const double expect = dot2(o[i], colo) + p.bo.values()[j];
            CHECK(out.values()[i * 2 + j] == Catch::Approx(expect).margin(1e-9));
        }
}

TEST_CASE("attention rejects bad head split", "[tensor]") {
    AttentionParams p;
    p.wq = p.wk = p.wv = p.wo = Tensor::zeros({6, 6});
    p.bq = p.bk = p.bv = p.bo = Tensor::zeros({6});
    Tensor x = Tensor::zeros({2, 6});
    CHECK_THROWS_AS(multi_head_self_attention(x, p, 4), ConfigError);
}

TEST_CASE("attention permutation equivariance is exact", "[tensor]") {
    Rng rng(31);
    const std::size_t m = 7, d = 8;
    AttentionParams p;
    p.wq = Tensor::randn({d, d}, rng);
    p.bq = Tensor::randn({d}, rng);
    p.wk = Tensor::randn({d, d}, rng);
    p.bk = Tensor::randn({d}, rng);
    p.wv = Tensor::randn({d, d}, rng);
    p.bv = Tensor::randn({d}, rng);
    p.wo = Tensor::randn({d, d}, rng);
    p.bo = Tensor::randn({d}, rng);
    Tensor x = Tensor::randn({m, d}, rng);
    std::vector<std::size_t> perm(m);
    for (std::size_t i = 0; i < m; ++i) perm[i] = i;
    Rng prng(99);
    prng.shuffle(perm);
    Tensor xp({m, d});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) xp.mutable_values()[i * d + j] = x.values()[perm[i] * d + j];
    Tensor out = multi_head_self_attention(x, p, 4);
    Tensor outp = multi_head_self_attention(xp, p, 4);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) CHECK(outp.values()[i * d + j] == out.values()[perm[i] * d + j]);
}

TEST_CASE("backward on reductions", "[tensor]") {
    Rng rng(41);
    Tensor x = Tensor::randn({3, 4}, rng);
    x.set_requires_grad(true);
    {
        GradTape tape;
        TapeScope scope(tape);
        tape.backward(sum(x));
        for (double g : x.grad()) CHECK(g == 1.0);
        tape.clear();
        CHECK_FALSE(x.has_grad());
    }
    {
        GradTape tape;
        TapeScope scope(tape);
        tape.backward(sum(mul(x, x)));
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == Catch::Approx(2.0 * x.values()[i]).margin(1e-12));
        tape.clear();
    }
}

TEST_CASE("backward requires scalar loss on tape", "[tensor]") {
    Rng rng(1);
    Tensor x = Tensor::randn({2, 2}, rng);
    x.set_requires_grad(true);
    GradTape tape;
    TapeScope scope(tape);
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ConfigError);
    Tensor stray = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(stray), ConfigError);
    tape.clear();
}

TEST_CASE("frozen tensors receive no gradient", "[tensor]") {
    Rng rng(43);
    Tensor x = Tensor::randn({2, 3}, rng);
    Tensor w = Tensor::randn({3, 2}, rng);
    x.set_requires_grad(true);  // w stays frozen
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss = sum(matmul(x, w));
    tape.backward(loss);
    CHECK(x.has_grad());
    CHECK_FALSE(w.has_grad());
    tape.clear();
}

TEST_CASE("grad_check on sum is exact", "[tensor]") {
    Rng rng(47);
    Tensor x = Tensor::randn({5}, rng);
    CHECK(grad_check([](const Tensor& t) { return sum(t); }, x, 1e-5) < 1e-9);
    CHECK_THROWS_AS(grad_check([](const Tensor& t) { return sum(t); }, x, 1e-2), ConfigError);
}
