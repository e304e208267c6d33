#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "arns/attention.hpp"
#include "arns/gradcheck.hpp"
#include "oracles.hpp"

using namespace arns;

namespace {

SelfAttention<double> random_module(int channels, std::mt19937_64& rng, double gain, int reduction = 8,
                                    int cap = 4096) {
    SelfAttention<double> m = SelfAttention<double>::make("att", channels, reduction, cap);
    fill_uniform(m.key_kernel.value, rng, -0.5, 0.5);
    fill_uniform(m.query_kernel.value, rng, -0.5, 0.5);
    fill_uniform(m.value_kernel.value, rng, -0.5, 0.5);
    m.gain.value[0] = gain;
    return m;
}

}  // namespace

TEST_CASE("attention with zero gain is the bitwise identity") {
    std::mt19937_64 rng(1);
    SelfAttention<double> m = random_module(8, rng, 0.0);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<double> x = random_uniform<double>(Shape{8, 3, 2}, rng, -2.0, 2.0);
        Tape<double> tape;
        Var<double> y = m.forward(tape.input(x));
        REQUIRE(y.value().shape() == x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i) REQUIRE(y.value()[i] == x[i]);
    }
}

TEST_CASE("single-position map reduces to a unit attention weight") {
    std::mt19937_64 rng(2);
    SelfAttention<double> m = random_module(4, rng, 0.7);
    Tensor<double> x = random_uniform<double>(Shape{4, 1, 1}, rng);

    Tensor<double> w = m.attention_map(x);
    REQUIRE(w.shape() == Shape{1, 1});
    CHECK(w[0] == 1.0);

    // y = gain * (value conv) + x
    Tape<double> tape;
    Var<double> y = m.forward(tape.input(x));
    for (int c = 0; c < 4; ++c) {
        double h = 0.0;
        for (int k = 0; k < 4; ++k) h += m.value_kernel.value(c, k, 0, 0) * x[k];
        CHECK(y.value()[c] == doctest::Approx(0.7 * h + x[c]).epsilon(1e-12));
    }
}

TEST_CASE("attention matches the per-position weighted-sum oracle") {
    std::mt19937_64 rng(3);
    SelfAttention<double> m = random_module(8, rng, 1.0);
    Tensor<double> x = random_uniform<double>(Shape{8, 2, 2}, rng, -1.5, 1.5);
    Tape<double> tape;
    Var<double> y = m.forward(tape.input(x));
    Tensor<double> expect = oracles::attention_bruteforce(x, m.key_kernel.value, m.query_kernel.value,
                                                          m.value_kernel.value, 1.0);
    CHECK(oracles::max_abs_diff(y.value(), expect) < 1e-10);
}

TEST_CASE("attention map is uniform for degenerate embeddings") {
    std::mt19937_64 rng(4);
    SelfAttention<double> m = SelfAttention<double>::make("att", 4, 8);
    // Zero kernels: all scores are zero.
    Tensor<double> x = random_uniform<double>(Shape{4, 2, 2}, rng);
    Tensor<double> w = m.attention_map(x);
    for (std::int64_t i = 0; i < w.numel(); ++i) CHECK(w[i] == doctest::Approx(0.25).epsilon(1e-12));

    // Constant input: every position embeds identically.
    SelfAttention<double> m2 = random_module(4, rng, 0.0);
    Tensor<double> xc(Shape{4, 2, 2});
    for (int c = 0; c < 4; ++c) {
        for (int p = 0; p < 4; ++p) xc[c * 4 + p] = 0.3 * (c + 1);
    }
    Tensor<double> w2 = m2.attention_map(xc);
    for (std::int64_t i = 0; i < w2.numel(); ++i) CHECK(w2[i] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("attention map matches the naive score/softmax oracle and is column-stochastic") {
    std::mt19937_64 rng(5);
    SelfAttention<double> m = random_module(4, rng, 0.0);
    Tensor<double> x = random_uniform<double>(Shape{4, 2, 2}, rng, -2.0, 2.0);
    Tensor<double> w = m.attention_map(x);

    const int P = 4;
    Tensor<double> f(Shape{m.reduced_channels, P}), g(Shape{m.reduced_channels, P});
    for (int o = 0; o < m.reduced_channels; ++o) {
        for (int p = 0; p < P; ++p) {
            double fa = 0.0, ga = 0.0;
            for (int c = 0; c < 4; ++c) {
                fa += m.key_kernel.value(o, c, 0, 0) * x[c * P + p];
                ga += m.query_kernel.value(o, c, 0, 0) * x[c * P + p];
            }
            f(o, p) = fa;
            g(o, p) = ga;
        }
    }
    Tensor<double> scores(Shape{P, P});
    for (int i = 0; i < P; ++i) {
        for (int j = 0; j < P; ++j) {
            double acc = 0.0;
            for (int c = 0; c < m.reduced_channels; ++c) acc += f(c, i) * g(c, j);
            scores(i, j) = acc;
        }
    }
    CHECK(oracles::max_abs_diff(w, oracles::softmax_cols_naive(scores)) < 1e-12);

    for (int j = 0; j < P; ++j) {
        double sum = 0.0;
        for (int i = 0; i < P; ++i) {
            CHECK(w(i, j) >= 0.0);
            CHECK(w(i, j) <= 1.0);
            sum += w(i, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("attention preserves shape across sizes") {
    std::mt19937_64 rng(6);
    for (const Shape& s : {Shape{8, 2, 2}, Shape{16, 4, 3}, Shape{4, 1, 5}, Shape{8, 5, 5}}) {
        SelfAttention<double> m = random_module(s[0], rng, 0.4);
        Tensor<double> x = random_uniform<double>(s, rng);
        Tape<double> tape;
        CHECK(m.forward(tape.input(x)).value().shape() == s);
    }
}

TEST_CASE("reduced channel count clamps to one for narrow maps") {
    SelfAttention<double> m = SelfAttention<double>::make("att", 4, 8);
    CHECK(m.reduced_channels == 1);
    SelfAttention<double> m2 = SelfAttention<double>::make("att", 64, 8);
    CHECK(m2.reduced_channels == 8);
}

TEST_CASE("attention rejects maps beyond the position cap") {
    std::mt19937_64 rng(7);
    SelfAttention<double> m = random_module(2, rng, 0.5, 8, /*cap=*/16);
    Tensor<double> big = random_uniform<double>(Shape{2, 5, 5}, rng);  // 25 positions
    Tape<double> tape;
    Var<double> x = tape.input(big);
    CHECK_THROWS_WITH_AS(m.forward(x), doctest::Contains("cap"), std::invalid_argument);
    CHECK_THROWS_AS(m.attention_map(big), std::invalid_argument);

    Tape<double> tape2;
    Var<double> flat = tape2.input(random_uniform<double>(Shape{4, 4}, rng));
    CHECK_THROWS_AS(m.forward(flat), std::invalid_argument);  // not rank 3
}

TEST_CASE("pooled attention keeps shape and the zero-gain identity") {
    std::mt19937_64 rng(8);
    SelfAttention<double> m = random_module(4, rng, 0.0, 8, /*cap=*/4);
    Tensor<double> x = random_uniform<double>(Shape{4, 4, 4}, rng);  // 16 positions > 4
    Tape<double> tape;
    Var<double> y = m.forward_with_pooling(tape.input(x));
    REQUIRE(y.value().shape() == x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);

    // With a nonzero gain the pooled context actually contributes.
    m.gain.value[0] = 0.9;
    Tape<double> tape2;
    Var<double> y2 = m.forward_with_pooling(tape2.input(x));
    CHECK(oracles::max_abs_diff(y2.value(), x) > 0.0);

    // Odd extents above the cap cannot be pooled.
    Tensor<double> odd = random_uniform<double>(Shape{4, 3, 3}, rng);
    Tape<double> tape3;
    CHECK_THROWS_AS(m.forward_with_pooling(tape3.input(odd)), std::invalid_argument);
}

TEST_CASE("attention gradcheck, including the zero-gain residual path") {
    std::mt19937_64 rng(9);
    for (double gain : {0.0, 0.8}) {
        SelfAttention<double> m = random_module(8, rng, gain);
        Parameter<double> x("x", random_uniform<double>(Shape{8, 2, 2}, rng));
        Tensor<double> probe = random_uniform<double>(Shape{8, 2, 2}, rng);
        auto rep = gradcheck(
            [&](Tape<double>& t) { return weighted_sum(m.forward(t.use(x)), probe); },
            {&x, &m.key_kernel, &m.query_kernel, &m.value_kernel, &m.gain});
        CHECK(rep.max_rel_err < 1e-4);
    }

    // At gain 0 the upstream gradient passes through to x unchanged.
    SelfAttention<double> m = random_module(8, rng, 0.0);
    Parameter<double> x("x", random_uniform<double>(Shape{8, 2, 2}, rng));
    Tensor<double> probe = random_uniform<double>(Shape{8, 2, 2}, rng);
    Tape<double> tape;
    Var<double> loss = weighted_sum(m.forward(tape.use(x)), probe);
    tape.backward(loss);
    for (std::int64_t i = 0; i < probe.numel(); ++i) CHECK(x.grad[i] == probe[i]);
}
