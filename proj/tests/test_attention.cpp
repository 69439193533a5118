#include <gtest/gtest.h>

#include "medvqa/attention.hpp"
#include "medvqa/grad_check.hpp"
#include "reference_ops.hpp"

using namespace medvqa;

namespace {

Tensor random_tensor(int rows, int cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(rows, cols, std::move(v));
}

// closed form for a key set whose attended value is fixed (single key or
// identical duplicates): LN(q + Wo . concat_h(V_h(key)) + bo)
refops::Mat expected_single_key(const refops::Mat& q_in, const std::vector<double>& key,
                                const AttentionParams& params) {
    const auto w = refops::AttentionWeights::from(params);
    std::vector<double> merged;
    for (int h = 0; h < params.head_count; ++h) {
        const auto v = refops::affine({key}, w.wv[h], w.bv[h]);
        merged.insert(merged.end(), v[0].begin(), v[0].end());
    }
    refops::Mat rows;
    for (const auto& q : q_in) {
        auto out = refops::affine({merged}, w.wo, w.bo)[0];
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += q[j];
        rows.push_back(out);
    }
    return refops::layer_norm(rows, w.gain, w.bias);
}

}  // namespace

TEST(MultiHeadAttention, SingleKeyAttendsFully) {
    Rng rng(21);
    auto params = AttentionParams::init(4, 2, rng);
    auto kv = random_tensor(1, 4, rng);
    auto q = random_tensor(3, 4, rng);
    auto out = multi_head_attention(q, kv, params, TokenMask::all(1));
    auto expected = expected_single_key(refops::from_tensor(q), kv.data(), params);
    EXPECT_LT(refops::max_abs_diff(out, expected), 1e-12);
}

TEST(MultiHeadAttention, TwoIdenticalKeysEqualOneKey) {
    Rng rng(22);
    auto params = AttentionParams::init(6, 3, rng);
    auto key = random_tensor(1, 6, rng);
    auto kv2 = concat_rows({key, key});
    auto q = random_tensor(2, 6, rng);
    auto one = multi_head_attention(q, key, params, TokenMask::all(1));
    auto two = multi_head_attention(q, kv2, params, TokenMask::all(2));
    EXPECT_LT(refops::max_abs_diff(one, refops::from_tensor(two)), 1e-12);
}

TEST(MultiHeadAttention, FixedTinyCaseMatchesScriptedReference) {
    Rng rng(23);
    auto params = AttentionParams::init(2, 1, rng);
    // fixed small integer weights
    params.query[0].weight.data() = {1, 0, 0, 1};
    params.query[0].bias.data() = {0, 0};
    params.key[0].weight.data() = {0, 1, 1, 0};
    params.key[0].bias.data() = {0, 0};
    params.value[0].weight.data() = {1, 1, 0, 1};
    params.value[0].bias.data() = {1, 0};
    params.output.weight.data() = {1, 0, 1, 1};
    params.output.bias.data() = {0, 1};
    auto q = Tensor::from_values(2, 2, {1, 2, 0, 1});
    auto kv = Tensor::from_values(2, 2, {2, 1, 1, 0});
    auto out = multi_head_attention(q, kv, params, TokenMask::all(2));
    auto expected = refops::attention(refops::from_tensor(q), refops::from_tensor(kv),
                                      refops::AttentionWeights::from(params), {true, true});
    EXPECT_LT(refops::max_abs_diff(out, expected), 1e-12);
}

TEST(MultiHeadAttention, RandomCasesMatchScriptedReference) {
    Rng rng(24);
    for (int trial = 0; trial < 25; ++trial) {
        const int heads = 1 + static_cast<int>(rng.below(3));
        const int d = heads * (1 + static_cast<int>(rng.below(3)));
        const int m = 1 + static_cast<int>(rng.below(4));
        const int n = 1 + static_cast<int>(rng.below(4));
        auto params = AttentionParams::init(d, heads, rng);
        auto q = random_tensor(m, d, rng);
        auto kv = random_tensor(n, d, rng);
        TokenMask mask = TokenMask::all(n);
        if (n > 1) mask.valid[rng.below(n)] = false;
        auto out = multi_head_attention(q, kv, params, mask);
        auto expected = refops::attention(refops::from_tensor(q), refops::from_tensor(kv),
                                          refops::AttentionWeights::from(params), mask.valid);
        EXPECT_LT(refops::max_abs_diff(out, expected), 1e-10);
    }
}

TEST(MultiHeadAttention, MaskedKeysGetExactlyZeroWeight) {
    // the additive -1e30 fill underflows to weight 0 in the softmax
    auto scores = Tensor::from_values(1, 3, {2.0, kMaskFill, -1.0});
    auto w = softmax_rows(scores);
    EXPECT_EQ(w.at(0, 1), 0.0);
    EXPECT_LT(w.at(0, 1), 1e-30);

    Rng rng(25);
    auto params = AttentionParams::init(4, 2, rng);
    auto q = random_tensor(2, 4, rng);
    auto kv_a = random_tensor(3, 4, rng);
    auto kv_b = kv_a.detach();
    kv_b.data()[4] = 123.0;  // perturb only the masked row
    kv_b.data()[5] = -7.0;
    TokenMask mask{{true, false, true}};
    auto out_a = multi_head_attention(q, kv_a, params, mask);
    auto out_b = multi_head_attention(q, kv_b, params, mask);
    for (std::size_t i = 0; i < out_a.data().size(); ++i) EXPECT_EQ(out_a.data()[i], out_b.data()[i]);
}

TEST(MultiHeadAttention, FullyMaskedRejected) {
    Rng rng(26);
    auto params = AttentionParams::init(4, 2, rng);
    auto q = random_tensor(1, 4, rng);
    auto kv = random_tensor(2, 4, rng);
    EXPECT_THROW(multi_head_attention(q, kv, params, TokenMask{{false, false}}), std::invalid_argument);
}

TEST(MultiHeadAttention, WidthMismatchRejected) {
    Rng rng(27);
    auto params = AttentionParams::init(4, 2, rng);
    EXPECT_THROW(multi_head_attention(Tensor::zeros(1, 6), Tensor::zeros(1, 4), params, TokenMask::all(1)),
                 std::invalid_argument);
}

TEST(MultiHeadAttention, QueryPermutationEquivariance) {
    Rng rng(28);
    auto params = AttentionParams::init(4, 2, rng);
    auto q = random_tensor(4, 4, rng);
    auto kv = random_tensor(3, 4, rng);
    auto out = multi_head_attention(q, kv, params, TokenMask::all(3));
    const std::vector<int> perm = {2, 0, 3, 1};
    auto q_perm = gather_rows(q, perm);
    auto out_perm = multi_head_attention(q_perm, kv, params, TokenMask::all(3));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_EQ(out_perm.at(i, j), out.at(perm[i], j));
}

TEST(SelfAttention, SingleTokenClosedForm) {
    Rng rng(29);
    auto params = AttentionParams::init(4, 2, rng);
    auto x = random_tensor(1, 4, rng);
    auto out = self_attention(x, params);
    auto expected = expected_single_key(refops::from_tensor(x), x.data(), params);
    EXPECT_LT(refops::max_abs_diff(out, expected), 1e-12);
}

TEST(SelfAttention, TokenPermutationEquivariance) {
    Rng rng(30);
    auto params = AttentionParams::init(6, 2, rng);
    auto x = random_tensor(5, 6, rng);
    auto out = self_attention(x, params);
    const std::vector<int> perm = {4, 2, 0, 1, 3};
    auto out_perm = self_attention(gather_rows(x, perm), params);
    double worst = 0.0;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) worst = std::max(worst, std::abs(out_perm.at(i, j) - out.at(perm[i], j)));
    EXPECT_LT(worst, 1e-12);
}

TEST(SelfAttention, BitwiseEqualToCrossWithItself) {
    Rng rng(31);
    auto params = AttentionParams::init(4, 4, rng);
    auto x = random_tensor(3, 4, rng);
    auto a = self_attention(x, params);
    auto b = multi_head_attention(x, x, params, TokenMask::all(3));
    for (std::size_t i = 0; i < a.data().size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Project, IdentityAndConstant) {
    Rng rng(32);
    auto x = random_tensor(3, 3, rng);
    LinearParams ident{Tensor::from_values(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor::zeros(1, 3)};
    EXPECT_LT(refops::max_abs_diff(project(x, ident), refops::from_tensor(x)), 1e-15);
    LinearParams consts{Tensor::zeros(3, 3), Tensor::from_values(1, 3, {4, 5, 6})};
    auto y = project(x, consts);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(y.at(i, 0), 4.0);
        EXPECT_EQ(y.at(i, 2), 6.0);
    }
}

TEST(Project, RandomCaseAgainstTripleLoop) {
    Rng rng(33);
    auto p = LinearParams::init(4, 4, rng);
    auto x = random_tensor(3, 4, rng);
    auto expected = refops::affine(refops::from_tensor(x), refops::from_tensor(p.weight), p.bias.data());
    EXPECT_LT(refops::max_abs_diff(project(x, p), expected), 1e-12);
}

TEST(Project, WidthMismatchRejected) {
    Rng rng(34);
    auto p = LinearParams::init(4, 4, rng);
    EXPECT_THROW(project(Tensor::zeros(2, 3), p), std::invalid_argument);
}

TEST(AttentionGradients, PassGradCheckThroughMask) {
    Rng rng(35);
    auto params = AttentionParams::init(4, 2, rng);
    auto q = random_tensor(2, 4, rng).set_requires_grad(true);
    auto kv = random_tensor(3, 4, rng).set_requires_grad(true);
    TokenMask mask{{true, false, true}};
    auto probe_weights = random_tensor(2, 4, rng);
    auto f = [&]() { return sum_all(mul(multi_head_attention(q, kv, params, mask), probe_weights)); };
    std::vector<Tensor> attn_params;
    params.collect(attn_params);
    auto report = grad_check(f, {{"inputs", {q, kv}}, {"attention", attn_params}}, 1e-5, 1e-6);
    EXPECT_TRUE(report.all_pass) << "max rel err " << report.worst();
}

TEST(AttentionParamsInit, RejectsIndivisibleHeads) {
    Rng rng(36);
    EXPECT_THROW(AttentionParams::init(6, 4, rng), std::invalid_argument);
}
