#include <gtest/gtest.h>

#include <cmath>

#include "medvqa/adamw.hpp"
#include "medvqa/grad_check.hpp"
#include "medvqa/tensor.hpp"
#include "reference_ops.hpp"

using namespace medvqa;

namespace {

Tensor random_tensor(int rows, int cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(rows, cols, std::move(v));
}

// Gradient check of a single op: loss = sum(out * C) with a fixed random C to
// break symmetry between output elements.
void expect_op_gradient(const std::string& name, const std::function<Tensor(std::vector<Tensor>&)>& build,
                        std::vector<Tensor> params) {
    Rng rng(99);
    for (auto& p : params) p.set_requires_grad(true);
    Tensor probe = build(params);
    Tensor weights = random_tensor(probe.rows(), probe.cols(), rng);
    auto f = [&]() { return sum_all(mul(build(params), weights)); };
    auto report = grad_check(f, {{name, params}}, 1e-5, 1e-6);
    EXPECT_TRUE(report.all_pass) << name << " max rel err " << report.worst();
}

}  // namespace

TEST(Tensor, ShapeDataInvariant) {
    EXPECT_THROW(Tensor::from_values(2, 3, {1.0, 2.0}), std::invalid_argument);
    auto t = Tensor::from_values(2, 2, {1, 2, 3, 4});
    EXPECT_EQ(t.numel(), 4u);
    EXPECT_DOUBLE_EQ(t.at(1, 0), 3.0);
}

TEST(Tensor, FiniteValidation) {
    auto t = Tensor::from_values(1, 2, {1.0, std::nan("")});
    EXPECT_THROW(t.validate_finite("t"), std::invalid_argument);
}

TEST(Matmul, IdentityCase) {
    auto a = Tensor::from_values(2, 2, {1, 2, 3, 4});
    auto eye = Tensor::from_values(2, 2, {1, 0, 0, 1});
    auto c = matmul(a, eye);
    EXPECT_EQ(refops::max_abs_diff(c, refops::from_tensor(a)), 0.0);
}

TEST(Matmul, FixedCaseAgainstTripleLoop) {
    auto a = Tensor::from_values(2, 2, {1, 2, 3, 4});
    auto b = Tensor::from_values(2, 2, {5, 6, 7, 8});
    auto c = matmul(a, b);
    // frozen from the triple-loop reference
    const refops::Mat expected = {{19, 22}, {43, 50}};
    EXPECT_EQ(refops::max_abs_diff(c, expected), 0.0);
    EXPECT_EQ(refops::max_abs_diff(c, refops::matmul(refops::from_tensor(a), refops::from_tensor(b))), 0.0);
}

TEST(Matmul, ZerosAnnihilate) {
    Rng rng(1);
    auto a = random_tensor(3, 4, rng);
    auto c = matmul(a, Tensor::zeros(4, 2));
    for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, RandomAgreesWithReference) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_tensor(5, 4, rng);
        auto b = random_tensor(4, 3, rng);
        auto ref = refops::matmul(refops::from_tensor(a), refops::from_tensor(b));
        EXPECT_LT(refops::max_abs_diff(matmul(a, b), ref), 1e-12);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    auto a = Tensor::zeros(2, 3);
    auto b = Tensor::zeros(2, 3);
    try {
        matmul(a, b);
        FAIL() << "expected dimension error";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(SoftmaxRows, UniformAndClosedForm) {
    auto s = softmax_rows(Tensor::from_values(1, 2, {0, 0}));
    EXPECT_NEAR(s.at(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(s.at(0, 1), 0.5, 1e-15);
    auto t = softmax_rows(Tensor::from_values(1, 2, {std::log(2.0), 0.0}));
    EXPECT_NEAR(t.at(0, 0), 2.0 / 3.0, 1e-14);
    EXPECT_NEAR(t.at(0, 1), 1.0 / 3.0, 1e-14);
}

TEST(SoftmaxRows, ShiftInvariance) {
    Rng rng(3);
    auto x = random_tensor(4, 6, rng, -3, 3);
    auto shifted = add_scalar(x, 17.25);
    EXPECT_LT(refops::max_abs_diff(softmax_rows(shifted), refops::from_tensor(softmax_rows(x))), 1e-12);
}

TEST(SoftmaxRows, RowsSumToOneAndPositive) {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        auto s = softmax_rows(random_tensor(5, 7, rng, -30, 30));
        for (int i = 0; i < s.rows(); ++i) {
            double sum = 0.0;
            for (int j = 0; j < s.cols(); ++j) {
                EXPECT_GT(s.at(i, j), 0.0);
                sum += s.at(i, j);
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(SoftmaxRows, NanInputRejected) {
    auto x = Tensor::from_values(1, 2, {std::nan(""), 0.0});
    EXPECT_THROW(softmax_rows(x), std::invalid_argument);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    auto x = Tensor::full(2, 4, 3.7);
    auto y = layer_norm(x, Tensor::full(1, 4, 1.0), Tensor::zeros(1, 4));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitVarianceRow) {
    auto y = layer_norm(Tensor::from_values(1, 2, {1, -1}), Tensor::full(1, 2, 1.0), Tensor::zeros(1, 2));
    const double expected = 1.0 / std::sqrt(1.0 + kLayerNormEpsilon);
    EXPECT_NEAR(y.at(0, 0), expected, 1e-15);
    EXPECT_NEAR(y.at(0, 1), -expected, 1e-15);
}

TEST(LayerNorm, ZeroGainGivesBias) {
    Rng rng(5);
    auto x = random_tensor(3, 4, rng);
    auto bias = Tensor::from_values(1, 4, {0.5, -1, 2, 0});
    auto y = layer_norm(x, Tensor::zeros(1, 4), bias);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_EQ(y.at(i, j), bias.at(0, j));
}

TEST(Backward, SumOfSquares) {
    auto x = Tensor::from_values(1, 3, {1, 2, 3}).set_requires_grad(true);
    backward(sum_all(mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
}

TEST(Backward, SumOfProductAgainstHandDerivation) {
    auto a = Tensor::from_values(2, 2, {1, 0, 0, 1});
    auto b = Tensor::from_values(2, 2, {1, 2, 3, 4}).set_requires_grad(true);
    backward(sum_all(matmul(a, b)));
    // d sum(A.B) / dB = A^T . ones = all-ones for A = I
    for (double g : b.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, LeafNotOnTapeKeepsZeroGrad) {
    auto x = Tensor::from_values(1, 2, {1, 2}).set_requires_grad(true);
    auto unused = Tensor::from_values(1, 2, {5, 6}).set_requires_grad(true);
    backward(sum_all(mul(x, x)));
    for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossRejected) {
    auto x = Tensor::from_values(1, 2, {1, 2}).set_requires_grad(true);
    EXPECT_THROW(backward(mul(x, x)), std::invalid_argument);
}

TEST(Backward, RepeatedCallsAccumulate) {
    auto x = Tensor::from_values(1, 1, {3}).set_requires_grad(true);
    auto loss = sum_all(mul(x, x));
    backward(loss);
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);  // 2 * (2x)
}

TEST(Backward, IndependentSubgraphsMatchSeparateRuns) {
    Rng rng(11);
    auto x = random_tensor(2, 3, rng);
    auto y = random_tensor(3, 2, rng);
    x.set_requires_grad(true);
    y.set_requires_grad(true);

    backward(add(sum_all(gelu(x)), sum_all(mul(y, y))));
    auto gx = x.grad();
    auto gy = y.grad();

    auto x2 = x.detach().set_requires_grad(true);
    auto y2 = y.detach().set_requires_grad(true);
    backward(sum_all(gelu(x2)));
    backward(sum_all(mul(y2, y2)));
    for (std::size_t i = 0; i < gx.size(); ++i) EXPECT_DOUBLE_EQ(gx[i], x2.grad()[i]);
    for (std::size_t i = 0; i < gy.size(); ++i) EXPECT_DOUBLE_EQ(gy[i], y2.grad()[i]);
}

TEST(GradCheck, QuadraticIsTight) {
    auto x = Tensor::scalar(1.0).set_requires_grad(true);
    auto f = [&]() { return mul(x, x); };
    auto report = grad_check(f, {{"x", {x}}}, 1e-5, 1e-9);
    ASSERT_EQ(report.rows.size(), 1u);
    EXPECT_TRUE(report.all_pass) << report.worst();
    EXPECT_LT(report.worst(), 1e-9);
}

TEST(GradCheck, ZeroToleranceAlwaysFails) {
    auto x = Tensor::scalar(1.0).set_requires_grad(true);
    auto f = [&]() { return mul(x, x); };
    auto report = grad_check(f, {{"x", {x}}}, 1e-5, 0.0);
    EXPECT_FALSE(report.all_pass);
    EXPECT_GE(report.worst(), 0.0);
}

TEST(GradCheck, NonDeterminismAborts) {
    auto x = Tensor::scalar(1.0).set_requires_grad(true);
    int calls = 0;
    auto f = [&]() { return scale(x, 1.0 + 0.5 * calls++); };
    EXPECT_THROW(grad_check(f, {{"x", {x}}}, 1e-5, 1e-6), std::runtime_error);
}

TEST(GradCheck, DetectsCorruptedBackwardRule) {
    // an op with a deliberately wrong local rule: forward x^2, backward claims 3x
    auto broken_square = [](const Tensor& t) {
        std::vector<double> out(t.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.data()[i] * t.data()[i];
        auto p = t.handle();
        return detail::make_op(t.shape(), std::move(out), {t}, [p](detail::TapeNode& n) {
            p->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * 3.0 * p->data[i];
        });
    };
    auto x = Tensor::scalar(1.5).set_requires_grad(true);
    auto f = [&]() { return sum_all(broken_square(x)); };
    auto report = grad_check(f, {{"x", {x}}}, 1e-5, 1e-6);
    EXPECT_FALSE(report.all_pass);
}

TEST(AdamW, FirstStepMatchesClosedForm) {
    auto p = Tensor::scalar(1.0).set_requires_grad(true);
    AdamW opt({p}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    p.zero_grad();
    backward(p);  // d(p)/dp = 1
    opt.step();
    // frozen: bias-corrected first step moves by -lr/(1 + eps) ~ -0.1
    EXPECT_NEAR(p.value(), 0.9, 1e-6);
    EXPECT_LT(std::abs((p.value() - 1.0) - (-0.1)), 1e-6);
    EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdamW, ZeroGradZeroDecayLeavesParameter) {
    auto p = Tensor::scalar(2.5).set_requires_grad(true);
    AdamW opt({p}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    p.zero_grad();
    opt.step();
    EXPECT_DOUBLE_EQ(p.value(), 2.5);
}

TEST(AdamW, DecoupledDecay) {
    auto p = Tensor::scalar(1.0).set_requires_grad(true);
    AdamW opt({p}, {0.1, 0.9, 0.999, 1e-8, 0.1});
    p.zero_grad();
    opt.step();
    // frozen: p - lr*wd*p = 1 - 0.1*0.1*1 = 0.99
    EXPECT_DOUBLE_EQ(p.value(), 0.99);
}

TEST(OpGradients, AllPrimitivesPassGradCheck) {
    Rng rng(42);
    auto r = [&rng](int m, int n, double lo = -1.0, double hi = 1.0) { return random_tensor(m, n, rng, lo, hi); };

    expect_op_gradient("add", [](auto& p) { return add(p[0], p[1]); }, {r(3, 4), r(3, 4)});
    expect_op_gradient("sub", [](auto& p) { return sub(p[0], p[1]); }, {r(3, 4), r(3, 4)});
    expect_op_gradient("mul", [](auto& p) { return mul(p[0], p[1]); }, {r(3, 4), r(3, 4)});
    expect_op_gradient("div", [](auto& p) { return div(p[0], p[1]); }, {r(2, 3), r(2, 3, 0.5, 2.0)});
    expect_op_gradient("scale", [](auto& p) { return scale(p[0], -1.7); }, {r(3, 4)});
    expect_op_gradient("add_scalar", [](auto& p) { return add_scalar(p[0], 0.3); }, {r(3, 4)});
    expect_op_gradient("add_rowvec", [](auto& p) { return add_rowvec(p[0], p[1]); }, {r(3, 4), r(1, 4)});
    expect_op_gradient("add_colvec", [](auto& p) { return add_colvec(p[0], p[1]); }, {r(3, 4), r(3, 1)});
    expect_op_gradient("add_bscalar", [](auto& p) { return add_bscalar(p[0], p[1]); }, {r(3, 4), r(1, 1)});
    expect_op_gradient("matmul", [](auto& p) { return matmul(p[0], p[1]); }, {r(3, 4), r(4, 2)});
    expect_op_gradient("transpose", [](auto& p) { return transpose(p[0]); }, {r(3, 4)});
    expect_op_gradient("gelu", [](auto& p) { return gelu(p[0]); }, {r(3, 4, -2, 2)});
    expect_op_gradient("leaky_relu", [](auto& p) { return leaky_relu(p[0], 0.2); }, {r(3, 4, -2, 2)});
    expect_op_gradient("elu", [](auto& p) { return elu(p[0]); }, {r(3, 4, -2, 2)});
    expect_op_gradient("sqrt", [](auto& p) { return sqrt_elems(p[0]); }, {r(3, 4, 0.5, 3.0)});
    expect_op_gradient("softmax_rows", [](auto& p) { return softmax_rows(p[0]); }, {r(3, 5, -2, 2)});
    expect_op_gradient("layer_norm", [](auto& p) { return layer_norm(p[0], p[1], p[2]); },
                       {r(3, 4), r(1, 4, 0.5, 1.5), r(1, 4)});
    expect_op_gradient("sum_all", [](auto& p) { return sum_all(p[0]); }, {r(3, 4)});
    expect_op_gradient("mean_rows", [](auto& p) { return mean_rows(p[0]); }, {r(4, 3)});
    expect_op_gradient("concat_rows", [](auto& p) { return concat_rows({p[0], p[1]}); }, {r(2, 3), r(4, 3)});
    expect_op_gradient("concat_cols", [](auto& p) { return concat_cols({p[0], p[1]}); }, {r(3, 2), r(3, 4)});
    expect_op_gradient("gather_rows", [](auto& p) { return gather_rows(p[0], {2, 0, 2, 1}); }, {r(4, 3)});

    auto target = Tensor::from_values(1, 4, {0, 1, 0, 0});
    expect_op_gradient("bce_with_logits", [target](auto& p) { return bce_with_logits(p[0], target); }, {r(1, 4, -3, 3)});
}

TEST(Ops, GatherRowsOutOfRange) {
    auto t = Tensor::zeros(3, 2);
    EXPECT_THROW(gather_rows(t, {3}), std::out_of_range);
}

TEST(Ops, NoGradGuardSuppressesTape) {
    auto x = Tensor::scalar(2.0).set_requires_grad(true);
    NoGradGuard guard;
    auto y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
}
