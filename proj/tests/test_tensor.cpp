#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "advrank/tensor.hpp"
#include "gradcheck.hpp"

using namespace advrank;
using advrank::testing::gradcheck;
using advrank::testing::random_tensor;

namespace {

constexpr double kTol = 1e-5;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(TensorOps, MatmulIdentity) {
    Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor i = Tensor::matrix({{1, 0}, {0, 1}});
    EXPECT_EQ(values(matmul(a, i)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(TensorOps, SoftmaxSymmetric) {
    EXPECT_EQ(values(softmax_rows(Tensor::matrix({{0, 0}}))), (std::vector<double>{0.5, 0.5}));
}

TEST(TensorOps, Log1pRelu) {
    Tensor x = Tensor::matrix({{-1, std::numbers::e - 1}});
    auto y = values(log1p(relu(x)));
    EXPECT_EQ(y[0], 0.0);
    EXPECT_NEAR(y[1], 1.0, 1e-15);
}

TEST(TensorOps, ShapeMismatchNamesBothShapes) {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL() << "expected a shape error";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3] vs [2x3]"), std::string::npos) << msg;
    }
    EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), std::invalid_argument);
    EXPECT_THROW(dot_rows(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), std::invalid_argument);
}

TEST(TensorOps, MaxRowsTieGoesToFirstRow) {
    Tensor x = Tensor::matrix({{1, 2}, {1, 0}}, true);
    backward(sum(max_rows(x)));
    EXPECT_EQ(values(Tensor::from({4}, std::vector<double>(x.grad().begin(), x.grad().end()))),
              (std::vector<double>{1, 1, 0, 0}));
}

TEST(Backward, DotProduct) {
    Tensor x = Tensor::matrix({{3}}, true);
    backward(sum(dot_rows(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, ReluSum) {
    Tensor x = Tensor::matrix({{-1, 2}}, true);
    backward(sum(relu(x)));
    EXPECT_EQ(x.grad()[0], 0.0);
    EXPECT_EQ(x.grad()[1], 1.0);
}

TEST(Backward, NonScalarRejected) {
    Tensor x = Tensor::matrix({{1, 2}}, true);
    EXPECT_THROW(backward(scale(x, 2.0)), std::invalid_argument);
}

TEST(Backward, GradientsAccumulateUntilZeroed) {
    Tensor x = Tensor::matrix({{2}}, true);
    backward(sum(square(x)));
    backward(sum(square(x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
    x.zero_grad();
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Backward, NoGradTensorNeverAllocatesGrad) {
    Tensor w = Tensor::matrix({{1, 2}}, true);
    Tensor c = Tensor::matrix({{3, 4}});
    backward(sum(mul(w, c)));
    EXPECT_TRUE(w.has_grad());
    EXPECT_FALSE(c.has_grad());
    EXPECT_EQ(w.grad().size(), w.numel());
}

TEST(Backward, SharedSubgraphVisitedOnce) {
    // y = h + h with h = x^2: a diamond; each node must run exactly once.
    Tensor x = Tensor::matrix({{3}}, true);
    Tensor h = square(x);
    backward(sum(add(h, h)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, IntermediateGradientsAvailable) {
    Tensor x = Tensor::matrix({{1, 2}}, true);
    Tensor h = scale(x, 3.0);
    h.set_requires_grad(true);
    backward(sum(square(h)));
    EXPECT_DOUBLE_EQ(h.grad()[0], 6.0);
    EXPECT_DOUBLE_EQ(h.grad()[1], 12.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 36.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    Tensor x = Tensor::matrix({{1, 2}}, true);
    Tensor y;
    {
        NoGradGuard guard;
        EXPECT_FALSE(grad_enabled());
        y = sum(square(x));
    }
    EXPECT_TRUE(grad_enabled());
    EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, PassCounter) {
    reset_backward_pass_count();
    Tensor x = Tensor::matrix({{1}}, true);
    backward(sum(x));
    backward(sum(x));
    EXPECT_EQ(backward_pass_count(), 2u);
}

// ---- finite differences ----------------------------------------------------

class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchCentralDifferences) {
    for (auto& c : advrank::testing::op_cases(1000 + static_cast<std::uint64_t>(GetParam()))) {
        const auto r = gradcheck(c.loss, c.inputs);
        EXPECT_LT(r.max_rel_error, kTol) << c.name;
    }
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, OpGradients, ::testing::Range(0, 100));

TEST(Composition, ThreeLayerNetworkMatchesFiniteDifferences) {
    for (int trial = 0; trial < 100; ++trial) {
        std::mt19937_64 rng(5000 + trial);
        std::uniform_int_distribution<std::size_t> dim(1, 6);
        const std::size_t n = dim(rng), d0 = dim(rng), d1 = dim(rng), d2 = dim(rng);
        Tensor x = random_tensor({n, d0}, rng);
        Tensor w1 = random_tensor({d0, d1}, rng), b1 = random_tensor({1, d1}, rng);
        Tensor w2 = random_tensor({d1, d2}, rng), b2 = random_tensor({1, d2}, rng);
        Tensor w3 = random_tensor({d2, 3}, rng);
        auto f = [&] {
            Tensor h1 = relu(add(matmul(x, w1), b1));
            Tensor h2 = log1p(square(add(matmul(h1, w2), b2)));
            return mean(logsumexp_rows(matmul(h2, w3)));
        };
        const auto r = gradcheck(f, {x, w1, b1, w2, b2, w3});
        ASSERT_LT(r.max_rel_error, kTol) << "trial " << trial << " input " << r.worst_input;
    }
}

// ---- optimizers ------------------------------------------------------------

TEST(Optimizers, SgdStepIsPlainGradientDescent) {
    Tensor w = Tensor::matrix({{1, -2}}, true);
    ParameterList params{{"w", w}};
    zero_grads(params);
    backward(sum(square(w)));  // grad = 2w
    sgd_step(params, 0.25);
    EXPECT_DOUBLE_EQ(w.data()[0], 0.5);
    EXPECT_DOUBLE_EQ(w.data()[1], -1.0);
}

TEST(Optimizers, SgdConvergesOnLeastSquares) {
    // min_w |Xw - y|^2 has the closed form w* = (X^T X)^-1 X^T y; for this
    // X (orthogonal columns) w* = [1, -2].
    Tensor x = Tensor::matrix({{1, 0}, {0, 1}, {1, 0}, {0, 1}});
    Tensor y = Tensor::matrix({{1}, {-2}, {1}, {-2}});
    Tensor w = Tensor::matrix({{0}, {0}}, true);
    ParameterList params{{"w", w}};
    for (int i = 0; i < 200; ++i) {
        zero_grads(params);
        backward(mean(square(sub(matmul(x, w), y))));
        sgd_step(params, 0.5);
    }
    EXPECT_NEAR(w.data()[0], 1.0, 1e-10);
    EXPECT_NEAR(w.data()[1], -2.0, 1e-10);
}

TEST(Optimizers, AdamFirstStepMovesByLearningRate) {
    // With zero moments the bias-corrected first step is lr * g / (|g| + eps).
    Tensor w = Tensor::matrix({{1, -3}}, true);
    ParameterList params{{"w", w}};
    AdamState state;
    zero_grads(params);
    backward(sum(square(w)));
    adam_step(params, state, {0.1, 0.9, 0.999, 1e-8});
    EXPECT_NEAR(w.data()[0], 0.9, 1e-8);
    EXPECT_NEAR(w.data()[1], -2.9, 1e-8);
    EXPECT_EQ(state.step, 1u);
}

TEST(Optimizers, AdamRequiresGradients) {
    Tensor w = Tensor::matrix({{1}}, true);
    AdamState state;
    EXPECT_THROW(adam_step({{"w", w}}, state, {}), std::logic_error);
}
