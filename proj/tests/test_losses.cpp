#include <cmath>
#include <limits>
#include <random>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "advrank/losses.hpp"
#include "gradcheck.hpp"

using namespace advrank;

namespace {

using Rows = std::vector<std::vector<double>>;

Rows random_rows(std::size_t r, std::size_t c, std::mt19937_64& rng, double spread = 3.0) {
    std::uniform_real_distribution<double> u(-spread, spread);
    Rows out(r, std::vector<double>(c));
    for (auto& row : out)
        for (auto& x : row) x = u(rng);
    return out;
}

// Plain-loop references.
double infonce_reference(const Rows& logits) {
    double total = 0.0;
    for (const auto& row : logits) {
        double denom = 0.0;
        for (double s : row) denom += std::exp(s);
        total += -std::log(std::exp(row[0]) / denom);
    }
    return total / static_cast<double>(logits.size());
}

double kl_reference(const Rows& p_logits, const Rows& q_logits) {
    double total = 0.0;
    for (std::size_t i = 0; i < p_logits.size(); ++i) {
        double zp = 0.0, zq = 0.0;
        for (std::size_t j = 0; j < p_logits[i].size(); ++j) {
            zp += std::exp(p_logits[i][j]);
            zq += std::exp(q_logits[i][j]);
        }
        for (std::size_t j = 0; j < p_logits[i].size(); ++j) {
            const double p = std::exp(p_logits[i][j]) / zp, q = std::exp(q_logits[i][j]) / zq;
            total += p * std::log(p / q);
        }
    }
    return total / static_cast<double>(p_logits.size());
}

}  // namespace

TEST(InfoNce, TwoEqualScoresGiveLnTwo) {
    EXPECT_NEAR(infonce(Tensor::matrix({{0.7}}), Tensor::matrix({{0.7}})).item(), std::log(2.0), 1e-15);
}

TEST(InfoNce, AllEqualScoresGiveLnOfCandidateCount) {
    for (std::size_t k : {1u, 3u, 10u}) {
        Tensor neg = Tensor::full({4, k}, -1.5);
        EXPECT_NEAR(infonce(Tensor::full({4, 1}, -1.5), neg).item(), std::log(static_cast<double>(k + 1)), 1e-13);
    }
}

TEST(InfoNce, MatchesLoopReference) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto rows = random_rows(1 + trial % 6, 2 + trial % 7, rng);
        EXPECT_NEAR(infonce_logits(Tensor::matrix(rows)).item(), infonce_reference(rows), 1e-12);
    }
}

TEST(InfoNce, StableForLargeScores) {
    const double v = infonce(Tensor::matrix({{1000.0}}), Tensor::matrix({{0.0, -1000.0}})).item();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, 0.0, 1e-12);
    const double w = infonce(Tensor::matrix({{0.0}}), Tensor::matrix({{800.0}})).item();
    EXPECT_NEAR(w, 800.0, 1e-9);
}

TEST(InfoNce, NonFiniteScoresRejected) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(infonce(Tensor::matrix({{nan}}), Tensor::matrix({{0.0}})), std::domain_error);
    EXPECT_THROW(infonce(Tensor::zeros({2, 1}), Tensor::zeros({3, 1})), std::invalid_argument);
}

TEST(InfoNce, RawSoftmaxVariant) {
    // -mean softmax(positive): rows [0, 0] and [ln 3, 0] give -(1/2 + 3/4)/2.
    const Tensor logits = Tensor::matrix({{0.0, 0.0}, {std::log(3.0), 0.0}});
    EXPECT_NEAR(infonce_logits(logits, true).item(), -0.625, 1e-15);
}

TEST(InfoNce, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(2);
    for (bool raw : {false, true}) {
        Tensor x = advrank::testing::random_tensor({4, 5}, rng);
        EXPECT_LT(advrank::testing::gradcheck([&] { return infonce_logits(x, raw); }, {x}).max_rel_error, 1e-6);
    }
}

TEST(MarginMse, MatchesLoopReference) {
    std::mt19937_64 rng(3);
    const auto s = random_rows(5, 3, rng), t = random_rows(5, 3, rng);
    double ref = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) ref += (s[i][j] - t[i][j]) * (s[i][j] - t[i][j]);
    ref /= 15.0;
    EXPECT_NEAR(margin_mse(Tensor::matrix(s), Tensor::matrix(t)).item(), ref, 1e-13);
    EXPECT_EQ(margin_mse(Tensor::matrix(s), Tensor::matrix(s)).item(), 0.0);
    EXPECT_THROW(margin_mse(Tensor::zeros({2, 2}), Tensor{}), std::invalid_argument);
    EXPECT_THROW(margin_mse(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})), std::invalid_argument);
    Tensor x = Tensor::matrix(s);
    const Tensor teacher = Tensor::matrix(t);
    EXPECT_LT(advrank::testing::gradcheck([&] { return margin_mse(x, teacher); }, {x}).max_rel_error, 1e-6);
}

TEST(KlScores, TwoPointClosedForm) {
    // softmax([0, 0]) = [1/2, 1/2], softmax([0, ln 3]) = [1/4, 3/4];
    // KL = 1/2 ln 2 + 1/2 ln(2/3) = 1/2 ln(4/3).
    const Tensor clean = Tensor::matrix({{0.0, 0.0}});
    const Tensor pert = Tensor::matrix({{0.0, std::log(3.0)}});
    EXPECT_NEAR(kl_scores(clean, pert).item(), 0.5 * std::log(4.0 / 3.0), 1e-15);
}

TEST(KlScores, PropertiesAndReference) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto p = random_rows(3, 4, rng), q = random_rows(3, 4, rng);
        const double kl = kl_scores(Tensor::matrix(p), Tensor::matrix(q)).item();
        EXPECT_NEAR(kl, kl_reference(p, q), 1e-12);
        EXPECT_GE(kl, 0.0);
        EXPECT_NEAR(kl_scores(Tensor::matrix(p), Tensor::matrix(p)).item(), 0.0, 1e-15);
        // Adding a constant to a row leaves its softmax unchanged.
        auto shifted = q;
        for (auto& row : shifted)
            for (auto& x : row) x += 7.0;
        EXPECT_NEAR(kl_scores(Tensor::matrix(p), Tensor::matrix(shifted)).item(), kl, 1e-12);
    }
    std::mt19937_64 g(5);
    Tensor a = advrank::testing::random_tensor({3, 4}, g), b = advrank::testing::random_tensor({3, 4}, g);
    EXPECT_LT(advrank::testing::gradcheck([&] { return kl_scores(a, b); }, {a, b}).max_rel_error, 1e-6);
}

TEST(TotalLoss, SumsPresentTerms) {
    const Tensor clean = Tensor::scalar(1.0), adv = Tensor::scalar(2.0), flops = Tensor::scalar(10.0);
    EXPECT_EQ(total_loss(clean, std::nullopt, std::nullopt, 0.5).item(), 1.0);
    EXPECT_EQ(total_loss(clean, adv, std::nullopt, 0.5).item(), 3.0);
    EXPECT_EQ(total_loss(clean, adv, flops, 0.5).item(), 8.0);
    EXPECT_EQ(total_loss(clean, std::nullopt, flops, 0.0).item(), 1.0);
}

TEST(InBatch, EffectiveNegativeCounts) {
    LossConfig c;
    EXPECT_EQ(effective_negatives(4, 2, c), 2u + 3u * 3u);
    c.in_batch_include_negatives = false;
    EXPECT_EQ(effective_negatives(4, 2, c), 2u + 3u);
    c.in_batch_negatives = false;
    EXPECT_EQ(effective_negatives(4, 2, c), 2u);
    EXPECT_EQ(effective_negatives(1, 5, LossConfig{}), 5u);
}

TEST(InBatch, RankingLogitsSelectTheRightColumns) {
    // Score (i, j) = 100 i + j makes every column traceable.
    const std::size_t b = 3, k = 2;
    std::vector<double> data;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b * (1 + k); ++j) data.push_back(100.0 * static_cast<double>(i) + static_cast<double>(j));
    const Tensor all = Tensor::from({b, b * (1 + k)}, data);
    for (bool include : {true, false}) {
        LossConfig c;
        c.in_batch_include_negatives = include;
        const Tensor logits = ranking_logits(all, b, k, c);
        ASSERT_EQ(logits.cols(), 1 + effective_negatives(b, k, c));
        for (std::size_t i = 0; i < b; ++i) {
            std::multiset<std::size_t> cols;
            for (std::size_t c2 = 0; c2 < logits.cols(); ++c2)
                cols.insert(static_cast<std::size_t>(logits.at(i, c2) - 100.0 * static_cast<double>(i)));
            EXPECT_EQ(static_cast<std::size_t>(logits.at(i, 0) - 100.0 * static_cast<double>(i)), i);
            std::multiset<std::size_t> expected{i, b + i * k, b + i * k + 1};
            for (std::size_t o = 0; o < b; ++o) {
                if (o == i) continue;
                expected.insert(o);
                if (include) expected.insert({b + o * k, b + o * k + 1});
            }
            EXPECT_EQ(cols, expected);
        }
    }
    LossConfig plain;
    plain.in_batch_negatives = false;
    EXPECT_EQ(ranking_logits(all, b, k, plain).cols(), 1 + k);
    EXPECT_THROW(ranking_logits(all, b + 1, k, plain), std::invalid_argument);
}

TEST(InBatch, StudentMarginsAreOwnPositiveMinusOwnNegatives) {
    const Tensor all = Tensor::matrix({{5, 9, 1, 2, 3, 4}, {8, 6, 7, 7, 0, -1}});
    const Tensor m = student_margins(all, 2, 2);
    EXPECT_EQ(m.at(0, 0), 5 - 1);
    EXPECT_EQ(m.at(0, 1), 5 - 2);
    EXPECT_EQ(m.at(1, 0), 6 - 0);
    EXPECT_EQ(m.at(1, 1), 6 - (-1));
}

TEST(LossConfig, JsonRoundTripAndObjectiveNames) {
    LossConfig c;
    c.objective = Objective::kMarginMse;
    c.flops_weight = 0.25;
    const LossConfig back = nlohmann::json(c).get<LossConfig>();
    EXPECT_EQ(back.objective, Objective::kMarginMse);
    EXPECT_EQ(back.flops_weight, 0.25);
    EXPECT_THROW(objective_from_string("kl_scores"), std::invalid_argument);
}
