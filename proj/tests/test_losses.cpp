#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "eraselora/losses.hpp"

#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace eraselora;

namespace {

LatentTensor constant_latent(int h, int w, int c, double v)
{
    LatentTensor z(h, w, c);
    z.values.setConstant(v);
    return z;
}

/// Attention stack whose normalized maps equal `maps` (columns) exactly: raw = log(A) / tau.
AttentionStack stack_from_normalized(const Eigen::MatrixXd& maps, int h, int w)
{
    const Eigen::MatrixXd raw = maps.array().log() / kDefaultTau;
    std::vector<std::string> tags;
    for (Eigen::Index b = 0; b < maps.cols(); ++b)
        tags.push_back("b" + std::to_string(b));
    return normalize_attention(raw, tags, h, w);
}

/// Single-subtype stack with a hand-set dominant map (softmax output can never reach 0).
AttentionStack stack_with_dominant(const std::vector<double>& dominant, int h, int w)
{
    AttentionStack att;
    att.subtype_order = {"only"};
    att.height = h;
    att.width = w;
    att.normalized = Eigen::Map<const Eigen::VectorXd>(dominant.data(), static_cast<Eigen::Index>(dominant.size()));
    att.raw = att.normalized;
    att.dominant = att.normalized.col(0);
    att.dominant_arg.assign(dominant.size(), 0);
    return att;
}

} // namespace

TEST(NormalizeAttention, IdenticalMapsSplitEvenly)
{
    Eigen::MatrixXd raw(6, 3);
    raw.col(0) << 0.1, 0.2, 0.3, 0.0, 0.5, 0.9;
    raw.col(1) = raw.col(0);
    raw.col(2) = raw.col(0);
    const auto att = normalize_attention(raw, {"a", "b", "c"}, 2, 3);
    EXPECT_TRUE(att.normalized.isApproxToConstant(1.0 / 3.0, 1e-12));
}

TEST(NormalizeAttention, TwoTagScalarSoftmax)
{
    Eigen::MatrixXd raw(1, 2);
    raw << 0.01, 0.02;
    const auto att = normalize_attention(raw, {"a", "b"}, 1, 1, 100.0);
    const double e = std::exp(1.0);
    EXPECT_NEAR(att.normalized(0, 0), 1.0 / (1.0 + e), 1e-12);
    EXPECT_NEAR(att.normalized(0, 1), e / (1.0 + e), 1e-12);
    EXPECT_NEAR(att.normalized(0, 0), 0.26894, 1e-5);
    EXPECT_NEAR(att.normalized(0, 1), 0.73106, 1e-5);
}

TEST(NormalizeAttention, RowsSumToOneAndDominantIsMax)
{
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::MatrixXd raw(64, 4);
    for (Eigen::Index i = 0; i < raw.size(); ++i)
        raw.data()[i] = u(rng);
    const auto att = normalize_attention(raw, {"a", "b", "c", "d"}, 8, 8);
    for (Eigen::Index p = 0; p < 64; ++p) {
        EXPECT_NEAR(att.normalized.row(p).sum(), 1.0, 1e-6);
        EXPECT_EQ(att.dominant[p], att.normalized.row(p).maxCoeff());
    }
}

TEST(NormalizeAttention, LargeLogitsDoNotOverflow)
{
    Eigen::MatrixXd raw(1, 2);
    raw << 50.0, 49.0;
    const auto att = normalize_attention(raw, {"a", "b"}, 1, 1);
    EXPECT_TRUE(att.normalized.allFinite());
    EXPECT_NEAR(att.normalized.sum(), 1.0, 1e-12);
}

TEST(NormalizeAttention, RejectsEmptyTagSet)
{
    EXPECT_THROW(normalize_attention(Eigen::MatrixXd(4, 0), {}, 2, 2), Error);
}

TEST(NormalizeAttention, ShiftInvariantPerIndex)
{
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 0.05), shift(-3.0, 3.0);
    Eigen::MatrixXd raw(16, 3);
    for (Eigen::Index i = 0; i < raw.size(); ++i)
        raw.data()[i] = u(rng);
    Eigen::MatrixXd shifted = raw;
    for (Eigen::Index p = 0; p < raw.rows(); ++p)
        shifted.row(p).array() += shift(rng);
    const auto a = normalize_attention(raw, {"a", "b", "c"}, 4, 4);
    const auto b = normalize_attention(shifted, {"a", "b", "c"}, 4, 4);
    EXPECT_LT((a.normalized - b.normalized).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(NormalizeAttention, PermutingSubtypesPermutesMapsOnly)
{
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 0.05);
    Eigen::MatrixXd raw(16, 3);
    for (Eigen::Index i = 0; i < raw.size(); ++i)
        raw.data()[i] = u(rng);
    LabelMap labels(4, 4);
    labels[0] = Label::target;
    labels[5] = Label::target;
    labels[9] = Label::non_target;
    Eigen::MatrixXd permuted(16, 3);
    permuted.col(0) = raw.col(2);
    permuted.col(1) = raw.col(0);
    permuted.col(2) = raw.col(1);
    const auto a = normalize_attention(raw, {"x", "y", "z"}, 4, 4);
    const auto b = normalize_attention(permuted, {"z", "x", "y"}, 4, 4);
    EXPECT_LT((a.normalized.col(2) - b.normalized.col(0)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((a.dominant - b.dominant).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(align_loss(a, labels), align_loss(b, labels), 1e-9);
    EXPECT_NEAR(div_loss(a, labels), div_loss(b, labels), 1e-9);
}

TEST(ReconLoss, IdenticalLatentsGiveZero)
{
    const auto z = constant_latent(4, 4, 4, 0.3);
    EXPECT_EQ(recon_loss(z, z, LabelMap(4, 4)), 0.0);
}

TEST(ReconLoss, SingleBackgroundIndexSquaredNorm)
{
    LabelMap labels(2, 2, Label::target);
    labels.set(1, 1, Label::background);
    auto z = constant_latent(2, 2, 4, 0.0);
    auto zh = z;
    zh.values.row(3) << 2.0, 0.0, 0.0, 0.0;
    EXPECT_DOUBLE_EQ(recon_loss(z, zh, labels), 4.0);
}

TEST(ReconLoss, IgnoresForegroundIndices)
{
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    LabelMap labels(4, 4);
    for (int k : {0, 3, 6, 9})
        labels[static_cast<std::size_t>(k)] = Label::target;
    for (int k : {1, 12})
        labels[static_cast<std::size_t>(k)] = Label::non_target;
    auto z = constant_latent(4, 4, 3, 0.1);
    auto zh = constant_latent(4, 4, 3, 0.4);
    const double before = recon_loss(z, zh, labels);
    for (int k : {0, 3, 6, 9, 1, 12})
        for (int c = 0; c < 3; ++c)
            zh.values(k, c) = 100.0 * n(rng);
    EXPECT_DOUBLE_EQ(recon_loss(z, zh, labels), before);
}

TEST(ReconLoss, NoBackgroundIsDegenerate)
{
    const auto z = constant_latent(2, 2, 4, 0.0);
    try {
        recon_loss(z, z, LabelMap(2, 2, Label::target));
        FAIL() << "expected degenerate scene";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::degenerate_scene);
    }
}

TEST(AlignLoss, ExactIndicatorIsNearZero)
{
    LabelMap labels(2, 2);
    labels.set(0, 1, Label::non_target);
    labels.set(1, 0, Label::target);
    const auto att = stack_with_dominant({1.0, 0.0, 1.0, 1.0}, 2, 2);
    EXPECT_GE(align_loss(att, labels), 0.0);
    EXPECT_LT(align_loss(att, labels), 1e-6);
}

TEST(AlignLoss, SupportOnNonTargetGivesOne)
{
    LabelMap labels(1, 3);
    labels.set(0, 0, Label::non_target);
    labels.set(0, 1, Label::non_target);
    const auto att = stack_with_dominant({0.8, 0.6, 0.0}, 1, 3);
    EXPECT_EQ(align_loss(att, labels), 1.0);
}

TEST(AlignLoss, UniformHalfOnTwoByTwo)
{
    LabelMap labels(2, 2);
    labels.set(1, 0, Label::non_target);
    labels.set(1, 1, Label::non_target);
    const auto att = normalize_attention(Eigen::MatrixXd::Zero(4, 2), {"a", "b"}, 2, 2);
    EXPECT_NEAR(align_loss(att, labels), 1.0 - 2.0 / (4.0 + kDiceEpsilon), 1e-12);
    EXPECT_NEAR(align_loss(att, labels), 0.5, 1e-6);
}

TEST(DivLoss, SingleTagReachingOneGivesZero)
{
    LabelMap labels(2, 2);
    labels.set(0, 0, Label::target);
    const auto att = normalize_attention(Eigen::MatrixXd::Zero(4, 1), {"only"}, 2, 2);
    EXPECT_NEAR(div_loss(att, labels), 0.0, 1e-15);
}

TEST(DivLoss, InMaskMaximaPointThreeAndPointSeven)
{
    LabelMap labels(1, 3);
    labels.set(0, 0, Label::target);
    labels.set(0, 1, Label::target);
    Eigen::MatrixXd maps(3, 2);
    maps << 0.7, 0.3, 0.8, 0.2, 0.05, 0.95;
    const auto att = stack_from_normalized(maps, 1, 3);
    const double expected = oracle::div_loss({{0.7, 0.8, 0.05}, {0.3, 0.2, 0.95}}, labels);
    EXPECT_NEAR(expected, 0.7, 1e-12);
    EXPECT_NEAR(div_loss(att, labels), expected, 1e-9);
}

TEST(DivLoss, ExtraNonTargetIndicesDoNotMatter)
{
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 0.05);
    Eigen::MatrixXd raw(9, 3);
    for (Eigen::Index i = 0; i < raw.size(); ++i)
        raw.data()[i] = u(rng);
    LabelMap labels(3, 3);
    labels.set(1, 1, Label::target);
    const double base = div_loss(normalize_attention(raw, {"a", "b", "c"}, 3, 3), labels);
    for (int p : {0, 2, 5, 8})
        raw.row(p).setConstant(0.9 * p);
    EXPECT_DOUBLE_EQ(div_loss(normalize_attention(raw, {"a", "b", "c"}, 3, 3), labels), base);
}

TEST(DivLoss, NoTargetIsDegenerate)
{
    const auto att = normalize_attention(Eigen::MatrixXd::Zero(4, 2), {"a", "b"}, 2, 2);
    try {
        div_loss(att, LabelMap(2, 2));
        FAIL() << "expected degenerate scene";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::degenerate_scene);
    }
}

TEST(TotalLoss, AllComponentsZero)
{
    LabelMap labels(2, 2);
    labels.set(0, 0, Label::target);
    const auto z = constant_latent(2, 2, 4, 0.2);
    const auto att = normalize_attention(Eigen::MatrixXd::Zero(4, 1), {"only"}, 2, 2);
    const auto b = total_loss(z, z, att, labels);
    EXPECT_NEAR(b.l_total, 0.0, 1e-6);
}

TEST(TotalLoss, ArithmeticOfTheWeightedSum)
{
    LossBreakdown b;
    b.l_recon = 0.1;
    b.l_align = 0.5;
    b.l_div = 0.7;
    b.l_puzzle = b.l_align + b.l_div;
    b.l_total = b.l_recon + 0.2 * b.l_puzzle;
    EXPECT_NEAR(b.l_total, 0.34, 1e-12);
}

TEST(TotalLoss, ZeroLambdaLeavesReconstructionOnly)
{
    std::mt19937_64 rng(8);
    const auto s = gradcheck::random_scene(rng);
    const auto att = normalize_attention(s.raw, s.tags, s.z.height, s.z.width);
    const auto b = total_loss(s.z, s.z_hat, att, s.labels, 0.0);
    EXPECT_EQ(b.l_total, b.l_recon);
    EXPECT_GT(b.l_puzzle, 0.0);
}

TEST(TotalLoss, EmptySubtypeSetSkipsPuzzle)
{
    LabelMap labels(2, 2);
    labels.set(0, 0, Label::target);
    const auto z = constant_latent(2, 2, 4, 0.2);
    auto zh = constant_latent(2, 2, 4, 0.5);
    const auto b = total_loss(z, zh, std::nullopt, labels);
    EXPECT_TRUE(b.puzzle_skipped);
    EXPECT_EQ(b.l_align, 0.0);
    EXPECT_EQ(b.l_div, 0.0);
    EXPECT_EQ(b.l_total, b.l_recon);
}

TEST(TotalLoss, BreakdownJsonRoundTrip)
{
    LossBreakdown b{0.25, 0.5, 0.125, 0.625, 0.375, 0.2, false};
    const nlohmann::json j = b;
    const auto back = j.get<LossBreakdown>();
    EXPECT_EQ(back.l_recon, b.l_recon);
    EXPECT_EQ(back.l_total, b.l_total);
    EXPECT_EQ(back.lambda, b.lambda);
}

TEST(LossRanges, AlignAndDivStayInUnitInterval)
{
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 200; ++trial) {
        const auto s = gradcheck::random_scene(rng, 0.0);
        const auto att = normalize_attention(s.raw, s.tags, s.z.height, s.z.width);
        const auto b = total_loss(s.z, s.z_hat, att, s.labels);
        EXPECT_GE(b.l_align, 0.0);
        EXPECT_LE(b.l_align, 1.0);
        EXPECT_GE(b.l_div, 0.0);
        EXPECT_LE(b.l_div, 1.0);
        EXPECT_GE(b.l_recon, 0.0);
        EXPECT_EQ(b.l_puzzle, b.l_align + b.l_div);
    }
}

class GradientCheck : public ::testing::TestWithParam<gradcheck::Term> {};

TEST_P(GradientCheck, AnalyticMatchesCentralDifferences)
{
    std::mt19937_64 rng(100 + static_cast<int>(GetParam()));
    for (int trial = 0; trial < 25; ++trial) {
        const auto s = gradcheck::random_scene(rng);
        const double err = gradcheck::relative_error(gradcheck::analytic(GetParam(), s), gradcheck::numeric(GetParam(), s));
        EXPECT_LT(err, 1e-4) << "trial " << trial;
    }
}

INSTANTIATE_TEST_SUITE_P(Terms, GradientCheck,
                         ::testing::Values(gradcheck::Term::recon, gradcheck::Term::align, gradcheck::Term::div,
                                           gradcheck::Term::total),
                         [](const auto& info) { return std::string(gradcheck::name(info.param)); });
