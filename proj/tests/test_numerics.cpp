#include <gtest/gtest.h>

#include "nifkit/numerics.hpp"
#include "oracles.hpp"

using namespace nifkit;

namespace {

double orthonormality_defect(const ColMatrix& q) {
    return (q.transpose() * q - ColMatrix::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
}

}  // namespace

TEST(Svd, IdentityHasUnitSingularValues) {
    const SvdThin r = svd_thin(ColMatrix::Identity(3, 3));
    for (Index i = 0; i < 3; ++i) EXPECT_NEAR(r.s(i), 1.0, 1e-14);
}

TEST(Svd, RankOneOuterProduct) {
    Vector a(4), b(3);
    a << 1, 2, -1, 0.5;
    b << 0.3, -0.2, 0.9;
    a.normalize();
    b.normalize();
    const SvdThin r = svd_thin(a * b.transpose());
    EXPECT_NEAR(r.s(0), 1.0, 1e-14);
    for (Index i = 1; i < r.s.size(); ++i) EXPECT_NEAR(r.s(i), 0.0, 1e-14);
}

TEST(Svd, RandomSixByFourMatchesJacobiOracle) {
    Rng rng(11);
    const ColMatrix a = random_matrix(rng, 6, 4);
    const SvdThin r = svd_thin(a);
    const ColMatrix rec = r.U * r.s.asDiagonal() * r.V.transpose();
    EXPECT_LT((rec - a).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT(orthonormality_defect(r.U), 1e-10);
    EXPECT_LT(orthonormality_defect(r.V), 1e-10);
    const auto ev = oracle::jacobi_eigenvalues(a.transpose() * a);
    for (Index i = 0; i < 4; ++i) EXPECT_NEAR(r.s(i) * r.s(i), ev[static_cast<std::size_t>(i)], 1e-10);
}

TEST(Svd, ReconstructionPropertyUpTo200) {
    Rng rng(3);
    for (auto [m, n] : {std::pair{1, 1}, {7, 13}, {50, 20}, {200, 200}, {200, 37}}) {
        const ColMatrix a = random_matrix(rng, m, n);
        const SvdThin r = svd_thin(a);
        const ColMatrix rec = r.U * r.s.asDiagonal() * r.V.transpose();
        EXPECT_LE((rec - a).norm(), 1e-10 * a.norm()) << m << "x" << n;
        for (Index i = 1; i < r.s.size(); ++i) EXPECT_GE(r.s(i - 1), r.s(i));
        EXPECT_GE(r.s.minCoeff(), 0.0);
    }
}

TEST(Svd, RejectsNonFinite) {
    ColMatrix a = ColMatrix::Ones(2, 2);
    a(0, 1) = std::nan("");
    try {
        svd_thin(a);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::InvalidInput);
    }
}

TEST(PivotedQr, IdentityKeepsOrder) {
    const PivotedQr r = qr_column_pivot(ColMatrix::Identity(5, 5));
    for (Index i = 0; i < 5; ++i) EXPECT_EQ(r.perm[static_cast<std::size_t>(i)], i);
}

TEST(PivotedQr, DominantColumnFirst) {
    Rng rng(5);
    ColMatrix a = random_matrix(rng, 6, 5);
    for (Index j = 0; j < 5; ++j) a.col(j).normalize();
    a.col(3) *= 10.0;
    EXPECT_EQ(qr_column_pivot(a).perm[0], 3);
}

TEST(PivotedQr, RandomReconstructionAndMonotoneDiagonal) {
    Rng rng(17);
    for (auto [m, n] : {std::pair{5, 5}, {3, 40}, {12, 4}}) {
        const ColMatrix a = random_matrix(rng, m, n);
        const PivotedQr r = qr_column_pivot(a);
        ColMatrix ap(m, n);
        for (Index j = 0; j < n; ++j) ap.col(j) = a.col(r.perm[static_cast<std::size_t>(j)]);
        EXPECT_LT((ap - r.Q * r.R).norm(), 1e-10);
        EXPECT_LT(orthonormality_defect(r.Q), 1e-12);
        for (Index k = 0; k + 1 < std::min(m, n); ++k)
            EXPECT_GE(std::abs(r.R(k, k)), std::abs(r.R(k + 1, k + 1)));
    }
}

TEST(PivotedQr, TiesResolveToLowestIndex) {
    ColMatrix a = ColMatrix::Zero(2, 4);
    a(0, 2) = 1.0;
    a(1, 1) = 1.0;
    a(0, 3) = -1.0;
    const PivotedQr r = qr_column_pivot(a);
    EXPECT_EQ(r.perm[0], 1);
    EXPECT_EQ(r.perm[1], 2);
}

TEST(LeastSquares, IdentitySystem) {
    Rng rng(1);
    const ColMatrix b = random_matrix(rng, 4, 2);
    const LeastSquares ls = least_squares(ColMatrix::Identity(4, 4), b);
    EXPECT_LT((ls.x - b).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_EQ(ls.rank, 4);
    EXPECT_FALSE(ls.truncated);
}

TEST(LeastSquares, ConsistentOverdetermined) {
    Rng rng(2);
    const ColMatrix a = random_matrix(rng, 9, 3);
    Vector x(3);
    x << 0.5, -2.0, 1.25;
    const LeastSquares ls = least_squares(a, a * x);
    EXPECT_LT((ls.x.col(0) - x).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(LeastSquares, NoisyMatchesNormalEquationsOracle) {
    Rng rng(8);
    const ColMatrix a = random_matrix(rng, 8, 3);
    Vector b(8);
    for (Index i = 0; i < 8; ++i) b(i) = rng.uniform(-1, 1);
    const LeastSquares ls = least_squares(a, b);
    const Vector ref = oracle::normal_equations(a, b);
    EXPECT_LT((ls.x.col(0) - ref).cwiseAbs().maxCoeff(), 1e-8);
    const Vector resid = a * ls.x.col(0) - b;
    EXPECT_LE((a.transpose() * resid).norm(), 1e-9 * a.norm() * b.norm());
}

TEST(LeastSquares, RankDeficientIsTruncated) {
    ColMatrix a(4, 3);
    a << 1, 2, 3, 2, 4, 6, 1, 0, 1, 0, 1, 1;
    a.col(2) = a.col(0) + a.col(1);
    Vector b(4);
    b << 1, 2, 3, 4;
    const LeastSquares ls = least_squares(a, b);
    EXPECT_EQ(ls.rank, 2);
    EXPECT_TRUE(ls.truncated);
    EXPECT_LE((a.transpose() * (a * ls.x.col(0) - b)).norm(), 1e-9 * a.norm() * b.norm());
}

TEST(EigSmall, Diagonal) {
    ColMatrix a = ColMatrix::Zero(2, 2);
    a(0, 0) = 1.0;
    a(1, 1) = 3.0;
    const EigResult r = eig_small(a);
    EXPECT_NEAR(r.values(0).real(), 3.0, 1e-14);
    EXPECT_NEAR(r.values(1).real(), 1.0, 1e-14);
}

TEST(EigSmall, RotationHasUnitCircleConjugatePair) {
    const double th = 0.7;
    ColMatrix a(2, 2);
    a << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    const EigResult r = eig_small(a);
    EXPECT_NEAR(std::abs(r.values(0) - std::polar(1.0, th)) * std::abs(r.values(0) - std::polar(1.0, -th)), 0.0,
                1e-12);
    EXPECT_NEAR(std::abs(r.values(0) - std::conj(r.values(1))), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(std::arg(r.values(0))), th, 1e-12);
}

TEST(EigSmall, RandomResidual) {
    Rng rng(21);
    const ColMatrix a = random_matrix(rng, 6, 6);
    const EigResult r = eig_small(a);
    const CMatrix ac = a.cast<Complex>();
    for (Index i = 0; i < 6; ++i) {
        const CVector res = ac * r.vectors.col(i) - r.values(i) * r.vectors.col(i);
        EXPECT_LT(res.norm(), 1e-8 * a.norm());
        if (i > 0) EXPECT_GE(std::abs(r.values(i - 1)), std::abs(r.values(i)));
    }
}

TEST(EigSmall, RejectsNonSquareAndOversize) {
    EXPECT_THROW(eig_small(ColMatrix::Zero(2, 3)), Error);
    EXPECT_THROW(eig_small(ColMatrix::Identity(kEigSmallCap + 1, kEigSmallCap + 1)), Error);
}

TEST(Rng, UniformDegenerateAndStatistics) {
    Rng rng(4);
    EXPECT_EQ(sample(rng, Uniform{0.0, 0.0}), 0.0);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double v = sample(rng, Uniform{-1.0, 1.0});
        ASSERT_GE(v, -1.0);
        ASSERT_LE(v, 1.0);
        sum += v;
    }
    EXPECT_LT(std::abs(sum / n), 0.02);
}

TEST(Rng, TruncNormalHardBound) {
    Rng rng(6);
    for (int i = 0; i < 100000; ++i) ASSERT_LE(std::abs(sample(rng, TruncNormal{0.1, 2.0})), 0.2);
}

TEST(Rng, InvalidRangeRejected) {
    Rng rng(6);
    EXPECT_THROW(sample(rng, Uniform{1.0, 0.0}), Error);
    EXPECT_THROW(sample(rng, TruncNormal{0.0, 2.0}), Error);
}

TEST(Rng, EqualSeedsGiveEqualStreams) {
    Rng a(99), b(99);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_EQ(a.normal(), b.normal());
        ASSERT_EQ(a.uniform01(), b.uniform01());
    }
}
