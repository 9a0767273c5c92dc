// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "lalora/errors.hpp"
#include "lalora/linalg.hpp"
#include "support.hpp"

namespace lalora {
namespace {

TEST(Kron, IdentityTimesIdentity) {
    EXPECT_EQ(kron(Matrix::identity(2), Matrix::identity(3)), Matrix::identity(6));
}

TEST(Kron, Scalars) { EXPECT_EQ(kron(Matrix{{2.0}}, Matrix{{3.0}}), Matrix{{6.0}}); }

TEST(Kron, BlockLayout) {
    const Matrix p{{1, 2}, {3, 4}};
    const Matrix q{{0, 5}, {6, 7}};
    const Matrix k = kron(p, q);
    ASSERT_EQ(k.rows(), 4U);
    ASSERT_EQ(k.cols(), 4U);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            for (std::size_t a = 0; a < 2; ++a) {
                for (std::size_t b = 0; b < 2; ++b) {
                    EXPECT_EQ(k(i * 2 + a, j * 2 + b), p(i, j) * q(a, b));
                }
            }
        }
    }
}

TEST(Kron, AdapterShape) {
    const Matrix k = kron(Matrix::identity(5), Matrix::identity(3));
    EXPECT_EQ(k.rows(), 15U);
    EXPECT_EQ(k.cols(), 15U);
}

TEST(Kron, CapIsEnforced) { EXPECT_THROW(kron(Matrix(10, 10), Matrix(10, 10), 9999), SizeError); }

TEST(Kron, ScalarAndSumLinearity) {
    CounterRng rng(1, 1);
    const Matrix p1 = test::random_matrix(rng, 3, 2);
    const Matrix p2 = test::random_matrix(rng, 3, 2);
    const Matrix q = test::random_matrix(rng, 2, 4);
    EXPECT_LE(max_abs_diff(kron(2.5 * p1, q), 2.5 * kron(p1, q)), 1e-14 * 10);
    EXPECT_LE(max_abs_diff(kron(p1 + p2, q), kron(p1, q) + kron(p2, q)), 1e-12);
}

TEST(Vec, ColumnStacking) {
    const Matrix m{{1, 3}, {2, 4}};
    EXPECT_EQ(vec(m), (Vector{1, 2, 3, 4}));
}

TEST(Vec, RoundTripIsExact) {
    CounterRng rng(2, 1);
    const Matrix m = test::random_matrix(rng, 3, 5);
    EXPECT_EQ(unvec(vec(m), 3, 5), m);
}

TEST(Vec, LengthMismatch) {
    const Vector v{1, 2, 3};
    EXPECT_THROW(unvec(v, 2, 2), SizeError);
}

TEST(Vec, AdapterLength) { EXPECT_EQ(vec(Matrix(4, 20)).size(), 80U); }

TEST(KronQuadform, IdentityIsFrobenius) {
    CounterRng rng(3, 1);
    const Matrix x = test::random_matrix(rng, 2, 3);
    const Matrix y = test::random_matrix(rng, 2, 3);
    EXPECT_NEAR(kron_quadform(Matrix::identity(3), Matrix::identity(2), x, y), frobenius_dot(x, y), 1e-14);
}

TEST(KronQuadform, ScalarArithmetic) {
    EXPECT_DOUBLE_EQ(kron_quadform(Matrix{{2.0}}, Matrix{{3.0}}, Matrix{{1.0}}, Matrix{{1.0}}), 6.0);
}

TEST(KronQuadform, MatchesExplicitKron) {
    CounterRng rng(4, 1);
    for (int t = 0; t < 50; ++t) {
        const std::size_t m = 1 + rng.below(8);
        const std::size_t n = 1 + rng.below(8);
        const Matrix l = test::random_matrix(rng, n, n);
        const Matrix r = test::random_matrix(rng, m, m);
        const Matrix x = test::random_matrix(rng, m, n);
        const Matrix y = test::random_matrix(rng, m, n);
        const Vector kv = matvec(kron(l, r), vec(y));
        const Vector vx = vec(x);
        double dense = 0.0;
        for (std::size_t i = 0; i < vx.size(); ++i) {
            dense += vx[i] * kv[i];
        }
        EXPECT_NEAR(kron_quadform(l, r, x, y), dense, 1e-12 * std::max(1.0, std::abs(dense)));
    }
}

TEST(KronQuadform, RectangularFactors) {
    // Cross blocks: L is D_in × r, R is r × D_out, X is r × D_in, Y is D_out × r.
    CounterRng rng(5, 1);
    const Matrix l = test::random_matrix(rng, 4, 2);
    const Matrix r = test::random_matrix(rng, 2, 3);
    const Matrix x = test::random_matrix(rng, 2, 4);
    const Matrix y = test::random_matrix(rng, 3, 2);
    const Vector kv = matvec(kron(l, r), vec(y));
    const Vector vx = vec(x);
    double dense = 0.0;
    for (std::size_t i = 0; i < vx.size(); ++i) {
        dense += vx[i] * kv[i];
    }
    EXPECT_NEAR(kron_quadform(l, r, x, y), dense, 1e-12);
    EXPECT_EQ(vec(kron_apply(l, r, y)).size(), 8U);
}

TEST(KronQuadform, ShapeMismatch) {
    EXPECT_THROW(kron_quadform(Matrix::identity(3), Matrix::identity(2), Matrix(2, 2), Matrix(2, 3)), SizeError);
}

TEST(MinEig, KnownValues) {
    EXPECT_NEAR(min_eig_lower_bound(Matrix::identity(4)), 1.0, 1e-12);
    EXPECT_NEAR(min_eig_lower_bound(Matrix{{4, 0}, {0, 9}}), 4.0, 1e-12);
}

TEST(MinEig, GramIsPsd) {
    CounterRng rng(6, 1);
    for (int t = 0; t < 20; ++t) {
        EXPECT_GE(min_eig_lower_bound(test::random_gram(rng, 6, 3)), -1e-10);
    }
}

TEST(MinEig, LargeUsesCholeskyBound) {
    CounterRng rng(7, 1);
    const Matrix g = test::random_gram(rng, 80, 90);
    const double bound = min_eig_lower_bound(g);
    EXPECT_GE(bound, -1e-8);
    // A shifted copy must have its bound shifted below the shift.
    Matrix shifted = g - 3.0 * Matrix::identity(80);
    EXPECT_LE(min_eig_lower_bound(shifted), bound - 3.0 + 1e-6);
}

TEST(MinEig, AsymmetricIsContractViolation) {
    EXPECT_THROW(min_eig_lower_bound(Matrix{{1, 2}, {0, 1}}), ContractError);
}

TEST(Inverse, RoundTripAndSingular) {
    const Matrix m{{4, 1}, {2, 3}};
    EXPECT_LE(max_abs_diff(matmul(m, inverse(m)), Matrix::identity(2)), 1e-14);
    EXPECT_THROW(inverse(Matrix{{1, 2}, {2, 4}}), SingularityError);
}

TEST(Products, TransposedVariantsAgree) {
    CounterRng rng(8, 1);
    const Matrix a = test::random_matrix(rng, 3, 4);
    const Matrix b = test::random_matrix(rng, 5, 4);
    const Matrix c = test::random_matrix(rng, 3, 2);
    EXPECT_LE(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))), 1e-14);
    EXPECT_LE(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)), 1e-14);
    EXPECT_THROW(matmul(a, a), SizeError);
}

TEST(Products, RankOfProduct) {
    CounterRng rng(9, 1);
    const Matrix p = matmul(test::random_matrix(rng, 6, 2), test::random_matrix(rng, 2, 5));
    EXPECT_EQ(numerical_rank(p), 2U);
}

}  // namespace
}  // namespace lalora
