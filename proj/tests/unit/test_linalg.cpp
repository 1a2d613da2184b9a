#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <sstream>

#include "alignlab/linalg.hpp"
#include "test_util.hpp"

using namespace alignlab;
using linalg::Matrix;
using linalg::SymMatrix;
using linalg::Vector;

TEST(SymMatrix, StorageIsExactlySymmetric) {
  const SymMatrix s(fixtures::random_matrix(7, 7, 3));
  for (Eigen::Index i = 0; i < 7; ++i)
    for (Eigen::Index j = 0; j < 7; ++j) EXPECT_EQ(s(i, j), s(j, i));
}

TEST(SymMatrix, RejectsNonSquare) { EXPECT_THROW(SymMatrix(Matrix::Zero(2, 3)), ArgumentError); }

TEST(SymEig, DiagonalCase) {
  const auto d = linalg::sym_eig(SymMatrix::diagonal(Vector::LinSpaced(2, 2, 1)), 0.0);
  EXPECT_DOUBLE_EQ(d.eigenvalues(0), 2.0);
  EXPECT_DOUBLE_EQ(d.eigenvalues(1), 1.0);
  EXPECT_NEAR(std::abs(d.eigenvectors(0, 0)), 1.0, 1e-15);
  EXPECT_NEAR(std::abs(d.eigenvectors(1, 1)), 1.0, 1e-15);
}

TEST(SymEig, SwapMatrix) {
  Matrix m(2, 2);
  m << 0, 1, 1, 0;
  const auto d = linalg::sym_eig(SymMatrix(m));
  EXPECT_NEAR(d.eigenvalues(0), 1.0, 1e-14);
  EXPECT_NEAR(d.eigenvalues(1), -1.0, 1e-14);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(std::abs(d.eigenvectors(0, 0)), r, 1e-14);
  EXPECT_NEAR(d.eigenvectors(0, 0) * d.eigenvectors(1, 0), 0.5, 1e-14);
  EXPECT_NEAR(d.eigenvectors(0, 1) * d.eigenvectors(1, 1), -0.5, 1e-14);
}

TEST(SymEig, ResidualsOnRandomMatrices) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SymMatrix m(fixtures::random_matrix(6, 6, seed));
    const auto d = linalg::sym_eig(m);
    for (Eigen::Index i = 0; i < 6; ++i) {
      const Vector v = d.eigenvectors.col(i);
      EXPECT_LT((m.matrix() * v - d.eigenvalues(i) * v).norm(), 1e-9);
    }
    EXPECT_LT((d.eigenvectors.transpose() * d.eigenvectors - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-12);
    for (Eigen::Index i = 1; i < 6; ++i) EXPECT_GE(d.eigenvalues(i - 1), d.eigenvalues(i));
  }
}

// Independent route: Eigen's tridiagonal QR solver.
TEST(SymEig, AgreesWithEigenSolver) {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const auto d = static_cast<Eigen::Index>(2 + seed % 25);
    const SymMatrix m(fixtures::random_matrix(d, d, seed));
    const auto ours = linalg::sym_eig(m);
    Eigen::SelfAdjointEigenSolver<Matrix> ref(m.matrix());
    for (Eigen::Index i = 0; i < d; ++i) EXPECT_NEAR(ours.eigenvalues(i), ref.eigenvalues()(d - 1 - i), 1e-10);
    EXPECT_LT((ours.reconstruct().matrix() - m.matrix()).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(SymEig, GroupsRepeatedEigenvalues) {
  Vector lam(5);
  lam << 3, 3, 2, 1, 1;
  const auto q = linalg::random_orthogonal(5, 9);
  const auto d = linalg::sym_eig(SymMatrix(q * lam.asDiagonal() * q.transpose()));
  ASSERT_EQ(d.groups.size(), 3u);
  EXPECT_EQ(d.groups[0].size(), 2u);
  EXPECT_EQ(d.groups[1].size(), 1u);
  EXPECT_EQ(d.groups[2].size(), 2u);
}

TEST(SymEig, ZeroMatrixAndOneByOne) {
  const auto z = linalg::sym_eig(SymMatrix::zero(4));
  EXPECT_EQ(z.eigenvalues.cwiseAbs().maxCoeff(), 0.0);
  ASSERT_EQ(z.groups.size(), 1u);
  Matrix one(1, 1);
  one << -2.5;
  EXPECT_EQ(linalg::sym_eig(SymMatrix(one)).eigenvalues(0), -2.5);
}

TEST(EstimateCovariance, TwoPointsCentered) {
  Matrix s(2, 2);
  s << 1, 0, -1, 0;
  const auto [mean, cov] = linalg::estimate_covariance(s, true);
  EXPECT_EQ(mean.norm(), 0.0);
  EXPECT_DOUBLE_EQ(cov(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(cov(1, 1), 0.0);
  EXPECT_DOUBLE_EQ(cov(0, 1), 0.0);
}

TEST(EstimateCovariance, SingleSampleUncentered) {
  Matrix s(1, 2);
  s << 3, 4;
  const auto cov = linalg::estimate_covariance(s, false).second;
  EXPECT_DOUBLE_EQ(cov(0, 0), 9.0);
  EXPECT_DOUBLE_EQ(cov(0, 1), 12.0);
  EXPECT_DOUBLE_EQ(cov(1, 1), 16.0);
}

TEST(EstimateCovariance, RejectsTooFewSamples) {
  EXPECT_THROW(linalg::estimate_covariance(Matrix::Zero(1, 3), true), ArgumentError);
}

TEST(EstimateCovariance, LawOfLargeNumbers) {
  Vector var(2);
  var << 4, 1;
  const auto x = linalg::sample_gaussian(Vector::Zero(2), SymMatrix::diagonal(var), 100000, 5);
  const auto cov = linalg::estimate_covariance(x, true).second;
  EXPECT_NEAR(cov(0, 0), 4.0, 0.05);
  EXPECT_NEAR(cov(1, 1), 1.0, 0.05);
  EXPECT_NEAR(cov(0, 1), 0.0, 0.05);
}

TEST(EstimateCovariance, AccumulatorMatchesBatch) {
  const auto x = fixtures::random_matrix(301, 6, 8);
  linalg::CovarianceAccumulator acc(6);
  acc.add_rows(x.topRows(100));
  acc.add_rows(x.bottomRows(201));
  const auto [m1, c1] = acc.finish(true);
  const auto [m2, c2] = linalg::estimate_covariance(x, true);
  EXPECT_LT((m1 - m2).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((c1.matrix() - c2.matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SampleGaussian, ZeroCovarianceGivesMean) {
  Vector mean(3);
  mean << 1, -2, 0.5;
  const auto x = linalg::sample_gaussian(mean, SymMatrix::zero(3), 50, 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_EQ((x.row(i).transpose() - mean).norm(), 0.0);
}

TEST(SampleGaussian, IdentityCovariance) {
  const auto x = linalg::sample_gaussian(Vector::Zero(3), SymMatrix::identity(3), 100000, 2);
  const auto cov = linalg::estimate_covariance(x, true).second;
  EXPECT_LT((cov.matrix() - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 0.05);
}

TEST(SampleGaussian, NullDirectionStaysZero) {
  Vector var(2);
  var << 4, 0;
  const auto x = linalg::sample_gaussian(Vector::Zero(2), SymMatrix::diagonal(var), 10000, 3);
  EXPECT_EQ(x.col(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SampleGaussian, RejectsIndefiniteCovariance) {
  Vector var(2);
  var << 1, -1;
  EXPECT_THROW(linalg::sample_gaussian(Vector::Zero(2), SymMatrix::diagonal(var), 5, 3), NotPsdError);
}

TEST(RandomOrthogonal, OneDimensional) { EXPECT_EQ(std::abs(linalg::random_orthogonal(1, 4)(0, 0)), 1.0); }

TEST(RandomOrthogonal, OrthogonalityResidual) {
  const auto q = linalg::random_orthogonal(27, 11);
  EXPECT_LT((q.transpose() * q - Matrix::Identity(27, 27)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RandomOrthogonal, SeedsGiveDistinctMatrices) {
  EXPECT_GT((linalg::random_orthogonal(5, 1) - linalg::random_orthogonal(5, 2)).norm(), 0.1);
  EXPECT_EQ(linalg::random_orthogonal(5, 1), linalg::random_orthogonal(5, 1));
}

TEST(RestrictedTrace, CoordinateSubspace) {
  const auto b = SymMatrix::diagonal(Vector::LinSpaced(3, 1, 3));
  Matrix v = Matrix::Zero(3, 2);
  v(0, 0) = 1;
  v(2, 1) = 1;
  EXPECT_DOUBLE_EQ(linalg::restricted_trace(b, v), 4.0);
  EXPECT_DOUBLE_EQ(linalg::restricted_trace(b, Matrix::Identity(3, 3)), b.trace());
}

TEST(RestrictedTrace, MatchesProjectionOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto b = fixtures::random_pd(5, seed);
    const Matrix v = linalg::random_orthogonal(5, seed + 50).leftCols(2);
    const Matrix p = v * v.transpose();
    EXPECT_NEAR(linalg::restricted_trace(b, v), (p * b.matrix() * p).trace(), 1e-10);
  }
}

TEST(RestrictedTrace, RejectsNonOrthonormalBasis) {
  EXPECT_THROW(linalg::restricted_trace(SymMatrix::identity(2), Matrix::Ones(2, 1)), ArgumentError);
}

TEST(MatrixCsv, RoundTripIsExact) {
  const auto m = fixtures::random_matrix(4, 4, 21);
  std::stringstream ss;
  linalg::write_matrix_csv(ss, m);
  EXPECT_EQ(linalg::read_matrix_csv(ss), m);
}

TEST(MatrixCsv, RejectsShortInput) {
  std::stringstream ss("3\n1,2,3\n");
  EXPECT_THROW(linalg::read_matrix_csv(ss), IngestionError);
}
