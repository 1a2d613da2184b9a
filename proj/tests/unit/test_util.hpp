#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

#include "alignlab/linalg.hpp"
#include "alignlab/seed.hpp"

namespace alignlab::fixtures {

/// Random symmetric positive definite matrix with eigenvalues in [lo, hi].
inline linalg::SymMatrix random_pd(Eigen::Index d, std::uint64_t seed, double lo = 0.2, double hi = 5.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  linalg::Vector lam(d);
  for (Eigen::Index i = 0; i < d; ++i) lam(i) = u(rng);
  const auto q = linalg::random_orthogonal(d, seed ^ 0x9e3779b97f4a7c15ULL);
  return linalg::SymMatrix(q * lam.asDiagonal() * q.transpose());
}

inline linalg::Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  linalg::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

}  // namespace alignlab::fixtures
