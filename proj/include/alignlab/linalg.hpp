#pragma once

// Dense symmetric linear algebra used throughout alignlab: a symmetric matrix
// value type, cyclic Jacobi eigendecomposition with eigenspace grouping,
// covariance estimation, Gaussian sampling through the spectral factor, Haar
// orthogonal matrices, and traces of restrictions to subspaces.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/seed.hpp"

namespace alignlab::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Symmetric d x d matrix. Symmetry is exact: construction averages the input
/// with its transpose, which is bitwise symmetric under IEEE addition.
class SymMatrix {
 public:
  SymMatrix() = default;

  explicit SymMatrix(const Matrix& m) {
    if (m.rows() != m.cols() || m.rows() < 1) {
      throw ArgumentError("SymMatrix requires a non-empty square matrix");
    }
    m_ = (m + m.transpose()) * 0.5;
  }

  static SymMatrix identity(Eigen::Index d) { return SymMatrix(Matrix::Identity(d, d)); }
  static SymMatrix zero(Eigen::Index d) { return SymMatrix(Matrix::Zero(d, d)); }
  static SymMatrix diagonal(const Vector& diag) { return SymMatrix(Matrix(diag.asDiagonal())); }

  Eigen::Index dim() const { return m_.rows(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }
  const Matrix& matrix() const { return m_; }
  double trace() const { return m_.trace(); }

  SymMatrix scaled(double s) const { return SymMatrix(m_ * s); }
  SymMatrix conjugated(const Matrix& u) const { return SymMatrix(u * m_ * u.transpose()); }

 private:
  Matrix m_;
};

inline SymMatrix operator+(const SymMatrix& a, const SymMatrix& b) { return SymMatrix(a.matrix() + b.matrix()); }

/// Spectral decomposition with eigenvalues sorted descending, eigenvectors as
/// columns, and indices partitioned into near-degenerate eigenspaces.
struct EigenDecomposition {
  Vector eigenvalues;
  Matrix eigenvectors;
  std::vector<std::vector<Eigen::Index>> groups;
  double degeneracy_tol = 0.0;

  Eigen::Index dim() const { return eigenvalues.size(); }

  /// Orthonormal basis (columns) of the eigenspace with the given group index.
  Matrix group_basis(std::size_t g) const {
    const auto& idx = groups.at(g);
    Matrix basis(eigenvectors.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) basis.col(static_cast<Eigen::Index>(k)) = eigenvectors.col(idx[k]);
    return basis;
  }

  SymMatrix reconstruct() const {
    return SymMatrix(eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose());
  }
};

/// Default relative gap below which consecutive eigenvalues share an eigenspace.
inline constexpr double kDefaultDegeneracyTol = 1e-6;

namespace detail {

inline void normalize_sign(Eigen::Ref<Vector> v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (std::abs(v(i)) > std::abs(v(best))) best = i;
  }
  if (v(best) < 0) v = -v;
}

inline std::vector<std::vector<Eigen::Index>> group_eigenvalues(const Vector& values, double tol) {
  std::vector<std::vector<Eigen::Index>> groups;
  if (values.size() == 0) return groups;
  const double scale = values.cwiseAbs().maxCoeff();
  const double gap = tol * scale;
  groups.push_back({0});
  for (Eigen::Index i = 1; i < values.size(); ++i) {
    if (values(i - 1) - values(i) <= gap) {
      groups.back().push_back(i);
    } else {
      groups.push_back({i});
    }
  }
  return groups;
}

}  // namespace detail

/// Cyclic Jacobi eigendecomposition. Eigenvectors are sign-normalized so that
/// their largest-magnitude entry is positive.
inline EigenDecomposition sym_eig(const SymMatrix& m, double degeneracy_tol = kDefaultDegeneracyTol,
                                  int max_sweeps = 100) {
  if (degeneracy_tol < 0) throw ArgumentError("degeneracy_tol must be nonnegative");
  const Eigen::Index d = m.dim();
  Matrix a = m.matrix();
  Matrix v = Matrix::Identity(d, d);

  const double total = a.squaredNorm();
  // Summed directly: subtracting the diagonal from the full norm cancels badly.
  auto off_diagonal = [&] {
    double s = 0.0;
    for (Eigen::Index q = 1; q < d; ++q)
      for (Eigen::Index p = 0; p < q; ++p) s += 2.0 * a(p, q) * a(p, q);
    return s;
  };
  const double eps = std::numeric_limits<double>::epsilon();
  const double stop = 64.0 * eps * 64.0 * eps * total;

  int sweep = 0;
  while (true) {
    const double off = off_diagonal();
    if (off <= stop || total == 0.0) break;
    if (sweep++ >= max_sweeps) {
      throw ConvergenceError("Jacobi eigendecomposition did not converge in " + std::to_string(max_sweeps) +
                             " sweeps");
    }
    for (Eigen::Index p = 0; p < d - 1; ++p) {
      for (Eigen::Index q = p + 1; q < d; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        // Skip rotations whose effect is below rounding.
        if (std::abs(apq) < eps * std::sqrt(std::abs(app * aqq)) && sweep > 4) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < d; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < d; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < d; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) > a(j, j); });

  EigenDecomposition out;
  out.eigenvalues.resize(d);
  out.eigenvectors.resize(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const auto src = order[static_cast<std::size_t>(k)];
    out.eigenvalues(k) = a(src, src);
    out.eigenvectors.col(k) = v.col(src);
    detail::normalize_sign(out.eigenvectors.col(k));
  }
  out.degeneracy_tol = degeneracy_tol;
  out.groups = detail::group_eigenvalues(out.eigenvalues, degeneracy_tol);
  return out;
}

/// Streaming first and second moments; feeds estimate_covariance and the
/// large patch statistics that do not fit a single samples matrix.
class CovarianceAccumulator {
 public:
  explicit CovarianceAccumulator(Eigen::Index d) : sum_(Vector::Zero(d)), outer_(Matrix::Zero(d, d)) {}

  template <typename Derived>
  void add_rows(const Eigen::MatrixBase<Derived>& rows) {
    if (rows.cols() != sum_.size()) throw ShapeError("CovarianceAccumulator: column count mismatch");
    const Matrix x = rows.template cast<double>();
    sum_ += x.colwise().sum().transpose();
    outer_.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());
    count_ += static_cast<std::size_t>(x.rows());
  }

  std::size_t count() const { return count_; }
  Eigen::Index dim() const { return sum_.size(); }

  Vector mean() const { return sum_ / static_cast<double>(count_); }

  /// Returns (mean, cov) with 1/n normalization.
  std::pair<Vector, SymMatrix> finish(bool center) const {
    if (count_ < (center ? 2u : 1u)) {
      throw ArgumentError("estimate_covariance needs at least " + std::to_string(center ? 2 : 1) + " samples");
    }
    const double n = static_cast<double>(count_);
    Matrix second = outer_.selfadjointView<Eigen::Lower>();
    second /= n;
    const Vector mu = mean();
    if (center) second -= mu * mu.transpose();
    return {mu, SymMatrix(second)};
  }

 private:
  Vector sum_;
  Matrix outer_;
  std::size_t count_ = 0;
};

/// Sample mean and 1/n covariance of the rows of `samples`.
template <typename Derived>
std::pair<Vector, SymMatrix> estimate_covariance(const Eigen::MatrixBase<Derived>& samples, bool center) {
  const std::size_t need = center ? 2 : 1;
  if (static_cast<std::size_t>(samples.rows()) < need) {
    throw ArgumentError("estimate_covariance needs at least " + std::to_string(need) + " samples");
  }
  // Two-pass form for accuracy on small inputs.
  const Matrix x = samples.template cast<double>();
  const Vector mu = x.colwise().mean().transpose();
  const double n = static_cast<double>(x.rows());
  Matrix cov;
  if (center) {
    const Matrix c = x.rowwise() - mu.transpose();
    cov = c.transpose() * c / n;
  } else {
    cov = x.transpose() * x / n;
  }
  return {mu, SymMatrix(cov)};
}

/// Spectral square-root factor E diag(sqrt(lambda)) of a PSD matrix.
inline Matrix psd_factor(const SymMatrix& cov) {
  const auto dec = sym_eig(cov, 0.0);
  const double scale = std::max(1.0, dec.eigenvalues.cwiseAbs().maxCoeff());
  Vector roots(dec.dim());
  for (Eigen::Index i = 0; i < dec.dim(); ++i) {
    const double lam = dec.eigenvalues(i);
    if (lam < -1e-10 * scale) {
      throw NotPsdError("covariance has negative eigenvalue " + std::to_string(lam));
    }
    roots(i) = lam > 0 ? std::sqrt(lam) : 0.0;
  }
  return dec.eigenvectors * roots.asDiagonal();
}

/// n draws from N(mean, cov) as rows, using the spectral factor.
inline Matrix sample_gaussian(const Vector& mean, const SymMatrix& cov, std::size_t n, std::uint64_t seed) {
  if (mean.size() != cov.dim()) throw ShapeError("sample_gaussian: mean/cov dimension mismatch");
  const Matrix factor = psd_factor(cov);
  const Eigen::Index d = cov.dim();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(static_cast<Eigen::Index>(n), d);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = normal(rng);
  }
  Matrix out = z * factor.transpose();
  out.rowwise() += mean.transpose();
  return out;
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
inline Matrix random_orthogonal(Eigen::Index d, std::uint64_t seed) {
  if (d < 1) throw ArgumentError("random_orthogonal requires d >= 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) g(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q;
}

inline void require_orthonormal(const Matrix& basis, double tol, const char* who) {
  const Matrix gram = basis.transpose() * basis;
  const double err = (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
  if (!(err < tol)) {
    throw ArgumentError(std::string(who) + ": basis is not orthonormal (max deviation " + std::to_string(err) + ")");
  }
}

/// tr(B restricted to span(basis)) = sum_k v_k^T B v_k for orthonormal columns v_k.
inline double restricted_trace(const SymMatrix& b, const Matrix& basis) {
  if (basis.rows() != b.dim()) throw ShapeError("restricted_trace: basis dimension mismatch");
  require_orthonormal(basis, 1e-8, "restricted_trace");
  double sum = 0.0;
  for (Eigen::Index k = 0; k < basis.cols(); ++k) sum += basis.col(k).dot(b.matrix() * basis.col(k));
  return sum;
}

// Matrix CSV interchange: first line "d", then d lines of d comma-separated values.

inline void write_matrix_csv(std::ostream& os, const Matrix& m) {
  os << m.rows() << '\n';
  char buf[64];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      if (j) os << ',';
      os << buf;
    }
    os << '\n';
  }
}

inline Matrix read_matrix_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IngestionError("matrix CSV: missing dimension line");
  long d = 0;
  try {
    d = std::stol(line);
  } catch (const std::exception&) {
    throw IngestionError("matrix CSV: bad dimension line '" + line + "'");
  }
  if (d < 1) throw IngestionError("matrix CSV: dimension must be positive");
  Matrix m(d, d);
  for (long i = 0; i < d; ++i) {
    if (!std::getline(is, line)) throw IngestionError("matrix CSV: expected " + std::to_string(d) + " rows");
    std::stringstream row(line);
    std::string cell;
    long j = 0;
    while (std::getline(row, cell, ',')) {
      if (j >= d) throw IngestionError("matrix CSV: too many columns in row " + std::to_string(i + 1));
      try {
        m(i, j++) = std::stod(cell);
      } catch (const std::exception&) {
        throw IngestionError("matrix CSV: bad number '" + cell + "'");
      }
    }
    if (j != d) throw IngestionError("matrix CSV: row " + std::to_string(i + 1) + " has " + std::to_string(j) + " columns");
  }
  return m;
}

inline Matrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open matrix file " + path);
  return read_matrix_csv(in);
}

}  // namespace alignlab::linalg
