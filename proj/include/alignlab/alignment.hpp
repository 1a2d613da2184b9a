#pragma once

#include <Eigen/Dense>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/io/csv.hpp"
#include "alignlab/linalg.hpp"

namespace alignlab::alignment {

using linalg::EigenDecomposition;
using linalg::Matrix;
using linalg::SymMatrix;
using linalg::Vector;

struct MisalignmentScore {
  double value = 0.0;
  std::string reference;  // "eigenspaces" or "basis"
  double degeneracy_tol = 0.0;
};

/// B and B^-1 after the positive-definiteness check and, for condition
/// numbers above 1e12, regularization B + eps I with eps = 1e-10 tr(B)/d.
struct PositiveDefinite {
  SymMatrix b;
  SymMatrix inv;
  bool regularized = false;
};

inline PositiveDefinite prepare_positive_definite(const SymMatrix& b, const char* who) {
  const auto d = b.dim();
  auto dec = linalg::sym_eig(b, 0.0);
  const double lmax = dec.eigenvalues(0);
  const double lmin = dec.eigenvalues(d - 1);
  if (!(lmax > 0) || !(lmin > 1e-15 * lmax)) {
    throw NotPositiveDefiniteError(std::string(who) + ": matrix is not positive definite (eigenvalues in [" +
                                   std::to_string(lmin) + ", " + std::to_string(lmax) + "])");
  }
  PositiveDefinite out{b, b, false};
  Vector lam = dec.eigenvalues;
  if (lmax / lmin > 1e12) {
    const double eps = 1e-10 * b.trace() / static_cast<double>(d);
    lam.array() += eps;
    out.b = SymMatrix(b.matrix() + eps * Matrix::Identity(d, d));
    out.regularized = true;
  }
  const Matrix& v = dec.eigenvectors;
  out.inv = SymMatrix(v * lam.cwiseInverse().asDiagonal() * v.transpose());
  return out;
}

/// Closed form: sum over A's eigenspaces V_i of sqrt(tr(B|V_i) tr(B^-1|V_i)), minus d.
inline MisalignmentScore misalignment(const EigenDecomposition& a, const SymMatrix& b) {
  if (a.dim() != b.dim()) throw ShapeError("misalignment: dimension mismatch");
  const auto pd = prepare_positive_definite(b, "misalignment");
  double sum = 0.0;
  for (std::size_t g = 0; g < a.groups.size(); ++g) {
    const Matrix basis = a.group_basis(g);
    sum += std::sqrt(linalg::restricted_trace(pd.b, basis) * linalg::restricted_trace(pd.inv, basis));
  }
  return {std::max(0.0, sum - static_cast<double>(b.dim())), "eigenspaces", a.degeneracy_tol};
}

/// Per-vector form against an arbitrary orthonormal basis (columns).
inline double misalignment_basis(const Matrix& basis, const SymMatrix& b) {
  if (basis.rows() != b.dim() || basis.cols() != b.dim()) throw ShapeError("misalignment_basis: need d x d basis");
  linalg::require_orthonormal(basis, 1e-8, "misalignment_basis");
  const auto pd = prepare_positive_definite(b, "misalignment_basis");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < basis.cols(); ++i) {
    const auto v = basis.col(i);
    sum += std::sqrt(v.dot(pd.b.matrix() * v) * v.dot(pd.inv.matrix() * v));
  }
  return std::max(0.0, sum - static_cast<double>(b.dim()));
}

/// Brute force over Sigma = sum_i lambda_i P_i (P_i the projector onto A's
/// eigenspace V_i): each lambda_i is searched on a geometric grid of
/// `resolution` points spanning [lambda_min(B)/2, 2 lambda_max(B)], then
/// `refine_levels` times on a grid of the same size across the bracket of
/// neighbouring points. The result is the objective
/// 0.5 tr(Sigma^-1 B + B^-1 Sigma) - d evaluated with explicit inverses.
/// Test oracle only.
inline double misalignment_oracle(const EigenDecomposition& a, const SymMatrix& b, std::size_t resolution,
                                  std::size_t refine_levels = 3) {
  const auto d = b.dim();
  if (a.dim() != d) throw ShapeError("misalignment_oracle: dimension mismatch");
  if (resolution < 2) throw ArgumentError("misalignment_oracle: resolution must be >= 2");
  const Eigen::SelfAdjointEigenSolver<Matrix> es(b.matrix(), Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0)) throw NotPositiveDefiniteError("misalignment_oracle: B is not positive definite");
  const Matrix b_inv = b.matrix().inverse();

  std::vector<Matrix> proj;
  for (std::size_t g = 0; g < a.groups.size(); ++g) {
    const Matrix u = a.group_basis(g);
    proj.push_back(u * u.transpose());
  }
  // The objective is a sum of independent terms 0.5 (tr(P_i B)/l + l tr(P_i B^-1)).
  std::vector<double> lambda(proj.size());
  for (std::size_t g = 0; g < proj.size(); ++g) {
    const double tb = (proj[g] * b.matrix()).trace();
    const double tbi = (proj[g] * b_inv).trace();
    auto term = [&](double l) { return 0.5 * (tb / l + l * tbi); };
    double log_lo = std::log(lo / 2), log_hi = std::log(hi * 2);
    double best_log = log_lo, best = term(std::exp(log_lo));
    for (std::size_t level = 0; level <= refine_levels; ++level) {
      const double step = (log_hi - log_lo) / static_cast<double>(resolution - 1);
      for (std::size_t k = 0; k < resolution; ++k) {
        const double ll = log_lo + step * static_cast<double>(k);
        const double v = term(std::exp(ll));
        if (v < best) {
          best = v;
          best_log = ll;
        }
      }
      log_lo = best_log - step;
      log_hi = best_log + step;
    }
    lambda[g] = std::exp(best_log);
  }
  Matrix sigma = Matrix::Zero(d, d);
  for (std::size_t g = 0; g < proj.size(); ++g) sigma += lambda[g] * proj[g];
  const Matrix sigma_inv = sigma.inverse();
  return 0.5 * ((sigma_inv * b.matrix()).trace() + (b_inv * sigma).trace()) - static_cast<double>(d);
}

/// D(S1, S2) = tr(S1^-1 S2 + S2^-1 S1)/2 - d.
inline double sym_kl(const SymMatrix& s1, const SymMatrix& s2) {
  if (s1.dim() != s2.dim()) throw ShapeError("sym_kl: dimension mismatch");
  const Eigen::LLT<Matrix> l1(s1.matrix()), l2(s2.matrix());
  if (l1.info() != Eigen::Success || l2.info() != Eigen::Success) {
    throw NotPositiveDefiniteError("sym_kl: inputs must be positive definite");
  }
  const double t = l1.solve(s2.matrix()).trace() + l2.solve(s1.matrix()).trace();
  return std::max(0.0, 0.5 * t - static_cast<double>(s1.dim()));
}

/// Fisher information of the rotation angle of a 2-d centered Gaussian with
/// eigenvalues l1, l2.
inline double fisher_rotation(double l1, double l2) {
  if (!(l1 > 0) || !(l2 > 0)) throw ArgumentError("fisher_rotation: eigenvalues must be positive");
  return (l1 - l2) * (l1 - l2) / (l1 * l2);
}

// ---------------------------------------------------------------------------
// Transfer function

struct TransferPoint {
  double sigma = 0.0;
  double tau = 0.0;
  std::size_t index = 0;  // rank of the data eigenvector (0 = largest)
};

/// Points sorted by ascending sigma.
struct TransferCurve {
  std::vector<TransferPoint> points;
  std::string run_id;
  long epoch = -1;
};

/// tau_i = sqrt(v_i^T Sigma_w v_i) against sigma_i = sqrt(eigenvalue_i of Sigma_x).
inline TransferCurve transfer_function(const EigenDecomposition& x, const SymMatrix& w_cov) {
  if (x.dim() != w_cov.dim()) throw ShapeError("transfer_function: dimension mismatch");
  TransferCurve curve;
  for (Eigen::Index i = 0; i < x.dim(); ++i) {
    const auto v = x.eigenvectors.col(i);
    TransferPoint p;
    p.sigma = std::sqrt(std::max(0.0, x.eigenvalues(i)));
    p.tau = std::sqrt(std::max(0.0, v.dot(w_cov.matrix() * v)));
    p.index = static_cast<std::size_t>(i);
    curve.points.push_back(p);
  }
  std::stable_sort(curve.points.begin(), curve.points.end(),
                   [](const auto& p, const auto& q) { return p.sigma < q.sigma; });
  return curve;
}

/// Pools filters (rows) of every run; returns mean and centered covariance.
inline std::pair<Vector, SymMatrix> weight_covariance(const std::vector<Matrix>& filter_sets) {
  Eigen::Index rows = 0, d = -1;
  for (const auto& f : filter_sets) {
    if (d >= 0 && f.cols() != d) throw ShapeError("weight_covariance: filter dimension differs between runs");
    d = f.cols();
    rows += f.rows();
  }
  if (rows < 2) throw ArgumentError("weight_covariance: need at least 2 filters");
  Matrix pooled(rows, d);
  Eigen::Index r = 0;
  for (const auto& f : filter_sets) {
    pooled.middleRows(r, f.rows()) = f;
    r += f.rows();
  }
  return linalg::estimate_covariance(pooled, true);
}

// ---------------------------------------------------------------------------
// Eigenvector matching

struct EigenMatch {
  std::size_t rank = 0;
  double eigenvalue = 0.0;
  std::vector<std::pair<std::size_t, double>> matches;  // (data eigenvector index, inner product)
  Vector combination;                                   // unit v_x bar; empty when nothing matched
  double residual = 1.0;
};

struct EigenMatchReport {
  double threshold = 0.0;
  std::vector<EigenMatch> entries;
};

/// For each of the top `top_m` weight eigenvectors, the data eigenvectors
/// with |inner product| above the threshold and the normalized projection
/// onto their span.
inline EigenMatchReport match_eigenvectors(const EigenDecomposition& w, const EigenDecomposition& x, double threshold,
                                           std::optional<std::size_t> top_m = std::nullopt) {
  if (w.dim() != x.dim()) throw ShapeError("match_eigenvectors: dimension mismatch");
  EigenMatchReport report;
  report.threshold = threshold;
  const auto m = std::min<std::size_t>(top_m.value_or(static_cast<std::size_t>(w.dim())), w.dim());
  for (std::size_t r = 0; r < m; ++r) {
    const auto vw = w.eigenvectors.col(static_cast<Eigen::Index>(r));
    EigenMatch e;
    e.rank = r;
    e.eigenvalue = w.eigenvalues(static_cast<Eigen::Index>(r));
    Vector combo = Vector::Zero(x.dim());
    for (Eigen::Index j = 0; j < x.dim(); ++j) {
      const double ip = vw.dot(x.eigenvectors.col(j));
      if (std::abs(ip) > threshold) {
        e.matches.emplace_back(static_cast<std::size_t>(j), ip);
        combo += ip * x.eigenvectors.col(j);
      }
    }
    if (!e.matches.empty()) {
      const double norm = combo.norm();
      e.combination = combo / norm;
      for (auto& [j, c] : e.matches) c /= norm;
      e.residual = (vw - vw.dot(e.combination) * e.combination).norm();
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reproducibility of eigenvectors across two samples

struct ReproducibilityRow {
  std::size_t index = 0;
  double eigenvalue_a = 0.0;
  double abs_inner = 0.0;
};

inline std::vector<ReproducibilityRow> reproducibility_from_covariances(const SymMatrix& a, const SymMatrix& b,
                                                                        std::optional<std::size_t> top = std::nullopt) {
  if (a.dim() != b.dim()) throw ShapeError("reproducibility_report: dimension mismatch");
  const auto ea = linalg::sym_eig(a), eb = linalg::sym_eig(b);
  const auto m = std::min<std::size_t>(top.value_or(static_cast<std::size_t>(a.dim())), a.dim());
  std::vector<ReproducibilityRow> rows;
  for (std::size_t i = 0; i < m; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    rows.push_back({i, ea.eigenvalues(k), std::abs(ea.eigenvectors.col(k).dot(eb.eigenvectors.col(k)))});
  }
  return rows;
}

/// Rank-matched |<e_i, e'_i>| of the centered sample covariances of two samples.
template <typename A, typename B>
std::vector<ReproducibilityRow> reproducibility_report(const Eigen::MatrixBase<A>& samples_a,
                                                       const Eigen::MatrixBase<B>& samples_b,
                                                       std::optional<std::size_t> top = std::nullopt) {
  if (samples_a.cols() != samples_b.cols()) throw ShapeError("reproducibility_report: dimension mismatch");
  return reproducibility_from_covariances(linalg::estimate_covariance(samples_a, true).second,
                                          linalg::estimate_covariance(samples_b, true).second, top);
}

// ---------------------------------------------------------------------------
// Artifacts

struct MisalignmentRow {
  long epoch = 0;
  double data_basis = 0.0;
  double random_basis = 0.0;
  std::uint64_t seed = 0;
};

inline io::CsvTable misalignment_table(const std::vector<MisalignmentRow>& rows) {
  io::CsvTable t({"epoch", "misalignment_data_basis", "misalignment_random_basis", "seed"});
  for (const auto& r : rows)
    t.add_row({static_cast<long long>(r.epoch), r.data_basis, r.random_basis, static_cast<long long>(r.seed)});
  return t;
}

inline io::CsvTable transfer_curve_table(const std::vector<TransferCurve>& curves) {
  io::CsvTable t({"sigma", "tau", "epoch", "run_id"});
  for (const auto& c : curves)
    for (const auto& p : c.points) t.add_row({p.sigma, p.tau, static_cast<long long>(c.epoch), c.run_id});
  return t;
}

inline io::CsvTable eigen_match_table(const EigenMatchReport& report) {
  io::CsvTable t({"rank", "eigenvalue", "data_index", "coefficient", "residual"});
  for (const auto& e : report.entries) {
    if (e.matches.empty()) {
      t.add_row({static_cast<long long>(e.rank), e.eigenvalue, static_cast<long long>(-1), 0.0, e.residual});
    }
    for (const auto& [j, c] : e.matches)
      t.add_row({static_cast<long long>(e.rank), e.eigenvalue, static_cast<long long>(j), c, e.residual});
  }
  return t;
}

inline io::CsvTable reproducibility_table(const std::vector<ReproducibilityRow>& rows, const std::string& source) {
  io::CsvTable t({"source", "rank", "eigenvalue", "abs_inner_product"});
  for (const auto& r : rows) t.add_row({source, static_cast<long long>(r.index + 1), r.eigenvalue_a, r.abs_inner});
  return t;
}

/// Writes vectors (columns of `vectors`) as a row of k x k tiles, each pixel
/// enlarged `zoom` times, with a 1-pixel gap. Each vector is reshaped
/// (row, col, channel); channels map linearly to [0, 255] with a symmetric
/// range about 0. One channel renders gray, three render RGB.
inline void write_eigenvector_png(const std::filesystem::path& path, const Matrix& vectors, std::size_t k,
                                  std::size_t channels, std::size_t zoom = 8) {
  if (channels != 1 && channels != 3) throw ArgumentError("eigenvector PNG needs 1 or 3 channels");
  if (static_cast<std::size_t>(vectors.rows()) != k * k * channels) throw ShapeError("eigenvector PNG: bad vector size");
  const std::size_t n = static_cast<std::size_t>(vectors.cols());
  const std::size_t tile = k * zoom;
  const std::size_t width = n * (tile + 1) + 1, height = tile + 2;
  std::vector<std::uint8_t> pixels(width * height * 3, 255);
  for (std::size_t t = 0; t < n; ++t) {
    const auto v = vectors.col(static_cast<Eigen::Index>(t));
    const double range = std::max(v.cwiseAbs().maxCoeff(), 1e-300);
    for (std::size_t y = 0; y < tile; ++y)
      for (std::size_t x = 0; x < tile; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t ch = channels == 1 ? 0 : c;
          const double val = v(static_cast<Eigen::Index>(((y / zoom) * k + x / zoom) * channels + ch));
          const double byte = std::clamp(127.5 + 127.5 * val / range, 0.0, 255.0);
          pixels[((y + 1) * width + 1 + t * (tile + 1) + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(byte));
        }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  std::FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) throw Error("cannot write " + tmp.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) png_write_row(png, pixels.data() + y * width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  std::filesystem::rename(tmp, path);
}

}  // namespace alignlab::alignment
