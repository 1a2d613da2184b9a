#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "alignlab/alignment.hpp"
#include "alignlab/data.hpp"
#include "alignlab/errors.hpp"
#include "alignlab/io/container.hpp"
#include "alignlab/linalg.hpp"
#include "alignlab/nn/forward.hpp"
#include "alignlab/nn/network.hpp"
#include "alignlab/seed.hpp"

namespace alignlab::covinit {

using linalg::EigenDecomposition;
using linalg::Matrix;
using linalg::SymMatrix;
using linalg::Vector;

/// Weights tau_1, tau_2, ... applied to the selected eigen-directions in
/// order. constant(c) covers any number of directions; table and learned
/// fix the number m of retained directions.
struct TauCurve {
  enum class Kind { constant, table, learned };
  Kind kind = Kind::constant;
  double value = 1.0;
  std::vector<double> table;
  alignment::TransferCurve learned;  // looked up by data eigenvector rank

  static TauCurve constant(double c) {
    if (!(c >= 0)) throw ArgumentError("tau constant must be >= 0");
    TauCurve t;
    t.value = c;
    return t;
  }
  static TauCurve from_table(std::vector<double> taus) {
    for (double v : taus)
      if (!(v >= 0)) throw ArgumentError("tau values must be >= 0");
    TauCurve t;
    t.kind = Kind::table;
    t.table = std::move(taus);
    return t;
  }
  static TauCurve from_learned(alignment::TransferCurve curve) {
    TauCurve t;
    t.kind = Kind::learned;
    t.learned = std::move(curve);
    return t;
  }

  /// Number of directions the curve fixes, if any.
  std::optional<std::size_t> length() const {
    if (kind == Kind::table) return table.size();
    if (kind == Kind::learned) return learned.points.size();
    return std::nullopt;
  }

  /// tau for the j-th selected direction, which is data eigenvector `rank`.
  double at(std::size_t j, std::size_t rank) const {
    switch (kind) {
      case Kind::constant:
        return value;
      case Kind::table:
        if (j >= table.size()) throw ArgumentError("tau table has only " + std::to_string(table.size()) + " entries");
        return table[j];
      case Kind::learned:
        for (const auto& p : learned.points)
          if (p.index == rank) return p.tau;
        throw ArgumentError("learned tau curve has no point for rank " + std::to_string(rank));
    }
    return 0.0;
  }
};

enum class Construction { eigenvector_direct, covariance_sampled, learned_covariance };

inline std::string construction_name(Construction c) {
  switch (c) {
    case Construction::eigenvector_direct:
      return "eigenvector_direct";
    case Construction::covariance_sampled:
      return "covariance_sampled";
    case Construction::learned_covariance:
      return "learned_covariance";
  }
  return "?";
}

/// Filters as rows in the shared (row, col, channel) layout.
struct FilterBank {
  Matrix filters;
  Construction construction = Construction::eigenvector_direct;
  std::uint64_t seed = 0;
  std::vector<std::size_t> directions;  // data eigenvector ranks used
  std::vector<double> taus;
  Vector source_eigenvalues;
  bool centered = true;

  std::size_t size() const { return static_cast<std::size_t>(filters.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(filters.cols()); }
};

namespace detail {

inline std::vector<std::size_t> select_directions(const EigenDecomposition& x, std::size_t count,
                                                  const std::optional<std::vector<std::size_t>>& indices) {
  std::vector<std::size_t> dirs;
  if (indices) {
    dirs = *indices;
  } else {
    dirs.resize(count);
    std::iota(dirs.begin(), dirs.end(), std::size_t{0});
  }
  for (auto r : dirs)
    if (r >= static_cast<std::size_t>(x.dim())) {
      throw ArgumentError("eigen-direction " + std::to_string(r) + " out of range (d = " + std::to_string(x.dim()) +
                          ")");
    }
  return dirs;
}

}  // namespace detail

/// Filter j = tau_j e_{r_j}, with r_j the top-n ranks or the explicit index list.
inline FilterBank build_filters_direct(const EigenDecomposition& x, const TauCurve& taus, std::size_t n_filters,
                                       const std::optional<std::vector<std::size_t>>& indices = std::nullopt) {
  if (n_filters > static_cast<std::size_t>(x.dim()) || (indices && n_filters > indices->size())) {
    throw ArgumentError("build_filters_direct: " + std::to_string(n_filters) + " filters requested but only " +
                        std::to_string(indices ? indices->size() : static_cast<std::size_t>(x.dim())) +
                        " directions available");
  }
  auto dirs = detail::select_directions(x, n_filters, indices);
  dirs.resize(n_filters);
  FilterBank bank;
  bank.construction = Construction::eigenvector_direct;
  bank.directions = dirs;
  bank.source_eigenvalues = x.eigenvalues;
  bank.filters.resize(static_cast<Eigen::Index>(n_filters), x.dim());
  for (std::size_t j = 0; j < n_filters; ++j) {
    const double tau = taus.at(j, dirs[j]);
    bank.taus.push_back(tau);
    bank.filters.row(static_cast<Eigen::Index>(j)) = tau * x.eigenvectors.col(static_cast<Eigen::Index>(dirs[j])).transpose();
  }
  return bank;
}

/// I.i.d. filters from N(0, sum_j tau_j^2 e_{r_j} e_{r_j}^T). The number of
/// directions is the index list size, else the curve length, else n_filters.
inline FilterBank build_filters_sampled(const EigenDecomposition& x, const TauCurve& taus, std::size_t n_filters,
                                        std::uint64_t seed,
                                        const std::optional<std::vector<std::size_t>>& indices = std::nullopt) {
  const std::size_t m = indices ? indices->size()
                                : std::min<std::size_t>(taus.length().value_or(n_filters), x.dim());
  const auto dirs = detail::select_directions(x, m, indices);
  FilterBank bank;
  bank.construction = Construction::covariance_sampled;
  bank.seed = seed;
  bank.directions = dirs;
  bank.source_eigenvalues = x.eigenvalues;
  Matrix factor(x.dim(), static_cast<Eigen::Index>(m));  // columns tau_j e_{r_j}
  for (std::size_t j = 0; j < m; ++j) {
    const double tau = taus.at(j, dirs[j]);
    bank.taus.push_back(tau);
    factor.col(static_cast<Eigen::Index>(j)) = tau * x.eigenvectors.col(static_cast<Eigen::Index>(dirs[j]));
  }
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(static_cast<Eigen::Index>(n_filters), static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = normal(rng);
  bank.filters = z * factor.transpose();
  return bank;
}

/// Filters from N(w_mean, w_cov), e.g. the pooled covariance of filters
/// trained on random labels.
inline FilterBank sample_from_learned_covariance(const Vector& w_mean, const SymMatrix& w_cov, std::size_t n_filters,
                                                 std::uint64_t seed) {
  FilterBank bank;
  bank.construction = Construction::learned_covariance;
  bank.seed = seed;
  bank.filters = linalg::sample_gaussian(w_mean, w_cov, n_filters, seed);
  return bank;
}

/// Replaces the weights of parameterized layer `index` by the bank and zeroes its bias.
template <typename T>
void install_filters(nn::Network<T>& net, std::size_t index, const FilterBank& bank) {
  auto& layer = net.layer(index);
  if (!layer.has_params()) throw ArgumentError("install_filters: layer has no parameters");
  if (static_cast<Eigen::Index>(bank.size()) != layer.weights.rows() ||
      static_cast<Eigen::Index>(bank.dim()) != layer.weights.cols()) {
    throw ShapeError("install_filters: bank is " + std::to_string(bank.size()) + "x" + std::to_string(bank.dim()) +
                     ", layer expects " + std::to_string(layer.weights.rows()) + "x" +
                     std::to_string(layer.weights.cols()));
  }
  layer.weights = bank.filters.cast<T>();
  layer.bias.setZero();
}

/// Centered covariance of the input patches seen by conv layer `index`,
/// computed on the actual (post-ReLU) layer inputs over `ds`. At most
/// max_patches windows contribute; images are subsampled with `seed`.
template <typename T>
std::pair<Vector, SymMatrix> layer_input_covariance(const nn::Network<T>& net, std::size_t index,
                                                    const data::Dataset& ds, std::size_t max_patches,
                                                    std::uint64_t seed) {
  const auto& layer = net.layer(index);
  if (layer.spec.kind != nn::LayerKind::conv) throw ArgumentError("layer_input_covariance: not a conv layer");
  if (ds.size() == 0) throw ArgumentError("covariance_initialize: empty dataset");
  const auto g = window_geometry(layer.in.height, layer.in.width, layer.spec.kernel, layer.spec.stride,
                                 layer.spec.padding);
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_patches > 0 && ds.size() * g.positions() > max_patches) {
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::max<std::size_t>(1, max_patches / g.positions()));
    std::sort(idx.begin(), idx.end());
  }
  linalg::CovarianceAccumulator acc(static_cast<Eigen::Index>(layer.fan_in()));
  RowMatrix<float> chunk;
  RowMatrix<T> cols;
  constexpr std::size_t kChunk = 256;
  for (std::size_t s = 0; s < idx.size(); s += kChunk) {
    const std::size_t len = std::min(kChunk, idx.size() - s);
    chunk.resize(static_cast<Eigen::Index>(len), ds.images.cols());
    for (std::size_t i = 0; i < len; ++i)
      chunk.row(static_cast<Eigen::Index>(i)) = ds.images.row(static_cast<Eigen::Index>(idx[s + i]));
    const auto pass = nn::forward(net, chunk, false, index);
    gather_patches<T>(pass.layer_input(index), layer.in, layer.spec.kernel, layer.spec.stride, layer.spec.padding,
                      cols);
    acc.add_rows(cols);
  }
  return acc.finish(true);
}

enum class Mode { direct, sampled };

struct CovinitOptions {
  Mode mode = Mode::direct;
  TauCurve taus = TauCurve::constant(1.0);
  std::uint64_t seed = 0;
  std::size_t max_patches = 1000000;
  std::optional<std::vector<std::size_t>> indices;  // explicit eigen ranks for every listed layer
};

/// Initializes conv layers 1..k (1-based positions within the conv stack,
/// which must form a prefix) one after another from the patch covariance of
/// each layer's input under the already-initialized earlier layers. Every
/// other parameter is left untouched.
template <typename T>
nn::Network<T> covariance_initialize(nn::Network<T> net, const data::Dataset& ds, std::vector<std::size_t> layers,
                                     const CovinitOptions& opt, std::vector<FilterBank>* banks = nullptr) {
  std::sort(layers.begin(), layers.end());
  const auto conv = net.conv_layer_indices();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] != i + 1) throw ArgumentError("covariance_initialize: layers must be a prefix {1..k} of the conv stack");
    if (layers[i] > conv.size()) throw ArgumentError("covariance_initialize: network has only " +
                                                     std::to_string(conv.size()) + " conv layers");
  }
  if (!layers.empty() && ds.size() == 0) throw ArgumentError("covariance_initialize: empty dataset");
  const SeedStreams streams(opt.seed);
  for (auto ordinal : layers) {
    const std::size_t index = conv[ordinal - 1];
    const auto [mean, cov] = layer_input_covariance(net, index, ds, opt.max_patches, streams.derive("patches", ordinal));
    const auto dec = linalg::sym_eig(cov);
    const std::size_t n = net.layer(index).spec.filters;
    FilterBank bank = opt.mode == Mode::direct
                          ? build_filters_direct(dec, opt.taus, n, opt.indices)
                          : build_filters_sampled(dec, opt.taus, n, streams.derive("filters", ordinal), opt.indices);
    install_filters(net, index, bank);
    if (banks) banks->push_back(std::move(bank));
  }
  return net;
}

// FilterBank export (container kind "filterbank"): header n_filters, d,
// layout, construction, seed, centered, directions, taus; payload
// n_filters x d float32, row-major.
inline void write_filter_bank(const std::filesystem::path& path, const FilterBank& bank, const std::string& layout) {
  io::Header h;
  h.set_value("n_filters", bank.size());
  h.set_value("d", bank.dim());
  h.set("layout", layout);
  h.set("construction", construction_name(bank.construction));
  h.set_value("seed", bank.seed);
  h.set("centered", bank.centered ? "true" : "false");
  std::string dirs, taus;
  for (std::size_t i = 0; i < bank.directions.size(); ++i) dirs += (i ? "," : "") + std::to_string(bank.directions[i]);
  for (std::size_t i = 0; i < bank.taus.size(); ++i) taus += (i ? "," : "") + io::format_number(bank.taus[i]);
  h.set("directions", dirs);
  h.set("taus", taus);
  const RowMatrix<float> f = bank.filters.cast<float>();
  io::write_atomically(path, [&](std::ostream& os) {
    io::write_container_header(os, "filterbank", h);
    io::write_le(os, f.data(), static_cast<std::size_t>(f.size()));
  });
}

inline FilterBank read_filter_bank(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open filter bank " + path.string());
  const auto h = io::read_container_header(is, "filterbank", path.string());
  RowMatrix<float> f(static_cast<Eigen::Index>(h.get_size("n_filters")), static_cast<Eigen::Index>(h.get_size("d")));
  io::read_le(is, f.data(), static_cast<std::size_t>(f.size()), path.string());
  FilterBank bank;
  bank.filters = f.cast<double>();
  bank.seed = std::stoull(h.get("seed"));
  const auto& c = h.get("construction");
  bank.construction = c == "covariance_sampled"   ? Construction::covariance_sampled
                      : c == "learned_covariance" ? Construction::learned_covariance
                                                  : Construction::eigenvector_direct;
  bank.centered = h.get("centered") == "true";
  return bank;
}

}  // namespace alignlab::covinit
