#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/nn/layers.hpp"
#include "alignlab/patches.hpp"
#include "alignlab/seed.hpp"

namespace alignlab::nn {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class InitAlgorithm { he, orthogonal };

inline std::string init_algorithm_name(InitAlgorithm a) { return a == InitAlgorithm::he ? "he" : "orthogonal"; }

inline InitAlgorithm parse_init_algorithm(const std::string& s) {
  if (s == "he") return InitAlgorithm::he;
  if (s == "orthogonal") return InitAlgorithm::orthogonal;
  throw ArgumentError("unknown init algorithm '" + s + "'");
}

template <typename T>
struct Layer {
  LayerSpec spec;
  Shape in;
  Shape out;
  // conv: filters x (k*k*in_channels), (row, col, channel) flattening.
  // dense/head: units x in.size().
  RowMatrix<T> weights;
  Vec<T> bias;

  bool has_params() const { return spec.has_params(); }
  std::size_t fan_in() const {
    return spec.kind == LayerKind::conv ? spec.kernel * spec.kernel * in.channels : in.size();
  }
  std::size_t fan_out_units() const { return spec.kind == LayerKind::conv ? spec.filters : spec.units; }
};

/// Ordered layers with parameters. A Network is a value: copying it copies
/// every parameter tensor.
template <typename T>
class Network {
 public:
  Network() = default;

  Network(Shape input, const std::vector<LayerSpec>& arch) : input_(input) {
    if (arch.empty()) throw ShapeError("empty architecture");
    Shape cur = input;
    for (std::size_t i = 0; i < arch.size(); ++i) {
      const auto& spec = arch[i];
      if (spec.kind == LayerKind::head && i + 1 != arch.size()) throw ShapeError("head must be the last layer");
      Layer<T> layer;
      layer.spec = spec;
      layer.in = cur;
      layer.out = output_shape(spec, cur);
      if (spec.has_params()) {
        layer.weights = RowMatrix<T>::Zero(static_cast<Eigen::Index>(layer.fan_out_units()),
                                           static_cast<Eigen::Index>(layer.fan_in()));
        layer.bias = Vec<T>::Zero(static_cast<Eigen::Index>(layer.fan_out_units()));
      }
      cur = layer.out;
      layers_.push_back(std::move(layer));
    }
  }

  const Shape& input_shape() const { return input_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<Layer<T>>& layers() { return layers_; }
  const Layer<T>& layer(std::size_t i) const { return layers_.at(i); }
  Layer<T>& layer(std::size_t i) { return layers_.at(i); }
  std::size_t size() const { return layers_.size(); }

  std::vector<LayerSpec> arch() const {
    std::vector<LayerSpec> a;
    for (const auto& l : layers_) a.push_back(l.spec);
    return a;
  }

  std::size_t num_outputs() const { return layers_.back().out.size(); }

  std::optional<std::size_t> head_index() const {
    if (!layers_.empty() && layers_.back().spec.kind == LayerKind::head) return layers_.size() - 1;
    return std::nullopt;
  }

  std::vector<std::size_t> param_layer_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].has_params()) idx.push_back(i);
    return idx;
  }

  std::vector<std::size_t> conv_layer_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].spec.kind == LayerKind::conv) idx.push_back(i);
    return idx;
  }

  /// Per-layer weight l2 norms at initialization (0 for parameter-free layers).
  const std::vector<double>& init_norms() const { return init_norms_; }
  bool has_init_norms() const { return !init_norms_.empty(); }

  /// Records init norms from the current weights. Allowed once.
  void record_init_norms() {
    if (has_init_norms()) throw ArgumentError("init norms already recorded");
    for (const auto& l : layers_) init_norms_.push_back(l.has_params() ? weight_norm(l) : 0.0);
  }

  /// Restores recorded norms (checkpoint loading). Allowed once.
  void restore_init_norms(std::vector<double> norms) {
    if (has_init_norms()) throw ArgumentError("init norms already recorded");
    if (norms.size() != layers_.size()) throw ShapeError("init norm count does not match layer count");
    init_norms_ = std::move(norms);
  }

  static double weight_norm(const Layer<T>& l) {
    return std::sqrt(l.weights.template cast<double>().squaredNorm());
  }

  InitAlgorithm init_algorithm = InitAlgorithm::he;
  double init_scale = 1.0;
  std::uint64_t seed = 0;

  template <typename U>
  Network<U> cast() const {
    Network<U> out(input_, arch());
    out.init_algorithm = init_algorithm;
    out.init_scale = init_scale;
    out.seed = seed;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (!layers_[i].has_params()) continue;
      out.layer(i).weights = layers_[i].weights.template cast<U>();
      out.layer(i).bias = layers_[i].bias.template cast<U>();
    }
    if (has_init_norms()) out.restore_init_norms(init_norms_);
    return out;
  }

 private:
  Shape input_;
  std::vector<Layer<T>> layers_;
  std::vector<double> init_norms_;
};

namespace detail {

/// Rows x cols matrix with orthonormal rows (rows <= cols) or columns.
inline Eigen::MatrixXd orthogonal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index big = std::max(rows, cols);
  const Eigen::Index small = std::min(rows, cols);
  Eigen::MatrixXd g(big, small);
  for (Eigen::Index i = 0; i < big; ++i)
    for (Eigen::Index j = 0; j < small; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < small; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return rows >= cols ? q : Eigen::MatrixXd(q.transpose());
}

template <typename T>
void init_layer(Layer<T>& layer, InitAlgorithm algorithm, double scale, Rng& rng) {
  const auto rows = layer.weights.rows();
  const auto cols = layer.weights.cols();
  if (algorithm == InitAlgorithm::he) {
    std::normal_distribution<double> normal(0.0, scale * std::sqrt(2.0 / static_cast<double>(layer.fan_in())));
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) layer.weights(i, j) = static_cast<T>(normal(rng));
  } else {
    layer.weights = (orthogonal_matrix(rows, cols, rng) * scale).template cast<T>();
  }
  layer.bias.setZero();
}

}  // namespace detail

/// Fresh network: weights per algorithm times init_scale, zero biases, init
/// norms recorded. Layer i draws from its own named stream of `seed`.
template <typename T = float>
Network<T> init_network(Shape input, const std::vector<LayerSpec>& arch, InitAlgorithm algorithm, double init_scale,
                        std::uint64_t seed) {
  if (!(init_scale > 0)) throw ArgumentError("init_scale must be positive");
  Network<T> net(input, arch);
  net.init_algorithm = algorithm;
  net.init_scale = init_scale;
  net.seed = seed;
  const SeedStreams streams(seed);
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (!net.layer(i).has_params()) continue;
    auto rng = streams.rng("layer", i);
    detail::init_layer(net.layer(i), algorithm, init_scale, rng);
  }
  net.record_init_norms();
  return net;
}

/// Redraws one parameterized layer with the network's algorithm and scale.
template <typename T>
void reinit_layer(Network<T>& net, std::size_t index, std::uint64_t seed) {
  auto& layer = net.layer(index);
  if (!layer.has_params()) throw ArgumentError("layer " + std::to_string(index) + " has no parameters");
  auto rng = SeedStreams(seed).rng("reinit", index);
  detail::init_layer(layer, net.init_algorithm, net.init_scale, rng);
}

/// Replaces the classifier head with a freshly drawn one, optionally with a
/// different number of outputs. Every other layer is untouched.
template <typename T>
Network<T> reinit_head(const Network<T>& net, std::uint64_t seed, std::optional<std::size_t> outputs = std::nullopt) {
  const auto head = net.head_index();
  if (!head) throw ArgumentError("network has no head layer");
  if (!outputs || *outputs == net.num_outputs()) {
    Network<T> out = net;
    auto rng = SeedStreams(seed).rng("head");
    detail::init_layer(out.layer(*head), out.init_algorithm, out.init_scale, rng);
    return out;
  }
  auto arch = net.arch();
  arch.back() = LayerSpec::head(*outputs);
  Network<T> out(net.input_shape(), arch);
  out.init_algorithm = net.init_algorithm;
  out.init_scale = net.init_scale;
  out.seed = net.seed;
  for (std::size_t i = 0; i + 1 < net.size(); ++i) {
    if (!net.layer(i).has_params()) continue;
    out.layer(i).weights = net.layer(i).weights;
    out.layer(i).bias = net.layer(i).bias;
  }
  auto rng = SeedStreams(seed).rng("head");
  detail::init_layer(out.layer(*head), out.init_algorithm, out.init_scale, rng);
  if (net.has_init_norms()) {
    auto norms = net.init_norms();
    norms.back() = Network<T>::weight_norm(out.layer(*head));
    out.restore_init_norms(std::move(norms));
  }
  return out;
}

/// Scales each layer's weights back to its recorded init norm. Layer k's bias
/// is scaled by the product of all factors up to k, so with positively
/// homogeneous nonlinearities the logits are multiplied by one positive
/// constant and argmax predictions are unchanged.
template <typename T>
Network<T> rescale_to_init(const Network<T>& net, std::vector<double>* factors = nullptr) {
  if (!net.has_init_norms()) throw ArgumentError("rescale_to_init: init norms not recorded");
  Network<T> out = net;
  double cumulative = 1.0;
  if (factors) factors->assign(net.size(), 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& layer = out.layer(i);
    if (!layer.has_params()) continue;
    const double norm = Network<T>::weight_norm(layer);
    if (!(norm > 0)) throw DegenerateLayerError("layer " + std::to_string(i) + " has zero weight norm");
    const double c = net.init_norms()[i] / norm;
    if (c == 1.0) {
      // Bias still follows the cumulative factor of earlier layers.
      if (cumulative != 1.0) layer.bias = (layer.bias.template cast<double>() * cumulative).template cast<T>();
      continue;
    }
    cumulative *= c;
    layer.weights = (layer.weights.template cast<double>() * c).template cast<T>();
    layer.bias = (layer.bias.template cast<double>() * cumulative).template cast<T>();
    if (factors) (*factors)[i] = c;
  }
  return out;
}

}  // namespace alignlab::nn
