#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/nn/network.hpp"
#include "alignlab/patches.hpp"

namespace alignlab::nn {

/// Result of a forward pass: every layer's output (post-activation for ReLU
/// layers) plus what backward needs.
template <typename T>
struct ForwardPass {
  RowMatrix<T> input;
  std::vector<RowMatrix<T>> outputs;
  std::vector<RowMatrix<T>> columns;               // gathered patches, conv layers only
  std::vector<std::vector<std::int32_t>> argmax;  // max-pool routing

  const RowMatrix<T>& logits() const { return outputs.back(); }
  const RowMatrix<T>& layer_input(std::size_t i) const { return i == 0 ? input : outputs[i - 1]; }
};

template <typename T>
struct Gradients {
  std::vector<RowMatrix<T>> weights;
  std::vector<Vec<T>> bias;

  static Gradients zeros_like(const Network<T>& net) {
    Gradients g;
    for (const auto& l : net.layers()) {
      g.weights.push_back(RowMatrix<T>::Zero(l.weights.rows(), l.weights.cols()));
      g.bias.push_back(Vec<T>::Zero(l.bias.size()));
    }
    return g;
  }
};

namespace detail {

template <typename T>
using MapRow = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapRow = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void maxpool_forward(const RowMatrix<T>& in, const Shape& shape, const LayerSpec& spec, RowMatrix<T>& out,
                     std::vector<std::int32_t>* routes) {
  const auto g = window_geometry(shape.height, shape.width, spec.kernel, spec.stride, Padding::same);
  const std::size_t c = shape.channels;
  const auto n = static_cast<std::size_t>(in.rows());
  out.resize(in.rows(), static_cast<Eigen::Index>(g.positions() * c));
  if (routes) routes->assign(n * g.positions() * c, -1);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = in.row(static_cast<Eigen::Index>(b)).data();
    T* dst = out.row(static_cast<Eigen::Index>(b)).data();
    for (std::size_t oy = 0; oy < g.out_height; ++oy) {
      for (std::size_t ox = 0; ox < g.out_width; ++ox) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t where = -1;
          for (std::size_t ky = 0; ky < spec.kernel; ++ky) {
            const long iy = static_cast<long>(oy * spec.stride + ky) - static_cast<long>(g.pad_top);
            if (iy < 0 || iy >= static_cast<long>(shape.height)) continue;
            for (std::size_t kx = 0; kx < spec.kernel; ++kx) {
              const long ix = static_cast<long>(ox * spec.stride + kx) - static_cast<long>(g.pad_left);
              if (ix < 0 || ix >= static_cast<long>(shape.width)) continue;
              const auto idx = static_cast<std::int32_t>((static_cast<std::size_t>(iy) * shape.width +
                                                          static_cast<std::size_t>(ix)) * c + ch);
              if (src[idx] > best) {
                best = src[idx];
                where = idx;
              }
            }
          }
          const std::size_t o = (oy * g.out_width + ox) * c + ch;
          dst[o] = best;
          if (routes) (*routes)[b * g.positions() * c + o] = where;
        }
      }
    }
  }
}

}  // namespace detail

/// Runs `batch` (rows = examples, HWC-flattened) through the network.
/// With keep_cache=false the gathered patches and pool routes are dropped;
/// per-layer outputs are always kept. Only layers [0, upto) are evaluated.
template <typename T, typename In>
ForwardPass<T> forward(const Network<T>& net, const Eigen::MatrixBase<In>& batch, bool keep_cache = true,
                       std::size_t upto = std::numeric_limits<std::size_t>::max()) {
  if (static_cast<std::size_t>(batch.cols()) != net.input_shape().size()) {
    throw ShapeError("forward: batch has " + std::to_string(batch.cols()) + " features, network expects " +
                     std::to_string(net.input_shape().size()));
  }
  ForwardPass<T> pass;
  pass.input = batch.template cast<T>();
  pass.outputs.resize(net.size());
  pass.columns.resize(net.size());
  pass.argmax.resize(net.size());
  const auto n = pass.input.rows();

  upto = std::min(upto, net.size());
  for (std::size_t i = 0; i < upto; ++i) {
    const auto& layer = net.layer(i);
    const RowMatrix<T>& x = pass.layer_input(i);
    RowMatrix<T>& y = pass.outputs[i];
    switch (layer.spec.kind) {
      case LayerKind::conv: {
        RowMatrix<T> cols;
        gather_patches<T>(x, layer.in, layer.spec.kernel, layer.spec.stride, layer.spec.padding, cols);
        const auto positions = static_cast<Eigen::Index>(layer.out.height * layer.out.width);
        y.resize(n, positions * static_cast<Eigen::Index>(layer.spec.filters));
        detail::MapRow<T> ym(y.data(), n * positions, static_cast<Eigen::Index>(layer.spec.filters));
        ym.noalias() = cols * layer.weights.transpose();
        ym.rowwise() += layer.bias.transpose();
        if (keep_cache) pass.columns[i] = std::move(cols);
        break;
      }
      case LayerKind::dense:
      case LayerKind::head:
        y.resize(n, layer.weights.rows());
        y.noalias() = x * layer.weights.transpose();
        y.rowwise() += layer.bias.transpose();
        break;
      case LayerKind::relu:
        y = x.cwiseMax(T(0));
        break;
      case LayerKind::maxpool:
        detail::maxpool_forward(x, layer.in, layer.spec, y, keep_cache ? &pass.argmax[i] : nullptr);
        break;
      case LayerKind::flatten:
        y = x;
        break;
    }
  }
  return pass;
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
template <typename T>
double softmax_cross_entropy(const RowMatrix<T>& logits, std::span<const int> labels, RowMatrix<T>* dlogits) {
  const auto n = logits.rows();
  const auto k = logits.cols();
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("label count does not match batch size");
  double loss = 0.0;
  if (dlogits) dlogits->resize(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw ArgumentError("label " + std::to_string(y) + " out of range");
    const double m = static_cast<double>(logits.row(i).maxCoeff());
    double z = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) z += std::exp(static_cast<double>(logits(i, j)) - m);
    const double log_z = m + std::log(z);
    loss += log_z - static_cast<double>(logits(i, y));
    if (dlogits) {
      for (Eigen::Index j = 0; j < k; ++j) {
        const double p = std::exp(static_cast<double>(logits(i, j)) - log_z);
        (*dlogits)(i, j) = static_cast<T>((p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
      }
    }
  }
  return loss / static_cast<double>(n);
}

/// Backpropagates d(loss)/d(logits) through the cached pass.
template <typename T>
void backward(const Network<T>& net, const ForwardPass<T>& pass, RowMatrix<T> grad, Gradients<T>& out) {
  // Every parameter gradient is fully assigned below, so no zero fill.
  out.weights.resize(net.size());
  out.bias.resize(net.size());
  const auto n = pass.input.rows();
  for (std::size_t ii = net.size(); ii-- > 0;) {
    const auto& layer = net.layer(ii);
    const RowMatrix<T>& x = pass.layer_input(ii);
    const bool need_input_grad = ii > 0;
    switch (layer.spec.kind) {
      case LayerKind::conv: {
        const auto positions = static_cast<Eigen::Index>(layer.out.height * layer.out.width);
        const auto f = static_cast<Eigen::Index>(layer.spec.filters);
        detail::ConstMapRow<T> gm(grad.data(), n * positions, f);
        const RowMatrix<T>& cols = pass.columns[ii];
        out.weights[ii].noalias() = gm.transpose() * cols;
        out.bias[ii] = gm.colwise().sum().transpose();
        if (need_input_grad) {
          RowMatrix<T> dcols = gm * layer.weights;
          RowMatrix<T> dx;
          scatter_patches<T>(dcols, layer.in, layer.spec.kernel, layer.spec.stride, layer.spec.padding,
                             static_cast<std::size_t>(n), dx);
          grad = std::move(dx);
        }
        break;
      }
      case LayerKind::dense:
      case LayerKind::head:
        out.weights[ii].noalias() = grad.transpose() * x;
        out.bias[ii] = grad.colwise().sum().transpose();
        if (need_input_grad) grad = grad * layer.weights;
        break;
      case LayerKind::relu: {
        const RowMatrix<T>& y = pass.outputs[ii];
        grad = (y.array() > T(0)).select(grad, T(0));
        break;
      }
      case LayerKind::maxpool: {
        RowMatrix<T> dx = RowMatrix<T>::Zero(n, static_cast<Eigen::Index>(layer.in.size()));
        const auto& routes = pass.argmax[ii];
        const auto per = static_cast<std::size_t>(grad.cols());
        for (Eigen::Index b = 0; b < n; ++b) {
          for (std::size_t o = 0; o < per; ++o) {
            const auto r = routes[static_cast<std::size_t>(b) * per + o];
            if (r >= 0) dx(b, r) += grad(b, static_cast<Eigen::Index>(o));
          }
        }
        grad = std::move(dx);
        break;
      }
      case LayerKind::flatten:
        break;
    }
  }
}

/// Loss and parameter gradients for one batch.
template <typename T, typename In>
double loss_and_gradients(const Network<T>& net, const Eigen::MatrixBase<In>& batch, std::span<const int> labels,
                          Gradients<T>& grads) {
  const auto pass = forward(net, batch, true);
  RowMatrix<T> dlogits;
  const double loss = softmax_cross_entropy(pass.logits(), labels, &dlogits);
  backward(net, pass, std::move(dlogits), grads);
  return loss;
}

}  // namespace alignlab::nn
