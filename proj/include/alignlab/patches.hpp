#pragma once

// Patch gathering shared by convolution layers and dataset patch extraction.
// A patch is flattened (row, col, channel) row-major, i.e. index
// (ky * k + kx) * C + c. Conv filters use the same layout, so the response of
// a filter to a patch is a plain dot product.

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>

#include "alignlab/errors.hpp"

namespace alignlab {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Height x width x channels, stored HWC row-major.
struct Shape {
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t channels = 1;

  std::size_t size() const { return height * width * channels; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

enum class Padding { same, valid };

/// Window placement of a k x k, stride-s sliding window over an H x W grid.
struct WindowGeometry {
  std::size_t out_height = 0;
  std::size_t out_width = 0;
  std::size_t pad_top = 0;
  std::size_t pad_left = 0;

  std::size_t positions() const { return out_height * out_width; }
};

/// TF-style geometry: valid keeps windows fully inside, same yields
/// ceil(H / s) outputs with the extra padding split top/bottom (bottom gets the odd one).
inline WindowGeometry window_geometry(std::size_t height, std::size_t width, std::size_t k, std::size_t stride,
                                      Padding padding) {
  if (k < 1 || stride < 1) throw ShapeError("window kernel and stride must be >= 1");
  WindowGeometry g;
  if (padding == Padding::valid) {
    if (k > height || k > width) throw ShapeError("window larger than input");
    g.out_height = (height - k) / stride + 1;
    g.out_width = (width - k) / stride + 1;
  } else {
    g.out_height = (height + stride - 1) / stride;
    g.out_width = (width + stride - 1) / stride;
    const std::size_t need_h = (g.out_height - 1) * stride + k;
    const std::size_t need_w = (g.out_width - 1) * stride + k;
    g.pad_top = need_h > height ? (need_h - height) / 2 : 0;
    g.pad_left = need_w > width ? (need_w - width) / 2 : 0;
  }
  return g;
}

/// Gathers all windows of `batch` (rows = images in HWC layout) into
/// `out`, one row per (image, position) with position-major order inside an
/// image. Out-of-range pixels read as zero.
template <typename T, typename In>
void gather_patches(const Eigen::MatrixBase<In>& batch, const Shape& shape, std::size_t k, std::size_t stride,
                    Padding padding, RowMatrix<T>& out) {
  const auto g = window_geometry(shape.height, shape.width, k, stride, padding);
  const std::size_t c = shape.channels;
  const std::size_t patch_dim = k * k * c;
  const auto n = static_cast<std::size_t>(batch.rows());
  out.resize(static_cast<Eigen::Index>(n * g.positions()), static_cast<Eigen::Index>(patch_dim));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < g.out_height; ++oy) {
      for (std::size_t ox = 0; ox < g.out_width; ++ox) {
        const auto row = static_cast<Eigen::Index>(b * g.positions() + oy * g.out_width + ox);
        T* dst = out.row(row).data();
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(g.pad_top);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(g.pad_left);
            T* cell = dst + (ky * k + kx) * c;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(shape.height) || ix >= static_cast<long>(shape.width)) {
              std::fill(cell, cell + c, T(0));
            } else {
              const std::size_t base = (static_cast<std::size_t>(iy) * shape.width + static_cast<std::size_t>(ix)) * c;
              for (std::size_t ch = 0; ch < c; ++ch) {
                cell[ch] = static_cast<T>(batch(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(base + ch)));
              }
            }
          }
        }
      }
    }
  }
}

/// Adjoint of gather_patches: accumulates patch gradients back onto images.
template <typename T>
void scatter_patches(const RowMatrix<T>& cols, const Shape& shape, std::size_t k, std::size_t stride,
                     Padding padding, std::size_t n, RowMatrix<T>& out) {
  const auto g = window_geometry(shape.height, shape.width, k, stride, padding);
  const std::size_t c = shape.channels;
  out.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(shape.size()));
  for (std::size_t b = 0; b < n; ++b) {
    T* img = out.row(static_cast<Eigen::Index>(b)).data();
    for (std::size_t oy = 0; oy < g.out_height; ++oy) {
      for (std::size_t ox = 0; ox < g.out_width; ++ox) {
        const T* src = cols.row(static_cast<Eigen::Index>(b * g.positions() + oy * g.out_width + ox)).data();
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(g.pad_top);
          if (iy < 0 || iy >= static_cast<long>(shape.height)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(g.pad_left);
            if (ix < 0 || ix >= static_cast<long>(shape.width)) continue;
            const T* cell = src + (ky * k + kx) * c;
            T* dst = img + (static_cast<std::size_t>(iy) * shape.width + static_cast<std::size_t>(ix)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += cell[ch];
          }
        }
      }
    }
  }
}

}  // namespace alignlab
