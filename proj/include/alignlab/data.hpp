#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/io/container.hpp"
#include "alignlab/linalg.hpp"
#include "alignlab/patches.hpp"
#include "alignlab/seed.hpp"

namespace alignlab::data {

enum class LabelKind { real, random };

inline std::string label_kind_name(LabelKind k) { return k == LabelKind::real ? "real" : "random"; }

/// Images as rows in HWC order. Labels lie in [0, num_classes).
struct Dataset {
  RowMatrix<float> images;
  std::vector<int> labels;
  Shape shape;
  LabelKind label_kind = LabelKind::real;
  std::size_t num_classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
};

inline float pixel_from_byte(std::uint8_t b) { return 2.0f * static_cast<float>(b) / 255.0f - 1.0f; }

inline std::uint8_t byte_from_pixel(float p) {
  return static_cast<std::uint8_t>(std::lround(std::clamp((p + 1.0f) * 127.5f, 0.0f, 255.0f)));
}

/// Rows `idx` of `ds`, labels moving with their images.
inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.shape = ds.shape;
  out.label_kind = ds.label_kind;
  out.num_classes = ds.num_classes;
  out.provenance = ds.provenance;
  out.images.resize(static_cast<Eigen::Index>(idx.size()), ds.images.cols());
  out.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.size()) throw ArgumentError("subset index out of range");
    out.images.row(static_cast<Eigen::Index>(i)) = ds.images.row(static_cast<Eigen::Index>(idx[i]));
    out.labels[i] = ds.labels[idx[i]];
  }
  return out;
}

inline Dataset head(const Dataset& ds, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, ds.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return subset(ds, idx);
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches

namespace detail {

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarPerBatch = 10000;

inline void read_cifar_file(const std::filesystem::path& path, RowMatrix<float>& images, std::vector<int>& labels,
                            std::size_t offset) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("missing CIFAR-10 file " + path.string());
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec || size != kCifarRecord * kCifarPerBatch) {
    throw IngestionError("CIFAR-10 file " + path.string() + " has size " + std::to_string(size) + ", expected " +
                         std::to_string(kCifarRecord * kCifarPerBatch));
  }
  std::vector<std::uint8_t> buf(kCifarRecord);
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  for (std::size_t r = 0; r < kCifarPerBatch; ++r) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(kCifarRecord));
    if (static_cast<std::size_t>(is.gcount()) != kCifarRecord) {
      throw IngestionError("CIFAR-10 file " + path.string() + " truncated at record " + std::to_string(r));
    }
    if (buf[0] > 9) throw IngestionError("CIFAR-10 file " + path.string() + " has label " + std::to_string(buf[0]));
    labels[offset + r] = buf[0];
    float* dst = images.row(static_cast<Eigen::Index>(offset + r)).data();
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) dst[p * 3 + c] = pixel_from_byte(buf[1 + c * plane + p]);
  }
}

inline Dataset read_cifar_files(const std::vector<std::filesystem::path>& files) {
  Dataset ds;
  ds.shape = {kCifarSide, kCifarSide, 3};
  ds.label_kind = LabelKind::real;
  ds.num_classes = 10;
  ds.provenance = "cifar10";
  ds.images.resize(static_cast<Eigen::Index>(files.size() * kCifarPerBatch), static_cast<Eigen::Index>(ds.shape.size()));
  ds.labels.resize(files.size() * kCifarPerBatch);
  for (std::size_t f = 0; f < files.size(); ++f) read_cifar_file(files[f], ds.images, ds.labels, f * kCifarPerBatch);
  return ds;
}

}  // namespace detail

/// Reads data_batch_1..5.bin and test_batch.bin from `dir` (or its
/// cifar-10-batches-bin subdirectory).
inline std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir) {
  auto root = dir;
  if (!std::filesystem::exists(root / "data_batch_1.bin") &&
      std::filesystem::exists(root / "cifar-10-batches-bin" / "data_batch_1.bin")) {
    root /= "cifar-10-batches-bin";
  }
  std::vector<std::filesystem::path> train_files;
  for (int i = 1; i <= 5; ++i) train_files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  Dataset train = detail::read_cifar_files(train_files);
  Dataset test = detail::read_cifar_files({root / "test_batch.bin"});
  return {std::move(train), std::move(test)};
}

inline bool cifar10_available(const std::filesystem::path& dir) {
  for (const auto& r : {dir, dir / "cifar-10-batches-bin"})
    if (std::filesystem::exists(r / "data_batch_1.bin") && std::filesystem::exists(r / "test_batch.bin")) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Synthetic data and labels

/// I.i.d. uniform labels over [0, num_classes).
inline std::vector<int> assign_random_labels(std::size_t n, std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 1) throw ArgumentError("num_classes must be >= 1");
  Rng rng(seed);
  std::uniform_int_distribution<int> dist(0, static_cast<int>(num_classes) - 1);
  std::vector<int> labels(n);
  for (auto& l : labels) l = dist(rng);
  return labels;
}

/// Rows from N(0, diag(variances)) with independent uniform random labels.
/// Shape is 1 x 1 x d.
inline Dataset make_gaussian_dataset(const std::vector<double>& variances, std::size_t n, std::size_t num_classes,
                                     std::uint64_t seed) {
  if (variances.empty()) throw ArgumentError("make_gaussian_dataset: empty variance list");
  for (double v : variances)
    if (!(v >= 0)) throw ArgumentError("make_gaussian_dataset: variances must be >= 0");
  const SeedStreams streams(seed);
  Dataset ds;
  const std::size_t d = variances.size();
  ds.shape = {1, 1, d};
  ds.images.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  auto rng = streams.rng("inputs");
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      ds.images(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          static_cast<float>(std::sqrt(variances[j]) * normal(rng));
  ds.labels = assign_random_labels(n, num_classes, streams.derive("labels"));
  ds.label_kind = LabelKind::random;
  ds.num_classes = num_classes;
  std::ostringstream prov;
  prov << "gaussian(d=" << d << ",n=" << n << ",seed=" << seed << ")";
  ds.provenance = prov.str();
  return ds;
}

/// Evenly spaced variances first, first+step, ... (count values).
inline std::vector<double> linear_variances(double first, double step, std::size_t count) {
  std::vector<double> v(count);
  for (std::size_t i = 0; i < count; ++i) v[i] = first + step * static_cast<double>(i);
  return v;
}

/// Replaces labels with fresh uniform random ones over num_classes.
inline Dataset relabel_random(Dataset ds, std::size_t num_classes, std::uint64_t seed) {
  ds.labels = assign_random_labels(ds.size(), num_classes, seed);
  ds.label_kind = LabelKind::random;
  ds.num_classes = num_classes;
  return ds;
}

/// Natural-image stand-in: multi-octave value noise with amplitude growing
/// with scale (roughly 1/f), a luminance field shared across channels plus
/// weaker per-channel chroma fields, squashed into [-1, 1] by tanh. Labels
/// are uniform random.
inline Dataset make_synthetic_images(std::size_t n, Shape shape, std::size_t num_classes, std::uint64_t seed) {
  if (shape.height < 2 || shape.width < 2 || shape.channels < 1) throw ArgumentError("synthetic images need H, W >= 2");
  const SeedStreams streams(seed);
  Dataset ds;
  ds.shape = shape;
  ds.images.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(shape.size()));
  const std::size_t h = shape.height, w = shape.width, c = shape.channels;
  std::vector<std::size_t> cells;
  for (std::size_t g = 2; g <= std::max(h, w); g *= 2) cells.push_back(g);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> lum(h * w), chroma(h * w * c);

  // Adds bilinearly upsampled g x g noise with amplitude amp into field[stride*p + off].
  auto add_octave = [&](std::vector<double>& field, std::size_t stride, std::size_t off, std::size_t g, double amp,
                        Rng& rng) {
    std::vector<double> grid((g + 1) * (g + 1));
    for (auto& v : grid) v = normal(rng);
    for (std::size_t y = 0; y < h; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) * static_cast<double>(g) / static_cast<double>(h);
      const auto y0 = static_cast<std::size_t>(fy);
      const double ty = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < w; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) * static_cast<double>(g) / static_cast<double>(w);
        const auto x0 = static_cast<std::size_t>(fx);
        const double tx = fx - static_cast<double>(x0);
        const double v = (1 - ty) * ((1 - tx) * grid[y0 * (g + 1) + x0] + tx * grid[y0 * (g + 1) + x0 + 1]) +
                         ty * ((1 - tx) * grid[(y0 + 1) * (g + 1) + x0] + tx * grid[(y0 + 1) * (g + 1) + x0 + 1]);
        field[(y * w + x) * stride + off] += amp * v;
      }
    }
  };

  for (std::size_t i = 0; i < n; ++i) {
    auto rng = streams.rng("image", i);
    std::fill(lum.begin(), lum.end(), normal(rng) * 0.5);
    std::fill(chroma.begin(), chroma.end(), 0.0);
    for (std::size_t o = 0; o < cells.size(); ++o) {
      const double amp = 1.0 / static_cast<double>(cells[o]) * 2.0;
      add_octave(lum, 1, 0, cells[o], amp, rng);
      for (std::size_t ch = 0; ch < c && c > 1; ++ch) add_octave(chroma, c, ch, cells[o], 0.3 * amp, rng);
    }
    float* dst = ds.images.row(static_cast<Eigen::Index>(i)).data();
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t ch = 0; ch < c; ++ch)
        dst[p * c + ch] = static_cast<float>(std::tanh(1.5 * (lum[p] + chroma[p * c + ch])));
  }
  ds.labels = assign_random_labels(n, num_classes, streams.derive("labels"));
  ds.label_kind = LabelKind::random;
  ds.num_classes = num_classes;
  std::ostringstream prov;
  prov << "synthetic(" << h << "x" << w << "x" << c << ",n=" << n << ",seed=" << seed << ")";
  ds.provenance = prov.str();
  return ds;
}

/// Two disjoint uniformly drawn subsets of sizes n_up and n_down.
inline std::pair<Dataset, Dataset> disjoint_split(const Dataset& ds, std::size_t n_up, std::size_t n_down,
                                                  std::uint64_t seed) {
  if (n_up + n_down > ds.size()) {
    throw ArgumentError("disjoint_split: need " + std::to_string(n_up + n_down) + " examples, dataset has " +
                        std::to_string(ds.size()));
  }
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first n_up + n_down slots are a uniform sample.
  for (std::size_t i = 0; i < n_up + n_down; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, perm.size() - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  std::vector<std::size_t> up(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_up));
  std::vector<std::size_t> down(perm.begin() + static_cast<std::ptrdiff_t>(n_up),
                                perm.begin() + static_cast<std::ptrdiff_t>(n_up + n_down));
  return {subset(ds, up), subset(ds, down)};
}

// ---------------------------------------------------------------------------
// Patches

/// Flattened (row, col, channel) patches, one row per (image, position).
struct PatchSet {
  RowMatrix<float> patches;
  std::vector<std::pair<std::size_t, std::size_t>> positions;  // (row, col) of the window origin; empty if not kept
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t per_image = 0;

  std::size_t dim() const { return static_cast<std::size_t>(patches.cols()); }
};

/// All valid k x k windows at offsets that are multiples of `stride`.
inline PatchSet extract_patches(const Dataset& ds, std::size_t k, std::size_t stride, bool keep_positions = false) {
  if (k == 0 || stride == 0) throw ArgumentError("extract_patches: k and stride must be >= 1");
  if (k > std::min(ds.shape.height, ds.shape.width)) throw ArgumentError("extract_patches: k exceeds image size");
  PatchSet ps;
  ps.kernel = k;
  ps.stride = stride;
  gather_patches(ds.images, ds.shape, k, stride, Padding::valid, ps.patches);
  const auto g = window_geometry(ds.shape.height, ds.shape.width, k, stride, Padding::valid);
  ps.per_image = g.positions();
  if (keep_positions) {
    ps.positions.reserve(ds.size() * g.positions());
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t oy = 0; oy < g.out_height; ++oy)
        for (std::size_t ox = 0; ox < g.out_width; ++ox) ps.positions.emplace_back(oy * stride, ox * stride);
  }
  return ps;
}

/// Streaming patch moments over the whole dataset without materializing
/// every patch. When max_patches > 0 and the dataset has more windows,
/// a seeded uniform subset of images is used so that at most max_patches
/// windows contribute.
inline std::pair<linalg::Vector, linalg::SymMatrix> patch_covariance(const Dataset& ds, std::size_t k,
                                                                     std::size_t stride, bool center,
                                                                     std::size_t max_patches = 0,
                                                                     std::uint64_t seed = 0) {
  const auto g = window_geometry(ds.shape.height, ds.shape.width, k, stride, Padding::valid);
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_patches > 0 && ds.size() * g.positions() > max_patches) {
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::max<std::size_t>(1, max_patches / g.positions()));
    std::sort(idx.begin(), idx.end());
  }
  linalg::CovarianceAccumulator acc(static_cast<Eigen::Index>(k * k * ds.shape.channels));
  RowMatrix<float> chunk, cols;
  constexpr std::size_t kChunk = 256;
  for (std::size_t s = 0; s < idx.size(); s += kChunk) {
    const std::size_t len = std::min(kChunk, idx.size() - s);
    chunk.resize(static_cast<Eigen::Index>(len), ds.images.cols());
    for (std::size_t i = 0; i < len; ++i)
      chunk.row(static_cast<Eigen::Index>(i)) = ds.images.row(static_cast<Eigen::Index>(idx[s + i]));
    gather_patches(chunk, ds.shape, k, stride, Padding::valid, cols);
    acc.add_rows(cols);
  }
  return acc.finish(center);
}

/// For each non-overlapping k x k grid cell, shuffles that cell's patch
/// across images with an independent permutation.
inline Dataset permute_patches(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  if (k == 0 || ds.shape.height % k != 0 || ds.shape.width % k != 0) {
    throw ArgumentError("permute_patches: image dimensions must be divisible by k");
  }
  Dataset out = ds;
  const std::size_t c = ds.shape.channels, w = ds.shape.width;
  const std::size_t gy = ds.shape.height / k, gx = ds.shape.width / k;
  const SeedStreams streams(seed);
  std::vector<std::size_t> perm(ds.size());
  for (std::size_t py = 0; py < gy; ++py) {
    for (std::size_t px = 0; px < gx; ++px) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      auto rng = streams.rng("position", py * gx + px);
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const float* src = ds.images.row(static_cast<Eigen::Index>(perm[i])).data();
        float* dst = out.images.row(static_cast<Eigen::Index>(i)).data();
        for (std::size_t y = py * k; y < (py + 1) * k; ++y) {
          const std::size_t off = (y * w + px * k) * c;
          std::copy(src + off, src + off + k * c, dst + off);
        }
      }
    }
  }
  std::ostringstream prov;
  prov << "patch_permuted(k=" << k << ",seed=" << seed << ";" << ds.provenance << ")";
  out.provenance = prov.str();
  return out;
}

// ---------------------------------------------------------------------------
// Dataset export (container kind "dataset"): header n, height, width,
// channels, label_kind, num_classes, provenance; payload n*H*W*C float32
// images (HWC per row) followed by n int32 labels.

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  io::Header h;
  h.set_value("n", ds.size());
  h.set_value("height", ds.shape.height);
  h.set_value("width", ds.shape.width);
  h.set_value("channels", ds.shape.channels);
  h.set("label_kind", label_kind_name(ds.label_kind));
  h.set_value("num_classes", ds.num_classes);
  h.set("provenance", ds.provenance);
  io::write_atomically(path, [&](std::ostream& os) {
    io::write_container_header(os, "dataset", h);
    io::write_le(os, ds.images.data(), static_cast<std::size_t>(ds.images.size()));
    std::vector<std::int32_t> labels(ds.labels.begin(), ds.labels.end());
    io::write_le(os, labels.data(), labels.size());
  });
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open dataset " + path.string());
  const auto h = io::read_container_header(is, "dataset", path.string());
  Dataset ds;
  const auto n = h.get_size("n");
  ds.shape = {h.get_size("height"), h.get_size("width"), h.get_size("channels")};
  ds.label_kind = h.get("label_kind") == "real" ? LabelKind::real : LabelKind::random;
  ds.num_classes = h.get_size("num_classes");
  ds.provenance = h.get("provenance");
  ds.images.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(ds.shape.size()));
  io::read_le(is, ds.images.data(), static_cast<std::size_t>(ds.images.size()), path.string());
  std::vector<std::int32_t> labels(n);
  io::read_le(is, labels.data(), n, path.string());
  ds.labels.assign(labels.begin(), labels.end());
  return ds;
}

}  // namespace alignlab::data
