#pragma once

#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/patches.hpp"

namespace alignlab::nn {

enum class LayerKind { conv, dense, relu, maxpool, flatten, head };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t filters = 0;  // conv
  std::size_t kernel = 0;   // conv, maxpool
  std::size_t stride = 1;   // conv, maxpool
  Padding padding = Padding::valid;
  std::size_t units = 0;  // dense units, head outputs

  static LayerSpec conv(std::size_t filters, std::size_t kernel, std::size_t stride = 1,
                        Padding padding = Padding::valid) {
    return {LayerKind::conv, filters, kernel, stride, padding, 0};
  }
  static LayerSpec dense(std::size_t units) { return {LayerKind::dense, 0, 0, 1, Padding::valid, units}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, 1, Padding::valid, 0}; }
  static LayerSpec maxpool(std::size_t window, std::size_t stride) {
    return {LayerKind::maxpool, 0, window, stride, Padding::same, 0};
  }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 1, Padding::valid, 0}; }
  static LayerSpec head(std::size_t outputs) { return {LayerKind::head, 0, 0, 1, Padding::valid, outputs}; }

  bool has_params() const { return kind == LayerKind::conv || kind == LayerKind::dense || kind == LayerKind::head; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Output shape of a layer; validates the spec against its input.
inline Shape output_shape(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::conv: {
      if (spec.filters < 1 || spec.kernel < 1 || spec.stride < 1) throw ShapeError("conv needs filters, kernel, stride >= 1");
      const auto g = window_geometry(in.height, in.width, spec.kernel, spec.stride, spec.padding);
      return {g.out_height, g.out_width, spec.filters};
    }
    case LayerKind::maxpool: {
      const auto g = window_geometry(in.height, in.width, spec.kernel, spec.stride, Padding::same);
      return {g.out_height, g.out_width, in.channels};
    }
    case LayerKind::dense:
    case LayerKind::head:
      if (spec.units < 1) throw ShapeError("dense/head needs units >= 1");
      return {1, 1, spec.units};
    case LayerKind::flatten:
      return {1, 1, in.size()};
    case LayerKind::relu:
      return in;
  }
  return in;
}

inline std::string padding_name(Padding p) { return p == Padding::same ? "same" : "valid"; }

/// Compact architecture text, e.g. "conv:16:3:1:valid,relu,maxpool:3:2,dense:512,relu,head:10".
inline std::string format_arch(const std::vector<LayerSpec>& arch) {
  std::ostringstream os;
  for (std::size_t i = 0; i < arch.size(); ++i) {
    if (i) os << ',';
    const auto& s = arch[i];
    switch (s.kind) {
      case LayerKind::conv:
        os << "conv:" << s.filters << ':' << s.kernel << ':' << s.stride << ':' << padding_name(s.padding);
        break;
      case LayerKind::dense: os << "dense:" << s.units; break;
      case LayerKind::relu: os << "relu"; break;
      case LayerKind::maxpool: os << "maxpool:" << s.kernel << ':' << s.stride; break;
      case LayerKind::flatten: os << "flatten"; break;
      case LayerKind::head: os << "head:" << s.units; break;
    }
  }
  return os.str();
}

inline std::vector<LayerSpec> parse_arch(std::string_view text) {
  std::vector<LayerSpec> arch;
  auto split = [](std::string_view s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
      const auto pos = s.find(sep, start);
      parts.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    return parts;
  };
  auto number = [&](const std::string& tok, const std::string& whole) -> std::size_t {
    try {
      std::size_t used = 0;
      const auto v = std::stoul(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw ArgumentError("bad number '" + tok + "' in layer '" + whole + "'");
    }
  };
  for (auto item : split(text, ',')) {
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    if (first == std::string::npos) throw ArgumentError("empty layer in architecture '" + std::string(text) + "'");
    item = item.substr(first, last - first + 1);
    const auto f = split(item, ':');
    const auto& name = f[0];
    if (name == "conv" && (f.size() == 3 || f.size() == 4 || f.size() == 5)) {
      const auto stride = f.size() >= 4 ? number(f[3], item) : 1;
      Padding pad = Padding::valid;
      if (f.size() == 5) {
        if (f[4] == "same") pad = Padding::same;
        else if (f[4] != "valid") throw ArgumentError("bad padding in layer '" + item + "'");
      }
      arch.push_back(LayerSpec::conv(number(f[1], item), number(f[2], item), stride, pad));
    } else if (name == "dense" && f.size() == 2) {
      arch.push_back(LayerSpec::dense(number(f[1], item)));
    } else if (name == "relu" && f.size() == 1) {
      arch.push_back(LayerSpec::relu());
    } else if (name == "maxpool" && f.size() == 3) {
      arch.push_back(LayerSpec::maxpool(number(f[1], item), number(f[2], item)));
    } else if (name == "flatten" && f.size() == 1) {
      arch.push_back(LayerSpec::flatten());
    } else if (name == "head" && f.size() == 2) {
      arch.push_back(LayerSpec::head(number(f[1], item)));
    } else {
      throw ArgumentError("unrecognized layer '" + item + "'");
    }
  }
  return arch;
}

/// The configurable "Simple CNN": conv3x3 blocks with ReLU, optional max-pool,
/// one dense hidden layer with ReLU, then the classifier head.
inline std::vector<LayerSpec> simple_cnn(std::size_t num_conv_layers, std::size_t num_filters, std::size_t num_units,
                                         std::size_t num_outputs, Padding padding = Padding::valid,
                                         std::size_t pool_window = 0, std::size_t pool_stride = 2) {
  std::vector<LayerSpec> arch;
  for (std::size_t i = 0; i < num_conv_layers; ++i) {
    arch.push_back(LayerSpec::conv(num_filters, 3, 1, padding));
    arch.push_back(LayerSpec::relu());
  }
  if (pool_window > 0) arch.push_back(LayerSpec::maxpool(pool_window, pool_stride));
  arch.push_back(LayerSpec::dense(num_units));
  arch.push_back(LayerSpec::relu());
  arch.push_back(LayerSpec::head(num_outputs));
  return arch;
}

/// Fully connected net with ReLU after every hidden layer.
inline std::vector<LayerSpec> mlp(const std::vector<std::size_t>& hidden, std::size_t num_outputs) {
  std::vector<LayerSpec> arch;
  for (auto h : hidden) {
    arch.push_back(LayerSpec::dense(h));
    arch.push_back(LayerSpec::relu());
  }
  arch.push_back(LayerSpec::head(num_outputs));
  return arch;
}

}  // namespace alignlab::nn
