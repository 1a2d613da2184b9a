#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "alignlab/io/container.hpp"
#include "alignlab/nn/network.hpp"

namespace alignlab::nn {

// Checkpoint kind "checkpoint". Header keys: input_shape (HxWxC), arch,
// init_algorithm, init_scale, seed, init_norms (comma separated, one per
// layer). Payload: for each parameterized layer in order, weights
// (rows x cols float32, row-major) then bias (float32).

template <typename T>
void write_checkpoint(std::ostream& os, const Network<T>& net) {
  io::Header h;
  const auto& s = net.input_shape();
  h.set("input_shape", std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels));
  h.set("arch", format_arch(net.arch()));
  h.set("init_algorithm", init_algorithm_name(net.init_algorithm));
  h.set_value("init_scale", net.init_scale);
  h.set_value("seed", net.seed);
  std::ostringstream norms;
  norms.precision(17);
  for (std::size_t i = 0; i < net.init_norms().size(); ++i) norms << (i ? "," : "") << net.init_norms()[i];
  h.set("init_norms", norms.str());
  h.set("dtype", "float32");
  io::write_container_header(os, "checkpoint", h);
  for (const auto& l : net.layers()) {
    if (!l.has_params()) continue;
    const RowMatrix<float> w = l.weights.template cast<float>();
    const Vec<float> b = l.bias.template cast<float>();
    io::write_le(os, w.data(), static_cast<std::size_t>(w.size()));
    io::write_le(os, b.data(), static_cast<std::size_t>(b.size()));
  }
}

template <typename T = float>
Network<T> read_checkpoint(std::istream& is, const std::string& what = "checkpoint") {
  const auto h = io::read_container_header(is, "checkpoint", what);
  Shape shape;
  {
    const auto& txt = h.get("input_shape");
    char x1 = 0, x2 = 0;
    std::istringstream ss(txt);
    ss >> shape.height >> x1 >> shape.width >> x2 >> shape.channels;
    if (!ss || x1 != 'x' || x2 != 'x') throw IngestionError(what + ": bad input_shape '" + txt + "'");
  }
  Network<T> net(shape, parse_arch(h.get("arch")));
  net.init_algorithm = parse_init_algorithm(h.get("init_algorithm"));
  net.init_scale = std::stod(h.get("init_scale"));
  net.seed = std::stoull(h.get("seed"));
  std::vector<double> norms;
  {
    std::istringstream ss(h.get("init_norms"));
    std::string tok;
    while (std::getline(ss, tok, ',')) norms.push_back(std::stod(tok));
  }
  for (auto& l : net.layers()) {
    if (!l.has_params()) continue;
    RowMatrix<float> w(l.weights.rows(), l.weights.cols());
    Vec<float> b(l.bias.size());
    io::read_le(is, w.data(), static_cast<std::size_t>(w.size()), what);
    io::read_le(is, b.data(), static_cast<std::size_t>(b.size()), what);
    l.weights = w.template cast<T>();
    l.bias = b.template cast<T>();
  }
  if (!norms.empty()) net.restore_init_norms(std::move(norms));
  return net;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net) {
  io::write_atomically(path, [&](std::ostream& os) { write_checkpoint(os, net); });
}

template <typename T = float>
Network<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open checkpoint " + path.string());
  return read_checkpoint<T>(is, path.string());
}

}  // namespace alignlab::nn
