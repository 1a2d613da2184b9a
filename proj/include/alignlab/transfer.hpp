#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "alignlab/alignment.hpp"
#include "alignlab/config.hpp"
#include "alignlab/covinit.hpp"
#include "alignlab/data.hpp"
#include "alignlab/errors.hpp"
#include "alignlab/io/csv.hpp"
#include "alignlab/nn.hpp"
#include "alignlab/parallel.hpp"
#include "alignlab/seed.hpp"

namespace alignlab::transfer {

using nn::Network;
using nn::TrainingCurve;

// ---------------------------------------------------------------------------
// Configuration

/// Experiment description. Key names follow the usual upstream/downstream
/// vocabulary; num_classes_downstream = 0 selects the real labels.
struct ExperimentConfig {
  // Network
  std::string arch;  // explicit layer list; empty selects the simple CNN below
  std::size_t num_conv_layers = 1;
  std::size_t num_filters = 16;
  std::size_t num_units = 64;
  std::string padding = "valid";
  std::size_t pool_window = 0;
  std::size_t pool_stride = 2;
  nn::InitAlgorithm init_algorithm = nn::InitAlgorithm::he;
  double init_scale = 1.0;
  // Optimization
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 256;
  // Upstream
  std::size_t num_classes_upstream = 10;
  std::size_t num_examples_upstream = 10000;
  double epochs_upstream = 10;
  std::size_t total_steps_upstream = 0;  // overrides epochs_upstream when > 0
  // Downstream
  std::size_t num_classes_downstream = 10;
  std::size_t num_examples_downstream = 10000;
  double epochs_downstream = 10;
  std::size_t total_steps_downstream = 0;
  bool rescale_after_pretrain = true;
  std::optional<std::size_t> transfer_layers;  // first_k; nullopt = all
  // Data
  std::string dataset = "synthetic";  // synthetic | cifar10 | gaussian
  std::size_t image_size = 16;
  std::size_t image_channels = 3;
  std::size_t dataset_size = 30000;
  std::vector<double> gaussian_variances;
  std::uint64_t data_seed = 0;
  std::size_t probe_size = 2000;
  // Recording
  std::size_t record_points = 20;
  bool activation_timeline = true;
  bool strict_units = false;
  std::uint64_t seed = 0;

  static std::size_t steps_for(double epochs, std::size_t n, std::size_t batch) {
    const std::size_t b = std::max<std::size_t>(1, std::min(batch, n));
    return static_cast<std::size_t>(std::llround(epochs * static_cast<double>(n) / static_cast<double>(b)));
  }
  std::size_t upstream_steps() const {
    return total_steps_upstream > 0 ? total_steps_upstream
                                    : steps_for(epochs_upstream, num_examples_upstream, batch_size);
  }
  std::size_t downstream_steps() const {
    return total_steps_downstream > 0 ? total_steps_downstream
                                      : steps_for(epochs_downstream, num_examples_downstream, batch_size);
  }
  bool real_downstream_labels() const { return num_classes_downstream == 0; }

  Shape input_shape() const {
    if (dataset == "cifar10") return {32, 32, 3};
    if (dataset == "gaussian") return {1, 1, gaussian_variances.size()};
    return {image_size, image_size, image_channels};
  }

  std::vector<nn::LayerSpec> architecture(std::size_t outputs) const {
    if (!arch.empty()) {
      auto a = nn::parse_arch(arch);
      if (a.empty() || a.back().kind != nn::LayerKind::head) a.push_back(nn::LayerSpec::head(outputs));
      a.back() = nn::LayerSpec::head(outputs);
      return a;
    }
    const auto pad = padding == "same" ? Padding::same : Padding::valid;
    return nn::simple_cnn(num_conv_layers, num_filters, num_units, outputs, pad, pool_window, pool_stride);
  }

  static ExperimentConfig from_config(const Config& c) {
    ExperimentConfig e;
    e.arch = c.get_string("arch", e.arch);
    e.num_conv_layers = c.get_size("num_conv_layers", e.num_conv_layers);
    e.num_filters = c.get_size("num_filters", e.num_filters);
    e.num_units = c.get_size("num_units", e.num_units);
    e.padding = c.get_string("padding", e.padding);
    if (e.padding != "same" && e.padding != "valid") throw ConfigError("padding must be 'same' or 'valid'");
    e.pool_window = c.get_size("pool_window", e.pool_window);
    e.pool_stride = c.get_size("pool_stride", e.pool_stride);
    try {
      e.init_algorithm = nn::parse_init_algorithm(c.get_string("init_algorithm", "he"));
    } catch (const ArgumentError& err) {
      throw ConfigError(err.what());
    }
    e.init_scale = c.get_double("init_scale", e.init_scale);
    e.learning_rate = c.get_double("learning_rate", e.learning_rate);
    e.momentum = c.get_double("momentum", e.momentum);
    e.batch_size = c.get_size("batch_size", e.batch_size);
    e.num_classes_upstream = c.get_size("num_classes_upstream", e.num_classes_upstream);
    e.num_examples_upstream = c.get_size("num_examples_upstream", e.num_examples_upstream);
    e.epochs_upstream = c.get_double("epochs_upstream", e.epochs_upstream);
    e.total_steps_upstream = c.get_size("total_steps_upstream", e.total_steps_upstream);
    e.num_classes_downstream = c.get_size("num_classes_downstream", e.num_classes_downstream);
    e.num_examples_downstream = c.get_size("num_examples_downstream", e.num_examples_downstream);
    e.epochs_downstream = c.get_double("epochs_downstream", e.epochs_downstream);
    e.total_steps_downstream = c.get_size("total_steps_downstream", e.total_steps_downstream);
    e.rescale_after_pretrain = c.get_bool("rescale_after_pretrain", e.rescale_after_pretrain);
    const auto tl = c.get_string("transfer_layers", "all");
    if (tl != "all") {
      if (tl.empty() || !std::all_of(tl.begin(), tl.end(), [](unsigned char ch) { return std::isdigit(ch); }))
        throw ConfigError("transfer_layers must be 'all' or a layer count");
      e.transfer_layers = std::stoull(tl);
    }
    e.dataset = c.get_string("dataset", e.dataset);
    if (e.dataset != "synthetic" && e.dataset != "cifar10" && e.dataset != "gaussian")
      throw ConfigError("dataset must be synthetic, cifar10 or gaussian");
    e.image_size = c.get_size("image_size", e.image_size);
    e.image_channels = c.get_size("image_channels", e.image_channels);
    e.dataset_size = c.get_size("dataset_size", e.dataset_size);
    e.gaussian_variances = c.get_doubles("gaussian_variances", e.gaussian_variances);
    if (e.dataset == "gaussian" && e.gaussian_variances.empty())
      throw ConfigError("dataset = gaussian needs gaussian_variances");
    e.data_seed = c.get_size("data_seed", e.data_seed);
    e.probe_size = c.get_size("probe_size", e.probe_size);
    e.record_points = c.get_size("record_points", e.record_points);
    e.activation_timeline = c.get_bool("activation_timeline", e.activation_timeline);
    e.strict_units = c.get_bool("strict_units", e.strict_units);
    e.seed = c.get_size("seed", e.seed);
    if (!(e.init_scale > 0)) throw ConfigError("init_scale must be positive");
    if (!(e.learning_rate >= 0)) throw ConfigError("learning_rate must be >= 0");
    if (!(e.momentum >= 0 && e.momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (e.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (e.num_classes_upstream == 0) throw ConfigError("num_classes_upstream must be >= 1");
    return e;
  }

  /// Resolved configuration; parsing it back yields an identical config.
  std::string echo() const {
    std::ostringstream os;
    auto num = [](double v) { return io::format_number(v); };
    os << "arch = " << arch << "\n";
    os << "num_conv_layers = " << num_conv_layers << "\n";
    os << "num_filters = " << num_filters << "\n";
    os << "num_units = " << num_units << "\n";
    os << "padding = " << padding << "\n";
    os << "pool_window = " << pool_window << "\n";
    os << "pool_stride = " << pool_stride << "\n";
    os << "init_algorithm = " << nn::init_algorithm_name(init_algorithm) << "\n";
    os << "init_scale = " << num(init_scale) << "\n";
    os << "learning_rate = " << num(learning_rate) << "\n";
    os << "momentum = " << num(momentum) << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "num_classes_upstream = " << num_classes_upstream << "\n";
    os << "num_examples_upstream = " << num_examples_upstream << "\n";
    os << "epochs_upstream = " << num(epochs_upstream) << "\n";
    os << "total_steps_upstream = " << total_steps_upstream << "\n";
    os << "num_classes_downstream = " << num_classes_downstream << "\n";
    os << "num_examples_downstream = " << num_examples_downstream << "\n";
    os << "epochs_downstream = " << num(epochs_downstream) << "\n";
    os << "total_steps_downstream = " << total_steps_downstream << "\n";
    os << "rescale_after_pretrain = " << (rescale_after_pretrain ? "true" : "false") << "\n";
    os << "transfer_layers = " << (transfer_layers ? std::to_string(*transfer_layers) : std::string("all")) << "\n";
    os << "dataset = " << dataset << "\n";
    os << "image_size = " << image_size << "\n";
    os << "image_channels = " << image_channels << "\n";
    os << "dataset_size = " << dataset_size << "\n";
    os << "gaussian_variances = ";
    for (std::size_t i = 0; i < gaussian_variances.size(); ++i) os << (i ? "," : "") << num(gaussian_variances[i]);
    os << "\n";
    os << "data_seed = " << data_seed << "\n";
    os << "probe_size = " << probe_size << "\n";
    os << "record_points = " << record_points << "\n";
    os << "activation_timeline = " << (activation_timeline ? "true" : "false") << "\n";
    os << "strict_units = " << (strict_units ? "true" : "false") << "\n";
    os << "seed = " << seed << "\n";
    return os.str();
  }
};

/// Training pool and held-out probe set for a configuration. `data_dir` is
/// only read for dataset = cifar10.
inline std::pair<data::Dataset, data::Dataset> load_experiment_data(const ExperimentConfig& cfg,
                                                                    const std::filesystem::path& data_dir) {
  if (cfg.dataset == "cifar10") {
    if (!data::cifar10_available(data_dir))
      throw IngestionError("CIFAR-10 binary batches not found under '" + data_dir.string() +
                           "' (set ALIGNLAB_DATA_DIR)");
    auto [train, test] = data::load_cifar10(data_dir);
    return {std::move(train), data::head(test, cfg.probe_size)};
  }
  const std::size_t total = cfg.dataset_size + cfg.probe_size;
  data::Dataset all =
      cfg.dataset == "gaussian"
          ? data::make_gaussian_dataset(cfg.gaussian_variances, total, std::max<std::size_t>(1, cfg.num_classes_upstream),
                                        cfg.data_seed)
          : data::make_synthetic_images(total, cfg.input_shape(), 10, cfg.data_seed);
  std::vector<std::size_t> pool(cfg.dataset_size), probe(cfg.probe_size);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = cfg.dataset_size + i;
  return {data::subset(all, pool), data::subset(all, probe)};
}

// ---------------------------------------------------------------------------
// Activation analytics

struct ActivationHistogram {
  std::size_t layer = 0;                  // index of the ReLU layer
  std::vector<double> neuron_frequency;   // fraction of probe examples activating each neuron
  std::vector<double> example_fraction;   // fraction of neurons active per probe example
  std::size_t probe_size = 0;
  bool per_unit = false;                  // conv: (position, channel) units instead of channels

  double mean_frequency() const {
    if (neuron_frequency.empty()) return 0.0;
    double s = 0.0;
    for (double f : neuron_frequency) s += f;
    return s / static_cast<double>(neuron_frequency.size());
  }
};

template <typename T>
std::vector<std::size_t> relu_layer_indices(const Network<T>& net) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < net.size(); ++i)
    if (net.layer(i).spec.kind == nn::LayerKind::relu) idx.push_back(i);
  return idx;
}

/// Resolves a layer to the ReLU that produces its output.
template <typename T>
std::size_t resolve_relu(const Network<T>& net, std::size_t layer) {
  if (layer < net.size() && net.layer(layer).spec.kind == nn::LayerKind::relu) return layer;
  if (layer + 1 < net.size() && net.layer(layer + 1).spec.kind == nn::LayerKind::relu) return layer + 1;
  throw ArgumentError("layer " + std::to_string(layer) + " has no ReLU output");
}

/// Histograms for several layers from one pass over the probe set. A conv
/// neuron is a channel, active on an example when any position is positive
/// (or each (position, channel) unit separately with per_unit).
template <typename T>
std::vector<ActivationHistogram> activation_histograms(const Network<T>& net, const RowMatrix<float>& probe,
                                                       const std::vector<std::size_t>& layers, bool per_unit = false) {
  std::vector<ActivationHistogram> out;
  std::vector<std::size_t> relu;
  std::vector<std::size_t> positions, channels;
  for (auto l : layers) {
    const auto r = resolve_relu(net, l);
    relu.push_back(r);
    const auto& shape = net.layer(r).out;
    const bool spatial = shape.height * shape.width > 1 && !per_unit;
    positions.push_back(spatial ? shape.height * shape.width : 1);
    channels.push_back(spatial ? shape.channels : shape.size());
    ActivationHistogram h;
    h.layer = r;
    h.per_unit = per_unit;
    h.probe_size = static_cast<std::size_t>(probe.rows());
    h.neuron_frequency.assign(channels.back(), 0.0);
    h.example_fraction.reserve(h.probe_size);
    out.push_back(std::move(h));
  }
  if (out.empty() || probe.rows() == 0) return out;
  const std::size_t upto = *std::max_element(relu.begin(), relu.end()) + 1;
  constexpr Eigen::Index kChunk = 256;
  std::vector<char> active;
  for (Eigen::Index s = 0; s < probe.rows(); s += kChunk) {
    const auto len = std::min(kChunk, probe.rows() - s);
    const auto pass = nn::forward(net, probe.middleRows(s, len), false, upto);
    for (std::size_t k = 0; k < out.size(); ++k) {
      const auto& y = pass.outputs[relu[k]];
      const std::size_t c = channels[k], p = positions[k];
      for (Eigen::Index i = 0; i < len; ++i) {
        const T* row = y.row(i).data();
        active.assign(c, 0);
        for (std::size_t q = 0; q < p; ++q)
          for (std::size_t ch = 0; ch < c; ++ch)
            if (row[q * c + ch] > T(0)) active[ch] = 1;
        std::size_t count = 0;
        for (std::size_t ch = 0; ch < c; ++ch)
          if (active[ch]) {
            out[k].neuron_frequency[ch] += 1.0;
            ++count;
          }
        out[k].example_fraction.push_back(static_cast<double>(count) / static_cast<double>(c));
      }
    }
  }
  for (auto& h : out)
    for (auto& f : h.neuron_frequency) f /= static_cast<double>(h.probe_size);
  return out;
}

template <typename T>
ActivationHistogram activation_histogram(const Network<T>& net, const RowMatrix<float>& probe, std::size_t layer,
                                         bool per_unit = false) {
  return activation_histograms(net, probe, {layer}, per_unit).front();
}

/// Fraction of neurons whose activation frequency is <= threshold.
inline double dead_neuron_fraction(const ActivationHistogram& h, double threshold = 0.0) {
  if (h.neuron_frequency.empty()) return 0.0;
  std::size_t dead = 0;
  for (double f : h.neuron_frequency)
    if (f <= threshold) ++dead;
  return static_cast<double>(dead) / static_cast<double>(h.neuron_frequency.size());
}

/// Mean per-neuron activation frequency per layer at each snapshot.
struct ActivationTimeline {
  std::vector<std::size_t> layers;
  std::vector<std::size_t> steps;
  std::vector<std::string> phases;
  std::vector<std::vector<double>> mean_active;  // [snapshot][layer]
  std::optional<std::size_t> boundary_step;      // first downstream step

  void add(std::size_t step, const std::string& phase, std::vector<double> values) {
    steps.push_back(step);
    phases.push_back(phase);
    mean_active.push_back(std::move(values));
  }
};

template <typename T>
std::vector<double> mean_active_fractions(const Network<T>& net, const RowMatrix<float>& probe,
                                          const std::vector<std::size_t>& layers, bool per_unit) {
  std::vector<double> v;
  for (const auto& h : activation_histograms(net, probe, layers, per_unit)) v.push_back(h.mean_frequency());
  return v;
}

template <typename T>
ActivationTimeline activation_timeline(const std::vector<std::pair<std::size_t, Network<T>>>& snapshots,
                                       const RowMatrix<float>& probe, const std::vector<std::size_t>& layers,
                                       std::optional<std::size_t> boundary_step = std::nullopt,
                                       bool per_unit = false) {
  ActivationTimeline t;
  t.layers = layers;
  t.boundary_step = boundary_step;
  std::optional<std::size_t> prev;
  for (const auto& [step, net] : snapshots) {
    if (prev && step < *prev) throw ArgumentError("activation_timeline: snapshots must be step-ordered");
    prev = step;
    const bool down = boundary_step && step >= *boundary_step;
    t.add(step, down ? "downstream" : "upstream", mean_active_fractions(net, probe, layers, per_unit));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Curves

/// Trapezoidal area under accuracy over steps, normalized by the step span.
inline double auc(const TrainingCurve& curve) {
  const auto& r = curve.records;
  if (r.empty()) throw ArgumentError("auc: empty curve");
  if (r.size() == 1 || r.back().step == r.front().step) return r.front().train_accuracy;
  double area = 0.0;
  for (std::size_t i = 1; i < r.size(); ++i)
    area += static_cast<double>(r[i].step - r[i - 1].step) * 0.5 * (r[i].train_accuracy + r[i - 1].train_accuracy);
  return area / static_cast<double>(r.back().step - r.front().step);
}

// ---------------------------------------------------------------------------
// Transfer runs

struct ActivationSnapshot {
  std::string phase;  // init, end_of_pretrain, end_of_finetune
  std::vector<ActivationHistogram> layers;
};

struct TransferResult {
  ExperimentConfig config;
  TrainingCurve pretrain;
  TrainingCurve finetune;  // pretrained arm
  TrainingCurve scratch;
  double pretrain_auc = 0.0;
  double finetune_auc = 0.0;
  double scratch_auc = 0.0;
  std::vector<ActivationSnapshot> snapshots;
  ActivationTimeline timeline;
  Network<float> initial;
  Network<float> pretrained;  // end of pretraining, before head replacement
  Network<float> finetuned;
  bool ran_pretrained = false;
  bool ran_scratch = false;
};

/// Which arms run_transfer executes.
struct ArmSelection {
  bool pretrained = true;
  bool scratch = true;

  static ArmSelection parse(const std::string& s) {
    if (s.empty() || s == "all") return {};
    if (s == "pretrained") return {true, false};
    if (s == "scratch") return {false, true};
    throw ConfigError("unknown arm '" + s + "' (expected all, pretrained or scratch)");
  }
};

namespace detail {

inline std::vector<std::size_t> record_steps(std::size_t total, std::size_t points) {
  return nn::uniform_steps(total, std::max<std::size_t>(1, points));
}

/// Downstream preparation applied identically to both arms: optional
/// rescale to init norms, fresh head, and re-initialization of every
/// parameterized non-head layer past the first k.
template <typename T>
Network<T> prepare_downstream(const Network<T>& net, const ExperimentConfig& cfg, std::size_t outputs,
                              const SeedStreams& streams) {
  Network<T> out = cfg.rescale_after_pretrain ? nn::rescale_to_init(net) : net;
  out = nn::reinit_head(out, streams.derive("head"), outputs);
  if (cfg.transfer_layers) {
    std::size_t seen = 0;
    for (auto i : out.param_layer_indices()) {
      if (out.layer(i).spec.kind == nn::LayerKind::head) continue;
      if (seen++ >= *cfg.transfer_layers) nn::reinit_layer(out, i, streams.derive("reinit"));
    }
  }
  return out;
}

}  // namespace detail

/// Pretrain on random labels, move to the downstream task, and compare with
/// an arm trained from scratch on identical downstream data and batches.
inline TransferResult run_transfer(const ExperimentConfig& cfg, const data::Dataset& pool, const data::Dataset& probe,
                                   const ArmSelection& arms = {}) {
  const SeedStreams streams(cfg.seed);
  auto [up, down] = data::disjoint_split(pool, cfg.num_examples_upstream, cfg.num_examples_downstream,
                                         streams.derive("split"));
  up = data::relabel_random(std::move(up), cfg.num_classes_upstream, streams.derive("labels_upstream"));
  const std::size_t down_classes = cfg.real_downstream_labels() ? pool.num_classes : cfg.num_classes_downstream;
  if (!cfg.real_downstream_labels())
    down = data::relabel_random(std::move(down), cfg.num_classes_downstream, streams.derive("labels_downstream"));

  TransferResult res;
  res.config = cfg;
  const auto shape = pool.shape;
  res.initial = nn::init_network<float>(shape, cfg.architecture(cfg.num_classes_upstream), cfg.init_algorithm,
                                        cfg.init_scale, streams.derive("init"));
  const auto relus = relu_layer_indices(res.initial);
  res.timeline.layers = relus;
  res.snapshots.push_back({"init", activation_histograms(res.initial, probe.images, relus, cfg.strict_units)});

  const std::size_t up_steps = cfg.upstream_steps();
  const std::size_t down_steps = cfg.downstream_steps();
  auto timeline_hook = [&](std::size_t offset, const std::string& phase) {
    return [&, offset, phase](std::size_t step, const Network<float>& net) {
      res.timeline.add(offset + step, phase, mean_active_fractions(net, probe.images, relus, cfg.strict_units));
    };
  };

  // Upstream phase.
  nn::TrainHooks<float> up_hooks;
  up_hooks.record_steps = detail::record_steps(up_steps, cfg.record_points);
  if (cfg.activation_timeline) {
    up_hooks.snapshot_steps = nn::geometric_steps(up_steps);
    up_hooks.on_snapshot = timeline_hook(0, "upstream");
  }
  const nn::TrainSchedule up_sched{up_steps, cfg.learning_rate, cfg.momentum, cfg.batch_size};
  if (arms.pretrained) {
    try {
      auto [net, curve] = nn::train(res.initial, up.images, up.labels, up_sched, streams.derive("shuffle_upstream"),
                                    up_hooks);
      res.pretrained = std::move(net);
      res.pretrain = std::move(curve);
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.step(), std::string("arm pretrain: ") + e.what());
    }
    res.pretrain_auc = auc(res.pretrain);
    res.snapshots.push_back(
        {"end_of_pretrain", activation_histograms(res.pretrained, probe.images, relus, cfg.strict_units)});
  }

  // Downstream phase, identical data, schedule and shuffle seed for both arms.
  const nn::TrainSchedule down_sched{down_steps, cfg.learning_rate, cfg.momentum, cfg.batch_size};
  nn::TrainHooks<float> down_hooks;
  down_hooks.record_steps = detail::record_steps(down_steps, cfg.record_points);
  if (cfg.real_downstream_labels()) {
    down_hooks.test_images = &probe.images;
    down_hooks.test_labels = probe.labels;
  }
  const auto shuffle_down = streams.derive("shuffle_downstream");
  if (arms.pretrained) {
    auto hooks = down_hooks;
    if (cfg.activation_timeline) {
      res.timeline.boundary_step = up_steps;
      hooks.snapshot_steps = nn::geometric_steps(down_steps);
      hooks.on_snapshot = timeline_hook(up_steps, "downstream");
    }
    const auto start = detail::prepare_downstream(res.pretrained, cfg, down_classes, streams);
    try {
      auto [net, curve] = nn::train(start, down.images, down.labels, down_sched, shuffle_down, hooks);
      res.finetuned = std::move(net);
      res.finetune = std::move(curve);
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.step(), std::string("arm pretrained: ") + e.what());
    }
    res.finetune_auc = auc(res.finetune);
    res.snapshots.push_back(
        {"end_of_finetune", activation_histograms(res.finetuned, probe.images, relus, cfg.strict_units)});
    res.ran_pretrained = true;
  }
  if (arms.scratch) {
    const auto start = detail::prepare_downstream(res.initial, cfg, down_classes, streams);
    try {
      res.scratch = nn::train(start, down.images, down.labels, down_sched, shuffle_down, down_hooks).second;
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.step(), std::string("arm scratch: ") + e.what());
    }
    res.scratch_auc = auc(res.scratch);
    res.ran_scratch = true;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Covariance-sampled first layer versus pretrained first layer

struct CovarianceArmsResult {
  std::vector<std::string> arms;                      // arm names
  std::vector<std::vector<TrainingCurve>> curves;     // [arm][run]
  std::vector<std::vector<double>> aucs;              // [arm][run]
  linalg::SymMatrix filter_covariance;                // pooled covariance of the pretrained first-layer filters
  std::size_t pooled_filters = 0;

  double mean_auc(const std::string& arm) const {
    for (std::size_t a = 0; a < arms.size(); ++a)
      if (arms[a] == arm) {
        double s = 0.0;
        for (double v : aucs[a]) s += v;
        return s / static_cast<double>(aucs[a].size());
      }
    throw ArgumentError("no arm named '" + arm + "'");
  }
};

/// One pretraining run per seed; the first conv layer's filters of all runs
/// (after rescaling when configured) are pooled into a centered covariance.
/// Downstream arms per seed, all sharing data, batches and the freshly drawn
/// dense layers and head:
///   scratch                  fresh network
///   pretrained               pretrained network with a new head
///   pretrained_conv_no_bias  fresh network with the pretrained conv filters, conv bias 0
///   covariance               fresh network with conv filters drawn from N(0, pooled covariance), bias 0
inline CovarianceArmsResult run_covariance_arms(const ExperimentConfig& cfg, const data::Dataset& pool,
                                                const std::vector<std::uint64_t>& seeds,
                                                const std::vector<std::string>& arm_names = {"scratch", "pretrained",
                                                                                             "pretrained_conv_no_bias",
                                                                                             "covariance"},
                                                std::size_t workers = 1) {
  if (seeds.empty()) throw ArgumentError("run_covariance_arms: no seeds");
  const std::set<std::string> known{"scratch", "pretrained", "pretrained_conv_no_bias", "covariance"};
  for (const auto& a : arm_names)
    if (!known.count(a)) throw ConfigError("unknown arm '" + a + "'");
  const std::size_t r = seeds.size();
  struct Run {
    data::Dataset down;
    Network<float> fresh;
    Network<float> pretrained;
  };
  std::vector<Run> runs(r);
  const std::size_t up_steps = cfg.upstream_steps();
  const nn::TrainSchedule up_sched{up_steps, cfg.learning_rate, cfg.momentum, cfg.batch_size};

  auto for_each = [&](std::size_t n, const std::function<void(std::size_t)>& fn) { parallel_for(n, workers, fn); };

  for_each(r, [&](std::size_t i) {
    const SeedStreams streams(seeds[i]);
    auto [up, down] = data::disjoint_split(pool, cfg.num_examples_upstream, cfg.num_examples_downstream,
                                           streams.derive("split"));
    up = data::relabel_random(std::move(up), cfg.num_classes_upstream, streams.derive("labels_upstream"));
    if (!cfg.real_downstream_labels())
      down = data::relabel_random(std::move(down), cfg.num_classes_downstream, streams.derive("labels_downstream"));
    const auto init = nn::init_network<float>(pool.shape, cfg.architecture(cfg.num_classes_upstream),
                                              cfg.init_algorithm, cfg.init_scale, streams.derive("init"));
    Network<float> trained;
    try {
      trained = nn::train(init, up.images, up.labels, up_sched, streams.derive("shuffle_upstream")).first;
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.step(), "arm pretrain (seed " + std::to_string(seeds[i]) + "): " + e.what());
    }
    if (cfg.rescale_after_pretrain) trained = nn::rescale_to_init(trained);
    const std::size_t outputs = cfg.real_downstream_labels() ? pool.num_classes : cfg.num_classes_downstream;
    runs[i].fresh = nn::init_network<float>(pool.shape, cfg.architecture(outputs), cfg.init_algorithm,
                                            cfg.init_scale, streams.derive("downstream_init"));
    runs[i].pretrained = nn::reinit_head(trained, streams.derive("head"), outputs);
    runs[i].down = std::move(down);
  });

  const auto conv = runs[0].fresh.conv_layer_indices();
  if (conv.empty()) throw ArgumentError("run_covariance_arms: network has no conv layer");
  const std::size_t first = conv.front();
  std::vector<linalg::Matrix> filters;
  for (const auto& run : runs) filters.push_back(run.pretrained.layer(first).weights.cast<double>());
  CovarianceArmsResult res;
  const auto [w_mean, w_cov] = alignment::weight_covariance(filters);
  res.filter_covariance = w_cov;
  res.pooled_filters = r * runs[0].fresh.layer(first).spec.filters;
  res.arms = arm_names;
  res.curves.assign(arm_names.size(), std::vector<TrainingCurve>(r));
  res.aucs.assign(arm_names.size(), std::vector<double>(r));

  const std::size_t down_steps = cfg.downstream_steps();
  const nn::TrainSchedule down_sched{down_steps, cfg.learning_rate, cfg.momentum, cfg.batch_size};
  nn::TrainHooks<float> hooks;
  hooks.record_steps = detail::record_steps(down_steps, cfg.record_points);
  for_each(r * arm_names.size(), [&](std::size_t job) {
    const std::size_t a = job / r, i = job % r;
    const SeedStreams streams(seeds[i]);
    const auto& run = runs[i];
    const auto& name = arm_names[a];
    Network<float> start;
    if (name == "scratch") {
      start = run.fresh;
    } else if (name == "pretrained") {
      start = run.pretrained;
    } else if (name == "pretrained_conv_no_bias") {
      start = run.fresh;
      start.layer(first).weights = run.pretrained.layer(first).weights;
      start.layer(first).bias.setZero();
    } else {
      start = run.fresh;
      const auto bank = covinit::sample_from_learned_covariance(linalg::Vector::Zero(w_cov.dim()), w_cov,
                                                                start.layer(first).spec.filters,
                                                                streams.derive("covariance_filters"));
      covinit::install_filters(start, first, bank);
    }
    try {
      res.curves[a][i] =
          nn::train(start, run.down.images, run.down.labels, down_sched, streams.derive("shuffle_downstream"), hooks)
              .second;
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.step(), "arm " + name + " (seed " + std::to_string(seeds[i]) + "): " + e.what());
    }
    res.aucs[a][i] = auc(res.curves[a][i]);
  });
  return res;
}

// ---------------------------------------------------------------------------
// Result bundles

inline io::CsvTable curves_table(const std::vector<std::pair<std::string, const TrainingCurve*>>& curves) {
  io::CsvTable t({"arm", "step", "train_acc", "test_acc", "loss"});
  for (const auto& [arm, curve] : curves)
    for (const auto& r : curve->records)
      t.add_row({arm, static_cast<long long>(r.step), r.train_accuracy,
                 r.test_accuracy ? io::Cell(*r.test_accuracy) : io::Cell(std::string()), r.train_loss});
  return t;
}

inline io::CsvTable activations_table(const std::vector<ActivationSnapshot>& snapshots) {
  io::CsvTable t({"phase", "layer", "neuron", "frequency"});
  for (const auto& s : snapshots)
    for (const auto& h : s.layers)
      for (std::size_t n = 0; n < h.neuron_frequency.size(); ++n)
        t.add_row({s.phase, static_cast<long long>(h.layer), static_cast<long long>(n), h.neuron_frequency[n]});
  return t;
}

inline io::CsvTable example_fractions_table(const std::vector<ActivationSnapshot>& snapshots) {
  io::CsvTable t({"phase", "layer", "example", "active_fraction"});
  for (const auto& s : snapshots)
    for (const auto& h : s.layers)
      for (std::size_t e = 0; e < h.example_fraction.size(); ++e)
        t.add_row({s.phase, static_cast<long long>(h.layer), static_cast<long long>(e), h.example_fraction[e]});
  return t;
}

inline io::CsvTable timeline_table(const ActivationTimeline& tl) {
  io::CsvTable t({"step", "phase", "layer", "mean_active_fraction", "boundary_step"});
  const long long boundary = tl.boundary_step ? static_cast<long long>(*tl.boundary_step) : -1;
  for (std::size_t s = 0; s < tl.steps.size(); ++s)
    for (std::size_t l = 0; l < tl.layers.size(); ++l)
      t.add_row({static_cast<long long>(tl.steps[s]), tl.phases[s], static_cast<long long>(tl.layers[l]),
                 tl.mean_active[s][l], boundary});
  return t;
}

/// config.txt, curves.csv, auc.csv, activations.csv, example_activations.csv,
/// timeline.csv and checkpoints/{initial,pretrained,finetuned}.ckpt.
inline void write_result_bundle(const std::filesystem::path& dir, const TransferResult& r) {
  std::filesystem::create_directories(dir);
  io::write_text_file(dir / "config.txt", r.config.echo());
  std::vector<std::pair<std::string, const TrainingCurve*>> curves;
  io::CsvTable aucs({"arm", "auc"});
  if (r.ran_pretrained) {
    curves.push_back({"pretrain", &r.pretrain});
    curves.push_back({"pretrained", &r.finetune});
    aucs.add_row({std::string("pretrain"), r.pretrain_auc});
    aucs.add_row({std::string("pretrained"), r.finetune_auc});
  }
  if (r.ran_scratch) {
    curves.push_back({"scratch", &r.scratch});
    aucs.add_row({std::string("scratch"), r.scratch_auc});
  }
  curves_table(curves).write(dir / "curves.csv");
  aucs.write(dir / "auc.csv");
  activations_table(r.snapshots).write(dir / "activations.csv");
  example_fractions_table(r.snapshots).write(dir / "example_activations.csv");
  timeline_table(r.timeline).write(dir / "timeline.csv");
  nn::save_checkpoint(dir / "checkpoints" / "initial.ckpt", r.initial);
  if (r.ran_pretrained) {
    nn::save_checkpoint(dir / "checkpoints" / "pretrained.ckpt", r.pretrained);
    nn::save_checkpoint(dir / "checkpoints" / "finetuned.ckpt", r.finetuned);
  }
}

/// Hash of the configuration with the seed removed; groups runs that differ
/// only by seed.
inline std::uint64_t config_hash(ExperimentConfig cfg) {
  cfg.seed = 0;
  return fnv1a(cfg.echo());
}

struct SweepRow {
  std::string group;
  double pretrained_auc = 0.0;
  double scratch_auc = 0.0;
  std::uint64_t hash = 0;
  std::size_t runs = 0;
  std::size_t failures = 0;
};

inline io::CsvTable sweep_table(const std::vector<SweepRow>& rows) {
  io::CsvTable t({"group", "pretrained_auc", "scratch_auc", "config_hash", "runs", "failures"});
  for (const auto& r : rows) {
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.hash));
    t.add_row({r.group, r.pretrained_auc, r.scratch_auc, std::string(hash), static_cast<long long>(r.runs),
               static_cast<long long>(r.failures)});
  }
  return t;
}

}  // namespace alignlab::transfer
