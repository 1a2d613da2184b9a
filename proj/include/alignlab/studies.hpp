#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "alignlab/alignment.hpp"
#include "alignlab/covinit.hpp"
#include "alignlab/data.hpp"
#include "alignlab/errors.hpp"
#include "alignlab/io/csv.hpp"
#include "alignlab/linalg.hpp"
#include "alignlab/nn.hpp"
#include "alignlab/parallel.hpp"
#include "alignlab/seed.hpp"
#include "alignlab/transfer.hpp"

// Multi-run drivers shared by the command-line tool and the acceptance
// harness. Each one is a pure function of its inputs and seeds.
namespace alignlab::studies {

using linalg::EigenDecomposition;
using linalg::Matrix;
using linalg::SymMatrix;
using linalg::Vector;
using transfer::ExperimentConfig;

// ---------------------------------------------------------------------------
// First-layer filter statistics over independent runs

struct FilterStudyOptions {
  std::size_t runs = 20;
  std::vector<std::size_t> epochs{0, 10, 20};  // measured epochs; the largest one sets the training length
  bool resample_data = true;                   // fresh inputs (gaussian) or a fresh subset (images) per run
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t max_patches = 200000;
};

/// Per-coordinate test of E[w] = 0. With two or more runs the standard error
/// comes from the spread of per-run filter means, since filters inside one
/// run are coupled through training; a single run falls back to treating
/// its filters as independent.
struct MeanTest {
  long epoch = 0;
  double max_abs_z = 0.0;
  std::size_t worst_coordinate = 0;
  std::string standard_error;  // "runs" or "filters"
};

struct FilterStudyResult {
  std::vector<std::size_t> epochs;
  EigenDecomposition data;
  std::string data_reference;  // "population", "patches" or "inputs"
  bool degenerate_reference = false;
  Matrix random_basis;
  std::vector<std::size_t> completed_runs;
  std::vector<std::string> failures;
  std::vector<std::vector<Matrix>> filters;  // [epoch][completed run], one filter per row
  std::vector<alignment::MisalignmentRow> misalignment;
  std::vector<MeanTest> mean_tests;
  std::vector<alignment::TransferCurve> pooled_curves;  // one per epoch
  std::vector<alignment::TransferCurve> run_curves;     // epoch-major, one per completed run
};

inline MeanTest mean_test(const std::vector<Matrix>& filter_sets, long epoch) {
  if (filter_sets.empty()) throw ArgumentError("mean_test: no filters");
  const Eigen::Index d = filter_sets.front().cols();
  MeanTest t;
  t.epoch = epoch;
  Vector mean, se;
  if (filter_sets.size() >= 2) {
    Matrix means(static_cast<Eigen::Index>(filter_sets.size()), d);
    for (std::size_t r = 0; r < filter_sets.size(); ++r)
      means.row(static_cast<Eigen::Index>(r)) = filter_sets[r].colwise().mean();
    mean = means.colwise().mean();
    const Matrix centered = means.rowwise() - mean.transpose();
    const double n = static_cast<double>(means.rows());
    se = (centered.colwise().squaredNorm().transpose() / (n - 1.0)).cwiseSqrt() / std::sqrt(n);
    t.standard_error = "runs";
  } else {
    const auto& f = filter_sets.front();
    mean = f.colwise().mean();
    const Matrix centered = f.rowwise() - mean.transpose();
    const double n = static_cast<double>(f.rows());
    se = (centered.colwise().squaredNorm().transpose() / std::max(1.0, n - 1.0)).cwiseSqrt() / std::sqrt(n);
    t.standard_error = "filters";
  }
  for (Eigen::Index j = 0; j < d; ++j) {
    const double z = se(j) > 0 ? std::abs(mean(j)) / se(j) : (mean(j) == 0 ? 0.0 : INFINITY);
    if (z > t.max_abs_z || j == 0) {
      t.max_abs_z = z;
      t.worst_coordinate = static_cast<std::size_t>(j);
    }
  }
  return t;
}

/// Mean of per-run curves at each data eigenvector rank.
inline alignment::TransferCurve mean_curve(const std::vector<alignment::TransferCurve>& curves) {
  if (curves.empty()) throw ArgumentError("mean_curve: no curves");
  alignment::TransferCurve out = curves.front();
  out.run_id = "mean";
  for (auto& p : out.points) p.tau = 0.0;
  for (const auto& c : curves) {
    if (c.points.size() != out.points.size()) throw ShapeError("mean_curve: curves differ in length");
    for (std::size_t i = 0; i < c.points.size(); ++i) {
      if (c.points[i].index != out.points[i].index) throw ShapeError("mean_curve: curves order points differently");
      out.points[i].tau += c.points[i].tau;
    }
  }
  for (auto& p : out.points) p.tau /= static_cast<double>(curves.size());
  return out;
}

/// Reference input covariance for the first parameterized layer: the known
/// population covariance for Gaussian data, otherwise the centered
/// covariance of the layer's valid input windows (conv) or of whole inputs
/// (dense).
inline std::pair<SymMatrix, std::string> reference_covariance(const ExperimentConfig& cfg, const data::Dataset& pool,
                                                              const nn::LayerSpec& first, std::size_t max_patches,
                                                              std::uint64_t seed) {
  if (cfg.dataset == "gaussian") {
    Vector v(static_cast<Eigen::Index>(cfg.gaussian_variances.size()));
    for (std::size_t i = 0; i < cfg.gaussian_variances.size(); ++i)
      v(static_cast<Eigen::Index>(i)) = cfg.gaussian_variances[i];
    return {SymMatrix::diagonal(v), "population"};
  }
  if (first.kind == nn::LayerKind::conv)
    return {data::patch_covariance(pool, first.kernel, first.stride, true, max_patches, seed).second, "patches"};
  return {linalg::estimate_covariance(pool.images.cast<double>(), true).second, "inputs"};
}

/// Trains `runs` networks on random labels and records the first parameterized
/// layer's filters at every measured epoch. Runs whose training diverges are
/// listed in `failures` and left out of the pooled statistics.
inline FilterStudyResult run_filter_study(const ExperimentConfig& cfg, const data::Dataset& pool,
                                          const FilterStudyOptions& opt) {
  if (opt.runs == 0) throw ArgumentError("filter study: runs must be >= 1");
  if (opt.epochs.empty()) throw ArgumentError("filter study: no measured epochs");
  auto epochs = opt.epochs;
  std::sort(epochs.begin(), epochs.end());
  epochs.erase(std::unique(epochs.begin(), epochs.end()), epochs.end());

  const std::size_t n = cfg.num_examples_upstream;
  const std::size_t classes = cfg.num_classes_upstream;
  const Shape shape = cfg.input_shape();
  const auto arch = cfg.architecture(classes);
  const nn::Network<float> probe_net(shape, arch);
  const auto params = probe_net.param_layer_indices();
  if (params.size() < 2) throw ArgumentError("filter study: network needs a hidden layer before the head");
  const std::size_t first = params.front();

  const SeedStreams root(opt.seed);
  FilterStudyResult res;
  res.epochs = epochs;
  auto [ref_cov, ref_kind] =
      reference_covariance(cfg, pool, probe_net.layer(first).spec, opt.max_patches, root.derive("reference_patches"));
  res.data = linalg::sym_eig(ref_cov);
  res.data_reference = ref_kind;
  for (const auto& g : res.data.groups) res.degenerate_reference = res.degenerate_reference || g.size() > 1;
  res.random_basis = linalg::random_orthogonal(res.data.eigenvectors.rows(), root.derive("basis"));

  const std::size_t batch = std::min(cfg.batch_size, n);
  const std::size_t steps_per_epoch = n / batch;
  const std::size_t total = epochs.back() * steps_per_epoch;

  std::vector<std::vector<Matrix>> snaps(opt.runs);  // [run][epoch]
  std::vector<std::string> errors(opt.runs);
  parallel_for(opt.runs, opt.workers, [&](std::size_t r) {
    const SeedStreams streams(root.derive("run", r));
    data::Dataset ds;
    if (cfg.dataset == "gaussian" && opt.resample_data) {
      ds = data::make_gaussian_dataset(cfg.gaussian_variances, n, classes, streams.derive("data"));
    } else if (opt.resample_data) {
      ds = data::disjoint_split(pool, n, 0, streams.derive("split")).first;
    } else {
      if (pool.size() < n) throw ArgumentError("filter study: pool smaller than num_examples_upstream");
      ds = data::head(pool, n);
    }
    ds = data::relabel_random(std::move(ds), classes, streams.derive("labels"));
    const auto init = nn::init_network<float>(shape, arch, cfg.init_algorithm, cfg.init_scale, streams.derive("init"));
    nn::TrainHooks<float> hooks;
    for (auto e : epochs) hooks.snapshot_steps.push_back(e * steps_per_epoch);
    snaps[r].reserve(epochs.size());
    hooks.on_snapshot = [&](std::size_t, const nn::Network<float>& net) {
      snaps[r].push_back(net.layer(first).weights.cast<double>());
    };
    try {
      nn::train(init, ds.images, ds.labels, nn::TrainSchedule{total, cfg.learning_rate, cfg.momentum, batch},
                streams.derive("shuffle"), hooks);
    } catch (const DivergenceError& e) {
      errors[r] = "run " + std::to_string(r) + ": " + e.what();
      snaps[r].clear();
    }
  });

  res.filters.assign(epochs.size(), {});
  for (std::size_t r = 0; r < opt.runs; ++r) {
    if (!errors[r].empty()) {
      res.failures.push_back(errors[r]);
      continue;
    }
    res.completed_runs.push_back(r);
    for (std::size_t e = 0; e < epochs.size(); ++e) res.filters[e].push_back(std::move(snaps[r][e]));
  }
  if (res.completed_runs.empty()) throw DivergenceError(0, "filter study: every run diverged");

  for (std::size_t e = 0; e < epochs.size(); ++e) {
    const long epoch = static_cast<long>(epochs[e]);
    const auto [w_mean, w_cov] = alignment::weight_covariance(res.filters[e]);
    alignment::MisalignmentRow row;
    row.epoch = epoch;
    row.data_basis = alignment::misalignment(res.data, w_cov).value;
    row.random_basis = alignment::misalignment_basis(res.random_basis, w_cov);
    row.seed = opt.seed;
    res.misalignment.push_back(row);
    res.mean_tests.push_back(mean_test(res.filters[e], epoch));
    auto pooled = alignment::transfer_function(res.data, w_cov);
    pooled.run_id = "pooled";
    pooled.epoch = epoch;
    res.pooled_curves.push_back(std::move(pooled));
    for (std::size_t k = 0; k < res.completed_runs.size(); ++k) {
      auto c = alignment::transfer_function(res.data, alignment::weight_covariance({res.filters[e][k]}).second);
      c.run_id = std::to_string(res.completed_runs[k]);
      c.epoch = epoch;
      res.run_curves.push_back(std::move(c));
    }
  }
  return res;
}

/// Per-run curves of one measured epoch.
inline std::vector<alignment::TransferCurve> run_curves_at(const FilterStudyResult& r, long epoch) {
  std::vector<alignment::TransferCurve> out;
  for (const auto& c : r.run_curves)
    if (c.epoch == epoch) out.push_back(c);
  return out;
}

inline io::CsvTable mean_test_table(const std::vector<MeanTest>& tests) {
  io::CsvTable t({"epoch", "max_abs_z", "worst_coordinate", "standard_error"});
  for (const auto& m : tests)
    t.add_row({static_cast<long long>(m.epoch), m.max_abs_z, static_cast<long long>(m.worst_coordinate),
               m.standard_error});
  return t;
}

// ---------------------------------------------------------------------------
// Covariance-initialized conv prefixes against plain and pretrained starts

/// One initialization arm. Names:
///   none            plain random initialization
///   1, 1-2, 1-2-3   covariance initialization of that conv prefix
///   <prefix>:sampled  same, filters sampled instead of direct
///   smallest        first layer from the smallest-eigenvalue directions
///   eA-eB           first layer from eigen ranks A..B (1-based, inclusive)
///   pretrained      random-label pretraining, then a fresh head
struct CovinitArm {
  std::string name;
  std::size_t prefix = 0;
  covinit::Mode mode = covinit::Mode::direct;
  bool smallest = false;
  std::optional<std::pair<std::size_t, std::size_t>> ranks;  // 1-based inclusive
  bool pretrained = false;

  static CovinitArm parse(const std::string& text) {
    CovinitArm a;
    a.name = text;
    std::string body = text;
    if (const auto colon = body.find(':'); colon != std::string::npos) {
      const auto mode = body.substr(colon + 1);
      if (mode == "sampled") a.mode = covinit::Mode::sampled;
      else if (mode != "direct") throw ConfigError("arm '" + text + "': mode must be direct or sampled");
      body = body.substr(0, colon);
    }
    if (body == "none") return a;
    if (body == "pretrained") {
      a.pretrained = true;
      return a;
    }
    if (body == "smallest") {
      a.prefix = 1;
      a.smallest = true;
      return a;
    }
    if (body.size() > 1 && body[0] == 'e') {
      const auto dash = body.find("-e");
      if (dash == std::string::npos) throw ConfigError("arm '" + text + "': expected eA-eB");
      try {
        a.ranks = std::make_pair(std::stoul(body.substr(1, dash - 1)), std::stoul(body.substr(dash + 2)));
      } catch (const std::exception&) {
        throw ConfigError("arm '" + text + "': expected eA-eB");
      }
      if (a.ranks->first < 1 || a.ranks->second < a.ranks->first) throw ConfigError("arm '" + text + "': bad rank range");
      a.prefix = 1;
      return a;
    }
    std::size_t expect = 1;
    std::size_t pos = 0;
    while (pos <= body.size()) {
      const auto dash = body.find('-', pos);
      const auto tok = body.substr(pos, dash == std::string::npos ? std::string::npos : dash - pos);
      if (tok != std::to_string(expect)) throw ConfigError("arm '" + text + "': conv layers must be a prefix 1-2-...");
      ++expect;
      if (dash == std::string::npos) break;
      pos = dash + 1;
    }
    a.prefix = expect - 1;
    return a;
  }
};

struct CovinitRow {
  std::string arm;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
};

struct CovinitStudyResult {
  std::vector<CovinitRow> rows;
  std::vector<std::vector<covinit::FilterBank>> banks;  // [arm * seeds + seed index]

  /// Seed-mean train accuracy of an arm at a recorded step.
  double mean_train_accuracy(const std::string& arm, std::size_t step) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.arm == arm && r.step == step) s += r.train_accuracy, ++n;
    if (n == 0) throw ArgumentError("no record for arm '" + arm + "' at step " + std::to_string(step));
    return s / static_cast<double>(n);
  }
};

struct CovinitStudyOptions {
  std::vector<std::string> arms{"none", "1", "1-2", "1-2-3"};
  std::vector<std::size_t> checkpoints{100, 1000};  // the largest one sets the training length
  covinit::TauCurve taus = covinit::TauCurve::constant(1.0);
  std::size_t max_patches = 1000000;
  std::size_t workers = 1;
};

/// Every arm of a seed shares the training subset, the random initialization
/// of all layers it does not replace and the batch order, so arms differ only
/// in how the first layers start. Training uses real labels
/// (num_examples_downstream images); the pretrained arm first trains on
/// num_examples_upstream other images with random labels.
inline CovinitStudyResult run_covinit_study(const ExperimentConfig& cfg, const data::Dataset& pool,
                                            const data::Dataset* test, const std::vector<std::uint64_t>& seeds,
                                            const CovinitStudyOptions& opt) {
  if (seeds.empty()) throw ArgumentError("covinit study: no seeds");
  if (opt.checkpoints.empty()) throw ArgumentError("covinit study: no checkpoints");
  std::vector<CovinitArm> arms;
  for (const auto& a : opt.arms) arms.push_back(CovinitArm::parse(a));
  const bool any_pretrained = std::any_of(arms.begin(), arms.end(), [](const auto& a) { return a.pretrained; });
  const std::size_t total = *std::max_element(opt.checkpoints.begin(), opt.checkpoints.end());
  const std::size_t classes = pool.num_classes;
  if (classes == 0) throw ArgumentError("covinit study: pool has no real labels");

  CovinitStudyResult res;
  const std::size_t jobs = arms.size() * seeds.size();
  std::vector<std::vector<CovinitRow>> rows(jobs);
  res.banks.assign(jobs, {});
  parallel_for(jobs, opt.workers, [&](std::size_t job) {
    const auto& arm = arms[job / seeds.size()];
    const std::uint64_t seed = seeds[job % seeds.size()];
    const SeedStreams streams(seed);
    auto [train_set, extra] = data::disjoint_split(pool, cfg.num_examples_downstream,
                                                   any_pretrained ? cfg.num_examples_upstream : 0,
                                                   streams.derive("split"));
    auto net = nn::init_network<float>(pool.shape, cfg.architecture(classes), cfg.init_algorithm, cfg.init_scale,
                                       streams.derive("init"));
    if (arm.pretrained) {
      const auto up = data::relabel_random(std::move(extra), cfg.num_classes_upstream, streams.derive("labels_upstream"));
      auto up_net = nn::init_network<float>(pool.shape, cfg.architecture(cfg.num_classes_upstream), cfg.init_algorithm,
                                            cfg.init_scale, streams.derive("init"));
      try {
        up_net = nn::train(std::move(up_net), up.images, up.labels,
                           nn::TrainSchedule{cfg.upstream_steps(), cfg.learning_rate, cfg.momentum, cfg.batch_size},
                           streams.derive("shuffle_upstream"))
                     .first;
      } catch (const DivergenceError& e) {
        throw DivergenceError(e.step(), "arm " + arm.name + " pretraining (seed " + std::to_string(seed) + ")");
      }
      if (cfg.rescale_after_pretrain) up_net = nn::rescale_to_init(up_net);
      net = nn::reinit_head(up_net, streams.derive("head"), classes);
    } else if (arm.prefix > 0) {
      covinit::CovinitOptions co;
      co.mode = arm.mode;
      co.taus = opt.taus;
      co.seed = streams.derive("covinit");
      co.max_patches = opt.max_patches;
      const auto conv = net.conv_layer_indices();
      if (arm.prefix > conv.size())
        throw ConfigError("arm " + arm.name + ": network has only " + std::to_string(conv.size()) + " conv layers");
      if (arm.smallest || arm.ranks) {
        const auto& layer = net.layer(conv.front());
        const std::size_t nf = layer.spec.filters, d = layer.fan_in();
        std::vector<std::size_t> idx;
        if (arm.smallest) {
          if (nf > d) throw ConfigError("arm smallest: more filters than input dimensions");
          for (std::size_t i = d - nf; i < d; ++i) idx.push_back(i);
        } else {
          for (std::size_t i = arm.ranks->first; i <= arm.ranks->second; ++i) idx.push_back(i - 1);
          if (idx.size() != nf)
            throw ConfigError("arm " + arm.name + ": rank range must name exactly " + std::to_string(nf) + " directions");
        }
        co.indices = idx;
      }
      std::vector<std::size_t> layers(arm.prefix);
      for (std::size_t i = 0; i < arm.prefix; ++i) layers[i] = i + 1;
      net = covinit::covariance_initialize(std::move(net), train_set, layers, co, &res.banks[job]);
    }
    nn::TrainHooks<float> hooks;
    hooks.record_steps = opt.checkpoints;
    hooks.record_steps.push_back(0);
    if (test) {
      hooks.test_images = &test->images;
      hooks.test_labels = test->labels;
    }
    nn::TrainingCurve curve;
    try {
      curve = nn::train(std::move(net), train_set.images, train_set.labels,
                        nn::TrainSchedule{total, cfg.learning_rate, cfg.momentum, cfg.batch_size},
                        streams.derive("shuffle"), hooks)
                  .second;
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.step(), "arm " + arm.name + " (seed " + std::to_string(seed) + ")");
    }
    for (const auto& rec : curve.records)
      rows[job].push_back({arm.name, seed, rec.step, rec.train_accuracy, rec.test_accuracy});
  });
  for (auto& r : rows) res.rows.insert(res.rows.end(), r.begin(), r.end());
  return res;
}

inline io::CsvTable covinit_table(const CovinitStudyResult& r) {
  io::CsvTable t({"arm", "seed", "step", "train_acc", "test_acc"});
  for (const auto& row : r.rows)
    t.add_row({row.arm, static_cast<long long>(row.seed), static_cast<long long>(row.step), row.train_accuracy,
               row.test_accuracy ? io::Cell(*row.test_accuracy) : io::Cell(std::string())});
  return t;
}

// ---------------------------------------------------------------------------
// Eigenvector reproducibility across disjoint halves

/// k x k patch covariances of two disjoint random subsets of `ds`, compared
/// rank by rank.
inline std::vector<alignment::ReproducibilityRow> patch_reproducibility(const data::Dataset& ds, std::size_t k,
                                                                        std::size_t n_a, std::size_t n_b,
                                                                        std::uint64_t seed, std::size_t max_patches = 0) {
  const SeedStreams streams(seed);
  const auto [a, b] = data::disjoint_split(ds, n_a, n_b, streams.derive("halves"));
  const auto ca = data::patch_covariance(a, k, 1, true, max_patches, streams.derive("patches_a")).second;
  const auto cb = data::patch_covariance(b, k, 1, true, max_patches, streams.derive("patches_b")).second;
  return alignment::reproducibility_from_covariances(ca, cb);
}

/// Pooled first-layer filter covariances of two disjoint groups of networks.
template <typename T>
std::vector<alignment::ReproducibilityRow> filter_reproducibility(const std::vector<nn::Network<T>>& nets) {
  if (nets.size() < 2) throw ArgumentError("filter reproducibility needs at least two networks");
  std::vector<Matrix> a, b;
  for (std::size_t i = 0; i < nets.size(); ++i) {
    const auto idx = nets[i].param_layer_indices().front();
    (i < nets.size() / 2 ? a : b).push_back(nets[i].layer(idx).weights.template cast<double>());
  }
  return alignment::reproducibility_from_covariances(alignment::weight_covariance(a).second,
                                                     alignment::weight_covariance(b).second);
}

}  // namespace alignlab::studies
