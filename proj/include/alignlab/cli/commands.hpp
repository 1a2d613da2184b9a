#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "alignlab/alignment.hpp"
#include "alignlab/config.hpp"
#include "alignlab/covinit.hpp"
#include "alignlab/data.hpp"
#include "alignlab/errors.hpp"
#include "alignlab/io/csv.hpp"
#include "alignlab/linalg.hpp"
#include "alignlab/nn.hpp"
#include "alignlab/seed.hpp"
#include "alignlab/studies.hpp"
#include "alignlab/transfer.hpp"

namespace alignlab::cli {

using linalg::Matrix;
using linalg::SymMatrix;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kIngestionError = 3, kDivergence = 4 };

/// Command names with one-line descriptions, in help order.
inline const std::vector<std::pair<std::string, std::string>>& commands() {
  static const std::vector<std::pair<std::string, std::string>> list{
      {"gaussian-alignment", "train on Gaussian inputs, score first-layer alignment with the input covariance"},
      {"misalign", "misalignment and symmetric KL between two matrices read from CSV"},
      {"fsigma", "transfer curve tau(sigma) of the first layer over training"},
      {"eigmatch", "match weight-covariance eigenvectors to sparse combinations of data eigenvectors"},
      {"covinit", "train from covariance-based first-layer initializations"},
      {"transfer", "pretrain on random labels, then fine-tune against a scratch baseline"},
      {"sweep", "grid of transfer runs over sweep.<key> values"},
      {"activations", "activation statistics and dead neurons across the transfer phases"},
      {"eigencheck", "reproducibility of patch and filter eigenvectors across disjoint halves"}};
  return list;
}

struct CommandSpec {
  std::string command;
  std::filesystem::path config_path;  // empty: every key takes its default
  std::filesystem::path out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::string> arms;  // empty: all arms of the command
  std::string format = "csv";
  int verbosity = 0;
  std::filesystem::path data_dir = "data";
};

/// Progress lines on stderr; silent at verbosity 0.
class Log {
 public:
  explicit Log(int verbosity) : verbosity_(verbosity) {}
  void operator()(const std::string& msg, int level = 1) const {
    if (verbosity_ >= level) std::cerr << "[alignlab] " << msg << '\n';
  }

 private:
  int verbosity_;
};

/// Command-specific keys. Each resolved value is recorded so that the echo
/// reproduces the run exactly.
class Keys {
 public:
  explicit Keys(const Config& c) : c_(c) {}

  std::size_t size(const std::string& key, std::size_t fallback) {
    const auto v = c_.get_size(key, fallback);
    record(key, std::to_string(v));
    return v;
  }
  double number(const std::string& key, double fallback) {
    const auto v = c_.get_double(key, fallback);
    record(key, io::format_number(v));
    return v;
  }
  bool flag(const std::string& key, bool fallback) {
    const auto v = c_.get_bool(key, fallback);
    record(key, v ? "true" : "false");
    return v;
  }
  std::string text(const std::string& key, const std::string& fallback) {
    const auto v = c_.get_string(key, fallback);
    record(key, v);
    return v;
  }
  std::vector<std::size_t> sizes(const std::string& key, const std::vector<std::size_t>& fallback) {
    const auto v = c_.get_sizes(key, fallback);
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    record(key, s);
    return v;
  }
  std::vector<std::string> words(const std::string& key, const std::vector<std::string>& fallback) {
    std::vector<std::string> v;
    if (!c_.has(key)) {
      v = fallback;
      c_.get_string(key, "");
    } else {
      std::istringstream ss(c_.get_string(key, ""));
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        const auto b = tok.find_first_not_of(" \t"), e = tok.find_last_not_of(" \t");
        if (b != std::string::npos) v.push_back(tok.substr(b, e - b + 1));
      }
    }
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    record(key, s);
    return v;
  }

  std::string echo() const { return echo_.str(); }

 private:
  void record(const std::string& key, const std::string& value) { echo_ << key << " = " << value << "\n"; }
  const Config& c_;
  std::ostringstream echo_;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
  if (dynamic_cast<const IngestionError*>(&e)) return kIngestionError;
  if (dynamic_cast<const DivergenceError*>(&e)) return kDivergence;
  return kFailure;
}

namespace detail {

struct Context {
  const CommandSpec& spec;
  Config config;
  Log log;
};

inline Config load_config(const CommandSpec& spec) {
  Config c = spec.config_path.empty() ? Config{} : Config::load(spec.config_path);
  if (spec.seed) c.set("seed", std::to_string(*spec.seed));
  return c;
}

inline std::vector<std::uint64_t> run_seeds(std::uint64_t root, std::size_t runs) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < runs; ++i) seeds.push_back(SeedStreams(root).derive("run", i));
  return seeds;
}

inline void write_echo(const std::filesystem::path& out, const std::string& command,
                       const transfer::ExperimentConfig* cfg, const Keys& keys) {
  std::string text = "# alignlab " + command + "\n";
  if (cfg) text += cfg->echo();
  text += keys.echo();
  io::write_text_file(out / "config.txt", text);
}

inline covinit::TauCurve parse_tau_curve(const std::string& text) {
  const auto colon = text.find(':');
  const auto kind = text.substr(0, colon);
  const auto rest = colon == std::string::npos ? std::string() : text.substr(colon + 1);
  std::vector<double> values;
  std::istringstream ss(rest);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      values.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("tau_curve: bad number '" + tok + "'");
    }
  }
  try {
    if (kind == "constant" && values.size() == 1) return covinit::TauCurve::constant(values[0]);
    if (kind == "table" && !values.empty()) return covinit::TauCurve::from_table(values);
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("tau_curve: ") + e.what());
  }
  throw ConfigError("tau_curve must be 'constant:<c>' or 'table:<t1>,<t2>,...'");
}

inline std::vector<std::string> select_arms(const CommandSpec& spec, const std::vector<std::string>& configured) {
  if (spec.arms.empty()) return configured;
  for (const auto& a : spec.arms)
    if (std::find(configured.begin(), configured.end(), a) == configured.end())
      throw ConfigError("--arm " + a + " is not one of the configured arms");
  std::vector<std::string> out;
  for (const auto& a : configured)
    if (std::find(spec.arms.begin(), spec.arms.end(), a) != spec.arms.end()) out.push_back(a);
  return out;
}

inline io::CsvTable matrix_table(const Matrix& m) {
  std::vector<std::string> cols;
  for (Eigen::Index j = 0; j < m.cols(); ++j) cols.push_back("c" + std::to_string(j));
  io::CsvTable t(cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<io::Cell> row;
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.emplace_back(m(i, j));
    t.add_row(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------

struct FilterStudyKeys {
  studies::FilterStudyOptions opt;
};

inline studies::FilterStudyResult filter_study(Context& ctx, Keys& keys, const transfer::ExperimentConfig& cfg,
                                               const std::vector<std::size_t>& default_epochs) {
  studies::FilterStudyOptions opt;
  opt.runs = keys.size("runs", 20);
  opt.epochs = keys.sizes("measure_epochs", default_epochs);
  opt.resample_data = keys.flag("resample_data", true);
  opt.max_patches = keys.size("max_patches", 200000);
  opt.seed = cfg.seed;
  opt.workers = ctx.spec.workers;
  ctx.config.reject_unknown();
  data::Dataset pool;
  if (cfg.dataset != "gaussian" || !opt.resample_data) pool = transfer::load_experiment_data(cfg, ctx.spec.data_dir).first;
  ctx.log("training " + std::to_string(opt.runs) + " runs");
  return studies::run_filter_study(cfg, pool, opt);
}

inline void write_study_report(const std::filesystem::path& out, const studies::FilterStudyResult& r) {
  std::ostringstream os;
  os << "data_reference = " << r.data_reference << "\n";
  os << "degenerate_reference = " << (r.degenerate_reference ? "true" : "false") << "\n";
  os << "completed_runs = " << r.completed_runs.size() << "\n";
  os << "failed_runs = " << r.failures.size() << "\n";
  for (const auto& f : r.failures) os << "# " << f << "\n";
  io::write_text_file(out / "report.txt", os.str());
}

inline int cmd_gaussian_alignment(Context& ctx) {
  const auto cfg = transfer::ExperimentConfig::from_config(ctx.config);
  Keys keys(ctx.config);
  const auto r = filter_study(ctx, keys, cfg, {0, 10, 20, 30, 40, 50});
  const auto& out = ctx.spec.out_dir;
  write_echo(out, "gaussian-alignment", &cfg, keys);
  alignment::misalignment_table(r.misalignment).write(out / "misalignment.csv");
  studies::mean_test_table(r.mean_tests).write(out / "mean_test.csv");
  write_study_report(out, r);
  if (r.degenerate_reference)
    ctx.log("input covariance has repeated eigenvalues; data and random basis scores are not comparable", 0);
  return r.failures.empty() ? kOk : kDivergence;
}

inline int cmd_fsigma(Context& ctx) {
  const auto cfg = transfer::ExperimentConfig::from_config(ctx.config);
  Keys keys(ctx.config);
  const auto r = filter_study(ctx, keys, cfg, {5, 10, 20, 40});
  const auto& out = ctx.spec.out_dir;
  write_echo(out, "fsigma", &cfg, keys);
  std::vector<alignment::TransferCurve> curves = r.pooled_curves;
  for (auto e : r.epochs) {
    auto m = studies::mean_curve(studies::run_curves_at(r, static_cast<long>(e)));
    m.epoch = static_cast<long>(e);
    curves.push_back(std::move(m));
  }
  curves.insert(curves.end(), r.run_curves.begin(), r.run_curves.end());
  alignment::transfer_curve_table(curves).write(out / "transfer_curve.csv");
  write_study_report(out, r);
  return r.failures.empty() ? kOk : kDivergence;
}

inline int cmd_misalign(Context& ctx) {
  Keys keys(ctx.config);
  const auto path_a = keys.text("matrix_a", "");
  const auto path_b = keys.text("matrix_b", "");
  const auto basis_path = keys.text("basis", "");
  const double tol = keys.number("degeneracy_tol", linalg::kDefaultDegeneracyTol);
  const auto resolution = keys.size("oracle_resolution", 0);
  ctx.config.reject_unknown();
  if (path_a.empty() || path_b.empty()) throw ConfigError("misalign needs matrix_a and matrix_b");
  auto read = [](const std::string& p) {
    try {
      return linalg::read_matrix_csv(p);
    } catch (const IngestionError&) {
      throw;
    } catch (const Error& e) {
      throw IngestionError(p + ": " + e.what());
    }
  };
  const SymMatrix a(read(path_a)), b(read(path_b));
  const auto dec = linalg::sym_eig(a, tol);
  io::CsvTable t({"measure", "value"});
  t.add_row({std::string("misalignment_eigenspaces"), alignment::misalignment(dec, b).value});
  if (!basis_path.empty()) t.add_row({std::string("misalignment_basis"), alignment::misalignment_basis(read(basis_path), b)});
  if (resolution > 0)
    t.add_row({std::string("misalignment_oracle"), alignment::misalignment_oracle(dec, b, resolution)});
  t.add_row({std::string("sym_kl"), alignment::sym_kl(a, b)});
  write_echo(ctx.spec.out_dir, "misalign", nullptr, keys);
  t.write(ctx.spec.out_dir / "misalignment.csv");
  return kOk;
}

inline int cmd_eigmatch(Context& ctx) {
  const auto cfg = transfer::ExperimentConfig::from_config(ctx.config);
  Keys keys(ctx.config);
  const double threshold = keys.number("match_threshold", 0.3);
  const auto top_m = keys.size("top_m", 16);
  const bool png = keys.flag("png", true);
  const auto r = filter_study(ctx, keys, cfg, {20});
  const auto& out = ctx.spec.out_dir;
  write_echo(out, "eigmatch", &cfg, keys);
  const auto w_cov = alignment::weight_covariance(r.filters.back()).second;
  const auto w_dec = linalg::sym_eig(w_cov);
  const auto report = alignment::match_eigenvectors(w_dec, r.data, threshold, top_m);
  alignment::eigen_match_table(report).write(out / "eigen_match.csv");
  write_study_report(out, r);
  const nn::Network<float> shape_net(cfg.input_shape(), cfg.architecture(cfg.num_classes_upstream));
  const auto& first = shape_net.layer(shape_net.param_layer_indices().front());
  if (png && first.spec.kind == nn::LayerKind::conv) {
    const auto m = std::min<Eigen::Index>(static_cast<Eigen::Index>(top_m), w_dec.dim());
    alignment::write_eigenvector_png(out / "weight_eigenvectors.png", w_dec.eigenvectors.leftCols(m), first.spec.kernel,
                                     first.in.channels);
    Matrix combos = Matrix::Zero(w_dec.dim(), m);
    for (Eigen::Index i = 0; i < m; ++i)
      if (report.entries[static_cast<std::size_t>(i)].combination.size() > 0)
        combos.col(i) = report.entries[static_cast<std::size_t>(i)].combination;
    alignment::write_eigenvector_png(out / "matched_combinations.png", combos, first.spec.kernel, first.in.channels);
    alignment::write_eigenvector_png(out / "data_eigenvectors.png", r.data.eigenvectors.leftCols(m), first.spec.kernel,
                                     first.in.channels);
  }
  return r.failures.empty() ? kOk : kDivergence;
}

inline int cmd_covinit(Context& ctx) {
  const auto cfg = transfer::ExperimentConfig::from_config(ctx.config);
  Keys keys(ctx.config);
  studies::CovinitStudyOptions opt;
  opt.arms = select_arms(ctx.spec, keys.words("arms", {"none", "1", "1-2", "1-2-3", "pretrained"}));
  opt.checkpoints = keys.sizes("record_iterations", {100, 1000});
  opt.taus = parse_tau_curve(keys.text("tau_curve", "constant:1"));
  opt.max_patches = keys.size("max_patches", 1000000);
  opt.workers = ctx.spec.workers;
  const auto runs = keys.size("runs", 3);
  ctx.config.reject_unknown();
  for (const auto& a : opt.arms) studies::CovinitArm::parse(a);
  auto [pool, probe] = transfer::load_experiment_data(cfg, ctx.spec.data_dir);
  const auto seeds = run_seeds(cfg.seed, runs);
  ctx.log("covinit: " + std::to_string(opt.arms.size()) + " arms x " + std::to_string(runs) + " seeds");
  const auto r = studies::run_covinit_study(cfg, pool, probe.size() ? &probe : nullptr, seeds, opt);
  const auto& out = ctx.spec.out_dir;
  write_echo(out, "covinit", &cfg, keys);
  studies::covinit_table(r).write(out / "covinit.csv");
  io::CsvTable summary({"arm", "step", "mean_train_acc", "mean_test_acc", "runs"});
  for (const auto& arm : opt.arms)
    for (auto step : opt.checkpoints) {
      double tr = 0, te = 0;
      std::size_t n = 0, nt = 0;
      for (const auto& row : r.rows)
        if (row.arm == arm && row.step == step) {
          tr += row.train_accuracy, ++n;
          if (row.test_accuracy) te += *row.test_accuracy, ++nt;
        }
      summary.add_row({arm, static_cast<long long>(step), tr / static_cast<double>(std::max<std::size_t>(n, 1)),
                       nt ? io::Cell(te / static_cast<double>(nt)) : io::Cell(std::string()),
                       static_cast<long long>(n)});
    }
  summary.write(out / "covinit_summary.csv");
  for (std::size_t a = 0; a < opt.arms.size(); ++a) {
    const auto& banks = r.banks[a * seeds.size()];
    for (std::size_t l = 0; l < banks.size(); ++l)
      covinit::write_filter_bank(out / "banks" / (opt.arms[a] + "_layer" + std::to_string(l + 1) + ".fbank"), banks[l],
                                 "conv_hwc");
  }
  return kOk;
}

inline int transfer_pair(Context& ctx, const transfer::ExperimentConfig& cfg, Keys& keys) {
  ctx.config.reject_unknown();
  const auto arms = select_arms(ctx.spec, {"pretrained", "scratch"});
  const auto sel = arms.size() == 2 ? transfer::ArmSelection{} : transfer::ArmSelection::parse(arms.front());
  auto [pool, probe] = transfer::load_experiment_data(cfg, ctx.spec.data_dir);
  ctx.log("transfer: pretraining " + std::to_string(cfg.upstream_steps()) + " steps");
  const auto r = transfer::run_transfer(cfg, pool, probe, sel);
  transfer::write_result_bundle(ctx.spec.out_dir, r);
  write_echo(ctx.spec.out_dir, "transfer", &cfg, keys);
  return kOk;
}

inline int transfer_covariance(Context& ctx, const transfer::ExperimentConfig& cfg, Keys& keys) {
  const auto runs = keys.size("runs", 5);
  ctx.config.reject_unknown();
  const auto arms = select_arms(ctx.spec, {"scratch", "pretrained", "pretrained_conv_no_bias", "covariance"});
  auto [pool, probe] = transfer::load_experiment_data(cfg, ctx.spec.data_dir);
  const auto seeds = run_seeds(cfg.seed, runs);
  ctx.log("covariance arms: " + std::to_string(runs) + " seeds");
  const auto r = transfer::run_covariance_arms(cfg, pool, seeds, arms, ctx.spec.workers);
  const auto& out = ctx.spec.out_dir;
  write_echo(out, "transfer", &cfg, keys);
  io::CsvTable aucs({"arm", "run", "auc"}), curves({"arm", "run", "step", "train_acc", "loss"}),
      summary({"arm", "mean_auc", "sd_auc", "runs"});
  for (std::size_t a = 0; a < r.arms.size(); ++a) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      aucs.add_row({r.arms[a], static_cast<long long>(i), r.aucs[a][i]});
      for (const auto& rec : r.curves[a][i].records)
        curves.add_row({r.arms[a], static_cast<long long>(i), static_cast<long long>(rec.step), rec.train_accuracy,
                        rec.train_loss});
      s += r.aucs[a][i];
      s2 += r.aucs[a][i] * r.aucs[a][i];
    }
    const double n = static_cast<double>(seeds.size());
    const double sd = n > 1 ? std::sqrt(std::max(0.0, (s2 - s * s / n) / (n - 1))) : 0.0;
    summary.add_row({r.arms[a], s / n, sd, static_cast<long long>(seeds.size())});
  }
  aucs.write(out / "covariance_arms_auc.csv");
  curves.write(out / "covariance_arms_curves.csv");
  summary.write(out / "covariance_arms_summary.csv");
  matrix_table(r.filter_covariance.matrix()).write(out / "filter_covariance.csv");
  return kOk;
}

inline int cmd_transfer(Context& ctx) {
  const auto cfg = transfer::ExperimentConfig::from_config(ctx.config);
  Keys keys(ctx.config);
  const auto mode = keys.text("transfer_mode", "pair");
  if (mode == "pair") return transfer_pair(ctx, cfg, keys);
  if (mode == "covariance") return transfer_covariance(ctx, cfg, keys);
  throw ConfigError("transfer_mode must be 'pair' or 'covariance'");
}

inline int cmd_sweep(Context& ctx) {
  const auto base = transfer::ExperimentConfig::from_config(ctx.config);
  Keys keys(ctx.config);
  const auto runs = keys.size("runs", 3);
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& k : ctx.config.keys_with_prefix("sweep.")) {
    std::vector<std::string> values;
    std::istringstream ss(ctx.config.get_string(k, ""));
    for (std::string tok; std::getline(ss, tok, ',');) {
      const auto b = tok.find_first_not_of(" \t"), e = tok.find_last_not_of(" \t");
      if (b != std::string::npos) values.push_back(tok.substr(b, e - b + 1));
    }
    if (values.empty()) throw ConfigError(k + " lists no values");
    axes.push_back({k.substr(6), values});
    keys.text(k, ctx.config.get_string(k, ""));
  }
  ctx.config.reject_unknown();
  if (axes.empty()) throw ConfigError("sweep needs at least one 'sweep.<key> = v1,v2,...' line");

  // Expand the grid; the last axis varies fastest.
  std::vector<std::vector<std::size_t>> grid{{}};
  for (const auto& ax : axes) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& g : grid)
      for (std::size_t v = 0; v < ax.second.size(); ++v) {
        auto h = g;
        h.push_back(v);
        next.push_back(std::move(h));
      }
    grid = std::move(next);
  }
  std::vector<std::pair<std::string, transfer::ExperimentConfig>> groups;
  for (const auto& g : grid) {
    Config c = ctx.config;
    std::string label;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      c.set(axes[a].first, axes[a].second[g[a]]);
      label += (a ? ";" : "") + axes[a].first + "=" + axes[a].second[g[a]];
    }
    groups.push_back({label, transfer::ExperimentConfig::from_config(c)});
  }

  const auto& out = ctx.spec.out_dir;
  write_echo(out, "sweep", &base, keys);
  const auto seeds = run_seeds(base.seed, runs);
  struct Cell {
    double pretrained = 0, scratch = 0;
    std::string error;
    int code = kOk;
  };
  std::vector<Cell> cells(groups.size() * seeds.size());
  std::map<std::string, std::pair<data::Dataset, data::Dataset>> data_cache;
  for (const auto& [label, cfg] : groups) {
    const auto key = cfg.dataset + "|" + std::to_string(cfg.dataset_size) + "|" + std::to_string(cfg.probe_size) + "|" +
                     std::to_string(cfg.image_size) + "|" + std::to_string(cfg.data_seed);
    if (!data_cache.count(key)) data_cache.emplace(key, transfer::load_experiment_data(cfg, ctx.spec.data_dir));
  }
  parallel_for(cells.size(), ctx.spec.workers, [&](std::size_t job) {
    const auto& [label, group_cfg] = groups[job / seeds.size()];
    auto cfg = group_cfg;
    cfg.seed = seeds[job % seeds.size()];
    cfg.activation_timeline = false;
    const auto key = cfg.dataset + "|" + std::to_string(cfg.dataset_size) + "|" + std::to_string(cfg.probe_size) + "|" +
                     std::to_string(cfg.image_size) + "|" + std::to_string(cfg.data_seed);
    const auto& [pool, probe] = data_cache.at(key);
    try {
      const auto r = transfer::run_transfer(cfg, pool, probe);
      cells[job].pretrained = r.finetune_auc;
      cells[job].scratch = r.scratch_auc;
    } catch (const Error& e) {
      cells[job].error = e.what();
      cells[job].code = exit_code_for(e);
    }
    ctx.log("sweep " + label + " seed " + std::to_string(job % seeds.size()) +
            (cells[job].error.empty() ? " done" : " failed: " + cells[job].error));
  });

  std::vector<transfer::SweepRow> rows;
  io::CsvTable per_run({"group", "run", "pretrained_auc", "scratch_auc", "status"});
  int code = kOk;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    transfer::SweepRow row;
    row.group = groups[g].first;
    row.hash = transfer::config_hash(groups[g].second);
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& c = cells[g * seeds.size() + s];
      per_run.add_row({row.group, static_cast<long long>(s), c.error.empty() ? io::Cell(c.pretrained) : io::Cell(""),
                       c.error.empty() ? io::Cell(c.scratch) : io::Cell(""),
                       c.error.empty() ? std::string("ok") : c.error});
      if (!c.error.empty()) {
        ++row.failures;
        if (code == kOk) code = c.code;
        continue;
      }
      ++row.runs;
      row.pretrained_auc += c.pretrained;
      row.scratch_auc += c.scratch;
    }
    if (row.runs) {
      row.pretrained_auc /= static_cast<double>(row.runs);
      row.scratch_auc /= static_cast<double>(row.runs);
    }
    rows.push_back(row);
    io::write_text_file(out / "groups" / ("group_" + std::to_string(g) + ".txt"), groups[g].second.echo());
  }
  transfer::sweep_table(rows).write(out / "sweep.csv");
  per_run.write(out / "sweep_runs.csv");
  return code;
}

inline int cmd_activations(Context& ctx) {
  const auto cfg = transfer::ExperimentConfig::from_config(ctx.config);
  Keys keys(ctx.config);
  const double threshold = keys.number("dead_threshold", 0.0);
  ctx.config.reject_unknown();
  const auto arms = select_arms(ctx.spec, {"pretrained", "scratch"});
  const auto sel = arms.size() == 2 ? transfer::ArmSelection{} : transfer::ArmSelection::parse(arms.front());
  auto [pool, probe] = transfer::load_experiment_data(cfg, ctx.spec.data_dir);
  const auto r = transfer::run_transfer(cfg, pool, probe, sel);
  const auto& out = ctx.spec.out_dir;
  write_echo(out, "activations", &cfg, keys);
  transfer::activations_table(r.snapshots).write(out / "activations.csv");
  transfer::example_fractions_table(r.snapshots).write(out / "example_activations.csv");
  transfer::timeline_table(r.timeline).write(out / "timeline.csv");
  io::CsvTable dead({"phase", "layer", "dead_fraction", "mean_frequency"});
  for (const auto& s : r.snapshots)
    for (const auto& h : s.layers) {
      double mean = 0;
      for (double f : h.neuron_frequency) mean += f;
      mean /= static_cast<double>(std::max<std::size_t>(1, h.neuron_frequency.size()));
      dead.add_row({s.phase, static_cast<long long>(h.layer), transfer::dead_neuron_fraction(h, threshold), mean});
    }
  dead.write(out / "dead_neurons.csv");
  return kOk;
}

inline int cmd_eigencheck(Context& ctx) {
  const auto cfg = transfer::ExperimentConfig::from_config(ctx.config);
  Keys keys(ctx.config);
  const auto k = keys.size("patch_size", 5);
  const auto half_a = keys.size("half_a", 0);
  const auto half_b = keys.size("half_b", 0);
  const auto max_patches = keys.size("max_patches", 0);
  const auto checkpoints = keys.words("checkpoints", {});
  ctx.config.reject_unknown();
  auto pool = transfer::load_experiment_data(cfg, ctx.spec.data_dir).first;
  const std::size_t a = half_a ? half_a : pool.size() / 2;
  const std::size_t b = half_b ? half_b : pool.size() - a;
  const auto rows = studies::patch_reproducibility(pool, k, a, b, SeedStreams(cfg.seed).derive("eigencheck"), max_patches);
  auto table = alignment::reproducibility_table(rows, "patches");
  if (!checkpoints.empty()) {
    std::vector<nn::Network<double>> nets;
    for (const auto& p : checkpoints) nets.push_back(nn::load_checkpoint<double>(p));
    for (const auto& row : studies::filter_reproducibility(nets))
      table.add_row({std::string("filters"), static_cast<long long>(row.index + 1), row.eigenvalue_a, row.abs_inner});
  }
  const auto& out = ctx.spec.out_dir;
  write_echo(out, "eigencheck", &cfg, keys);
  table.write(out / "reproducibility.csv");
  return kOk;
}

}  // namespace detail

/// Runs one command. Errors propagate as exceptions; callers map them with
/// exit_code_for.
inline int run_command(const CommandSpec& spec) {
  if (spec.format != "csv") throw ConfigError("--format supports only csv");
  if (spec.workers == 0) throw ConfigError("--workers must be >= 1");
  detail::Context ctx{spec, detail::load_config(spec), Log(spec.verbosity)};
  std::filesystem::create_directories(spec.out_dir);
  const auto& c = spec.command;
  if (c == "gaussian-alignment") return detail::cmd_gaussian_alignment(ctx);
  if (c == "fsigma") return detail::cmd_fsigma(ctx);
  if (c == "misalign") return detail::cmd_misalign(ctx);
  if (c == "eigmatch") return detail::cmd_eigmatch(ctx);
  if (c == "covinit") return detail::cmd_covinit(ctx);
  if (c == "transfer") return detail::cmd_transfer(ctx);
  if (c == "sweep") return detail::cmd_sweep(ctx);
  if (c == "activations") return detail::cmd_activations(ctx);
  if (c == "eigencheck") return detail::cmd_eigencheck(ctx);
  throw ConfigError("unknown command '" + c + "'");
}

}  // namespace alignlab::cli
