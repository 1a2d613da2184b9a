#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/nn/forward.hpp"
#include "alignlab/nn/network.hpp"
#include "alignlab/seed.hpp"

namespace alignlab::nn {

/// Momentum SGD schedule: base_lr for the first third of the steps, then
/// divided by 3 twice.
struct TrainSchedule {
  std::size_t total_steps = 0;
  double base_lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 256;

  double lr_at(std::size_t step) const {
    if (3 * step < total_steps) return base_lr;
    if (3 * step < 2 * total_steps) return base_lr / 3.0;
    return base_lr / 9.0;
  }
};

struct CurveRecord {
  std::size_t step = 0;
  double train_accuracy = 0.0;
  double train_loss = 0.0;
  std::optional<double> test_accuracy;
};

/// Accuracy/loss on the full training set at recorded steps, plus a hash of
/// every mini-batch's example indices.
struct TrainingCurve {
  std::vector<CurveRecord> records;
  std::vector<std::uint64_t> batch_hashes;

  friend bool operator==(const TrainingCurve& a, const TrainingCurve& b) {
    if (a.records.size() != b.records.size() || a.batch_hashes != b.batch_hashes) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      const auto &x = a.records[i], &y = b.records[i];
      if (x.step != y.step || x.train_accuracy != y.train_accuracy || x.train_loss != y.train_loss ||
          x.test_accuracy != y.test_accuracy)
        return false;
    }
    return true;
  }
};

template <typename T>
using MomentumState = Gradients<T>;

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Index of the largest logit; ties go to the lowest class index.
template <typename Row>
int argmax_row(const Row& row) {
  int best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j)
    if (row(j) > row(best)) best = static_cast<int>(j);
  return best;
}

template <typename T, typename In>
std::vector<int> predict(const Network<T>& net, const Eigen::MatrixBase<In>& data, std::size_t chunk = 512) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(data.rows()));
  for (Eigen::Index start = 0; start < data.rows(); start += static_cast<Eigen::Index>(chunk)) {
    const auto len = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), data.rows() - start);
    const auto pass = forward(net, data.middleRows(start, len), false);
    for (Eigen::Index i = 0; i < len; ++i) out.push_back(argmax_row(pass.logits().row(i)));
  }
  return out;
}

/// Accuracy of argmax predictions and mean cross-entropy over all rows.
template <typename T, typename In>
Evaluation evaluate(const Network<T>& net, const Eigen::MatrixBase<In>& data, std::span<const int> labels,
                    std::size_t chunk = 512) {
  if (static_cast<std::size_t>(data.rows()) != labels.size()) throw ShapeError("evaluate: label count mismatch");
  if (labels.empty()) return {};
  double correct = 0.0;
  double loss = 0.0;
  for (Eigen::Index start = 0; start < data.rows(); start += static_cast<Eigen::Index>(chunk)) {
    const auto len = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), data.rows() - start);
    const auto pass = forward(net, data.middleRows(start, len), false);
    const auto lab = labels.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(len));
    loss += softmax_cross_entropy<T>(pass.logits(), lab, nullptr) * static_cast<double>(len);
    for (Eigen::Index i = 0; i < len; ++i)
      if (argmax_row(pass.logits().row(i)) == lab[static_cast<std::size_t>(i)]) correct += 1.0;
  }
  const auto n = static_cast<double>(labels.size());
  return {correct / n, loss / n};
}

/// One momentum SGD update (v <- m v + g, w <- w - lr v) on the mean
/// cross-entropy of the batch. Returns the pre-update batch loss.
template <typename T, typename In>
double sgd_step(Network<T>& net, const Eigen::MatrixBase<In>& batch, std::span<const int> labels, double lr,
                double momentum, MomentumState<T>& state, std::size_t step = 0) {
  Gradients<T> grads;
  const double loss = loss_and_gradients(net, batch, labels, grads);
  if (!std::isfinite(loss)) throw DivergenceError(step, "non-finite loss");
  if (state.weights.empty()) state = Gradients<T>::zeros_like(net);
  const T m = static_cast<T>(momentum);
  const T eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < net.size(); ++i) {
    auto& layer = net.layer(i);
    if (!layer.has_params()) continue;
    state.weights[i] = m * state.weights[i] + grads.weights[i];
    state.bias[i] = m * state.bias[i] + grads.bias[i];
    layer.weights -= eta * state.weights[i];
    layer.bias -= eta * state.bias[i];
  }
  return loss;
}

inline std::uint64_t hash_indices(std::span<const std::size_t> idx) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto v : idx) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

/// Steps 0, 1, 2, 4, 8, ... below total, plus total.
inline std::vector<std::size_t> geometric_steps(std::size_t total) {
  std::vector<std::size_t> s{0};
  for (std::size_t k = 1; k < total; k *= 2) s.push_back(k);
  if (total > 0) s.push_back(total);
  return s;
}

/// `count` + 1 evenly spaced steps from 0 to total inclusive.
inline std::vector<std::size_t> uniform_steps(std::size_t total, std::size_t count) {
  std::vector<std::size_t> s;
  count = std::max<std::size_t>(count, 1);
  for (std::size_t i = 0; i <= count; ++i) s.push_back(total * i / count);
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

template <typename T>
struct TrainHooks {
  /// Steps (number of completed updates) at which the full training set is
  /// evaluated. Empty means {0, total_steps}.
  std::vector<std::size_t> record_steps;
  const RowMatrix<float>* test_images = nullptr;
  std::span<const int> test_labels;
  /// Called at every record step with the current network.
  std::function<void(std::size_t, const Network<T>&)> on_record;
  /// Extra steps at which only on_snapshot is called (no evaluation).
  std::vector<std::size_t> snapshot_steps;
  std::function<void(std::size_t, const Network<T>&)> on_snapshot;
};

/// Mini-batch momentum SGD. Each epoch draws a fresh seeded permutation; the
/// tail shorter than a batch is dropped. Deterministic for a fixed seed.
template <typename T>
std::pair<Network<T>, TrainingCurve> train(Network<T> net, const RowMatrix<float>& data, std::span<const int> labels,
                                           const TrainSchedule& schedule, std::uint64_t seed,
                                           const TrainHooks<T>& hooks = {}) {
  const auto n = static_cast<std::size_t>(data.rows());
  if (n == 0) throw ArgumentError("train: empty dataset");
  if (labels.size() != n) throw ShapeError("train: label count mismatch");
  const std::size_t batch = std::min(schedule.batch_size, n);

  std::vector<std::size_t> record = hooks.record_steps;
  if (record.empty()) record = {0, schedule.total_steps};
  std::sort(record.begin(), record.end());
  record.erase(std::unique(record.begin(), record.end()), record.end());
  std::vector<std::size_t> snaps = hooks.snapshot_steps;
  std::sort(snaps.begin(), snaps.end());

  TrainingCurve curve;
  auto record_at = [&](std::size_t step) {
    CurveRecord r;
    r.step = step;
    const auto ev = evaluate(net, data, labels);
    r.train_accuracy = ev.accuracy;
    r.train_loss = ev.loss;
    if (hooks.test_images && !hooks.test_labels.empty()) {
      r.test_accuracy = evaluate(net, *hooks.test_images, hooks.test_labels).accuracy;
    }
    curve.records.push_back(r);
    if (hooks.on_record) hooks.on_record(step, net);
  };
  auto rec_it = record.begin();
  auto snap_it = snaps.begin();
  auto visit = [&](std::size_t step) {
    while (rec_it != record.end() && *rec_it < step) ++rec_it;
    if (rec_it != record.end() && *rec_it == step) record_at(step);
    while (snap_it != snaps.end() && *snap_it < step) ++snap_it;
    if (snap_it != snaps.end() && *snap_it == step && hooks.on_snapshot) hooks.on_snapshot(step, net);
  };

  Rng rng(seed);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::size_t cursor = n;  // forces a shuffle before the first batch

  MomentumState<T> state;
  RowMatrix<T> xb(static_cast<Eigen::Index>(batch), data.cols());
  std::vector<int> yb(batch);
  visit(0);
  for (std::size_t step = 0; step < schedule.total_steps; ++step) {
    if (cursor + batch > n) {
      std::shuffle(perm.begin(), perm.end(), rng);
      cursor = 0;
    }
    const std::span<const std::size_t> idx(perm.data() + cursor, batch);
    cursor += batch;
    for (std::size_t i = 0; i < batch; ++i) {
      xb.row(static_cast<Eigen::Index>(i)) = data.row(static_cast<Eigen::Index>(idx[i])).template cast<T>();
      yb[i] = labels[idx[i]];
    }
    curve.batch_hashes.push_back(hash_indices(idx));
    sgd_step(net, xb, yb, schedule.lr_at(step), schedule.momentum, state, step);
    visit(step + 1);
  }
  return {std::move(net), std::move(curve)};
}

}  // namespace alignlab::nn
