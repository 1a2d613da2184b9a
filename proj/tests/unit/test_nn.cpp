#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "alignlab/data.hpp"
#include "alignlab/nn.hpp"
#include "test_util.hpp"

using namespace alignlab;
using nn::LayerSpec;
using nn::Network;

namespace {

RowMatrix<double> random_inputs(std::size_t n, std::size_t d, std::uint64_t seed) {
  return fixtures::random_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d), seed);
}

std::vector<int> random_labels(std::size_t n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

template <typename T>
double batch_loss(const Network<T>& net, const RowMatrix<double>& x, const std::vector<int>& y) {
  return nn::softmax_cross_entropy<T>(nn::forward(net, x, false).logits(), y, nullptr);
}

// Central differences on up to `samples` parameters per layer; returns the
// worst relative error max|g - fd| / max(|g|, |fd|, 1e-6).
double worst_fd_error(Network<double> net, const RowMatrix<double>& x, const std::vector<int>& y,
                      std::size_t samples, std::uint64_t seed) {
  // Nonzero biases keep pre-activations off the ReLU kink at zero.
  Rng rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.3);
  for (std::size_t i = 0; i < net.size(); ++i)
    if (net.layer(i).has_params())
      for (Eigen::Index k = 0; k < net.layer(i).bias.size(); ++k) net.layer(i).bias(k) = jitter(rng);
  nn::Gradients<double> g;
  nn::loss_and_gradients(net, x, y, g);
  const double eps = 1e-5;
  double worst = 0.0;
  auto check = [&](double& p, double analytic) {
    const double keep = p;
    p = keep + eps;
    const double up = batch_loss(net, x, y);
    p = keep - eps;
    const double down = batch_loss(net, x, y);
    p = keep;
    const double fd = (up - down) / (2 * eps);
    const double scale = std::max({std::abs(analytic), std::abs(fd), 1e-6});
    worst = std::max(worst, std::abs(analytic - fd) / scale);
  };
  for (std::size_t i = 0; i < net.size(); ++i) {
    auto& l = net.layer(i);
    if (!l.has_params()) continue;
    // Weights are units x fan_in; biases have one entry per unit.
    std::uniform_int_distribution<Eigen::Index> r(0, l.weights.rows() - 1), c(0, l.weights.cols() - 1);
    for (std::size_t s = 0; s < samples; ++s) {
      const auto a = r(rng), b = c(rng);
      check(l.weights(a, b), g.weights[i](a, b));
      check(l.bias(a), g.bias[i](a));
    }
  }
  return worst;
}

}  // namespace

TEST(Init, HeStandardDeviation) {
  const auto net = nn::init_network<double>({1, 1, 100}, {LayerSpec::dense(100), LayerSpec::head(2)},
                                            nn::InitAlgorithm::he, 1.0, 3);
  const auto& w = net.layer(0).weights;
  const double sd = std::sqrt(w.array().square().mean());
  EXPECT_NEAR(sd, std::sqrt(2.0 / 100.0), 0.1 * std::sqrt(2.0 / 100.0));
}

TEST(Init, BiasesAreZeroAndSeedsDeterministic) {
  const auto arch = nn::simple_cnn(2, 4, 8, 3);
  const auto a = nn::init_network<float>({6, 6, 3}, arch, nn::InitAlgorithm::he, 1.3, 9);
  const auto b = nn::init_network<float>({6, 6, 3}, arch, nn::InitAlgorithm::he, 1.3, 9);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a.layer(i).has_params()) continue;
    EXPECT_EQ(a.layer(i).bias.cwiseAbs().maxCoeff(), 0.0f);
    EXPECT_EQ(a.layer(i).weights, b.layer(i).weights);
  }
}

TEST(Init, OrthogonalRowsAreOrthonormal) {
  const auto net = nn::init_network<double>({1, 1, 10}, {LayerSpec::dense(6), LayerSpec::head(2)},
                                            nn::InitAlgorithm::orthogonal, 1.0, 4);
  const auto& w = net.layer(0).weights;
  EXPECT_LT((w * w.transpose() - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Init, RejectsNonPositiveScale) {
  EXPECT_THROW(nn::init_network<float>({1, 1, 2}, nn::mlp({2}, 2), nn::InitAlgorithm::he, 0.0, 1), ArgumentError);
}

TEST(Forward, ZeroNetworkGivesZeroLogits) {
  Network<double> net({1, 1, 4}, nn::mlp({5}, 3));
  const auto pass = nn::forward(net, random_inputs(3, 4, 1));
  EXPECT_EQ(pass.logits().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Forward, SingleReluNeuron) {
  Network<double> net({1, 1, 2}, {LayerSpec::dense(1), LayerSpec::relu(), LayerSpec::head(1)});
  net.layer(0).weights << 1, -1;
  RowMatrix<double> x(1, 2);
  x << 2, 1;
  EXPECT_DOUBLE_EQ(nn::forward(net, x).outputs[1](0, 0), 1.0);
}

// Blocked GEMM kernels may round rows differently, so equality is up to ulps.
TEST(Forward, IdenticalRowsGiveIdenticalLogits) {
  const auto net = nn::init_network<double>({5, 5, 2}, nn::simple_cnn(1, 3, 4, 3, Padding::same, 2, 2),
                                            nn::InitAlgorithm::he, 1.0, 2);
  RowMatrix<double> x(2, 50);
  x.row(0) = random_inputs(1, 50, 7).row(0);
  x.row(1) = x.row(0);
  const auto pass = nn::forward(net, x);
  EXPECT_LT((pass.logits().row(0) - pass.logits().row(1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, RejectsWrongFeatureCount) {
  const Network<double> net({1, 1, 4}, nn::mlp({5}, 3));
  EXPECT_THROW(nn::forward(net, random_inputs(2, 5, 1)), ShapeError);
}

TEST(Forward, ConvMatchesDirectLoop) {
  const auto net =
      nn::init_network<double>({4, 5, 2}, {LayerSpec::conv(3, 3, 1, Padding::same), LayerSpec::head(2)},
                               nn::InitAlgorithm::he, 1.0, 5);
  const auto x = random_inputs(2, 40, 6);
  const auto out = nn::forward(net, x).outputs[0];
  const auto& w = net.layer(0).weights;  // filters x (ky, kx, c)
  for (Eigen::Index b = 0; b < 2; ++b)
    for (long oy = 0; oy < 4; ++oy)
      for (long ox = 0; ox < 5; ++ox)
        for (Eigen::Index f = 0; f < 3; ++f) {
          double s = 0;
          for (long ky = 0; ky < 3; ++ky)
            for (long kx = 0; kx < 3; ++kx)
              for (long c = 0; c < 2; ++c) {
                const long iy = oy + ky - 1, ix = ox + kx - 1;
                if (iy < 0 || iy >= 4 || ix < 0 || ix >= 5) continue;
                s += w(f, (ky * 3 + kx) * 2 + c) * x(b, (iy * 5 + ix) * 2 + c);
              }
          EXPECT_NEAR(out(b, (oy * 5 + ox) * 3 + f), s, 1e-12);
        }
}

TEST(SgdStep, ZeroLearningRateIsBitExact) {
  auto net = nn::init_network<float>({4, 4, 1}, nn::simple_cnn(1, 2, 5, 3), nn::InitAlgorithm::he, 1.0, 3);
  const auto before = net;
  nn::MomentumState<float> state;
  const RowMatrix<float> x = random_inputs(4, 16, 2).cast<float>();
  nn::sgd_step(net, x, random_labels(4, 3, 1), 0.0, 0.9, state);
  for (std::size_t i = 0; i < net.size(); ++i) {
    EXPECT_EQ(net.layer(i).weights, before.layer(i).weights);
    EXPECT_EQ(net.layer(i).bias, before.layer(i).bias);
  }
}

// Two logits (w*x, 0): d/dw of -log softmax_0 is (sigmoid(w x) - 1) x.
TEST(SgdStep, LogisticToyMatchesHandGradient) {
  Network<double> net({1, 1, 1}, {LayerSpec::head(2)});
  const double w = 0.7, x0 = 1.5, lr = 0.3;
  net.layer(0).weights << w, 0.0;
  RowMatrix<double> x(1, 1);
  x << x0;
  nn::MomentumState<double> state;
  const double loss = nn::sgd_step(net, x, std::vector<int>{0}, lr, 0.9, state);
  const double p = 1.0 / (1.0 + std::exp(-w * x0));
  EXPECT_NEAR(loss, -std::log(p), 1e-12);
  EXPECT_NEAR(net.layer(0).weights(0, 0), w - lr * (p - 1.0) * x0, 1e-10);
  EXPECT_NEAR(net.layer(0).bias(0), -lr * (p - 1.0), 1e-10);
  EXPECT_NEAR(net.layer(0).bias(1), -lr * (1.0 - p), 1e-10);
}

TEST(SgdStep, MomentumAccumulates) {
  Network<double> net({1, 1, 1}, {LayerSpec::head(2)});
  RowMatrix<double> x(1, 1);
  x << 1.0;
  nn::MomentumState<double> state;
  nn::sgd_step(net, x, std::vector<int>{0}, 0.0, 0.5, state);
  const double g = state.weights[0](0, 0);
  nn::sgd_step(net, x, std::vector<int>{0}, 0.0, 0.5, state);
  EXPECT_NEAR(state.weights[0](0, 0), 1.5 * g, 1e-15);
}

TEST(SgdStep, NonFiniteLossDiverges) {
  Network<double> net({1, 1, 1}, {LayerSpec::head(2)});
  net.layer(0).weights << std::numeric_limits<double>::infinity(), 0;
  RowMatrix<double> x(1, 1);
  x << 1.0;
  nn::MomentumState<double> state;
  EXPECT_THROW(nn::sgd_step(net, x, std::vector<int>{1}, 0.1, 0.9, state), DivergenceError);
}

TEST(Gradients, DenseFiniteDifferences) {
  const auto net = nn::init_network<double>({1, 1, 6}, nn::mlp({7, 5}, 4), nn::InitAlgorithm::he, 1.0, 1);
  EXPECT_LT(worst_fd_error(net, random_inputs(5, 6, 2), random_labels(5, 4, 3), 50, 4), 1e-4);
}

TEST(Gradients, ConvValidFiniteDifferences) {
  const auto net = nn::init_network<double>({5, 5, 2}, nn::simple_cnn(2, 3, 6, 3), nn::InitAlgorithm::he, 1.0, 5);
  EXPECT_LT(worst_fd_error(net, random_inputs(3, 50, 6), random_labels(3, 3, 7), 30, 8), 1e-4);
}

TEST(Gradients, ConvSameStridedAndMaxpoolFiniteDifferences) {
  const std::vector<LayerSpec> arch{LayerSpec::conv(3, 3, 2, Padding::same), LayerSpec::relu(),
                                    LayerSpec::maxpool(2, 2), LayerSpec::flatten(), LayerSpec::dense(4),
                                    LayerSpec::relu(), LayerSpec::head(3)};
  const auto net = nn::init_network<double>({7, 6, 2}, arch, nn::InitAlgorithm::he, 1.0, 9);
  EXPECT_LT(worst_fd_error(net, random_inputs(4, 84, 10), random_labels(4, 3, 11), 30, 12), 1e-4);
}

TEST(Train, MemorizesTinySample) {
  const auto x = random_inputs(10, 5, 1).cast<float>().eval();
  const auto y = random_labels(10, 10, 2);
  const auto net = nn::init_network<float>({1, 1, 5}, nn::mlp({64}, 10), nn::InitAlgorithm::he, 1.0, 3);
  const auto [trained, curve] = nn::train(net, x, y, nn::TrainSchedule{600, 0.05, 0.9, 10}, 4);
  EXPECT_EQ(curve.records.back().train_accuracy, 1.0);
}

TEST(Train, ScheduleDividesByThreeTwice) {
  const nn::TrainSchedule s{90, 0.009, 0.9, 1};
  EXPECT_DOUBLE_EQ(s.lr_at(29), 0.009);
  EXPECT_DOUBLE_EQ(s.lr_at(30), 0.003);
  EXPECT_DOUBLE_EQ(s.lr_at(60), 0.001);
}

TEST(Train, DeterministicCurves) {
  const auto x = random_inputs(40, 8, 1).cast<float>().eval();
  const auto y = random_labels(40, 3, 2);
  const auto net = nn::init_network<float>({1, 1, 8}, nn::mlp({16}, 3), nn::InitAlgorithm::he, 1.0, 3);
  nn::TrainHooks<float> hooks;
  hooks.record_steps = nn::uniform_steps(30, 5);
  const auto a = nn::train(net, x, y, nn::TrainSchedule{30, 0.05, 0.9, 8}, 4, hooks);
  const auto b = nn::train(net, x, y, nn::TrainSchedule{30, 0.05, 0.9, 8}, 4, hooks);
  EXPECT_TRUE(a.second == b.second);
  EXPECT_EQ(a.first.layer(0).weights, b.first.layer(0).weights);
  for (std::size_t i = 1; i < a.second.records.size(); ++i)
    EXPECT_GT(a.second.records[i].step, a.second.records[i - 1].step);
}

TEST(Evaluate, ZeroLogitsTieGoesToClassZero) {
  const Network<float> net({1, 1, 3}, nn::mlp({2}, 4));
  const auto ev = nn::evaluate(net, random_inputs(6, 3, 1).cast<float>().eval(), std::vector<int>(6, 0));
  EXPECT_EQ(ev.accuracy, 1.0);
}

TEST(Evaluate, ConfidentLogits) {
  Network<double> net({1, 1, 2}, {LayerSpec::head(2)});
  net.layer(0).weights << 100, 0, 0, 100;
  RowMatrix<double> x(2, 2);
  x << 1, 0, 0, 1;
  const auto ev = nn::evaluate(net, x, std::vector<int>{0, 1});
  EXPECT_EQ(ev.accuracy, 1.0);
  EXPECT_LT(ev.loss, 1e-6);
}

TEST(Evaluate, ChanceLevelOnRandomLabels) {
  const auto ds = data::make_gaussian_dataset(std::vector<double>(20, 1.0), 10000, 10, 3);
  const auto net = nn::init_network<float>({1, 1, 20}, nn::mlp({512}, 10), nn::InitAlgorithm::he, 1.0, 4);
  EXPECT_NEAR(nn::evaluate(net, ds.images, ds.labels).accuracy, 0.10, 0.02);
}

TEST(ReinitHead, OnlyHeadChanges) {
  const auto net = nn::init_network<float>({4, 4, 1}, nn::simple_cnn(1, 2, 5, 3), nn::InitAlgorithm::he, 1.0, 3);
  const auto a = nn::reinit_head(net, 11);
  const auto b = nn::reinit_head(net, 11);
  const auto h = *net.head_index();
  for (std::size_t i = 0; i < h; ++i) EXPECT_EQ(a.layer(i).weights, net.layer(i).weights);
  EXPECT_GT((a.layer(h).weights - net.layer(h).weights).norm(), 0.0f);
  EXPECT_EQ(a.layer(h).weights, b.layer(h).weights);
  EXPECT_EQ(nn::reinit_head(net, 11, 7).num_outputs(), 7u);
}

TEST(Rescale, UntrainedNetworkIsUnchanged) {
  const auto net = nn::init_network<double>({1, 1, 6}, nn::mlp({5}, 3), nn::InitAlgorithm::he, 1.0, 3);
  std::vector<double> c;
  const auto out = nn::rescale_to_init(net, &c);
  for (double f : c) EXPECT_EQ(f, 1.0);
  for (std::size_t i = 0; i < net.size(); ++i) EXPECT_EQ(out.layer(i).weights, net.layer(i).weights);
}

TEST(Rescale, RestoresNormsAndKeepsPredictions) {
  const auto x = random_inputs(100, 6, 1).cast<float>().eval();
  const auto y = random_labels(100, 4, 2);
  auto net = nn::init_network<double>({1, 1, 6}, nn::mlp({32}, 4), nn::InitAlgorithm::he, 1.0, 3);
  net = nn::train(net, x, y, nn::TrainSchedule{200, 0.1, 0.9, 20}, 4).first;
  const auto out = nn::rescale_to_init(net);
  for (auto i : out.param_layer_indices())
    EXPECT_NEAR(Network<double>::weight_norm(out.layer(i)), out.init_norms()[i], 1e-10);
  EXPECT_EQ(nn::predict(net, x), nn::predict(out, x));
}

TEST(Checkpoint, RoundTrip) {
  const auto net = nn::init_network<float>({5, 5, 3}, nn::simple_cnn(2, 4, 6, 3, Padding::same, 2, 2),
                                           nn::InitAlgorithm::he, 1.2, 8);
  std::stringstream ss;
  nn::write_checkpoint(ss, net);
  const auto back = nn::read_checkpoint<float>(ss);
  ASSERT_EQ(back.arch(), net.arch());
  for (std::size_t i = 0; i < net.size(); ++i) EXPECT_EQ(back.layer(i).weights, net.layer(i).weights);
  EXPECT_EQ(back.init_norms(), net.init_norms());
  EXPECT_EQ(back.init_scale, net.init_scale);
}

TEST(Checkpoint, TruncatedStreamIsRejected) {
  const auto net = nn::init_network<float>({1, 1, 4}, nn::mlp({3}, 2), nn::InitAlgorithm::he, 1.0, 8);
  std::stringstream ss;
  nn::write_checkpoint(ss, net);
  const auto text = ss.str();
  std::stringstream cut(text.substr(0, text.size() - 5));
  EXPECT_THROW(nn::read_checkpoint<float>(cut), IngestionError);
}

TEST(Arch, ParseAndFormatRoundTrip) {
  const auto arch = nn::parse_arch("conv:16:3:1:valid,relu,maxpool:3:2,dense:512,relu,head:10");
  ASSERT_EQ(arch.size(), 6u);
  EXPECT_EQ(arch[0], LayerSpec::conv(16, 3, 1, Padding::valid));
  EXPECT_EQ(arch[2], LayerSpec::maxpool(3, 2));
  EXPECT_EQ(nn::parse_arch(nn::format_arch(arch)), arch);
  EXPECT_THROW(nn::parse_arch("conv:x"), ArgumentError);
}
