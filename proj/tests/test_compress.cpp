#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "dlis/compress.hpp"
#include "dlis/engine.hpp"
#include "dlis/models.hpp"

using namespace dlis;

namespace {

template <typename T>
Tensor<T> random_tensor(int n, int c, int h, int w, Rng& rng) {
  Tensor<T> t(n, c, h, w);
  for (auto& v : t.data) v = T(rng.normal());
  return t;
}

// conv -> relu -> conv -> relu -> fc, dense biases, no batchnorm.
Network<float> toy_two_conv_net(int c1 = 4, int c2 = 6, uint64_t seed = 3) {
  Network<float> net;
  net.input_shape = {3, 6, 6};
  net.num_classes = 3;
  net.layers.push_back(conv2d_layer<float>(3, c1, 3, 1, 1));
  net.layers.push_back(relu_layer<float>());
  net.layers.push_back(conv2d_layer<float>(c1, c2, 3, 1, 1));
  net.layers.push_back(relu_layer<float>());
  net.layers.push_back(fully_connected_layer<float>(c2 * 6 * 6, 3));
  validate(net);
  Rng rng(seed);
  init_weights(net, rng);
  return net;
}

TEST(MagnitudePrune, TargetModeHandExample) {
  Network<float> net;
  net.input_shape = {4, 1, 1};
  net.num_classes = 1;
  net.layers.push_back(fully_connected_layer<float>(4, 1, false));
  validate(net);
  net.layers[0].weights = {1.0f, -2.0f, 3.0f, -4.0f};
  MagnitudePruneOptions opts;
  opts.value = 0.5;
  const PruneMask mask = magnitude_prune(net, opts);
  EXPECT_EQ(net.layers[0].weights, (std::vector<float>{0.0f, 0.0f, 3.0f, -4.0f}));
  EXPECT_EQ(mask.layers[0], (std::vector<uint8_t>{0, 0, 1, 1}));
  EXPECT_DOUBLE_EQ(mask.layer_sparsity(0), 0.5);
}

TEST(MagnitudePrune, StdFactorZeroPrunesOnlyExactZeros) {
  Network<float> net;
  net.input_shape = {4, 1, 1};
  net.num_classes = 1;
  net.layers.push_back(fully_connected_layer<float>(4, 1, false));
  validate(net);
  net.layers[0].weights = {0.0f, -2.0f, 0.001f, 4.0f};
  MagnitudePruneOptions opts;
  opts.mode = PruneMode::StdFactor;
  opts.value = 0.0;
  const PruneMask mask = magnitude_prune(net, opts);
  EXPECT_EQ(net.layers[0].weights, (std::vector<float>{0.0f, -2.0f, 0.001f, 4.0f}));
  EXPECT_EQ(mask.layers[0], (std::vector<uint8_t>{0, 1, 1, 1}));
}

TEST(MagnitudePrune, TargetZeroIsIdentity) {
  Network<float> net = toy_two_conv_net();
  const std::vector<float> before = net.layers[0].weights;
  MagnitudePruneOptions opts;
  opts.value = 0.0;
  const PruneMask mask = magnitude_prune(net, opts);
  EXPECT_EQ(net.layers[0].weights, before);
  for (uint8_t v : mask.layers[0]) EXPECT_EQ(v, 1);
}

// Exactly floor(s*n) weights zeroed and every survivor's magnitude is >=
// every pruned weight's magnitude.
TEST(MagnitudePrune, ExactCountAndOrderingProperty) {
  Rng rng(101);
  for (double s : {0.1, 0.37, 0.5, 0.83}) {
    Network<float> net = toy_two_conv_net(5, 7, rng.next_u64());
    std::vector<std::vector<float>> originals;
    for (const auto& l : net.layers) originals.push_back(l.weights);
    MagnitudePruneOptions opts;
    opts.value = s;
    const PruneMask mask = magnitude_prune(net, opts);
    for (size_t l = 0; l < net.layers.size(); ++l) {
      if (mask.layers[l].empty()) continue;
      const int64_t n = int64_t(mask.layers[l].size());
      const int64_t expect_zeros = int64_t(std::floor(s * double(n)));
      EXPECT_EQ(mask.zeros(int(l)), expect_zeros);
      double max_pruned = 0.0, min_kept = 1e30;
      for (size_t i = 0; i < mask.layers[l].size(); ++i) {
        const double mag = std::abs(double(originals[l][i]));
        if (mask.layers[l][i] == 0)
          max_pruned = std::max(max_pruned, mag);
        else
          min_kept = std::min(min_kept, mag);
      }
      if (expect_zeros > 0 && expect_zeros < n) EXPECT_GE(min_kept, max_pruned);
    }
  }
}

TEST(MagnitudePrune, GlobalModePoolsQuota) {
  Network<float> net;
  net.input_shape = {2, 1, 1};
  net.num_classes = 2;
  net.layers.push_back(fully_connected_layer<float>(2, 2, false));
  net.layers.push_back(relu_layer<float>());
  net.layers.push_back(fully_connected_layer<float>(2, 2, false));
  validate(net);
  net.layers[0].weights = {10.0f, 20.0f, 30.0f, 40.0f};
  net.layers[2].weights = {0.1f, 0.2f, 0.3f, 0.4f};
  MagnitudePruneOptions opts;
  opts.value = 0.5;
  opts.per_layer = false;
  (void)magnitude_prune(net, opts);
  // The pooled 4 smallest all live in layer 2.
  EXPECT_EQ(net.layers[0].weights, (std::vector<float>{10.0f, 20.0f, 30.0f, 40.0f}));
  EXPECT_EQ(net.layers[2].weights, (std::vector<float>{0.0f, 0.0f, 0.0f, 0.0f}));
}

TEST(IterativePrune, MasksAreMonotoneAndAccuraciesRecorded) {
  Network<float> net = toy_two_conv_net();
  Dataset<float> train_ds = synth_dataset<float>(111, 48, 3, 6);
  Dataset<float> eval_ds = synth_dataset<float>(112, 24, 3, 6);
  TrainSchedule sched;
  sched.base_lr = 0.01;
  sched.batch_size = 16;
  const auto stages = iterative_prune(net, train_ds, eval_ds, {0.5, 0.7}, 2, sched);
  ASSERT_EQ(stages.size(), 2u);
  EXPECT_DOUBLE_EQ(stages[0].level, 0.5);
  EXPECT_DOUBLE_EQ(stages[1].level, 0.7);
  for (const auto& stage : stages) EXPECT_GE(stage.accuracy, 0.0);
  // Monotone: every zero of the 0.5 mask is still zero in the 0.7 mask.
  for (size_t l = 0; l < stages[0].mask.layers.size(); ++l) {
    const auto& m0 = stages[0].mask.layers[l];
    const auto& m1 = stages[1].mask.layers[l];
    ASSERT_EQ(m0.size(), m1.size());
    for (size_t i = 0; i < m0.size(); ++i)
      if (m0[i] == 0) ASSERT_EQ(m1[i], 0);
  }
  // And the final network's pruned weights are exactly zero.
  for (size_t l = 0; l < stages[1].mask.layers.size(); ++l)
    for (size_t i = 0; i < stages[1].mask.layers[l].size(); ++i)
      if (stages[1].mask.layers[l][i] == 0)
        ASSERT_EQ(stages[1].net.layers[l].weights[i], 0.0f);
}

TEST(IterativePrune, FineTuneRecoversPostPruneAccuracy) {
  // For each level, accuracy after the fine-tune should be at least the
  // post-prune pre-fine-tune accuracy on the train split.
  Network<float> net = toy_two_conv_net(4, 6, 909);
  Dataset<float> ds = synth_dataset<float>(910, 64, 3, 6);
  TrainSchedule pre;
  pre.base_lr = 0.02;
  pre.epochs = 8;
  pre.batch_size = 16;
  TrainOptions<float> topts;
  topts.history_accuracy = false;
  train(net, ds, pre, topts);

  for (double level : {0.5, 0.7}) {
    Network<float> probe = net;
    MagnitudePruneOptions opts;
    opts.value = level;
    (void)magnitude_prune(probe, opts);
    const double post_prune = evaluate_accuracy(probe, ds);

    Network<float> tuned = net;
    TrainSchedule sched;
    sched.base_lr = 0.01;
    sched.batch_size = 16;
    const auto stages = iterative_prune(tuned, ds, ds, {level}, 3, sched);
    EXPECT_GE(stages[0].accuracy, post_prune) << "level " << level;
  }
}

TEST(IterativePrune, RejectsDescendingLevels) {
  Network<float> net = toy_two_conv_net();
  Dataset<float> ds = synth_dataset<float>(113, 12, 3, 6);
  TrainSchedule sched;
  EXPECT_THROW(iterative_prune(net, ds, ds, {0.7, 0.5}, 1, sched), ConfigError);
}

TEST(ChannelPlan, VggChainsAndClassifierExclusion) {
  const auto net = build_network<float>(Arch::Vgg16Cifar, 0.25, 10);
  const auto prunable = prunable_conv_layers(net);
  // All 13 convs are prunable (the last one feeds the FC through a pool).
  EXPECT_EQ(prunable.size(), 13u);
  for (int l : prunable) EXPECT_EQ(net.layers[size_t(l)].kind, LayerKind::Conv2d);
}

TEST(ChannelPlan, ResnetOnlyBlockInternalConvs) {
  const auto net = build_network<float>(Arch::Resnet18, 0.25, 10);
  const auto prunable = prunable_conv_layers(net);
  EXPECT_EQ(prunable.size(), 8u);  // first conv of each block
  for (int l : prunable) {
    // The consumer is the block's second conv; neither touches a shortcut.
    const auto plan = analyze_channel_plan(net, l);
    ASSERT_TRUE(plan.has_value());
    EXPECT_EQ(net.layers[size_t(plan->consumer)].kind, LayerKind::Conv2d);
    EXPECT_FALSE(plan->consumer_is_fc);
  }
}

TEST(ChannelPlan, MobilenetCascadesThroughDepthwise) {
  const auto net = build_network<float>(Arch::Mobilenet, 0.25, 10);
  const auto prunable = prunable_conv_layers(net);
  // Stem + 12 pointwise convs (the 13th feeds the classifier FC).
  EXPECT_EQ(prunable.size(), 14u);
  int cascades = 0;
  for (int l : prunable) {
    const auto plan = analyze_channel_plan(net, l);
    ASSERT_TRUE(plan.has_value());
    cascades += int(plan->depthwise_layers.size());
  }
  EXPECT_EQ(cascades, 13);  // every prunable conv except the last feeds a depthwise
}

TEST(Fisher, ZeroActivationChannelHasZeroSaliency) {
  Network<float> net = toy_two_conv_net();
  // Forcing conv1 channel 0 to produce only non-positive outputs makes its
  // post-relu activation identically zero.
  auto& l0 = net.layers[0];
  for (int64_t i = 0; i < int64_t(l0.weights.size()) / l0.out_channels; ++i)
    l0.weights[size_t(i)] = -std::abs(l0.weights[size_t(i)]);
  l0.bias[0] = -10.0f;

  Rng rng(121);
  Tensor<float> x = random_tensor<float>(4, 3, 6, 6, rng);
  for (auto& v : x.data) v = std::abs(v);  // non-negative input
  const auto scores = fisher_saliency(net, {{x, {0, 1, 2, 0}}});
  ASSERT_FALSE(scores[0].empty());
  EXPECT_EQ(scores[0][0], 0.0);
  for (double s : scores[0]) EXPECT_GE(s, 0.0);
}

TEST(Fisher, LossScalingScalesSaliencyQuadratically) {
  // Scaling every logit gradient by alpha scales saliency by alpha^2;
  // replicating each batch item k times multiplies the per-item gradient by
  // 1/k and the sum by k, so saliency scales by 1/k: ranking is invariant.
  Network<float> net = toy_two_conv_net();
  Rng rng(122);
  Tensor<float> x1 = random_tensor<float>(1, 3, 6, 6, rng);
  Tensor<float> x2(2, 3, 6, 6);
  std::copy(x1.data.begin(), x1.data.end(), x2.data.begin());
  std::copy(x1.data.begin(), x1.data.end(), x2.data.begin() + x1.count());

  const auto s1 = fisher_saliency(net, {{x1, {1}}});
  const auto s2 = fisher_saliency(net, {{x2, {1, 1}}});
  for (size_t c = 0; c < s1[0].size(); ++c)
    EXPECT_NEAR(s2[0][c], 0.5 * s1[0][c], 1e-6 * std::max(1.0, s1[0][c]));
}

// Brute-force oracle: actual loss increase when a channel's output is
// forced to zero, computed by zeroing its filter and bias.
std::vector<double> zero_out_loss_increase(Network<float> net, const Tensor<float>& x,
                                           const std::vector<int32_t>& labels,
                                           int layer) {
  const double base = loss_only(net, x, labels);
  const auto& l = net.layers[size_t(layer)];
  const int64_t per_filter = int64_t(l.weights.size()) / l.out_channels;
  std::vector<double> increase(size_t(l.out_channels));
  for (int c = 0; c < l.out_channels; ++c) {
    Network<float> probe = net;
    auto& pl = probe.layers[size_t(layer)];
    std::fill(pl.weights.begin() + c * per_filter,
              pl.weights.begin() + (c + 1) * per_filter, 0.0f);
    if (!pl.bias.empty()) pl.bias[size_t(c)] = 0.0f;
    increase[size_t(c)] = loss_only(probe, x, labels) - base;
  }
  return increase;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int p, int q) { return v[size_t(p)] < v[size_t(q)]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < idx.size(); ++i) r[size_t(idx[i])] = double(i);
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = double(a.size());
  double d2 = 0;
  for (size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

// The saliency is a second-order estimate around the current weights, so
// the oracle comparison runs on a (briefly) trained instance where the
// first-order term no longer dominates.
TEST(Fisher, TwoChannelRankingMatchesBruteForce) {
  Network<float> net = toy_two_conv_net(2, 4, 771);
  Dataset<float> ds = synth_dataset<float>(1771, 60, 3, 6);
  TrainSchedule sched;
  sched.base_lr = 0.02;
  sched.epochs = 12;
  sched.batch_size = 20;
  TrainOptions<float> topts;
  topts.history_accuracy = false;
  train(net, ds, sched, topts);

  Tensor<float> x(int(ds.size()), 3, 6, 6);
  for (int i = 0; i < ds.size(); ++i) copy_image(ds, i, x, i);
  const auto scores = fisher_saliency(net, {{x, ds.labels}});
  const auto oracle = zero_out_loss_increase(net, x, ds.labels, 0);
  ASSERT_EQ(scores[0].size(), 2u);
  EXPECT_EQ(scores[0][0] < scores[0][1], oracle[0] < oracle[1]);
  EXPECT_DOUBLE_EQ(spearman(scores[0], oracle), 1.0);
}

TEST(Fisher, EightChannelRankingCloseToBruteForce) {
  Network<float> net;
  net.input_shape = {3, 6, 6};
  net.num_classes = 3;
  net.layers.push_back(conv2d_layer<float>(3, 8, 3, 1, 1));
  net.layers.push_back(relu_layer<float>());
  net.layers.push_back(conv2d_layer<float>(8, 6, 3, 1, 1));
  net.layers.push_back(relu_layer<float>());
  net.layers.push_back(fully_connected_layer<float>(6 * 6 * 6, 3));
  validate(net);
  Rng rng(881);
  init_weights(net, rng);
  Dataset<float> ds = synth_dataset<float>(5881, 90, 3, 6);
  TrainSchedule sched;
  sched.base_lr = 0.02;
  sched.epochs = 15;
  sched.batch_size = 30;
  TrainOptions<float> topts;
  topts.history_accuracy = false;
  train(net, ds, sched, topts);

  Tensor<float> x(int(ds.size()), 3, 6, 6);
  for (int i = 0; i < ds.size(); ++i) copy_image(ds, i, x, i);
  const auto scores = fisher_saliency(net, {{x, ds.labels}});
  const auto oracle = zero_out_loss_increase(net, x, ds.labels, 0);
  EXPECT_GE(spearman(scores[0], oracle), 0.8);
}

TEST(ChannelPrune, BetaInfinityRemovesMostExpensiveChannel) {
  // Two conv layers with very different per-channel MAC costs.
  Network<float> net;
  net.input_shape = {3, 12, 12};
  net.num_classes = 2;
  net.layers.push_back(conv2d_layer<float>(3, 4, 3, 1, 1));  // 12x12 maps: expensive
  net.layers.push_back(relu_layer<float>());
  net.layers.push_back(conv2d_layer<float>(4, 4, 3, 2, 1));  // 6x6 maps: cheaper
  net.layers.push_back(relu_layer<float>());
  net.layers.push_back(conv2d_layer<float>(4, 3, 3, 1, 1));
  net.layers.push_back(relu_layer<float>());
  net.layers.push_back(fully_connected_layer<float>(3 * 6 * 6, 2));
  validate(net);
  Rng rng(131);
  init_weights(net, rng);

  // Expected winner: the prunable layer with maximal per-channel MACs.
  int64_t best_macs = -1;
  int best_layer = -1;
  for (int l : prunable_conv_layers(net)) {
    const auto plan = analyze_channel_plan(net, l);
    const int64_t m = macs_saved_per_channel(net, *plan);
    if (m > best_macs) {
      best_macs = m;
      best_layer = l;
    }
  }

  Dataset<float> ds = synth_dataset<float>(132, 24, 2, 12);
  ChannelPruneOptions opts;
  opts.steps = 5;
  opts.removal_period = 5;
  opts.beta = 1e12;  // penalty dominates saliency entirely
  opts.lr = 1e-4;
  opts.batch_size = 8;
  const ChannelRecord record = channel_prune(net, ds, opts);
  ASSERT_EQ(record.removals.size(), 1u);
  EXPECT_EQ(record.removals[0].layer, best_layer);
}

TEST(ChannelPrune, DefaultsMatchProcedure) {
  ChannelPruneOptions opts;
  EXPECT_EQ(opts.removal_period, 100);
  EXPECT_DOUBLE_EQ(opts.beta, 1e-6);
}

TEST(RecastDense, EmptyRecordIsStructurallyIdentical) {
  Network<float> net = toy_two_conv_net();
  const ChannelRecord empty;
  const Network<float> out = recast_dense(net, empty);
  ASSERT_EQ(out.layers.size(), net.layers.size());
  for (size_t l = 0; l < net.layers.size(); ++l) {
    EXPECT_EQ(out.layers[l].kind, net.layers[l].kind);
    EXPECT_EQ(out.layers[l].weights, net.layers[l].weights);
  }
}

TEST(RecastDense, ZeroedChannelRemovalIsBitwiseEquivalent) {
  Network<float> net = toy_two_conv_net(4, 6, 777);
  // Zero out channel 2 of conv1 (filter + bias).
  auto& l0 = net.layers[0];
  const int64_t per_filter = int64_t(l0.weights.size()) / l0.out_channels;
  std::fill(l0.weights.begin() + 2 * per_filter, l0.weights.begin() + 3 * per_filter,
            0.0f);
  l0.bias[2] = 0.0f;

  Rng rng(141);
  Tensor<float> x = random_tensor<float>(3, 3, 6, 6, rng);
  const Tensor<float> before = forward(net, x);

  ChannelRecord record;
  record.removals.push_back({0, 2, 0.0, 0.0});
  const Network<float> recast = recast_dense(net, record);
  EXPECT_EQ(recast.layers[0].out_channels, 3);
  const Tensor<float> after = forward(recast, x);
  ASSERT_TRUE(before.same_shape(after));
  EXPECT_EQ(0, std::memcmp(before.data.data(), after.data.data(),
                           before.data.size() * sizeof(float)));
}

TEST(RecastDense, CountsMatchRecountsExactly) {
  Network<float> net = toy_two_conv_net(5, 6, 778);
  const int64_t macs_before = count_macs(net).total_macs;
  const int64_t params_before = count_params(net).total_params;
  const auto plan = analyze_channel_plan(net, 0);
  ASSERT_TRUE(plan.has_value());
  const int64_t macs_delta = macs_saved_per_channel(net, *plan);
  const int64_t params_delta = params_saved_per_channel(net, *plan);

  ChannelRecord record;
  record.removals.push_back({0, 1, 0.0, 0.0});
  const Network<float> recast = recast_dense(net, record);
  EXPECT_EQ(count_macs(recast).total_macs, macs_before - macs_delta);
  EXPECT_EQ(count_params(recast).total_params, params_before - params_delta);
  EXPECT_LT(count_macs(recast).total_macs, macs_before);  // strict decrease
}

TEST(RecastDense, MobilenetCascadeKeepsNetworkValid) {
  auto net = build_network<float>(Arch::Mobilenet, 0.25, 10);
  Rng rng(151);
  init_weights(net, rng);
  const auto prunable = prunable_conv_layers(net);
  ASSERT_FALSE(prunable.empty());
  const int layer = prunable[1];  // a pointwise conv feeding a depthwise
  const int64_t macs_before = count_macs(net).total_macs;
  const auto plan = analyze_channel_plan(net, layer);
  const int64_t expect_delta = macs_saved_per_channel(net, *plan);
  remove_channel(net, *plan, 0);
  EXPECT_TRUE(net.validated);
  EXPECT_EQ(count_macs(net).total_macs, macs_before - expect_delta);
  Tensor<float> x = random_tensor<float>(1, 3, 32, 32, rng);
  EXPECT_NO_THROW(forward(net, x));
}

TEST(RecastDense, ResnetBlockInternalRemovalPreservesBlockWidths) {
  auto net = build_network<float>(Arch::Resnet18, 0.25, 10);
  Rng rng(152);
  init_weights(net, rng);
  const auto prunable = prunable_conv_layers(net);
  ASSERT_FALSE(prunable.empty());
  const int layer = prunable[0];
  const int block_out_before = net.layers[size_t(layer) + 3].out_channels;
  const auto plan = analyze_channel_plan(net, layer);
  remove_channel(net, *plan, 0);
  // The block's second conv keeps its output width; only its input shrank.
  EXPECT_EQ(net.layers[size_t(layer) + 3].out_channels, block_out_before);
  Tensor<float> x = random_tensor<float>(1, 3, 32, 32, rng);
  EXPECT_NO_THROW(forward(net, x));
}

TEST(Ttq, HandTracedQuantisation) {
  Network<float> net;
  net.input_shape = {3, 1, 1};
  net.num_classes = 1;
  // A 1x1 conv with three weights acts as the hand-traced weight vector.
  net.layers.push_back(conv2d_layer<float>(3, 1, 1, 1, 0, false));
  net.layers.push_back(fully_connected_layer<float>(1, 1, false));
  validate(net);
  net.layers[0].weights = {0.5f, -0.8f, 0.05f};
  net.layers[1].weights = {1.0f};

  const TernaryParams params = ttq_quantize(net, 0.2);
  ASSERT_TRUE(params.layers[0].quantized);
  EXPECT_NEAR(params.layers[0].threshold, 0.16, 1e-7);
  EXPECT_EQ(params.layers[0].codes, (std::vector<int8_t>{1, -1, 0}));
  EXPECT_NEAR(params.layers[0].wp, 0.5, 1e-7);
  EXPECT_NEAR(params.layers[0].wn, 0.8, 1e-7);
  EXPECT_EQ(net.layers[0].weights, (std::vector<float>{0.5f, -0.8f, 0.0f}));
  // FC stays full precision.
  EXPECT_FALSE(params.layers[1].quantized);
  EXPECT_EQ(net.layers[1].weights[0], 1.0f);
}

TEST(Ttq, ZeroThresholdKeepsOnlyExactZerosAtZero) {
  Network<float> net;
  net.input_shape = {4, 1, 1};
  net.num_classes = 1;
  net.layers.push_back(conv2d_layer<float>(4, 1, 1, 1, 0, false));
  net.layers.push_back(fully_connected_layer<float>(1, 1, false));
  validate(net);
  net.layers[0].weights = {0.3f, -0.1f, 0.0f, 2.0f};
  const TernaryParams params = ttq_quantize(net, 0.0);
  EXPECT_EQ(params.layers[0].codes, (std::vector<int8_t>{1, -1, 0, 1}));
  EXPECT_DOUBLE_EQ(params.sparsity(), 0.25);
}

TEST(Ttq, SparsityNonDecreasingInThreshold) {
  Rng rng(161);
  Network<float> base = toy_two_conv_net(4, 6, 991);
  double last = -1.0;
  for (double t : {0.0, 0.05, 0.09, 0.2, 0.5, 0.9}) {
    Network<float> net = base;
    const TernaryParams params = ttq_quantize(net, t);
    EXPECT_GE(params.sparsity(), last);
    last = params.sparsity();
  }
}

TEST(Ttq, ReferenceOperatingPointsAcceptedAndReported) {
  for (double t : {0.09, 0.07, 0.20}) {
    Network<float> net = toy_two_conv_net(4, 6, 313);
    const TernaryParams params = ttq_quantize(net, t);
    EXPECT_DOUBLE_EQ(params.t, t);
    EXPECT_GE(params.sparsity(), 0.0);
    EXPECT_LE(params.sparsity(), 1.0);
  }
}

TEST(Ttq, DecodedWeightsStayTernaryAfterEveryTrainStep) {
  Network<float> net = toy_two_conv_net(3, 4, 414);
  Dataset<float> ds = synth_dataset<float>(415, 24, 3, 6);
  TrainSchedule sched;
  sched.base_lr = 0.01;
  sched.epochs = 2;
  sched.batch_size = 8;
  int steps_checked = 0;
  TtqTrainOptions<float> topts;
  topts.on_step = [&](const Network<float>& n, const TernaryParams& p) {
    for (size_t l = 0; l < n.layers.size(); ++l) {
      if (!p.layers[l].quantized) continue;
      const float wp = float(p.layers[l].wp), wn = float(p.layers[l].wn);
      for (float w : n.layers[l].weights)
        ASSERT_TRUE(w == wp || w == -wn || w == 0.0f)
            << "weight " << w << " outside {" << -wn << ", 0, " << wp << "}";
    }
    ++steps_checked;
  };
  (void)ttq_train(net, ds, 0.1, sched, topts);
  EXPECT_GT(steps_checked, 0);
}

TEST(Ttq, TrainRecoversOneShotQuantisationAccuracy) {
  Network<float> net = toy_two_conv_net(4, 6, 515);
  Dataset<float> train_ds = synth_dataset<float>(516, 64, 3, 6);
  Dataset<float> eval_ds = synth_dataset<float>(517, 32, 3, 6);

  // Give the full-precision net some skill first.
  TrainSchedule pre;
  pre.base_lr = 0.02;
  pre.epochs = 8;
  pre.batch_size = 16;
  TrainOptions<float> topts;
  topts.history_accuracy = false;
  train(net, train_ds, pre, topts);

  Network<float> oneshot = net;
  (void)ttq_quantize(oneshot, 0.1);
  const double post_quant = evaluate_accuracy(oneshot, eval_ds);

  Network<float> trained = net;
  TrainSchedule sched;
  sched.base_lr = 0.01;
  sched.epochs = 10;
  sched.batch_size = 16;
  (void)ttq_train(trained, train_ds, 0.1, sched);
  const double post_train = evaluate_accuracy(trained, eval_ds);
  EXPECT_GE(post_train, post_quant);
}

TEST(ToSparseFormat, ForwardUnchangedAndNnzExact) {
  Network<float> net = toy_two_conv_net(4, 6, 616);
  MagnitudePruneOptions opts;
  opts.value = 0.6;
  (void)magnitude_prune(net, opts);

  Network<float> sparse = net;
  to_sparse_format(sparse);
  for (size_t l = 0; l < sparse.layers.size(); ++l) {
    const auto& sl = sparse.layers[l];
    if (sl.kind == LayerKind::Conv2d) {
      EXPECT_EQ(sl.weight_format, WeightFormat::Csr);
      int64_t nonzeros = 0;
      for (float v : net.layers[l].weights) nonzeros += (v != 0.0f);
      EXPECT_EQ(sl.sparse_weights.nnz(), nonzeros);
    }
    if (sl.kind == LayerKind::FullyConnected)
      EXPECT_EQ(sl.weight_format, WeightFormat::Dense);  // FC dense by default
  }

  Rng rng(171);
  Tensor<float> x = random_tensor<float>(2, 3, 6, 6, rng);
  const Tensor<float> dense_out = forward(net, x);
  ExecConfig cfg;
  cfg.conv_algo = ConvAlgo::SparseCsr;
  const Tensor<float> sparse_out = forward(sparse, x, cfg);
  for (int64_t i = 0; i < dense_out.count(); ++i)
    ASSERT_NEAR(dense_out.data[size_t(i)], sparse_out.data[size_t(i)], 1e-4f);

  // Densifying restores the exact weights.
  Network<float> back = sparse;
  to_dense_format(back);
  for (size_t l = 0; l < back.layers.size(); ++l)
    EXPECT_EQ(back.layers[l].weights, net.layers[l].weights);
}

TEST(ToSparseFormat, UnprunedLayerKeepsAllWeights) {
  Network<float> net = toy_two_conv_net(3, 4, 717);
  const int64_t weight_count = int64_t(net.layers[0].weights.size());
  to_sparse_format(net);
  EXPECT_EQ(net.layers[0].sparse_weights.nnz(), weight_count);
}

TEST(ToSparseFormat, TernaryLayersStoreOnlyScaleValues) {
  Network<float> net = toy_two_conv_net(4, 5, 818);
  const TernaryParams params = ttq_quantize(net, 0.15);
  to_sparse_format(net);
  for (size_t l = 0; l < net.layers.size(); ++l) {
    if (!params.layers[l].quantized) continue;
    const float wp = float(params.layers[l].wp), wn = float(params.layers[l].wn);
    for (float v : net.layers[l].sparse_weights.values)
      ASSERT_TRUE(v == wp || v == -wn);
  }
}

}  // namespace
