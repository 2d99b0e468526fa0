#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "dlis/autodiff.hpp"
#include "dlis/graph.hpp"
#include "dlis/train.hpp"

namespace dlis {

// ---------------------------------------------------------------------------
// Magnitude (weight) pruning. Operates on the weights of conv, depthwise
// and fully connected layers in the main layer list; residual projection
// convolutions are left untouched.

enum class PruneMode { StdFactor, TargetSparsity };

struct MagnitudePruneOptions {
  PruneMode mode = PruneMode::TargetSparsity;
  double value = 0.5;     // std factor k, or target sparsity s
  bool per_layer = true;  // per-layer thresholds/quotas vs pooled
};

namespace detail {

template <typename T>
bool prunable_weights(const Layer<T>& l) {
  return l.has_weights() && l.weight_format == WeightFormat::Dense &&
         !l.weights.empty();
}

template <typename T>
double weight_stddev(const std::vector<const std::vector<T>*>& arrays) {
  int64_t n = 0;
  double mean = 0.0;
  for (const auto* a : arrays)
    for (T w : *a) {
      mean += double(w);
      ++n;
    }
  if (n == 0) return 0.0;
  mean /= double(n);
  double var = 0.0;
  for (const auto* a : arrays)
    for (T w : *a) {
      const double d = double(w) - mean;
      var += d * d;
    }
  return std::sqrt(var / double(n));
}

}  // namespace detail

namespace detail {

// All weight arrays that participate in weight-level compression: conv,
// depthwise and fully connected layers, plus residual projection convs.
// The fixed visit order (layers ascending, then skips) keeps tie-breaking
// by flat index deterministic.
template <typename T>
struct WeightArrayRef {
  std::vector<T>* weights;
  std::vector<uint8_t>* mask;
};

template <typename T>
std::vector<WeightArrayRef<T>> collect_prunable_arrays(Network<T>& net,
                                                       PruneMask& mask) {
  mask.layers.resize(net.layers.size());
  mask.projections.resize(net.skips.size());
  std::vector<WeightArrayRef<T>> refs;
  for (size_t i = 0; i < net.layers.size(); ++i)
    if (prunable_weights(net.layers[i]))
      refs.push_back({&net.layers[i].weights, &mask.layers[i]});
  for (size_t s = 0; s < net.skips.size(); ++s) {
    mask.projections[s].resize(net.skips[s].projection.size());
    for (size_t p = 0; p < net.skips[s].projection.size(); ++p)
      if (prunable_weights(net.skips[s].projection[p]))
        refs.push_back({&net.skips[s].projection[p].weights, &mask.projections[s][p]});
  }
  return refs;
}

}  // namespace detail

// std_factor mode: zeroes |w| < k * sigma (strict); the mask marks every
// zero-valued weight as pruned, so k = 0 prunes exactly the existing zeros.
// target mode: zeroes exactly floor(s*n) smallest-|w| weights, ties broken
// by lowest flat index.
template <typename T>
PruneMask magnitude_prune(Network<T>& net, const MagnitudePruneOptions& opts) {
  if (opts.mode == PruneMode::StdFactor && opts.value < 0)
    throw ConfigError("magnitude_prune: std factor must be >= 0");
  if (opts.mode == PruneMode::TargetSparsity && (opts.value < 0 || opts.value > 1))
    throw ConfigError("magnitude_prune: target sparsity must be in [0,1]");

  PruneMask mask;
  auto refs = detail::collect_prunable_arrays(net, mask);

  if (opts.mode == PruneMode::StdFactor) {
    double pooled_sigma = 0.0;
    if (!opts.per_layer) {
      std::vector<const std::vector<T>*> all;
      for (const auto& r : refs) all.push_back(r.weights);
      pooled_sigma = detail::weight_stddev<T>(all);
    }
    for (auto& r : refs) {
      const double sigma =
          opts.per_layer ? detail::weight_stddev<T>({r.weights}) : pooled_sigma;
      const double threshold = opts.value * sigma;
      auto& w = *r.weights;
      r.mask->assign(w.size(), 1);
      for (size_t j = 0; j < w.size(); ++j) {
        if (std::abs(double(w[j])) < threshold) w[j] = T(0);
        if (w[j] == T(0)) (*r.mask)[j] = 0;
      }
    }
    return mask;
  }

  // Target-sparsity mode.
  if (opts.per_layer) {
    for (auto& r : refs) {
      auto& w = *r.weights;
      const int64_t n = int64_t(w.size());
      const int64_t k = int64_t(std::floor(opts.value * double(n)));
      r.mask->assign(size_t(n), 1);
      if (k <= 0) continue;
      std::vector<int64_t> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      auto cmp = [&](int64_t a, int64_t b) {
        const double ma = std::abs(double(w[size_t(a)]));
        const double mb = std::abs(double(w[size_t(b)]));
        return ma < mb || (ma == mb && a < b);
      };
      std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), cmp);
      for (int64_t j = 0; j < k; ++j) {
        w[size_t(order[size_t(j)])] = T(0);
        (*r.mask)[size_t(order[size_t(j)])] = 0;
      }
    }
    return mask;
  }

  // Pooled quota across all prunable arrays.
  struct Entry {
    double mag;
    int array;
    int64_t idx;
  };
  std::vector<Entry> pool;
  for (size_t a = 0; a < refs.size(); ++a) {
    refs[a].mask->assign(refs[a].weights->size(), 1);
    for (size_t j = 0; j < refs[a].weights->size(); ++j)
      pool.push_back({std::abs(double((*refs[a].weights)[j])), int(a), int64_t(j)});
  }
  const int64_t k = int64_t(std::floor(opts.value * double(pool.size())));
  if (k > 0) {
    auto cmp = [](const Entry& a, const Entry& b) {
      if (a.mag != b.mag) return a.mag < b.mag;
      if (a.array != b.array) return a.array < b.array;
      return a.idx < b.idx;
    };
    std::nth_element(pool.begin(), pool.begin() + (k - 1), pool.end(), cmp);
    for (int64_t j = 0; j < k; ++j) {
      const Entry& e = pool[size_t(j)];
      (*refs[size_t(e.array)].weights)[size_t(e.idx)] = T(0);
      (*refs[size_t(e.array)].mask)[size_t(e.idx)] = 0;
    }
  }
  return mask;
}

// Intersection of keep-masks: zeros never revive.
inline void merge_masks(PruneMask& into, const PruneMask& update) {
  auto merge_one = [](std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
    if (b.empty()) return;
    if (a.empty()) {
      a = b;
      return;
    }
    for (size_t j = 0; j < b.size(); ++j) a[j] = a[j] & b[j];
  };
  if (into.layers.size() < update.layers.size())
    into.layers.resize(update.layers.size());
  for (size_t i = 0; i < update.layers.size(); ++i)
    merge_one(into.layers[i], update.layers[i]);
  if (into.projections.size() < update.projections.size())
    into.projections.resize(update.projections.size());
  for (size_t s = 0; s < update.projections.size(); ++s) {
    if (into.projections[s].size() < update.projections[s].size())
      into.projections[s].resize(update.projections[s].size());
    for (size_t p = 0; p < update.projections[s].size(); ++p)
      merge_one(into.projections[s][p], update.projections[s][p]);
  }
}

template <typename T>
struct PruneStage {
  double level = 0.0;
  Network<T> net;
  PruneMask mask;
  double accuracy = 0.0;
};

// Iterative magnitude pruning: prune to each level (cumulative masks),
// fine-tune for finetune_epochs with the mask held, record accuracy.
template <typename T>
std::vector<PruneStage<T>> iterative_prune(Network<T>& net, const Dataset<T>& train_ds,
                                           const Dataset<T>& eval_ds,
                                           const std::vector<double>& levels,
                                           int finetune_epochs,
                                           const TrainSchedule& sched_base,
                                           const ExecConfig& cfg = {}) {
  for (size_t i = 1; i < levels.size(); ++i)
    if (levels[i] < levels[i - 1])
      throw ConfigError("iterative_prune: levels must be ascending");

  std::vector<PruneStage<T>> stages;
  PruneMask cumulative;
  for (double level : levels) {
    MagnitudePruneOptions opts;
    opts.mode = PruneMode::TargetSparsity;
    opts.value = level;
    const PruneMask step_mask = magnitude_prune(net, opts);
    merge_masks(cumulative, step_mask);

    TrainSchedule sched = sched_base;
    sched.epochs = finetune_epochs;
    TrainOptions<T> topts;
    topts.mask = &cumulative;
    topts.cfg = cfg;
    topts.history_accuracy = false;
    train(net, train_ds, sched, topts);

    PruneStage<T> stage;
    stage.level = level;
    stage.net = net;
    stage.mask = cumulative;
    stage.accuracy = evaluate_accuracy(net, eval_ds, cfg);
    stages.push_back(std::move(stage));
  }
  return stages;
}

// ---------------------------------------------------------------------------
// Channel pruning (Fisher saliency + FLOP-aware selection + dense recast).

// What removing one output channel of a conv layer touches: the filter
// itself, batchnorm entries and depthwise channels along the pass-through
// chain, and the input slice of the consuming weighted layer.
struct ChannelPlan {
  int layer = -1;       // the conv2d whose output channel is removed
  int attachment = -1;  // layer whose output is the channel's post-activation
  std::vector<int> bn_layers;
  std::vector<int> depthwise_layers;
  int consumer = -1;  // terminating conv2d or fully_connected
  bool consumer_is_fc = false;
};

// A conv2d output channel is removable when the pass-through chain from it
// reaches a weighted consumer without touching any residual connection
// (shortcut widths are pinned: only layers between the shortcuts prune).
template <typename T>
std::optional<ChannelPlan> analyze_channel_plan(const Network<T>& net, int layer) {
  if (layer < 0 || layer >= int(net.layers.size())) return std::nullopt;
  if (net.layers[size_t(layer)].kind != LayerKind::Conv2d) return std::nullopt;

  auto is_skip_source = [&](int idx) {
    for (const auto& s : net.skips)
      if (s.src == idx) return true;
    return false;
  };

  ChannelPlan plan;
  plan.layer = layer;
  plan.attachment = layer;
  int carrier = layer;
  while (true) {
    if (is_skip_source(carrier)) return std::nullopt;
    const int next = carrier + 1;
    if (next >= int(net.layers.size())) return std::nullopt;
    const auto& l = net.layers[size_t(next)];
    switch (l.kind) {
      case LayerKind::BatchNorm:
        plan.bn_layers.push_back(next);
        carrier = next;
        break;
      case LayerKind::Relu:
        if (plan.attachment == plan.layer) plan.attachment = next;
        carrier = next;
        break;
      case LayerKind::MaxPool2d:
        carrier = next;
        break;
      case LayerKind::DepthwiseConv2d:
        plan.depthwise_layers.push_back(next);
        carrier = next;
        break;
      case LayerKind::Conv2d:
        plan.consumer = next;
        return plan;
      case LayerKind::FullyConnected:
        plan.consumer = next;
        plan.consumer_is_fc = true;
        return plan;
      case LayerKind::ResidualAdd:
      case LayerKind::Softmax:
        return std::nullopt;
    }
  }
}

template <typename T>
std::vector<int> prunable_conv_layers(const Network<T>& net) {
  std::vector<int> out;
  for (int i = 0; i < int(net.layers.size()); ++i)
    if (analyze_channel_plan(net, i).has_value()) out.push_back(i);
  return out;
}

// MACs saved by removing one channel under `plan`: the filter's own MACs
// plus the per-channel MACs of every consumer it feeds. Exactly equals
// count_macs(before) - count_macs(after removal).
template <typename T>
int64_t macs_saved_per_channel(const Network<T>& net, const ChannelPlan& plan) {
  if (!net.validated) throw ConfigError("macs_saved_per_channel requires validated net");
  const auto& src = net.layers[size_t(plan.layer)];
  int64_t saved = int64_t(src.out_shape.h) * src.out_shape.w * src.in_channels *
                  src.kernel * src.kernel;
  for (int dw : plan.depthwise_layers) {
    const auto& l = net.layers[size_t(dw)];
    saved += int64_t(l.out_shape.h) * l.out_shape.w * l.kernel * l.kernel;
  }
  const auto& consumer = net.layers[size_t(plan.consumer)];
  if (plan.consumer_is_fc) {
    saved += int64_t(consumer.in_shape.h) * consumer.in_shape.w * consumer.out_channels;
  } else {
    saved += int64_t(consumer.out_shape.c) * consumer.out_shape.h * consumer.out_shape.w *
             consumer.kernel * consumer.kernel;
  }
  return saved;
}

template <typename T>
int64_t params_saved_per_channel(const Network<T>& net, const ChannelPlan& plan) {
  const auto& src = net.layers[size_t(plan.layer)];
  int64_t saved = int64_t(src.in_channels) * src.kernel * src.kernel +
                  (src.has_bias() ? 1 : 0);
  saved += int64_t(plan.bn_layers.size()) * 4;
  for (int dw : plan.depthwise_layers) {
    const auto& l = net.layers[size_t(dw)];
    saved += int64_t(l.kernel) * l.kernel + (l.has_bias() ? 1 : 0);
  }
  const auto& consumer = net.layers[size_t(plan.consumer)];
  if (plan.consumer_is_fc) {
    saved += int64_t(consumer.in_shape.h) * consumer.in_shape.w * consumer.out_channels;
  } else {
    saved += int64_t(consumer.out_channels) * consumer.kernel * consumer.kernel;
  }
  return saved;
}

namespace detail {

template <typename T>
void erase_weight_block(std::vector<T>& w, int64_t block, int64_t block_size) {
  w.erase(w.begin() + block * block_size, w.begin() + (block + 1) * block_size);
}

template <typename T>
void erase_channel_entry(Layer<T>& bn, int channel) {
  bn.bn_gamma.erase(bn.bn_gamma.begin() + channel);
  bn.bn_beta.erase(bn.bn_beta.begin() + channel);
  bn.bn_mean.erase(bn.bn_mean.begin() + channel);
  bn.bn_var.erase(bn.bn_var.begin() + channel);
  bn.in_channels--;
  bn.out_channels--;
}

// Deletes input slice `channel` from every filter of a conv2d.
template <typename T>
void erase_input_slice(Layer<T>& l, int channel) {
  const int64_t k2 = int64_t(l.kernel) * l.kernel;
  const int64_t old_cols = int64_t(l.in_channels) * k2;
  std::vector<T> next;
  next.reserve(size_t(int64_t(l.out_channels) * (old_cols - k2)));
  for (int o = 0; o < l.out_channels; ++o) {
    const T* row = l.weights.data() + size_t(o) * old_cols;
    next.insert(next.end(), row, row + size_t(channel) * k2);
    next.insert(next.end(), row + size_t(channel + 1) * k2, row + old_cols);
  }
  l.weights = std::move(next);
  l.in_channels--;
}

template <typename T>
void erase_fc_input_block(Layer<T>& l, int channel, int64_t features_per_channel) {
  const int64_t old_in = l.in_channels;
  std::vector<T> next;
  next.reserve(size_t(int64_t(l.out_channels) * (old_in - features_per_channel)));
  for (int o = 0; o < l.out_channels; ++o) {
    const T* row = l.weights.data() + size_t(o) * old_in;
    next.insert(next.end(), row, row + size_t(channel) * features_per_channel);
    next.insert(next.end(), row + size_t(channel + 1) * features_per_channel,
                row + old_in);
  }
  l.weights = std::move(next);
  l.in_channels = int(old_in - features_per_channel);
}

}  // namespace detail

// Structurally removes one output channel, following the plan through
// batchnorm, depthwise and consumer layers, then re-validates the network.
template <typename T>
void remove_channel(Network<T>& net, const ChannelPlan& plan, int channel) {
  auto& src = net.layers[size_t(plan.layer)];
  if (channel < 0 || channel >= src.out_channels)
    throw ConfigError("remove_channel: channel index out of range");
  if (src.out_channels <= 1)
    throw ConfigError("remove_channel: cannot remove the last channel");
  for (const auto& l : net.layers)
    if (l.has_weights() && l.weight_format != WeightFormat::Dense)
      throw ConfigError("remove_channel: requires dense weight format");

  detail::erase_weight_block(src.weights, channel,
                             int64_t(src.in_channels) * src.kernel * src.kernel);
  if (src.has_bias()) src.bias.erase(src.bias.begin() + channel);
  src.out_channels--;

  for (int bn : plan.bn_layers)
    detail::erase_channel_entry(net.layers[size_t(bn)], channel);
  for (int dw : plan.depthwise_layers) {
    auto& l = net.layers[size_t(dw)];
    detail::erase_weight_block(l.weights, channel, int64_t(l.kernel) * l.kernel);
    if (l.has_bias()) l.bias.erase(l.bias.begin() + channel);
    l.in_channels--;
    l.out_channels--;
  }
  auto& consumer = net.layers[size_t(plan.consumer)];
  if (plan.consumer_is_fc) {
    detail::erase_fc_input_block(consumer, channel,
                                 int64_t(consumer.in_shape.h) * consumer.in_shape.w);
  } else {
    detail::erase_input_slice(consumer, channel);
  }
  validate(net);
}

struct ChannelRemoval {
  int layer = -1;
  int channel = -1;
  double saliency = 0.0;
  double penalized = 0.0;
};

// Ordered removal log; layer/channel indices refer to the network state at
// the moment of each removal (removals replay sequentially).
struct ChannelRecord {
  std::vector<ChannelRemoval> removals;
  int64_t original_params = 0;
  int64_t params_removed = 0;
  double compression_rate() const {
    return original_params > 0 ? double(params_removed) / double(original_params) : 0.0;
  }
};

// Replays a removal record against a copy of the network, yielding the
// smaller dense network ("the connections remain dense but there are
// fewer channels").
template <typename T>
Network<T> recast_dense(const Network<T>& net, const ChannelRecord& record) {
  Network<T> out = net;
  if (!out.validated) validate(out);
  for (const auto& r : record.removals) {
    auto plan = analyze_channel_plan(out, r.layer);
    if (!plan.has_value())
      throw ConfigError("recast_dense: layer " + std::to_string(r.layer) +
                        " is not channel-prunable");
    remove_channel(out, *plan, r.channel);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fisher saliency: per channel, the squared activation-gradient product
// summed over batch items and spatial positions; lower = safer to remove.

template <typename T>
struct FisherAccumulator {
  std::vector<std::optional<ChannelPlan>> plans;  // per layer
  std::vector<std::vector<double>> scores;        // per layer, per channel

  void reset(const Network<T>& net) {
    plans.assign(net.layers.size(), std::nullopt);
    scores.assign(net.layers.size(), {});
    for (size_t i = 0; i < net.layers.size(); ++i) {
      plans[i] = analyze_channel_plan(net, int(i));
      if (plans[i].has_value())
        scores[i].assign(size_t(net.layers[i].out_channels), 0.0);
    }
  }

  // Consumes a BackpropResult produced with record_output_grads = true.
  void add(const BackpropResult<T>& res) {
    for (size_t i = 0; i < plans.size(); ++i) {
      if (!plans[i].has_value()) continue;
      const Tensor<T>& a = res.outs[size_t(plans[i]->attachment)];
      const Tensor<T>& g = res.out_grads[size_t(plans[i]->attachment)];
      auto& sc = scores[i];
      for (int n = 0; n < a.n; ++n)
        for (int c = 0; c < a.c; ++c) {
          const T* pa = a.channel_ptr(n, c);
          const T* pg = g.channel_ptr(n, c);
          double acc = 0.0;
          for (int64_t e = 0; e < a.plane(); ++e) {
            const double prod = double(pa[e]) * double(pg[e]);
            acc += prod * prod;
          }
          sc[size_t(c)] += acc;
        }
    }
  }
};

// Saliency scores over a fixed set of batches. Entry [l] is empty unless
// layer l is channel-prunable.
template <typename T>
std::vector<std::vector<double>> fisher_saliency(
    const Network<T>& net,
    const std::vector<std::pair<Tensor<T>, std::vector<int32_t>>>& batches,
    const ExecConfig& cfg = {}) {
  if (batches.empty()) throw ConfigError("fisher_saliency: needs at least one batch");
  FisherAccumulator<T> acc;
  acc.reset(net);
  for (const auto& [images, labels] : batches) {
    BackpropOptions opts;
    opts.cfg = cfg;
    opts.record_output_grads = true;
    acc.add(loss_and_grads(net, images, labels, opts));
  }
  return acc.scores;
}

struct ChannelPruneOptions {
  int steps = 100;            // total fine-tuning steps
  int removal_period = 100;   // one channel removed every this many steps
  double beta = 1e-6;         // FLOP penalty coefficient
  double lr = 8e-3;
  int batch_size = 32;
  uint64_t seed = 1;
  double target_compression = 0.0;  // stop once reached (0 = run all steps)
  ExecConfig cfg;
};

// Fine-tunes with SGD and removes one channel every removal_period steps:
// the argmin over channels of (accumulated saliency - beta * FLOPs saved),
// so expensive channels go first as beta grows. The network is recast
// dense after every removal.
template <typename T>
ChannelRecord channel_prune(Network<T>& net, const Dataset<T>& data,
                            const ChannelPruneOptions& opts) {
  if (opts.steps < 1 || opts.removal_period < 1)
    throw ConfigError("channel_prune: steps and removal_period must be >= 1");
  if (prunable_conv_layers(net).empty())
    throw ConfigError("channel_prune: network has no prunable conv layers");

  ChannelRecord record;
  record.original_params = count_params(net).total_params;

  FisherAccumulator<T> acc;
  acc.reset(net);
  std::vector<uint8_t> warned_exhausted(net.layers.size(), 0);

  Rng rng(opts.seed);
  std::vector<int> order(static_cast<size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  size_t cursor = 0;

  for (int step = 1; step <= opts.steps; ++step) {
    const int count = int(std::min<int64_t>(opts.batch_size, data.size()));
    Tensor<T> batch(count, data.images.c, data.images.h, data.images.w);
    std::vector<int32_t> labels(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      if (cursor >= order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      const int idx = order[cursor++];
      copy_image(data, idx, batch, i);
      labels[size_t(i)] = data.labels[size_t(idx)];
    }

    BackpropOptions bopts;
    bopts.cfg = opts.cfg;
    bopts.record_output_grads = true;
    BackpropResult<T> res = loss_and_grads(net, batch, labels, bopts);
    update_running_stats(net, res);
    acc.add(res);
    sgd_step(net, res.grads, opts.lr);

    if (step % opts.removal_period != 0) continue;

    int best_layer = -1, best_channel = -1;
    double best_score = 0.0, best_saliency = 0.0;
    for (size_t l = 0; l < acc.plans.size(); ++l) {
      if (!acc.plans[l].has_value()) continue;
      if (net.layers[l].out_channels <= 1) {  // never strip a layer bare
        if (!warned_exhausted[l]) {
          std::cerr << "channel_prune: layer " << l
                    << " is down to one channel, skipping it\n";
          warned_exhausted[l] = 1;
        }
        continue;
      }
      const double flops_per_channel =
          double(CostReport::kFlopsPerMac) * double(macs_saved_per_channel(net, *acc.plans[l]));
      for (size_t c = 0; c < acc.scores[l].size(); ++c) {
        const double score = acc.scores[l][c] - opts.beta * flops_per_channel;
        if (best_layer < 0 || score < best_score) {
          best_score = score;
          best_saliency = acc.scores[l][c];
          best_layer = int(l);
          best_channel = int(c);
        }
      }
    }
    if (best_layer < 0) {
      std::cerr << "channel_prune: no removable channels left, stopping\n";
      break;
    }
    const ChannelPlan plan = *acc.plans[size_t(best_layer)];
    record.params_removed += params_saved_per_channel(net, plan);
    remove_channel(net, plan, best_channel);
    record.removals.push_back({best_layer, best_channel, best_saliency, best_score});
    acc.reset(net);

    if (opts.target_compression > 0.0 &&
        record.compression_rate() >= opts.target_compression)
      break;
  }
  return record;
}

// ---------------------------------------------------------------------------
// Trained ternary quantisation. Each conv layer's weights collapse to
// {-Wn, 0, +Wp}; the threshold t is a fraction of the layer's max |w|.

struct TernaryLayerParams {
  bool quantized = false;
  double wp = 0.0, wn = 0.0;
  double threshold = 0.0;  // absolute cut Delta = t * max|w|
  std::vector<int8_t> codes;
};

struct TernaryParams {
  double t = 0.0;
  std::vector<TernaryLayerParams> layers;  // aligned with Network::layers
  std::vector<std::vector<TernaryLayerParams>> projections;  // [skip][proj layer]

  // Fraction of zero codes across quantized layers.
  double sparsity() const {
    int64_t zeros = 0, total = 0;
    auto tally = [&](const TernaryLayerParams& l) {
      if (!l.quantized) return;
      total += int64_t(l.codes.size());
      for (int8_t c : l.codes) zeros += (c == 0);
    };
    for (const auto& l : layers) tally(l);
    for (const auto& s : projections)
      for (const auto& l : s) tally(l);
    return total > 0 ? double(zeros) / double(total) : 0.0;
  }
};

namespace detail {

template <typename T>
bool ttq_quantizable(const Layer<T>& l) {
  return l.is_conv() && l.weight_format == WeightFormat::Dense && !l.weights.empty();
}

// Codes from a full-precision weight array: +1 above Delta, -1 below
// -Delta, else 0; scales are the mean |w| of each nonzero bucket.
template <typename T>
TernaryLayerParams ttq_fit(const std::vector<T>& w, double t) {
  TernaryLayerParams p;
  p.quantized = true;
  double max_abs = 0.0;
  for (T v : w) max_abs = std::max(max_abs, std::abs(double(v)));
  p.threshold = t * max_abs;
  p.codes.resize(w.size(), 0);
  double pos_sum = 0.0, neg_sum = 0.0;
  int64_t pos_n = 0, neg_n = 0;
  for (size_t i = 0; i < w.size(); ++i) {
    const double v = double(w[i]);
    if (v > p.threshold) {
      p.codes[i] = 1;
      pos_sum += v;
      ++pos_n;
    } else if (v < -p.threshold) {
      p.codes[i] = -1;
      neg_sum += -v;
      ++neg_n;
    }
  }
  if (pos_n > 0) {
    p.wp = pos_sum / double(pos_n);
  } else {
    p.wp = 0.0;
    std::cerr << "ttq: empty positive bucket, Wp set to 0\n";
  }
  if (neg_n > 0) {
    p.wn = neg_sum / double(neg_n);
  } else {
    p.wn = 0.0;
    std::cerr << "ttq: empty negative bucket, Wn set to 0\n";
  }
  return p;
}

// Re-derives only the codes (scales untouched) from shadow weights.
template <typename T>
void ttq_recode(const std::vector<T>& shadow, double t, TernaryLayerParams& p) {
  double max_abs = 0.0;
  for (T v : shadow) max_abs = std::max(max_abs, std::abs(double(v)));
  p.threshold = t * max_abs;
  for (size_t i = 0; i < shadow.size(); ++i) {
    const double v = double(shadow[i]);
    p.codes[i] = v > p.threshold ? int8_t(1) : (v < -p.threshold ? int8_t(-1) : int8_t(0));
  }
}

template <typename T>
void ttq_decode(const TernaryLayerParams& p, std::vector<T>& w) {
  for (size_t i = 0; i < w.size(); ++i)
    w[i] = p.codes[i] > 0 ? T(p.wp) : (p.codes[i] < 0 ? T(-p.wn) : T(0));
}

}  // namespace detail

// One-shot ternary quantisation of every conv layer's weights (residual
// projection convolutions included).
template <typename T>
TernaryParams ttq_quantize(Network<T>& net, double t) {
  if (t < 0.0 || t > 1.0) throw ConfigError("ttq threshold must be in [0,1]");
  TernaryParams params;
  params.t = t;
  params.layers.resize(net.layers.size());
  params.projections.resize(net.skips.size());
  for (size_t i = 0; i < net.layers.size(); ++i) {
    auto& l = net.layers[i];
    if (!detail::ttq_quantizable(l)) continue;
    params.layers[i] = detail::ttq_fit(l.weights, t);
    detail::ttq_decode(params.layers[i], l.weights);
  }
  for (size_t s = 0; s < net.skips.size(); ++s) {
    params.projections[s].resize(net.skips[s].projection.size());
    for (size_t p = 0; p < net.skips[s].projection.size(); ++p) {
      auto& pl = net.skips[s].projection[p];
      if (!detail::ttq_quantizable(pl)) continue;
      params.projections[s][p] = detail::ttq_fit(pl.weights, t);
      detail::ttq_decode(params.projections[s][p], pl.weights);
    }
  }
  return params;
}

template <typename T>
struct TtqTrainOptions {
  ExecConfig cfg;
  // Invoked after every optimisation step with the decoded network and the
  // current ternary state (invariant checks in tests).
  std::function<void(const Network<T>&, const TernaryParams&)> on_step;
};

// Two-step trained quantisation: the forward/backward pass measures the
// loss of the ternary network, then the full-precision shadow weights take
// the straight-through gradient and Wp/Wn take their bucket's accumulated
// gradient. Codes are re-derived from the shadow weights every step, so
// decoded conv weights stay in {-Wn, 0, +Wp} after each step.
template <typename T>
TernaryParams ttq_train(Network<T>& net, const Dataset<T>& data, double t,
                        const TrainSchedule& sched, const TtqTrainOptions<T>& topts = {}) {
  if (t < 0.0 || t > 1.0) throw ConfigError("ttq threshold must be in [0,1]");

  TernaryParams params;
  params.t = t;
  params.layers.resize(net.layers.size());
  params.projections.resize(net.skips.size());
  for (size_t s = 0; s < net.skips.size(); ++s)
    params.projections[s].resize(net.skips[s].projection.size());

  // One quantisation unit per conv weight array: its ternary state, the
  // full-precision shadow copy, and where to find weights and gradients.
  struct Unit {
    TernaryLayerParams* p;
    std::vector<T>* weights;
    std::vector<T> shadow;
    int layer, skip, proj;
  };
  std::vector<Unit> units;
  for (size_t i = 0; i < net.layers.size(); ++i) {
    auto& l = net.layers[i];
    if (!detail::ttq_quantizable(l)) continue;
    params.layers[i] = detail::ttq_fit(l.weights, t);
    units.push_back({&params.layers[i], &l.weights, l.weights, int(i), -1, -1});
    detail::ttq_decode(params.layers[i], l.weights);
  }
  for (size_t s = 0; s < net.skips.size(); ++s)
    for (size_t p = 0; p < net.skips[s].projection.size(); ++p) {
      auto& pl = net.skips[s].projection[p];
      if (!detail::ttq_quantizable(pl)) continue;
      params.projections[s][p] = detail::ttq_fit(pl.weights, t);
      units.push_back({&params.projections[s][p], &pl.weights, pl.weights, -1, int(s), int(p)});
      detail::ttq_decode(params.projections[s][p], pl.weights);
    }

  Rng rng(sched.seed);
  std::vector<int> order(static_cast<size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < sched.epochs; ++epoch) {
    const double lr = learning_rate(sched, epoch);
    rng.shuffle(order.begin(), order.end());
    for (size_t begin = 0; begin < order.size(); begin += size_t(sched.batch_size)) {
      const int count = int(std::min(order.size() - begin, size_t(sched.batch_size)));
      Tensor<T> batch(count, data.images.c, data.images.h, data.images.w);
      std::vector<int32_t> labels(static_cast<size_t>(count));
      for (int i = 0; i < count; ++i) {
        const int idx = order[begin + size_t(i)];
        copy_image(data, idx, batch, i);
        labels[size_t(i)] = data.labels[size_t(idx)];
      }

      BackpropOptions bopts;
      bopts.cfg = topts.cfg;
      BackpropResult<T> res = loss_and_grads(net, batch, labels, bopts);
      update_running_stats(net, res);

      // Scales and shadows first (their gradients come from the decoded
      // weights), then the ordinary step for biases and batchnorm.
      for (auto& u : units) {
        const auto& wg = u.layer >= 0
                             ? res.grads.layers[size_t(u.layer)].weights
                             : res.grads.skip_projections[size_t(u.skip)][size_t(u.proj)].weights;
        double gwp = 0.0, gwn = 0.0;
        for (size_t j = 0; j < wg.size(); ++j) {
          if (u.p->codes[j] > 0) gwp += double(wg[j]);
          else if (u.p->codes[j] < 0) gwn -= double(wg[j]);
          u.shadow[j] = T(double(u.shadow[j]) - lr * double(wg[j]));
        }
        u.p->wp = std::max(0.0, u.p->wp - lr * gwp);
        u.p->wn = std::max(0.0, u.p->wn - lr * gwn);
      }
      sgd_step(net, res.grads, lr);
      for (auto& u : units) {
        detail::ttq_recode(u.shadow, t, *u.p);
        detail::ttq_decode(*u.p, *u.weights);
      }
      if (topts.on_step) topts.on_step(net, params);
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Format conversion: flattened filter matrices to strict CSR. Covers every
// conv layer including residual projections; fully connected layers stay
// dense unless include_fc is set.

template <typename T>
void to_sparse_format(Network<T>& net, bool include_fc = false) {
  auto convert = [include_fc](Layer<T>& l) {
    if (!l.has_weights() || l.weight_format == WeightFormat::Csr) return;
    if (l.kind == LayerKind::FullyConnected && !include_fc) return;
    DenseMatrix<T> m;
    m.rows = l.flat_rows();
    m.cols = l.flat_cols();
    m.data = std::move(l.weights);
    l.sparse_weights = csr_from_dense(m, T(0));
    l.weight_format = WeightFormat::Csr;
    l.weights.clear();
    l.weights.shrink_to_fit();
  };
  for (auto& l : net.layers) convert(l);
  for (auto& s : net.skips)
    for (auto& pl : s.projection) convert(pl);
  validate(net);
}

// Densifies CSR layers back to flat weights (inverse of to_sparse_format).
template <typename T>
void to_dense_format(Network<T>& net) {
  auto convert = [](Layer<T>& l) {
    if (!l.has_weights() || l.weight_format == WeightFormat::Dense) return;
    DenseMatrix<T> m = csr_to_dense(l.sparse_weights);
    l.weights = std::move(m.data);
    l.weight_format = WeightFormat::Dense;
    l.sparse_weights = CsrMatrix<T>(l.flat_rows(), l.flat_cols());
  };
  for (auto& l : net.layers) convert(l);
  for (auto& s : net.skips)
    for (auto& pl : s.projection) convert(pl);
  validate(net);
}

// Bundle persisted next to the model: masks, ternary scales, removals.
struct CompressionState {
  PruneMask mask;
  TernaryParams ternary;
  ChannelRecord removals;
  std::vector<double> sparsity_levels;

  bool empty() const {
    return mask.empty() && ternary.layers.empty() && removals.removals.empty() &&
           sparsity_levels.empty();
  }
};

}  // namespace dlis
