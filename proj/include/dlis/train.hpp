#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dlis/autodiff.hpp"
#include "dlis/data.hpp"
#include "dlis/engine.hpp"
#include "dlis/rng.hpp"

namespace dlis {

// Stepped learning-rate schedule: lr(epoch) = base * factor^(epoch / every).
// Plain SGD by default; momentum and weight decay are opt-in knobs.
struct TrainSchedule {
  double base_lr = 0.1;
  double decay_factor = 0.1;
  int decay_every = 50;
  int epochs = 0;
  int batch_size = 128;
  uint64_t seed = 1;
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool augment = false;
};

inline double learning_rate(const TrainSchedule& s, int epoch) {
  if (s.base_lr <= 0 || s.decay_factor <= 0 || s.decay_every <= 0)
    throw ConfigError("train schedule values must be positive");
  return s.base_lr * std::pow(s.decay_factor, double(epoch / s.decay_every));
}

// p <- p - lr * g elementwise. With momentum mu and weight decay wd:
// v <- mu*v + (g + wd*p); p <- p - lr*v.
template <typename T>
void sgd_step(Network<T>& net, GradientSet<T>& grads, double lr,
              GradientSet<T>* velocity = nullptr, double momentum = 0.0,
              double weight_decay = 0.0) {
  if (lr <= 0) throw ConfigError("sgd_step: lr must be > 0");
  if (momentum != 0.0 && velocity == nullptr)
    throw ConfigError("sgd_step: momentum requires a velocity state");

  if (velocity == nullptr || momentum == 0.0) {
    for_each_param_array(net, grads, [&](std::vector<T>& p, std::vector<T>& g) {
      for (size_t i = 0; i < p.size(); ++i) {
        const T step = weight_decay == 0.0 ? g[i] : T(double(g[i]) + weight_decay * double(p[i]));
        p[i] = T(double(p[i]) - lr * double(step));
      }
    });
    return;
  }

  // Pair up the velocity arrays by walking both sets in the same order.
  std::vector<std::vector<T>*> vel;
  for_each_param_array(net, *velocity, [&](std::vector<T>&, std::vector<T>& v) {
    vel.push_back(&v);
  });
  size_t idx = 0;
  for_each_param_array(net, grads, [&](std::vector<T>& p, std::vector<T>& g) {
    std::vector<T>& v = *vel[idx++];
    for (size_t i = 0; i < p.size(); ++i) {
      const double gi = double(g[i]) + weight_decay * double(p[i]);
      v[i] = T(momentum * double(v[i]) + gi);
      p[i] = T(double(p[i]) - lr * double(v[i]));
    }
  });
}

// Training augmentation: zero-pad a 32x32 image by 2 on every side and
// take a random 32x32 crop (offsets drawn row first, then column).
template <typename T>
Tensor<T> augment(const Tensor<T>& image, Rng& rng) {
  if (image.n != 1) throw ConfigError("augment: expects a single image");
  if (image.h != 32 || image.w != 32)
    throw GeometryError("augment: expects a 32x32 image");
  const int pad = 2;
  const int oy = int(rng.uniform_int(2 * pad + 1));
  const int ox = int(rng.uniform_int(2 * pad + 1));
  Tensor<T> out(1, image.c, image.h, image.w);
  for (int c = 0; c < image.c; ++c) {
    const T* src = image.channel_ptr(0, c);
    T* dst = out.channel_ptr(0, c);
    for (int i = 0; i < image.h; ++i) {
      const int y = i + oy - pad;
      for (int j = 0; j < image.w; ++j) {
        const int x = j + ox - pad;
        dst[size_t(i) * image.w + j] =
            (y >= 0 && y < image.h && x >= 0 && x < image.w)
                ? src[size_t(y) * image.w + x]
                : T(0);
      }
    }
  }
  return out;
}

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_accuracy = -1.0;
  double test_accuracy = -1.0;
};

template <typename T>
struct TrainOptions {
  const PruneMask* mask = nullptr;
  const Dataset<T>* test = nullptr;
  ExecConfig cfg;
  bool history_accuracy = true;
};

// SGD training loop. Fully deterministic given (seed, schedule, data):
// shuffling, augmentation draws, and gradient accumulation all run in a
// fixed order. Per-epoch rows record mean batch loss and accuracies.
template <typename T>
std::vector<EpochStats> train(Network<T>& net, const Dataset<T>& data,
                              const TrainSchedule& sched,
                              const TrainOptions<T>& opts = {}) {
  if (sched.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (sched.epochs < 0) throw ConfigError("train: epochs must be >= 0");
  std::vector<EpochStats> history;
  if (sched.epochs == 0) return history;

  Rng rng(sched.seed);
  std::vector<int> order(static_cast<size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);

  GradientSet<T> velocity;
  if (sched.momentum != 0.0) velocity = GradientSet<T>::allocate(net);

  for (int epoch = 0; epoch < sched.epochs; ++epoch) {
    const double lr = learning_rate(sched, epoch);
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    int batches = 0;
    for (size_t begin = 0; begin < order.size(); begin += size_t(sched.batch_size)) {
      const int count = int(std::min(order.size() - begin, size_t(sched.batch_size)));
      Tensor<T> batch(count, data.images.c, data.images.h, data.images.w);
      std::vector<int32_t> labels(static_cast<size_t>(count));
      for (int i = 0; i < count; ++i) {
        const int idx = order[begin + size_t(i)];
        if (sched.augment) {
          Tensor<T> img(1, data.images.c, data.images.h, data.images.w);
          copy_image(data, idx, img, 0);
          const Tensor<T> aug = augment(img, rng);
          std::copy(aug.data.begin(), aug.data.end(),
                    batch.data.begin() + batch.index(i, 0, 0, 0));
        } else {
          copy_image(data, idx, batch, i);
        }
        labels[size_t(i)] = data.labels[size_t(idx)];
      }
      BackpropOptions bopts;
      bopts.mask = opts.mask;
      bopts.cfg = opts.cfg;
      BackpropResult<T> res = loss_and_grads(net, batch, labels, bopts);
      update_running_stats(net, res, /*momentum=*/0.1);
      loss_sum += res.loss;
      ++batches;
      sgd_step(net, res.grads, lr, sched.momentum != 0.0 ? &velocity : nullptr,
               sched.momentum, sched.weight_decay);
    }
    EpochStats row;
    row.epoch = epoch;
    row.lr = lr;
    row.loss = batches > 0 ? loss_sum / double(batches) : 0.0;
    if (opts.history_accuracy) {
      row.train_accuracy = evaluate_accuracy(net, data, opts.cfg);
      if (opts.test != nullptr)
        row.test_accuracy = evaluate_accuracy(net, *opts.test, opts.cfg);
    }
    history.push_back(row);
  }
  return history;
}

}  // namespace dlis
