#pragma once

#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "dlis/engine.hpp"
#include "dlis/graph.hpp"

namespace dlis {

template <typename T>
struct LayerGrads {
  std::vector<T> weights, bias, bn_gamma, bn_beta;
};

// One gradient array per parameter array in the network. Running
// batchnorm statistics are state, not parameters, and carry no gradient.
template <typename T>
struct GradientSet {
  std::vector<LayerGrads<T>> layers;
  std::vector<std::vector<LayerGrads<T>>> skip_projections;

  template <typename Net>
  static GradientSet allocate(const Net& net) {
    GradientSet g;
    auto alloc = [](const Layer<T>& l) {
      LayerGrads<T> lg;
      lg.weights.assign(l.weight_format == WeightFormat::Dense ? l.weights.size() : 0,
                        T(0));
      lg.bias.assign(l.bias.size(), T(0));
      lg.bn_gamma.assign(l.bn_gamma.size(), T(0));
      lg.bn_beta.assign(l.bn_beta.size(), T(0));
      return lg;
    };
    g.layers.reserve(net.layers.size());
    for (const auto& l : net.layers) g.layers.push_back(alloc(l));
    g.skip_projections.resize(net.skips.size());
    for (size_t s = 0; s < net.skips.size(); ++s)
      for (const auto& pl : net.skips[s].projection)
        g.skip_projections[s].push_back(alloc(pl));
    return g;
  }
};

// Visits every (parameter array, gradient array) pair in a fixed order:
// layers ascending, then skip projections.
template <typename T, typename Fn>
void for_each_param_array(Network<T>& net, GradientSet<T>& g, Fn&& fn) {
  auto visit = [&](Layer<T>& l, LayerGrads<T>& lg) {
    if (!l.weights.empty() && l.weight_format == WeightFormat::Dense)
      fn(l.weights, lg.weights);
    if (!l.bias.empty()) fn(l.bias, lg.bias);
    if (!l.bn_gamma.empty()) {
      fn(l.bn_gamma, lg.bn_gamma);
      fn(l.bn_beta, lg.bn_beta);
    }
  };
  for (size_t i = 0; i < net.layers.size(); ++i) visit(net.layers[i], g.layers[i]);
  for (size_t s = 0; s < net.skips.size(); ++s)
    for (size_t p = 0; p < net.skips[s].projection.size(); ++p)
      visit(net.skips[s].projection[p], g.skip_projections[s][p]);
}

// Activations and auxiliary state captured by the training-mode forward
// pass, consumed by backward().
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> outs;
  std::vector<std::vector<int32_t>> pool_argmax;
  std::vector<std::vector<T>> bn_mean, bn_var;  // batch statistics
  std::vector<std::vector<Tensor<T>>> skip_outs;
  std::vector<std::vector<std::vector<T>>> skip_bn_mean, skip_bn_var;
};

namespace detail {

// Training-mode batchnorm: normalises with the batch's own statistics
// (biased variance over N*H*W per channel).
template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& x, const Layer<T>& l, std::vector<T>& mean,
                          std::vector<T>& var, const ExecConfig& cfg) {
  if (x.c != int(l.bn_gamma.size()))
    throw ShapeError("batchnorm: channel count mismatch");
  mean.assign(size_t(x.c), T(0));
  var.assign(size_t(x.c), T(0));
  Tensor<T> out(x.n, x.c, x.h, x.w);
  const int64_t m = int64_t(x.n) * x.plane();
  parallel_for(x.c, cfg, [&](int64_t c) {
    T sum = T(0);
    for (int n = 0; n < x.n; ++n) {
      const T* src = x.channel_ptr(n, int(c));
      for (int64_t i = 0; i < x.plane(); ++i) sum += src[i];
    }
    const T mu = sum / T(m);
    T sq = T(0);
    for (int n = 0; n < x.n; ++n) {
      const T* src = x.channel_ptr(n, int(c));
      for (int64_t i = 0; i < x.plane(); ++i) {
        const T d = src[i] - mu;
        sq += d * d;
      }
    }
    const T v = sq / T(m);
    mean[size_t(c)] = mu;
    var[size_t(c)] = v;
    const T istd = T(1) / T(std::sqrt(double(v) + kBatchNormEpsilon));
    const T gamma = l.bn_gamma[size_t(c)], beta = l.bn_beta[size_t(c)];
    for (int n = 0; n < x.n; ++n) {
      const T* src = x.channel_ptr(n, int(c));
      T* dst = out.channel_ptr(n, int(c));
      for (int64_t i = 0; i < x.plane(); ++i)
        dst[i] = (src[i] - mu) * istd * gamma + beta;
    }
  });
  return out;
}

template <typename T>
Tensor<T> traced_layer_forward(const Layer<T>& l, const Tensor<T>& x,
                               const ExecConfig& cfg, std::vector<int32_t>* argmax,
                               std::vector<std::type_identity_t<T>>* bn_mean,
                               std::vector<std::type_identity_t<T>>* bn_var,
                               const Tensor<std::type_identity_t<T>>* skip_input) {
  switch (l.kind) {
    case LayerKind::MaxPool2d:
      return maxpool2d(x, l.kernel, l.stride, cfg, -1, argmax);
    case LayerKind::BatchNorm:
      return batchnorm_train(x, l, *bn_mean, *bn_var, cfg);
    default:
      return layer_forward(l, x, cfg, skip_input);
  }
}

}  // namespace detail

// Forward pass in training mode (batch-statistic batchnorm), retaining
// everything backward() needs. Running statistics are not touched.
template <typename T>
ForwardTrace<T> traced_forward(const Network<T>& net, const Tensor<T>& x,
                               const ExecConfig& cfg = {}) {
  if (!net.validated) throw ConfigError("traced_forward: network must be validated");
  if (x.c != net.input_shape.c || x.h != net.input_shape.h || x.w != net.input_shape.w)
    throw ShapeError("traced_forward: input does not match network input shape");
  const size_t L = net.layers.size();
  ForwardTrace<T> tr;
  tr.outs.reserve(L);
  tr.pool_argmax.resize(L);
  tr.bn_mean.resize(L);
  tr.bn_var.resize(L);
  tr.skip_outs.resize(net.skips.size());
  tr.skip_bn_mean.resize(net.skips.size());
  tr.skip_bn_var.resize(net.skips.size());

  for (size_t i = 0; i < L; ++i) {
    const auto& l = net.layers[i];
    const Tensor<T>& in = i == 0 ? x : tr.outs[i - 1];
    if (l.kind == LayerKind::ResidualAdd) {
      int skip_index = -1;
      for (size_t s = 0; s < net.skips.size(); ++s)
        if (net.skips[s].dst == int(i)) skip_index = int(s);
      const auto& skip = net.skips[size_t(skip_index)];
      tr.skip_bn_mean[size_t(skip_index)].resize(skip.projection.size());
      tr.skip_bn_var[size_t(skip_index)].resize(skip.projection.size());
      Tensor<T> branch = skip.src < 0 ? x : tr.outs[size_t(skip.src)];
      for (size_t p = 0; p < skip.projection.size(); ++p) {
        branch = detail::traced_layer_forward(
            skip.projection[p], branch, cfg, nullptr,
            &tr.skip_bn_mean[size_t(skip_index)][p],
            &tr.skip_bn_var[size_t(skip_index)][p], nullptr);
        tr.skip_outs[size_t(skip_index)].push_back(branch);
      }
      tr.outs.push_back(residual_add(in, branch, cfg));
    } else {
      tr.outs.push_back(detail::traced_layer_forward(l, in, cfg, &tr.pool_argmax[i],
                                                     &tr.bn_mean[i], &tr.bn_var[i],
                                                     nullptr));
    }
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Per-layer backward kernels. All reductions run in a fixed ascending
// order and every parallel work item writes a disjoint output slice, so
// gradients are bit-identical for any thread count.

namespace detail {

template <typename T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& g, const Layer<T>& l,
                     LayerGrads<T>& lg, Tensor<T>* gin, const ExecConfig& cfg) {
  const int k = l.kernel, stride = l.stride, pad = l.pad;
  const int out_c = l.out_channels, in_c = l.in_channels;
  const int oh = g.h, ow = g.w;

  parallel_for(out_c, cfg, [&](int64_t o) {
    T db = T(0);
    for (int n = 0; n < g.n; ++n) {
      const T* gp = g.channel_ptr(n, int(o));
      for (int64_t i = 0; i < g.plane(); ++i) db += gp[i];
    }
    if (!lg.bias.empty()) lg.bias[size_t(o)] = db;
    for (int c = 0; c < in_c; ++c)
      for (int u = 0; u < k; ++u)
        for (int v = 0; v < k; ++v) {
          T acc = T(0);
          for (int n = 0; n < g.n; ++n) {
            const T* gp = g.channel_ptr(n, int(o));
            const T* xp = in.channel_ptr(n, c);
            for (int i = 0; i < oh; ++i) {
              const int y = i * stride + u - pad;
              if (y < 0 || y >= in.h) continue;
              for (int j = 0; j < ow; ++j) {
                const int xx = j * stride + v - pad;
                if (xx < 0 || xx >= in.w) continue;
                acc += gp[size_t(i) * ow + j] * xp[size_t(y) * in.w + xx];
              }
            }
          }
          lg.weights[((size_t(o) * in_c + c) * k + u) * k + v] = acc;
        }
  });

  if (gin == nullptr) return;
  parallel_for(int64_t(g.n) * in_c, cfg, [&](int64_t item) {
    const int n = int(item / in_c);
    const int c = int(item % in_c);
    T* dx = gin->channel_ptr(n, c);
    for (int o = 0; o < out_c; ++o) {
      const T* gp = g.channel_ptr(n, o);
      const T* wrow = l.weights.data() + (size_t(o) * in_c + c) * k * k;
      for (int u = 0; u < k; ++u)
        for (int v = 0; v < k; ++v) {
          const T wv = wrow[size_t(u) * k + v];
          for (int i = 0; i < oh; ++i) {
            const int y = i * stride + u - pad;
            if (y < 0 || y >= in.h) continue;
            for (int j = 0; j < ow; ++j) {
              const int xx = j * stride + v - pad;
              if (xx < 0 || xx >= in.w) continue;
              dx[size_t(y) * in.w + xx] += gp[size_t(i) * ow + j] * wv;
            }
          }
        }
    }
  });
}

template <typename T>
void depthwise_backward(const Tensor<T>& in, const Tensor<T>& g, const Layer<T>& l,
                        LayerGrads<T>& lg, Tensor<T>* gin, const ExecConfig& cfg) {
  const int k = l.kernel, stride = l.stride, pad = l.pad;
  const int oh = g.h, ow = g.w;
  parallel_for(in.c, cfg, [&](int64_t c) {
    T db = T(0);
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        T acc = T(0);
        for (int n = 0; n < g.n; ++n) {
          const T* gp = g.channel_ptr(n, int(c));
          const T* xp = in.channel_ptr(n, int(c));
          for (int i = 0; i < oh; ++i) {
            const int y = i * stride + u - pad;
            if (y < 0 || y >= in.h) continue;
            for (int j = 0; j < ow; ++j) {
              const int xx = j * stride + v - pad;
              if (xx < 0 || xx >= in.w) continue;
              acc += gp[size_t(i) * ow + j] * xp[size_t(y) * in.w + xx];
            }
          }
        }
        lg.weights[(size_t(c) * k + u) * k + v] = acc;
      }
    for (int n = 0; n < g.n; ++n) {
      const T* gp = g.channel_ptr(n, int(c));
      for (int64_t i = 0; i < g.plane(); ++i) db += gp[i];
    }
    if (!lg.bias.empty()) lg.bias[size_t(c)] = db;
  });

  if (gin == nullptr) return;
  parallel_for(int64_t(g.n) * in.c, cfg, [&](int64_t item) {
    const int n = int(item / in.c);
    const int c = int(item % in.c);
    T* dx = gin->channel_ptr(n, c);
    const T* gp = g.channel_ptr(n, c);
    const T* filt = l.weights.data() + size_t(c) * k * k;
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        const T wv = filt[size_t(u) * k + v];
        for (int i = 0; i < oh; ++i) {
          const int y = i * stride + u - pad;
          if (y < 0 || y >= in.h) continue;
          for (int j = 0; j < ow; ++j) {
            const int xx = j * stride + v - pad;
            if (xx < 0 || xx >= in.w) continue;
            dx[size_t(y) * in.w + xx] += gp[size_t(i) * ow + j] * wv;
          }
        }
      }
  });
}

template <typename T>
void fc_backward(const Tensor<T>& in, const Tensor<T>& g, const Layer<T>& l,
                 LayerGrads<T>& lg, Tensor<T>* gin, const ExecConfig& cfg) {
  const int64_t features = l.in_channels;
  const int out_n = l.out_channels;
  parallel_for(out_n, cfg, [&](int64_t o) {
    T* wg = lg.weights.data() + size_t(o) * features;
    for (int64_t f = 0; f < features; ++f) wg[f] = T(0);
    T db = T(0);
    for (int n = 0; n < g.n; ++n) {
      const T gv = g.data[size_t(n) * out_n + size_t(o)];
      db += gv;
      const T* src = in.data.data() + size_t(n) * features;
      for (int64_t f = 0; f < features; ++f) wg[f] += gv * src[f];
    }
    if (!lg.bias.empty()) lg.bias[size_t(o)] = db;
  });
  if (gin == nullptr) return;
  parallel_for(g.n, cfg, [&](int64_t n) {
    T* dx = gin->data.data() + n * features;
    for (int o = 0; o < out_n; ++o) {
      const T gv = g.data[size_t(n) * out_n + size_t(o)];
      const T* wrow = l.weights.data() + size_t(o) * features;
      for (int64_t f = 0; f < features; ++f) dx[f] += gv * wrow[f];
    }
  });
}

template <typename T>
void batchnorm_backward(const Tensor<T>& in, const Tensor<T>& g, const Layer<T>& l,
                        const std::vector<T>& mean, const std::vector<T>& var,
                        LayerGrads<T>& lg, Tensor<T>* gin, const ExecConfig& cfg) {
  const int64_t m = int64_t(in.n) * in.plane();
  parallel_for(in.c, cfg, [&](int64_t c) {
    const T mu = mean[size_t(c)];
    const T istd = T(1) / T(std::sqrt(double(var[size_t(c)]) + kBatchNormEpsilon));
    const T gamma = l.bn_gamma[size_t(c)];
    T s1 = T(0), s2 = T(0);
    for (int n = 0; n < in.n; ++n) {
      const T* gp = g.channel_ptr(n, int(c));
      const T* xp = in.channel_ptr(n, int(c));
      for (int64_t i = 0; i < in.plane(); ++i) {
        s1 += gp[i];
        s2 += gp[i] * (xp[i] - mu) * istd;
      }
    }
    lg.bn_beta[size_t(c)] = s1;
    lg.bn_gamma[size_t(c)] = s2;
    if (gin == nullptr) return;
    const T inv_m = T(1) / T(m);
    for (int n = 0; n < in.n; ++n) {
      const T* gp = g.channel_ptr(n, int(c));
      const T* xp = in.channel_ptr(n, int(c));
      T* dx = gin->channel_ptr(n, int(c));
      for (int64_t i = 0; i < in.plane(); ++i) {
        const T xhat = (xp[i] - mu) * istd;
        dx[i] += gamma * istd * (gp[i] - s1 * inv_m - xhat * s2 * inv_m);
      }
    }
  });
}

template <typename T>
void relu_backward(const Tensor<T>& in, const Tensor<T>& g, Tensor<T>* gin,
                   const ExecConfig& cfg) {
  if (gin == nullptr) return;
  parallel_for(int64_t(in.n) * in.c, cfg, [&](int64_t item) {
    const int n = int(item / in.c);
    const int c = int(item % in.c);
    const T* xp = in.channel_ptr(n, c);
    const T* gp = g.channel_ptr(n, c);
    T* dx = gin->channel_ptr(n, c);
    // Subgradient at 0 is defined as 0.
    for (int64_t i = 0; i < in.plane(); ++i) dx[i] += xp[i] > T(0) ? gp[i] : T(0);
  });
}

template <typename T>
void maxpool_backward(const Tensor<T>& g, const std::vector<int32_t>& argmax,
                      Tensor<T>* gin, const ExecConfig& cfg) {
  if (gin == nullptr) return;
  parallel_for(int64_t(g.n) * g.c, cfg, [&](int64_t item) {
    const int n = int(item / g.c);
    const int c = int(item % g.c);
    const T* gp = g.channel_ptr(n, c);
    T* dx = gin->channel_ptr(n, c);
    const size_t base = g.index(n, c, 0, 0);
    for (int64_t i = 0; i < g.plane(); ++i) dx[argmax[base + size_t(i)]] += gp[i];
  });
}

template <typename T>
void softmax_backward(const Tensor<T>& out, const Tensor<T>& g, Tensor<T>* gin,
                      const ExecConfig& cfg) {
  if (gin == nullptr) return;
  const int64_t features = out.count() / std::max(1, out.n);
  parallel_for(out.n, cfg, [&](int64_t n) {
    const T* y = out.data.data() + n * features;
    const T* gp = g.data.data() + n * features;
    T* dx = gin->data.data() + n * features;
    T dot = T(0);
    for (int64_t i = 0; i < features; ++i) dot += gp[i] * y[i];
    for (int64_t i = 0; i < features; ++i) dx[i] += y[i] * (gp[i] - dot);
  });
}

// Backward through one traced layer; adds the input gradient into gin.
template <typename T>
void layer_backward(const Layer<T>& l, const Tensor<T>& in, const Tensor<T>& out,
                    const Tensor<T>& g, const std::vector<int32_t>& argmax,
                    const std::vector<T>& bn_mean, const std::vector<T>& bn_var,
                    LayerGrads<T>& lg, Tensor<T>* gin, const ExecConfig& cfg) {
  switch (l.kind) {
    case LayerKind::Conv2d: conv2d_backward(in, g, l, lg, gin, cfg); break;
    case LayerKind::DepthwiseConv2d: depthwise_backward(in, g, l, lg, gin, cfg); break;
    case LayerKind::FullyConnected: fc_backward(in, g, l, lg, gin, cfg); break;
    case LayerKind::MaxPool2d: maxpool_backward(g, argmax, gin, cfg); break;
    case LayerKind::BatchNorm: batchnorm_backward(in, g, l, bn_mean, bn_var, lg, gin, cfg); break;
    case LayerKind::Relu: relu_backward(in, g, gin, cfg); break;
    case LayerKind::Softmax: softmax_backward(out, g, gin, cfg); break;
    case LayerKind::ResidualAdd:
      throw ConfigError("residual_add is handled by the graph backward loop");
  }
}

}  // namespace detail

struct BackpropOptions {
  const PruneMask* mask = nullptr;
  ExecConfig cfg;
  bool record_output_grads = false;
  bool update_running_stats = false;
  double bn_momentum = 0.1;
};

template <typename T>
struct BackpropResult {
  double loss = 0.0;
  GradientSet<T> grads;
  std::vector<Tensor<T>> outs;       // per-layer activations
  std::vector<Tensor<T>> out_grads;  // filled when record_output_grads
  // Batch statistics from the training-mode forward, for running-stat updates.
  std::vector<std::vector<T>> bn_mean, bn_var;
  std::vector<std::vector<std::vector<T>>> skip_bn_mean, skip_bn_var;
};

// Mean cross-entropy of softmax(logits) plus its gradient w.r.t. logits.
template <typename T>
std::pair<double, Tensor<T>> cross_entropy_loss(const Tensor<T>& logits,
                                                const std::vector<int32_t>& labels) {
  const int n = logits.n;
  if (int(labels.size()) != n) throw ConfigError("cross_entropy: label count mismatch");
  const int64_t classes = logits.count() / std::max(1, n);
  Tensor<T> dlogits(logits.n, logits.c, logits.h, logits.w);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const int32_t label = labels[size_t(i)];
    if (label < 0 || int64_t(label) >= classes)
      throw ConfigError("cross_entropy: label " + std::to_string(label) +
                        " out of range [0, " + std::to_string(classes) + ")");
    const T* row = logits.data.data() + int64_t(i) * classes;
    T* drow = dlogits.data.data() + int64_t(i) * classes;
    T mx = row[0];
    for (int64_t k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (int64_t k = 0; k < classes; ++k) sum += std::exp(double(row[k] - mx));
    loss -= double(row[label] - mx) - std::log(sum);
    for (int64_t k = 0; k < classes; ++k) {
      const double p = std::exp(double(row[k] - mx)) / sum;
      drow[k] = T((p - (k == label ? 1.0 : 0.0)) / double(n));
    }
  }
  return {loss / double(n), std::move(dlogits)};
}

// Reverse-mode gradients of the mean cross-entropy loss. Masked weights
// (mask entry 0) receive zero gradient, so they stay zero under SGD.
template <typename T>
BackpropResult<T> loss_and_grads(const Network<T>& net, const Tensor<T>& images,
                                 const std::vector<int32_t>& labels,
                                 const BackpropOptions& opts = {}) {
  if (images.n < 1) throw ConfigError("loss_and_grads: empty batch");
  for (const auto& l : net.layers)
    if (l.has_weights() && l.weight_format != WeightFormat::Dense)
      throw ConfigError("loss_and_grads: training requires dense weight format");
  for (const auto& s : net.skips)
    for (const auto& pl : s.projection)
      if (pl.has_weights() && pl.weight_format != WeightFormat::Dense)
        throw ConfigError("loss_and_grads: training requires dense weight format");

  ForwardTrace<T> tr = traced_forward(net, images, opts.cfg);
  auto [loss, dlogits] = cross_entropy_loss(tr.outs.back(), labels);

  BackpropResult<T> result;
  result.loss = loss;
  result.grads = GradientSet<T>::allocate(net);

  const size_t L = net.layers.size();
  std::vector<Tensor<T>> gout(L);
  for (size_t i = 0; i < L; ++i)
    gout[i] = Tensor<T>(tr.outs[i].n, tr.outs[i].c, tr.outs[i].h, tr.outs[i].w);
  gout[L - 1] = std::move(dlogits);

  for (size_t ri = L; ri-- > 0;) {
    const auto& l = net.layers[ri];
    const Tensor<T>& in = ri == 0 ? images : tr.outs[ri - 1];
    const Tensor<T>& g = gout[ri];
    Tensor<T>* gin = ri == 0 ? nullptr : &gout[ri - 1];

    if (l.kind == LayerKind::ResidualAdd) {
      if (gin != nullptr)
        for (int64_t i = 0; i < g.count(); ++i) gin->data[size_t(i)] += g.data[size_t(i)];
      int skip_index = -1;
      for (size_t s = 0; s < net.skips.size(); ++s)
        if (net.skips[s].dst == int(ri)) skip_index = int(s);
      const auto& skip = net.skips[size_t(skip_index)];
      Tensor<T> gcur = g;
      for (size_t p = skip.projection.size(); p-- > 0;) {
        const auto& pl = skip.projection[p];
        const Tensor<T>& pin = p == 0 ? (skip.src < 0 ? images : tr.outs[size_t(skip.src)])
                                      : tr.skip_outs[size_t(skip_index)][p - 1];
        const Tensor<T>& pout = tr.skip_outs[size_t(skip_index)][p];
        Tensor<T> gprev(pin.n, pin.c, pin.h, pin.w);
        detail::layer_backward(pl, pin, pout, gcur, {},
                               tr.skip_bn_mean[size_t(skip_index)][p],
                               tr.skip_bn_var[size_t(skip_index)][p],
                               result.grads.skip_projections[size_t(skip_index)][p],
                               &gprev, opts.cfg);
        gcur = std::move(gprev);
      }
      if (skip.src >= 0) {
        Tensor<T>& target = gout[size_t(skip.src)];
        for (int64_t i = 0; i < gcur.count(); ++i)
          target.data[size_t(i)] += gcur.data[size_t(i)];
      }
    } else {
      detail::layer_backward(l, in, tr.outs[ri], g, tr.pool_argmax[ri], tr.bn_mean[ri],
                             tr.bn_var[ri], result.grads.layers[ri], gin, opts.cfg);
    }
  }

  if (opts.mask != nullptr) {
    auto apply = [](const std::vector<uint8_t>& m, std::vector<T>& wg, size_t where) {
      if (m.empty() || wg.empty()) return;
      if (m.size() != wg.size())
        throw ShapeError("mask size mismatch at layer " + std::to_string(where));
      for (size_t j = 0; j < m.size(); ++j)
        if (m[j] == 0) wg[j] = T(0);
    };
    for (size_t i = 0; i < L && i < opts.mask->layers.size(); ++i)
      apply(opts.mask->layers[i], result.grads.layers[i].weights, i);
    for (size_t s = 0; s < net.skips.size() && s < opts.mask->projections.size(); ++s)
      for (size_t p = 0; p < opts.mask->projections[s].size(); ++p)
        apply(opts.mask->projections[s][p],
              result.grads.skip_projections[s][p].weights, s);
  }

  result.outs = std::move(tr.outs);
  if (opts.record_output_grads) result.out_grads = std::move(gout);
  result.bn_mean = std::move(tr.bn_mean);
  result.bn_var = std::move(tr.bn_var);
  result.skip_bn_mean = std::move(tr.skip_bn_mean);
  result.skip_bn_var = std::move(tr.skip_bn_var);
  return result;
}

// Updates running batchnorm statistics from the batch statistics captured
// by a training-mode forward: running <- (1-momentum)*running + momentum*batch.
template <typename T>
void update_running_stats(Network<T>& net, const BackpropResult<T>& res,
                          double momentum = 0.1) {
  auto blend = [momentum](std::vector<T>& running, const std::vector<T>& batch) {
    for (size_t i = 0; i < running.size(); ++i)
      running[i] = T((1.0 - momentum) * double(running[i]) + momentum * double(batch[i]));
  };
  for (size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].kind != LayerKind::BatchNorm) continue;
    blend(net.layers[i].bn_mean, res.bn_mean[i]);
    blend(net.layers[i].bn_var, res.bn_var[i]);
  }
  for (size_t s = 0; s < net.skips.size(); ++s)
    for (size_t p = 0; p < net.skips[s].projection.size(); ++p) {
      auto& pl = net.skips[s].projection[p];
      if (pl.kind != LayerKind::BatchNorm) continue;
      blend(pl.bn_mean, res.skip_bn_mean[s][p]);
      blend(pl.bn_var, res.skip_bn_var[s][p]);
    }
}

// Training-mode loss without gradients (used by the finite-difference
// oracle; never touches running statistics).
template <typename T>
double loss_only(const Network<T>& net, const Tensor<T>& images,
                 const std::vector<int32_t>& labels, const ExecConfig& cfg = {}) {
  ForwardTrace<T> tr = traced_forward(net, images, cfg);
  return cross_entropy_loss(tr.outs.back(), labels).first;
}

// Central finite differences over every parameter. The relative error of
// element e is |analytic - fd| / max(1, |analytic|, |fd|); returns the
// maximum over all parameters. Meant for 64-bit networks. The oracle is
// only valid away from relu/maxpool kinks: an activation sitting exactly
// at zero (e.g. an all-zero patch under a zero bias) is moved across the
// kink by bias perturbations, where the two sides legitimately disagree.
template <typename T>
double finite_diff_check(Network<T>& net, const Tensor<T>& images,
                         const std::vector<int32_t>& labels, double eps = 1e-5,
                         const ExecConfig& cfg = {}) {
  BackpropOptions opts;
  opts.cfg = cfg;
  BackpropResult<T> res = loss_and_grads(net, images, labels, opts);

  double max_rel = 0.0;
  for_each_param_array(net, res.grads, [&](std::vector<T>& param, std::vector<T>& grad) {
    for (size_t i = 0; i < param.size(); ++i) {
      const T orig = param[i];
      param[i] = T(double(orig) + eps);
      const double lplus = loss_only(net, images, labels, cfg);
      param[i] = T(double(orig) - eps);
      const double lminus = loss_only(net, images, labels, cfg);
      param[i] = orig;
      const double fd = (lplus - lminus) / (2.0 * eps);
      const double a = double(grad[i]);
      const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      max_rel = std::max(max_rel, rel);
    }
  });
  return max_rel;
}

}  // namespace dlis
