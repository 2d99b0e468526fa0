#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlis/errors.hpp"
#include "dlis/tensor.hpp"

namespace dlis {

enum class LayerKind : uint8_t {
  Conv2d = 0,
  DepthwiseConv2d = 1,
  FullyConnected = 2,
  MaxPool2d = 3,
  BatchNorm = 4,
  Relu = 5,
  ResidualAdd = 6,
  Softmax = 7,
};

enum class WeightFormat : uint8_t { Dense = 0, Csr = 1 };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::DepthwiseConv2d: return "depthwise_conv2d";
    case LayerKind::FullyConnected: return "fully_connected";
    case LayerKind::MaxPool2d: return "maxpool2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::ResidualAdd: return "residual_add";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

inline const char* to_string(WeightFormat f) {
  return f == WeightFormat::Dense ? "dense" : "csr";
}

struct Shape3 {
  int c = 0, h = 0, w = 0;
  int64_t count() const { return int64_t(c) * h * w; }
  bool operator==(const Shape3&) const = default;
};

inline constexpr double kBatchNormEpsilon = 1e-5;

// One layer of the network. Conv weights are stored flat in
// (out, in_per_group, kh, kw) order; reinterpreted row-major that is the
// (out_C) x (in_per_group * K * K) flattened filter matrix used by the
// im2col and CSR paths. FC weights are (out) x (in features).
template <typename T>
struct Layer {
  LayerKind kind = LayerKind::Relu;
  int in_channels = 0;   // FC: input feature count
  int out_channels = 0;  // FC: output count
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  WeightFormat weight_format = WeightFormat::Dense;

  std::vector<T> weights;
  std::vector<T> bias;
  std::vector<T> bn_gamma, bn_beta, bn_mean, bn_var;
  CsrMatrix<T> sparse_weights;

  // Filled by validate().
  Shape3 in_shape, out_shape;

  int groups() const { return kind == LayerKind::DepthwiseConv2d ? in_channels : 1; }
  bool is_conv() const {
    return kind == LayerKind::Conv2d || kind == LayerKind::DepthwiseConv2d;
  }
  bool has_weights() const { return is_conv() || kind == LayerKind::FullyConnected; }
  bool has_bias() const { return !bias.empty(); }

  int64_t dense_weight_count() const {
    switch (kind) {
      case LayerKind::Conv2d:
        return int64_t(out_channels) * in_channels * kernel * kernel;
      case LayerKind::DepthwiseConv2d:
        return int64_t(out_channels) * kernel * kernel;
      case LayerKind::FullyConnected:
        return int64_t(out_channels) * in_channels;
      default:
        return 0;
    }
  }

  // Rows/cols of the flattened filter matrix (valid for weighted layers).
  int flat_rows() const { return out_channels; }
  int flat_cols() const {
    switch (kind) {
      case LayerKind::Conv2d: return in_channels * kernel * kernel;
      case LayerKind::DepthwiseConv2d: return kernel * kernel;
      case LayerKind::FullyConnected: return in_channels;
      default: return 0;
    }
  }

  int64_t param_count() const {
    return (weight_format == WeightFormat::Dense ? dense_weight_count()
                                                 : sparse_weights.nnz()) +
           int64_t(bias.size()) + int64_t(bn_gamma.size()) + int64_t(bn_beta.size()) +
           int64_t(bn_mean.size()) + int64_t(bn_var.size());
  }
};

// Residual shortcut: the output of layer `src` (-1 = network input) is fed
// through `projection` (empty = identity) and summed at the residual_add
// layer `dst`. Downsampling blocks carry a 1x1 conv + batchnorm here.
template <typename T>
struct SkipConnection {
  int src = -1;
  int dst = -1;
  std::vector<Layer<T>> projection;
};

enum class Arch : uint8_t { Custom = 0, Vgg16Cifar = 1, Resnet18 = 2, Mobilenet = 3 };

inline const char* to_string(Arch a) {
  switch (a) {
    case Arch::Custom: return "custom";
    case Arch::Vgg16Cifar: return "vgg16_cifar";
    case Arch::Resnet18: return "resnet18";
    case Arch::Mobilenet: return "mobilenet";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "custom") return Arch::Custom;
  if (s == "vgg16_cifar") return Arch::Vgg16Cifar;
  if (s == "resnet18") return Arch::Resnet18;
  if (s == "mobilenet") return Arch::Mobilenet;
  throw ConfigError("unknown architecture: " + s);
}

template <typename T>
struct Network {
  std::string name;
  Arch arch = Arch::Custom;
  std::vector<Layer<T>> layers;
  std::vector<SkipConnection<T>> skips;
  Shape3 input_shape;
  int num_classes = 0;
  bool validated = false;

  const SkipConnection<T>* skip_at(int dst) const {
    for (const auto& s : skips)
      if (s.dst == dst) return &s;
    return nullptr;
  }
  SkipConnection<T>* skip_at(int dst) {
    for (auto& s : skips)
      if (s.dst == dst) return &s;
    return nullptr;
  }
};

// Per-layer binary keep-masks aligned with Network::layers (1 = kept,
// 0 = pruned); an empty per-layer vector means the layer is unmasked.
// Residual projection convolutions carry their own masks, indexed
// [skip][projection layer].
struct PruneMask {
  std::vector<std::vector<uint8_t>> layers;
  std::vector<std::vector<std::vector<uint8_t>>> projections;

  bool empty() const {
    for (const auto& m : layers)
      if (!m.empty()) return false;
    for (const auto& s : projections)
      for (const auto& m : s)
        if (!m.empty()) return false;
    return true;
  }

  int64_t zeros(int l) const {
    int64_t z = 0;
    for (uint8_t v : layers[size_t(l)]) z += (v == 0);
    return z;
  }

  double layer_sparsity(int l) const {
    const auto& m = layers[size_t(l)];
    if (m.empty()) return 0.0;
    return double(zeros(l)) / double(m.size());
  }

  double overall_sparsity() const {
    int64_t z = 0, t = 0;
    auto tally = [&](const std::vector<uint8_t>& m) {
      for (uint8_t v : m) z += (v == 0);
      t += int64_t(m.size());
    };
    for (const auto& m : layers) tally(m);
    for (const auto& s : projections)
      for (const auto& m : s) tally(m);
    return t == 0 ? 0.0 : double(z) / double(t);
  }
};

// ---------------------------------------------------------------------------
// Layer factories. Conv/FC weights are allocated zero-filled; batchnorm
// parameters start as the identity transform.

template <typename T>
Layer<T> conv2d_layer(int in_ch, int out_ch, int kernel, int stride = 1, int pad = 0,
                      bool with_bias = true) {
  Layer<T> l;
  l.kind = LayerKind::Conv2d;
  l.in_channels = in_ch;
  l.out_channels = out_ch;
  l.kernel = kernel;
  l.stride = stride;
  l.pad = pad;
  l.weights.assign(size_t(l.dense_weight_count()), T(0));
  if (with_bias) l.bias.assign(size_t(out_ch), T(0));
  return l;
}

template <typename T>
Layer<T> depthwise_conv2d_layer(int channels, int kernel, int stride = 1, int pad = 0,
                                bool with_bias = true) {
  Layer<T> l;
  l.kind = LayerKind::DepthwiseConv2d;
  l.in_channels = channels;
  l.out_channels = channels;
  l.kernel = kernel;
  l.stride = stride;
  l.pad = pad;
  l.weights.assign(size_t(l.dense_weight_count()), T(0));
  if (with_bias) l.bias.assign(size_t(channels), T(0));
  return l;
}

template <typename T>
Layer<T> fully_connected_layer(int in_features, int out, bool with_bias = true) {
  Layer<T> l;
  l.kind = LayerKind::FullyConnected;
  l.in_channels = in_features;
  l.out_channels = out;
  l.weights.assign(size_t(l.dense_weight_count()), T(0));
  if (with_bias) l.bias.assign(size_t(out), T(0));
  return l;
}

template <typename T>
Layer<T> maxpool2d_layer(int kernel, int stride) {
  Layer<T> l;
  l.kind = LayerKind::MaxPool2d;
  l.kernel = kernel;
  l.stride = stride;
  return l;
}

template <typename T>
Layer<T> batchnorm_layer(int channels) {
  Layer<T> l;
  l.kind = LayerKind::BatchNorm;
  l.in_channels = channels;
  l.out_channels = channels;
  l.bn_gamma.assign(size_t(channels), T(1));
  l.bn_beta.assign(size_t(channels), T(0));
  l.bn_mean.assign(size_t(channels), T(0));
  l.bn_var.assign(size_t(channels), T(1));
  return l;
}

template <typename T>
Layer<T> relu_layer() {
  Layer<T> l;
  l.kind = LayerKind::Relu;
  return l;
}

template <typename T>
Layer<T> residual_add_layer() {
  Layer<T> l;
  l.kind = LayerKind::ResidualAdd;
  return l;
}

template <typename T>
Layer<T> softmax_layer() {
  Layer<T> l;
  l.kind = LayerKind::Softmax;
  return l;
}

// ---------------------------------------------------------------------------
// Shape inference / validation.

// Floor convolution geometry: out = (extent + 2*pad - K) / stride + 1.
// Positions that do not fit are discarded, matching the reference
// topologies' stride-2 3x3 convolutions on even extents.
inline int conv_out_extent(int extent, int kernel, int stride, int pad,
                           const std::string& what) {
  if (kernel < 1) throw GeometryError(what + ": kernel must be >= 1");
  if (stride < 1) throw GeometryError(what + ": stride must be >= 1");
  if (pad < 0) throw GeometryError(what + ": pad must be >= 0");
  const int padded = extent + 2 * pad;
  if (padded < kernel)
    throw GeometryError(what + ": kernel " + std::to_string(kernel) +
                        " exceeds padded extent " + std::to_string(padded));
  return (padded - kernel) / stride + 1;
}

namespace detail {

template <typename T>
Shape3 infer_layer_shape(Layer<T>& l, const Shape3& in, const std::string& where) {
  l.in_shape = in;
  switch (l.kind) {
    case LayerKind::Conv2d: {
      if (in.c != l.in_channels)
        throw ShapeError(where + ": conv2d expects " + std::to_string(l.in_channels) +
                         " input channels, got " + std::to_string(in.c));
      if (l.weight_format == WeightFormat::Dense) {
        if (int64_t(l.weights.size()) != l.dense_weight_count())
          throw ShapeError(where + ": conv2d weight count mismatch");
      } else {
        if (l.sparse_weights.rows != l.flat_rows() ||
            l.sparse_weights.cols != l.flat_cols())
          throw ShapeError(where + ": conv2d csr weight shape mismatch");
      }
      if (!l.bias.empty() && int(l.bias.size()) != l.out_channels)
        throw ShapeError(where + ": conv2d bias count mismatch");
      const int oh = conv_out_extent(in.h, l.kernel, l.stride, l.pad, where);
      const int ow = conv_out_extent(in.w, l.kernel, l.stride, l.pad, where);
      l.out_shape = {l.out_channels, oh, ow};
      break;
    }
    case LayerKind::DepthwiseConv2d: {
      if (in.c != l.in_channels || l.out_channels != l.in_channels)
        throw ShapeError(where + ": depthwise conv requires out_channels == in_channels == input channels");
      if (l.weight_format == WeightFormat::Dense) {
        if (int64_t(l.weights.size()) != l.dense_weight_count())
          throw ShapeError(where + ": depthwise weight count mismatch");
      } else {
        if (l.sparse_weights.rows != l.flat_rows() ||
            l.sparse_weights.cols != l.flat_cols())
          throw ShapeError(where + ": depthwise csr weight shape mismatch");
      }
      const int oh = conv_out_extent(in.h, l.kernel, l.stride, l.pad, where);
      const int ow = conv_out_extent(in.w, l.kernel, l.stride, l.pad, where);
      l.out_shape = {l.out_channels, oh, ow};
      break;
    }
    case LayerKind::FullyConnected: {
      if (in.count() != l.in_channels)
        throw ShapeError(where + ": fully_connected expects " +
                         std::to_string(l.in_channels) + " input features, got " +
                         std::to_string(in.count()));
      if (l.weight_format == WeightFormat::Dense) {
        if (int64_t(l.weights.size()) != l.dense_weight_count())
          throw ShapeError(where + ": fully_connected weight count mismatch");
      } else {
        if (l.sparse_weights.rows != l.flat_rows() ||
            l.sparse_weights.cols != l.flat_cols())
          throw ShapeError(where + ": fully_connected csr weight shape mismatch");
      }
      l.out_shape = {l.out_channels, 1, 1};
      break;
    }
    case LayerKind::MaxPool2d: {
      if (l.pad != 0) throw GeometryError(where + ": maxpool2d does not support padding");
      const int oh = conv_out_extent(in.h, l.kernel, l.stride, 0, where);
      const int ow = conv_out_extent(in.w, l.kernel, l.stride, 0, where);
      l.in_channels = l.out_channels = in.c;
      l.out_shape = {in.c, oh, ow};
      break;
    }
    case LayerKind::BatchNorm: {
      if (in.c != l.in_channels)
        throw ShapeError(where + ": batchnorm expects " + std::to_string(l.in_channels) +
                         " channels, got " + std::to_string(in.c));
      const size_t ch = size_t(in.c);
      if (l.bn_gamma.size() != ch || l.bn_beta.size() != ch ||
          l.bn_mean.size() != ch || l.bn_var.size() != ch)
        throw ShapeError(where + ": batchnorm parameter arrays must have length channels");
      for (T v : l.bn_var)
        if (v < T(0)) throw ShapeError(where + ": batchnorm variance must be >= 0");
      l.out_shape = in;
      break;
    }
    case LayerKind::Relu:
    case LayerKind::Softmax:
    case LayerKind::ResidualAdd: {
      l.in_channels = l.out_channels = in.c;
      l.out_shape = in;
      break;
    }
  }
  return l.out_shape;
}

}  // namespace detail

// Walks the layer list, infers every activation shape, and checks all
// inter-layer contracts. Throws ShapeError/GeometryError naming the first
// offending layer. On success the network carries the inferred shapes.
template <typename T>
void validate(Network<T>& net) {
  net.validated = false;
  if (net.input_shape.c < 1 || net.input_shape.h < 1 || net.input_shape.w < 1)
    throw ShapeError("network input shape must be positive");
  for (const auto& s : net.skips) {
    if (s.dst < 0 || s.dst >= int(net.layers.size()))
      throw ShapeError("skip destination out of range");
    if (net.layers[size_t(s.dst)].kind != LayerKind::ResidualAdd)
      throw ShapeError("skip destination must be a residual_add layer");
    if (s.src < -1 || s.src >= s.dst)
      throw ShapeError("skip source must precede its destination");
  }

  std::vector<Shape3> outs(net.layers.size());
  Shape3 cur = net.input_shape;
  for (size_t i = 0; i < net.layers.size(); ++i) {
    auto& l = net.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    if (l.kind == LayerKind::ResidualAdd) {
      SkipConnection<T>* skip = net.skip_at(int(i));
      if (skip == nullptr)
        throw ShapeError(where + ": residual_add has no skip connection");
      Shape3 branch = skip->src < 0 ? net.input_shape : outs[size_t(skip->src)];
      for (size_t p = 0; p < skip->projection.size(); ++p) {
        branch = detail::infer_layer_shape(
            skip->projection[p], branch, where + " projection " + std::to_string(p));
      }
      if (!(branch == cur))
        throw ShapeError(where + ": residual branch shape (" + std::to_string(branch.c) +
                         "," + std::to_string(branch.h) + "," + std::to_string(branch.w) +
                         ") != main path shape (" + std::to_string(cur.c) + "," +
                         std::to_string(cur.h) + "," + std::to_string(cur.w) + ")");
    }
    cur = detail::infer_layer_shape(l, cur, where);
    outs[i] = cur;
  }
  if (net.num_classes > 0 && !net.layers.empty() && cur.count() != net.num_classes)
    throw ShapeError("final activation count " + std::to_string(cur.count()) +
                     " != num_classes " + std::to_string(net.num_classes));
  net.validated = true;
}

// ---------------------------------------------------------------------------
// Cost accounting. MACs follow the usual conventions: conv MACs =
// out_C*out_H*out_W*(in_C/groups)*K*K, FC MACs = in*out, everything else 0.
// FLOPs are reported as 2*MACs. Skip-projection costs are folded into the
// residual_add layer's row.

struct CostReport {
  std::vector<int64_t> per_layer_macs;
  std::vector<int64_t> per_layer_params;
  std::vector<int64_t> per_layer_nnz;
  int64_t total_macs = 0;
  int64_t total_params = 0;
  int64_t total_nnz = 0;
  static constexpr int kFlopsPerMac = 2;
  int64_t total_flops() const { return kFlopsPerMac * total_macs; }
};

namespace detail {

template <typename T>
int64_t layer_macs(const Layer<T>& l) {
  switch (l.kind) {
    case LayerKind::Conv2d:
      return int64_t(l.out_shape.c) * l.out_shape.h * l.out_shape.w * l.in_channels *
             l.kernel * l.kernel;
    case LayerKind::DepthwiseConv2d:
      return int64_t(l.out_shape.c) * l.out_shape.h * l.out_shape.w * l.kernel * l.kernel;
    case LayerKind::FullyConnected:
      return int64_t(l.in_channels) * l.out_channels;
    default:
      return 0;
  }
}

// MACs actually executed given the stored format: CSR kernels multiply
// only stored non-zeros, dense kernels multiply everything.
template <typename T>
int64_t layer_effective_macs(const Layer<T>& l) {
  if (!l.has_weights() || l.weight_format == WeightFormat::Dense)
    return layer_macs(l);
  if (l.kind == LayerKind::FullyConnected) return l.sparse_weights.nnz();
  return l.sparse_weights.nnz() * int64_t(l.out_shape.h) * l.out_shape.w;
}

template <typename T>
int64_t layer_stored_nnz(const Layer<T>& l) {
  if (!l.has_weights()) return 0;
  return l.weight_format == WeightFormat::Csr ? l.sparse_weights.nnz()
                                              : l.dense_weight_count();
}

}  // namespace detail

template <typename T>
CostReport count_macs(const Network<T>& net) {
  if (!net.validated) throw ConfigError("count_macs requires a validated network");
  CostReport r;
  r.per_layer_macs.resize(net.layers.size(), 0);
  for (size_t i = 0; i < net.layers.size(); ++i)
    r.per_layer_macs[i] = detail::layer_macs(net.layers[i]);
  for (const auto& s : net.skips)
    for (const auto& pl : s.projection)
      r.per_layer_macs[size_t(s.dst)] += detail::layer_macs(pl);
  for (int64_t m : r.per_layer_macs) r.total_macs += m;
  return r;
}

template <typename T>
CostReport count_params(const Network<T>& net) {
  CostReport r;
  r.per_layer_params.resize(net.layers.size(), 0);
  r.per_layer_nnz.resize(net.layers.size(), 0);
  for (size_t i = 0; i < net.layers.size(); ++i) {
    r.per_layer_params[i] = net.layers[i].param_count();
    r.per_layer_nnz[i] = detail::layer_stored_nnz(net.layers[i]);
  }
  for (const auto& s : net.skips)
    for (const auto& pl : s.projection) {
      r.per_layer_params[size_t(s.dst)] += pl.param_count();
      r.per_layer_nnz[size_t(s.dst)] += detail::layer_stored_nnz(pl);
    }
  for (int64_t p : r.per_layer_params) r.total_params += p;
  for (int64_t z : r.per_layer_nnz) r.total_nnz += z;
  return r;
}

template <typename T>
int64_t count_effective_macs(const Network<T>& net) {
  if (!net.validated) throw ConfigError("count_effective_macs requires a validated network");
  int64_t total = 0;
  for (const auto& l : net.layers) total += detail::layer_effective_macs(l);
  for (const auto& s : net.skips)
    for (const auto& pl : s.projection) total += detail::layer_effective_macs(pl);
  return total;
}

}  // namespace dlis
