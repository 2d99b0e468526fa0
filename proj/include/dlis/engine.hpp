#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <type_traits>
#include <vector>

#include "dlis/data.hpp"
#include "dlis/graph.hpp"
#include "dlis/parallel.hpp"
#include "dlis/tensor.hpp"

namespace dlis {

// Zero-pads every image plane: (N,C,H,W) -> (N,C,H+2p,W+2p).
template <typename T>
Tensor<T> zero_pad(const Tensor<T>& x, int pad) {
  if (pad < 0) throw GeometryError("zero_pad: pad must be >= 0");
  if (pad == 0) return x;
  Tensor<T> out(x.n, x.c, x.h + 2 * pad, x.w + 2 * pad);
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c) {
      const T* src = x.channel_ptr(n, c);
      T* dst = out.channel_ptr(n, c) + size_t(pad) * out.w + pad;
      for (int h = 0; h < x.h; ++h)
        std::copy(src + size_t(h) * x.w, src + size_t(h + 1) * x.w,
                  dst + size_t(h) * out.w);
    }
  return out;
}

// Direct convolution over a pre-padded copy of the input. Work items are
// (image, output channel) pairs; the (c,u,v) reduction per output element
// runs in fixed ascending order.
template <typename T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const std::vector<T>& w,
                        const std::vector<T>& bias, int out_channels, int kernel,
                        int stride, int pad, const ExecConfig& cfg = {},
                        int trace_layer = -1) {
  const int oh = conv_out_extent(x.h, kernel, stride, pad, "conv2d");
  const int ow = conv_out_extent(x.w, kernel, stride, pad, "conv2d");
  if (int64_t(w.size()) != int64_t(out_channels) * x.c * kernel * kernel)
    throw ShapeError("conv2d: weight count mismatch");

  std::optional<Tensor<T>> padded_storage;
  const Tensor<T>* src = &x;
  if (pad > 0) {
    padded_storage = zero_pad(x, pad);
    src = &*padded_storage;
  }

  Tensor<T> out(x.n, out_channels, oh, ow);
  const int in_c = x.c, k = kernel;
  parallel_for_traced(int64_t(x.n) * out_channels, cfg, trace_layer, [&](int64_t item) {
    const int n = int(item / out_channels);
    const int o = int(item % out_channels);
    const T b = bias.empty() ? T(0) : bias[size_t(o)];
    T* dst = out.channel_ptr(n, o);
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        T acc = b;
        for (int c = 0; c < in_c; ++c) {
          const T* plane = src->channel_ptr(n, c);
          const T* wrow = w.data() + ((size_t(o) * in_c + c) * k) * k;
          for (int u = 0; u < k; ++u) {
            const T* px = plane + size_t(i * stride + u) * src->w + j * stride;
            const T* pw = wrow + size_t(u) * k;
            for (int v = 0; v < k; ++v) acc += px[v] * pw[v];
          }
        }
        dst[size_t(i) * ow + j] = acc;
      }
  });
  return out;
}

// Receptive-field patches of one image unrolled to columns. Row index is
// (c*K + u)*K + v (channel-major, then kernel row, then kernel column);
// column j holds the patch for output position j = i*out_W + x.
template <typename T>
struct Im2colBuffer {
  DenseMatrix<T> matrix;  // (C*K*K) x (out_H*out_W)
  int channels = 0, kernel = 0, stride = 1, pad = 0;
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
};

template <typename T>
Im2colBuffer<T> im2col(const Tensor<T>& x, int image, int kernel, int stride, int pad) {
  Im2colBuffer<T> buf;
  buf.channels = x.c;
  buf.kernel = kernel;
  buf.stride = stride;
  buf.pad = pad;
  buf.in_h = x.h;
  buf.in_w = x.w;
  buf.out_h = conv_out_extent(x.h, kernel, stride, pad, "im2col");
  buf.out_w = conv_out_extent(x.w, kernel, stride, pad, "im2col");
  buf.matrix = DenseMatrix<T>(x.c * kernel * kernel, buf.out_h * buf.out_w);

  for (int c = 0; c < x.c; ++c) {
    const T* plane = x.channel_ptr(image, c);
    for (int u = 0; u < kernel; ++u)
      for (int v = 0; v < kernel; ++v) {
        T* row = buf.matrix.row((c * kernel + u) * kernel + v);
        int col = 0;
        for (int i = 0; i < buf.out_h; ++i) {
          const int y = i * stride + u - pad;
          for (int j = 0; j < buf.out_w; ++j, ++col) {
            const int xx = j * stride + v - pad;
            row[col] = (y >= 0 && y < x.h && xx >= 0 && xx < x.w)
                           ? plane[size_t(y) * x.w + xx]
                           : T(0);
          }
        }
      }
  }
  return buf;
}

namespace detail {

template <typename T>
void add_bias_rows(T* out, const std::vector<T>& bias, int rows, int cols) {
  if (bias.empty()) return;
  for (int r = 0; r < rows; ++r) {
    const T b = bias[size_t(r)];
    T* row = out + size_t(r) * cols;
    for (int c = 0; c < cols; ++c) row[c] += b;
  }
}

}  // namespace detail

// Convolution lowered to GEMM: flattened filters times the im2col buffer.
template <typename T>
Tensor<T> conv2d_gemm(const Tensor<T>& x, const std::vector<T>& w,
                      const std::vector<T>& bias, int out_channels, int kernel,
                      int stride, int pad, const ExecConfig& cfg = {},
                      int trace_layer = -1) {
  const int oh = conv_out_extent(x.h, kernel, stride, pad, "conv2d");
  const int ow = conv_out_extent(x.w, kernel, stride, pad, "conv2d");
  if (int64_t(w.size()) != int64_t(out_channels) * x.c * kernel * kernel)
    throw ShapeError("conv2d: weight count mismatch");
  Tensor<T> out(x.n, out_channels, oh, ow);
  const int cols = oh * ow;
  for (int n = 0; n < x.n; ++n) {
    const Im2colBuffer<T> buf = im2col(x, n, kernel, stride, pad);
    T* dst = out.channel_ptr(n, 0);
    gemm_raw(w.data(), out_channels, x.c * kernel * kernel, buf.matrix.data.data(),
             cols, dst, cfg, trace_layer);
    detail::add_bias_rows(dst, bias, out_channels, cols);
  }
  return out;
}

// Sparse convolution: CSR filter matrix times the im2col buffer.
template <typename T>
Tensor<T> conv2d_sparse(const Tensor<T>& x, const CsrMatrix<T>& w,
                        const std::vector<T>& bias, int kernel, int stride, int pad,
                        const ExecConfig& cfg = {}, int trace_layer = -1) {
  const int oh = conv_out_extent(x.h, kernel, stride, pad, "conv2d");
  const int ow = conv_out_extent(x.w, kernel, stride, pad, "conv2d");
  if (w.cols != x.c * kernel * kernel)
    throw ShapeError("conv2d_sparse: csr cols != in_C*K*K");
  Tensor<T> out(x.n, w.rows, oh, ow);
  const int cols = oh * ow;
  for (int n = 0; n < x.n; ++n) {
    const Im2colBuffer<T> buf = im2col(x, n, kernel, stride, pad);
    T* dst = out.channel_ptr(n, 0);
    spmm_raw(w, buf.matrix.data.data(), cols, dst, cfg, trace_layer);
    detail::add_bias_rows(dst, bias, w.rows, cols);
  }
  return out;
}

// Depthwise convolution: channel c of the output depends only on channel c
// of the input. Index-checked (no padded copy); items are (image, channel).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const std::vector<T>& w,
                           const std::vector<T>& bias, int kernel, int stride, int pad,
                           const ExecConfig& cfg = {}, int trace_layer = -1) {
  const int oh = conv_out_extent(x.h, kernel, stride, pad, "depthwise_conv2d");
  const int ow = conv_out_extent(x.w, kernel, stride, pad, "depthwise_conv2d");
  if (int64_t(w.size()) != int64_t(x.c) * kernel * kernel)
    throw ShapeError("depthwise_conv2d: one KxK filter per channel required");
  Tensor<T> out(x.n, x.c, oh, ow);
  const int k = kernel;
  parallel_for_traced(int64_t(x.n) * x.c, cfg, trace_layer, [&](int64_t item) {
    const int n = int(item / x.c);
    const int c = int(item % x.c);
    const T* plane = x.channel_ptr(n, c);
    const T* filt = w.data() + size_t(c) * k * k;
    const T b = bias.empty() ? T(0) : bias[size_t(c)];
    T* dst = out.channel_ptr(n, c);
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        T acc = b;
        for (int u = 0; u < k; ++u) {
          const int y = i * stride + u - pad;
          if (y < 0 || y >= x.h) continue;
          for (int v = 0; v < k; ++v) {
            const int xx = j * stride + v - pad;
            if (xx < 0 || xx >= x.w) continue;
            acc += plane[size_t(y) * x.w + xx] * filt[size_t(u) * k + v];
          }
        }
        dst[size_t(i) * ow + j] = acc;
      }
  });
  return out;
}

// CSR depthwise: row c of the matrix holds channel c's KxK taps.
template <typename T>
Tensor<T> depthwise_conv2d_sparse(const Tensor<T>& x, const CsrMatrix<T>& w,
                                  const std::vector<T>& bias, int kernel, int stride,
                                  int pad, const ExecConfig& cfg = {},
                                  int trace_layer = -1) {
  const int oh = conv_out_extent(x.h, kernel, stride, pad, "depthwise_conv2d");
  const int ow = conv_out_extent(x.w, kernel, stride, pad, "depthwise_conv2d");
  if (w.rows != x.c || w.cols != kernel * kernel)
    throw ShapeError("depthwise_conv2d_sparse: csr shape mismatch");
  Tensor<T> out(x.n, x.c, oh, ow);
  const int k = kernel;
  parallel_for_traced(int64_t(x.n) * x.c, cfg, trace_layer, [&](int64_t item) {
    const int n = int(item / x.c);
    const int c = int(item % x.c);
    const T* plane = x.channel_ptr(n, c);
    const T b = bias.empty() ? T(0) : bias[size_t(c)];
    T* dst = out.channel_ptr(n, c);
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        T acc = b;
        for (uint32_t p = w.row_ptr[c]; p < w.row_ptr[size_t(c) + 1]; ++p) {
          const int u = int(w.col_idx[p]) / k;
          const int v = int(w.col_idx[p]) % k;
          const int y = i * stride + u - pad;
          const int xx = j * stride + v - pad;
          if (y < 0 || y >= x.h || xx < 0 || xx >= x.w) continue;
          acc += plane[size_t(y) * x.w + xx] * w.values[p];
        }
        dst[size_t(i) * ow + j] = acc;
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Parameter-free layers.

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kernel, int stride,
                    const ExecConfig& cfg = {}, int trace_layer = -1,
                    std::vector<int32_t>* argmax = nullptr) {
  const int oh = conv_out_extent(x.h, kernel, stride, 0, "maxpool2d");
  const int ow = conv_out_extent(x.w, kernel, stride, 0, "maxpool2d");
  Tensor<T> out(x.n, x.c, oh, ow);
  if (argmax != nullptr) argmax->assign(size_t(out.count()), -1);
  parallel_for_traced(int64_t(x.n) * x.c, cfg, trace_layer, [&](int64_t item) {
    const int n = int(item / x.c);
    const int c = int(item % x.c);
    const T* plane = x.channel_ptr(n, c);
    T* dst = out.channel_ptr(n, c);
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        // Ties keep the first maximal element in scan order.
        T best = plane[size_t(i * stride) * x.w + j * stride];
        int best_at = i * stride * x.w + j * stride;
        for (int u = 0; u < kernel; ++u)
          for (int v = 0; v < kernel; ++v) {
            const int y = i * stride + u, xx = j * stride + v;
            const T val = plane[size_t(y) * x.w + xx];
            if (val > best) {
              best = val;
              best_at = y * x.w + xx;
            }
          }
        dst[size_t(i) * ow + j] = best;
        if (argmax != nullptr)
          (*argmax)[out.index(n, c, i, j)] = best_at;
      }
  });
  return out;
}

// Inference-mode batchnorm using the stored running statistics.
template <typename T>
Tensor<T> batchnorm_inference(const Tensor<T>& x, const Layer<T>& l,
                              const ExecConfig& cfg = {}, int trace_layer = -1) {
  if (x.c != int(l.bn_gamma.size()))
    throw ShapeError("batchnorm: channel count mismatch");
  Tensor<T> out(x.n, x.c, x.h, x.w);
  std::vector<T> scale(static_cast<size_t>(x.c)), shift(static_cast<size_t>(x.c));
  for (int c = 0; c < x.c; ++c) {
    const T istd = T(1) / T(std::sqrt(double(l.bn_var[size_t(c)]) + kBatchNormEpsilon));
    scale[size_t(c)] = l.bn_gamma[size_t(c)] * istd;
    shift[size_t(c)] = l.bn_beta[size_t(c)] - l.bn_mean[size_t(c)] * scale[size_t(c)];
  }
  parallel_for_traced(int64_t(x.n) * x.c, cfg, trace_layer, [&](int64_t item) {
    const int n = int(item / x.c);
    const int c = int(item % x.c);
    const T* src = x.channel_ptr(n, c);
    T* dst = out.channel_ptr(n, c);
    const T sc = scale[size_t(c)], sh = shift[size_t(c)];
    for (int64_t i = 0; i < x.plane(); ++i) dst[i] = src[i] * sc + sh;
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x, const ExecConfig& cfg = {}, int trace_layer = -1) {
  Tensor<T> out(x.n, x.c, x.h, x.w);
  parallel_for_traced(int64_t(x.n) * x.c, cfg, trace_layer, [&](int64_t item) {
    const int n = int(item / x.c);
    const int c = int(item % x.c);
    const T* src = x.channel_ptr(n, c);
    T* dst = out.channel_ptr(n, c);
    for (int64_t i = 0; i < x.plane(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  });
  return out;
}

template <typename T>
Tensor<T> residual_add(const Tensor<T>& a, const Tensor<T>& b,
                       const ExecConfig& cfg = {}, int trace_layer = -1) {
  if (!a.same_shape(b)) throw ShapeError("residual_add: branch shapes differ");
  Tensor<T> out(a.n, a.c, a.h, a.w);
  parallel_for_traced(int64_t(a.n) * a.c, cfg, trace_layer, [&](int64_t item) {
    const int n = int(item / a.c);
    const int c = int(item % a.c);
    const T* pa = a.channel_ptr(n, c);
    const T* pb = b.channel_ptr(n, c);
    T* dst = out.channel_ptr(n, c);
    for (int64_t i = 0; i < a.plane(); ++i) dst[i] = pa[i] + pb[i];
  });
  return out;
}

// Exp-normalisation with max subtraction, over each image's flattened
// feature vector.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, const ExecConfig& cfg = {}, int trace_layer = -1) {
  Tensor<T> out(x.n, x.c, x.h, x.w);
  const int64_t features = x.count() / std::max(1, x.n);
  parallel_for_traced(x.n, cfg, trace_layer, [&](int64_t n) {
    const T* src = x.data.data() + n * features;
    T* dst = out.data.data() + n * features;
    T mx = src[0];
    for (int64_t i = 1; i < features; ++i) mx = std::max(mx, src[i]);
    T sum = T(0);
    for (int64_t i = 0; i < features; ++i) {
      dst[i] = std::exp(src[i] - mx);
      sum += dst[i];
    }
    for (int64_t i = 0; i < features; ++i) dst[i] /= sum;
  });
  return out;
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Layer<T>& l,
                          const ExecConfig& cfg = {}, int trace_layer = -1) {
  const int64_t features = x.count() / std::max(1, x.n);
  if (features != l.in_channels) throw ShapeError("fully_connected: feature count mismatch");
  Tensor<T> out(x.n, l.out_channels, 1, 1);
  const int out_n = l.out_channels;
  parallel_for_traced(int64_t(x.n) * out_n, cfg, trace_layer, [&](int64_t item) {
    const int n = int(item / out_n);
    const int o = int(item % out_n);
    const T* src = x.data.data() + n * features;
    T acc = l.bias.empty() ? T(0) : l.bias[size_t(o)];
    if (l.weight_format == WeightFormat::Dense) {
      const T* wrow = l.weights.data() + size_t(o) * features;
      for (int64_t f = 0; f < features; ++f) acc += wrow[f] * src[f];
    } else {
      const auto& sw = l.sparse_weights;
      for (uint32_t p = sw.row_ptr[o]; p < sw.row_ptr[size_t(o) + 1]; ++p)
        acc += sw.values[p] * src[sw.col_idx[p]];
    }
    out.at(n, o, 0, 0) = acc;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layer dispatch and the full forward pass.

namespace detail {

template <typename T>
Tensor<T> conv_dispatch(const Layer<T>& l, const Tensor<T>& x, const ExecConfig& cfg,
                        int trace_layer) {
  if (l.kind == LayerKind::DepthwiseConv2d) {
    if (l.weight_format == WeightFormat::Csr)
      return depthwise_conv2d_sparse(x, l.sparse_weights, l.bias, l.kernel, l.stride,
                                     l.pad, cfg, trace_layer);
    return depthwise_conv2d(x, l.weights, l.bias, l.kernel, l.stride, l.pad, cfg,
                            trace_layer);
  }
  if (l.weight_format == WeightFormat::Csr)
    return conv2d_sparse(x, l.sparse_weights, l.bias, l.kernel, l.stride, l.pad, cfg,
                         trace_layer);
  switch (cfg.conv_algo) {
    case ConvAlgo::Direct:
      return conv2d_direct(x, l.weights, l.bias, l.out_channels, l.kernel, l.stride,
                           l.pad, cfg, trace_layer);
    case ConvAlgo::Im2colGemm:
      return conv2d_gemm(x, l.weights, l.bias, l.out_channels, l.kernel, l.stride,
                         l.pad, cfg, trace_layer);
    case ConvAlgo::SparseCsr:
      throw ConfigError("conv_algo sparse_csr requires csr weight format (layer " +
                        std::to_string(trace_layer) + ")");
  }
  throw ConfigError("unknown conv algorithm");
}

}  // namespace detail

// Single-layer inference dispatch. residual_add needs the skip branch as
// `skip_input`; all other kinds ignore it.
template <typename T>
Tensor<T> layer_forward(const Layer<T>& l, const Tensor<T>& x, const ExecConfig& cfg = {},
                        const Tensor<std::type_identity_t<T>>* skip_input = nullptr,
                        int trace_layer = -1) {
  switch (l.kind) {
    case LayerKind::Conv2d:
    case LayerKind::DepthwiseConv2d:
      return detail::conv_dispatch(l, x, cfg, trace_layer);
    case LayerKind::FullyConnected:
      return fully_connected(x, l, cfg, trace_layer);
    case LayerKind::MaxPool2d:
      return maxpool2d(x, l.kernel, l.stride, cfg, trace_layer);
    case LayerKind::BatchNorm:
      return batchnorm_inference(x, l, cfg, trace_layer);
    case LayerKind::Relu:
      return relu(x, cfg, trace_layer);
    case LayerKind::ResidualAdd:
      if (skip_input == nullptr)
        throw ConfigError("residual_add requires the skip branch input");
      return residual_add(x, *skip_input, cfg, trace_layer);
    case LayerKind::Softmax:
      return softmax(x, cfg, trace_layer);
  }
  throw ConfigError("unknown layer kind");
}

// Full forward pass retaining every layer output. Threads synchronise at
// each layer boundary: layer l+1 starts only after every layer-l work item
// has completed (parallel_for joins its workers before returning).
template <typename T>
std::vector<Tensor<T>> forward_all(const Network<T>& net, const Tensor<T>& x,
                                   const ExecConfig& cfg = {}) {
  if (!net.validated) throw ConfigError("forward: network must be validated");
  if (x.c != net.input_shape.c || x.h != net.input_shape.h || x.w != net.input_shape.w)
    throw ShapeError("forward: input does not match network input shape");
  std::vector<Tensor<T>> outs;
  outs.reserve(net.layers.size());
  for (size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const Tensor<T>& in = i == 0 ? x : outs[i - 1];
    if (l.kind == LayerKind::ResidualAdd) {
      const SkipConnection<T>* skip = net.skip_at(int(i));
      Tensor<T> branch = skip->src < 0 ? x : outs[size_t(skip->src)];
      for (const auto& pl : skip->projection)
        branch = layer_forward(pl, branch, cfg, nullptr, int(i));
      outs.push_back(layer_forward(l, in, cfg, &branch, int(i)));
    } else {
      outs.push_back(layer_forward(l, in, cfg, nullptr, int(i)));
    }
    if (cfg.trace != nullptr) cfg.trace->layer_done(int(i));
  }
  return outs;
}

// Logits of shape (N, num_classes, 1, 1); bit-identical for any thread
// count or chunking given fixed weights and input.
template <typename T>
Tensor<T> forward(const Network<T>& net, const Tensor<T>& x, const ExecConfig& cfg = {}) {
  auto outs = forward_all(net, x, cfg);
  if (outs.empty()) return x;
  return std::move(outs.back());
}

// Top-1 accuracy over a labelled dataset, evaluated in fixed-size batches.
template <typename T>
double evaluate_accuracy(const Network<T>& net, const Dataset<T>& ds,
                         const ExecConfig& cfg = {}, int batch_size = 256) {
  if (ds.size() == 0) throw ConfigError("evaluate_accuracy: empty dataset");
  int64_t correct = 0;
  const int n = int(ds.size());
  for (int begin = 0; begin < n; begin += batch_size) {
    const int count = std::min(batch_size, n - begin);
    Tensor<T> batch(count, ds.images.c, ds.images.h, ds.images.w);
    for (int i = 0; i < count; ++i) copy_image(ds, begin + i, batch, i);
    const Tensor<T> logits = forward(net, batch, cfg);
    const int64_t classes = logits.count() / count;
    for (int i = 0; i < count; ++i) {
      const T* row = logits.data.data() + i * classes;
      int arg = 0;
      for (int64_t k = 1; k < classes; ++k)
        if (row[k] > row[arg]) arg = int(k);
      if (arg == ds.labels[size_t(begin + i)]) ++correct;
    }
  }
  return double(correct) / double(n);
}

}  // namespace dlis
