#pragma once

#include <cmath>
#include <string>

#include "dlis/graph.hpp"
#include "dlis/rng.hpp"

namespace dlis {

// Round-half-up channel scaling with a floor of one channel.
inline int scaled_channels(int channels, double scale) {
  return std::max(1, int(std::floor(double(channels) * scale + 0.5)));
}

namespace detail {

template <typename T>
void push_conv_bn_relu(Network<T>& net, int in_ch, int out_ch, int k, int stride,
                       int pad) {
  net.layers.push_back(conv2d_layer<T>(in_ch, out_ch, k, stride, pad, /*bias=*/false));
  net.layers.push_back(batchnorm_layer<T>(out_ch));
  net.layers.push_back(relu_layer<T>());
}

template <typename T>
Network<T> build_vgg16_cifar(double ws, int num_classes) {
  Network<T> net;
  net.name = "vgg16_cifar";
  net.arch = Arch::Vgg16Cifar;
  net.input_shape = {3, 32, 32};
  net.num_classes = num_classes;

  // 13 conv layers, max-pooling after layers {2, 4, 7, 10, 13}.
  const int plan[] = {64, 64, -1, 128, 128, -1, 256, 256, 256, -1,
                      512, 512, 512, -1, 512, 512, 512, -1};
  int in_ch = 3;
  for (int entry : plan) {
    if (entry < 0) {
      net.layers.push_back(maxpool2d_layer<T>(2, 2));
      continue;
    }
    const int out_ch = scaled_channels(entry, ws);
    net.layers.push_back(conv2d_layer<T>(in_ch, out_ch, 3, 1, 1, /*bias=*/true));
    net.layers.push_back(relu_layer<T>());
    in_ch = out_ch;
  }
  // CIFAR head: two fully connected layers of 512 and num_classes nodes.
  const int hidden = scaled_channels(512, ws);
  net.layers.push_back(fully_connected_layer<T>(in_ch, hidden));
  net.layers.push_back(relu_layer<T>());
  net.layers.push_back(fully_connected_layer<T>(hidden, num_classes));
  return net;
}

template <typename T>
Network<T> build_resnet18(double ws, int num_classes) {
  Network<T> net;
  net.name = "resnet18";
  net.arch = Arch::Resnet18;
  net.input_shape = {3, 32, 32};
  net.num_classes = num_classes;

  const int stem = scaled_channels(64, ws);
  push_conv_bn_relu(net, 3, stem, 3, 1, 1);

  // Four stages of two basic blocks; stages 2-4 downsample with a
  // stride-2 first conv and a 1x1 projection shortcut.
  int in_ch = stem;
  const int stage_channels[] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    const int out_ch = scaled_channels(stage_channels[stage], ws);
    for (int block = 0; block < 2; ++block) {
      const int stride = (stage > 0 && block == 0) ? 2 : 1;
      const int src = int(net.layers.size()) - 1;  // layer producing block input
      net.layers.push_back(conv2d_layer<T>(in_ch, out_ch, 3, stride, 1, false));
      net.layers.push_back(batchnorm_layer<T>(out_ch));
      net.layers.push_back(relu_layer<T>());
      net.layers.push_back(conv2d_layer<T>(out_ch, out_ch, 3, 1, 1, false));
      net.layers.push_back(batchnorm_layer<T>(out_ch));
      net.layers.push_back(residual_add_layer<T>());
      const int dst = int(net.layers.size()) - 1;
      SkipConnection<T> skip;
      skip.src = src;
      skip.dst = dst;
      if (stride != 1 || in_ch != out_ch) {
        skip.projection.push_back(conv2d_layer<T>(in_ch, out_ch, 1, stride, 0, false));
        skip.projection.push_back(batchnorm_layer<T>(out_ch));
      }
      net.skips.push_back(std::move(skip));
      net.layers.push_back(relu_layer<T>());
      in_ch = out_ch;
    }
  }
  // Classifier: global pooling (max; the layer inventory carries no average
  // pooling) then a fully connected layer.
  net.layers.push_back(maxpool2d_layer<T>(4, 4));
  net.layers.push_back(fully_connected_layer<T>(in_ch, num_classes));
  return net;
}

template <typename T>
Network<T> build_mobilenet(double ws, int num_classes) {
  Network<T> net;
  net.name = "mobilenet";
  net.arch = Arch::Mobilenet;
  net.input_shape = {3, 32, 32};
  net.num_classes = num_classes;

  // 27 convolutions: a full stem conv then 13 (3x3 depthwise, 1x1
  // pointwise) pairs, every conv followed by BN + ReLU; one FC classifier.
  const int stem = scaled_channels(32, ws);
  push_conv_bn_relu(net, 3, stem, 3, 2, 1);

  struct Pair { int out; int dw_stride; };
  const Pair pairs[] = {{64, 1},  {128, 2}, {128, 1}, {256, 2}, {256, 1},
                        {512, 2}, {512, 1}, {512, 1}, {512, 1}, {512, 1},
                        {512, 1}, {1024, 2}, {1024, 1}};
  int in_ch = stem;
  for (const auto& p : pairs) {
    net.layers.push_back(depthwise_conv2d_layer<T>(in_ch, 3, p.dw_stride, 1, false));
    net.layers.push_back(batchnorm_layer<T>(in_ch));
    net.layers.push_back(relu_layer<T>());
    const int out_ch = scaled_channels(p.out, ws);
    net.layers.push_back(conv2d_layer<T>(in_ch, out_ch, 1, 1, 0, false));
    net.layers.push_back(batchnorm_layer<T>(out_ch));
    net.layers.push_back(relu_layer<T>());
    in_ch = out_ch;
  }
  // Spatial extent is 1x1 by now; the classifier consumes it directly.
  net.layers.push_back(fully_connected_layer<T>(in_ch, num_classes));
  return net;
}

}  // namespace detail

// Builds one of the three reference topologies. width_scale multiplies
// every channel count (round-half-up, floor one) to produce desk-scale
// variants; width_scale = 1 reproduces the reference layer inventories.
template <typename T>
Network<T> build_network(Arch arch, double width_scale = 1.0, int num_classes = 10) {
  if (!(width_scale > 0.0) || width_scale > 1.0)
    throw ConfigError("width_scale must be in (0, 1]");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  Network<T> net;
  switch (arch) {
    case Arch::Vgg16Cifar: net = detail::build_vgg16_cifar<T>(width_scale, num_classes); break;
    case Arch::Resnet18: net = detail::build_resnet18<T>(width_scale, num_classes); break;
    case Arch::Mobilenet: net = detail::build_mobilenet<T>(width_scale, num_classes); break;
    default: throw ConfigError("unknown architecture");
  }
  validate(net);
  return net;
}

// Kaiming-style fan-in initialisation from the seeded generator; biases
// start at zero and batchnorm stays at identity. Layers are visited in
// list order, then skip projections, so the draw sequence is fixed.
template <typename T>
void init_weights(Network<T>& net, Rng& rng) {
  auto init_layer = [&](Layer<T>& l) {
    if (!l.has_weights() || l.weight_format != WeightFormat::Dense) return;
    int64_t fan_in = 0;
    switch (l.kind) {
      case LayerKind::Conv2d: fan_in = int64_t(l.in_channels) * l.kernel * l.kernel; break;
      case LayerKind::DepthwiseConv2d: fan_in = int64_t(l.kernel) * l.kernel; break;
      case LayerKind::FullyConnected: fan_in = l.in_channels; break;
      default: return;
    }
    const double stddev = std::sqrt(2.0 / double(fan_in));
    for (auto& w : l.weights) w = T(rng.normal(0.0, stddev));
    for (auto& b : l.bias) b = T(0);
  };
  for (auto& l : net.layers) init_layer(l);
  for (auto& s : net.skips)
    for (auto& pl : s.projection) init_layer(pl);
}

}  // namespace dlis
