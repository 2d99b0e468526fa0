#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "dlis/graph.hpp"
#include "dlis/parallel.hpp"

namespace dlis {

// Per-filter CSR models each KxK filter slice as its own three arrays
// (values, col_idx, K+1 row pointers) as in the small-filter storage
// argument; per-layer CSR applies the same arithmetic once to the whole
// (out_C) x (in_C*K*K) flattened matrix.
enum class CsrGranularity : uint8_t { PerFilter = 0, PerLayer = 1 };

inline const char* to_string(CsrGranularity g) {
  return g == CsrGranularity::PerFilter ? "per_filter_csr" : "per_layer_csr";
}

inline CsrGranularity parse_granularity(const std::string& s) {
  if (s == "per_filter_csr") return CsrGranularity::PerFilter;
  if (s == "per_layer_csr") return CsrGranularity::PerLayer;
  throw ConfigError("unknown csr granularity: " + s);
}

struct FootprintEntry {
  int64_t weights_dense = 0;
  int64_t sparse_values = 0;
  int64_t sparse_col_idx = 0;
  int64_t sparse_row_ptr = 0;
  int64_t biases = 0;
  int64_t bn_params = 0;
  int64_t activations = 0;
  int64_t scratch = 0;  // im2col buffer or padded-input copy

  int64_t weight_bytes() const {
    return weights_dense + sparse_values + sparse_col_idx + sparse_row_ptr;
  }
  int64_t total() const {
    return weight_bytes() + biases + bn_params + activations + scratch;
  }
  FootprintEntry& operator+=(const FootprintEntry& o) {
    weights_dense += o.weights_dense;
    sparse_values += o.sparse_values;
    sparse_col_idx += o.sparse_col_idx;
    sparse_row_ptr += o.sparse_row_ptr;
    biases += o.biases;
    bn_params += o.bn_params;
    activations += o.activations;
    scratch += o.scratch;
    return *this;
  }
};

struct FootprintReport {
  ConvAlgo algo = ConvAlgo::Direct;
  CsrGranularity granularity = CsrGranularity::PerFilter;
  int batch = 1;
  std::vector<FootprintEntry> per_layer;  // projections folded into their skip's dst
  FootprintEntry totals;
  int64_t input_bytes = 0;

  int64_t grand_total() const { return totals.total() + input_bytes; }
};

namespace detail {

inline constexpr int64_t kBytesPerReal = 4;   // 32-bit reals
inline constexpr int64_t kBytesPerIndex = 4;  // 32-bit CSR indices

// Weight bytes of one layer under the chosen granularity. Per-filter nnz
// splits do not change the values/col_idx bytes (they sum to the layer's
// nnz); only the row-pointer overhead differs.
template <typename T>
void weight_footprint(const Layer<T>& l, CsrGranularity gran, FootprintEntry& e) {
  if (!l.has_weights()) return;
  if (l.weight_format == WeightFormat::Dense) {
    e.weights_dense += kBytesPerReal * l.dense_weight_count();
    return;
  }
  const int64_t nnz = l.sparse_weights.nnz();
  e.sparse_values += kBytesPerReal * nnz;
  e.sparse_col_idx += kBytesPerIndex * nnz;
  if (gran == CsrGranularity::PerLayer || l.kind == LayerKind::FullyConnected) {
    e.sparse_row_ptr += kBytesPerIndex * int64_t(l.flat_rows() + 1);
  } else {
    const int64_t filters = l.kind == LayerKind::DepthwiseConv2d
                                ? int64_t(l.out_channels)
                                : int64_t(l.out_channels) * l.in_channels;
    e.sparse_row_ptr += kBytesPerIndex * filters * int64_t(l.kernel + 1);
  }
}

// Algorithm scratch for one conv invocation: the direct path counts the
// pre-padded input copy (whole batch), the im2col paths count one image's
// patch matrix (buffers are allocated per image invocation).
template <typename T>
int64_t scratch_bytes(const Layer<T>& l, ConvAlgo algo, int batch) {
  if (l.kind == LayerKind::Conv2d) {
    const bool sparse = l.weight_format == WeightFormat::Csr;
    if (!sparse && algo == ConvAlgo::Direct) {
      if (l.pad == 0) return 0;
      return kBytesPerReal * int64_t(batch) * l.in_channels *
             (l.in_shape.h + 2 * l.pad) * (l.in_shape.w + 2 * l.pad);
    }
    return kBytesPerReal * int64_t(l.in_channels) * l.kernel * l.kernel *
           l.out_shape.h * l.out_shape.w;
  }
  return 0;  // depthwise and parameter-free layers run in place
}

template <typename T>
FootprintEntry layer_footprint(const Layer<T>& l, ConvAlgo algo, CsrGranularity gran,
                               int batch) {
  FootprintEntry e;
  weight_footprint(l, gran, e);
  e.biases = kBytesPerReal * int64_t(l.bias.size());
  e.bn_params = kBytesPerReal * int64_t(l.bn_gamma.size() + l.bn_beta.size() +
                                        l.bn_mean.size() + l.bn_var.size());
  e.activations = kBytesPerReal * int64_t(batch) * l.out_shape.count();
  e.scratch = scratch_bytes(l, algo, batch);
  return e;
}

}  // namespace detail

// Pure function of (spec, algo, granularity, batch): model weights in
// their stored format, all per-layer output buffers, and per-algorithm
// scratch. Allocator overhead and code size are out of model.
template <typename T>
FootprintReport footprint(const Network<T>& net, ConvAlgo algo,
                          CsrGranularity granularity = CsrGranularity::PerFilter,
                          int batch = 1) {
  if (!net.validated) throw ConfigError("footprint requires a validated network");
  FootprintReport report;
  report.algo = algo;
  report.granularity = granularity;
  report.batch = batch;
  report.input_bytes = detail::kBytesPerReal * int64_t(batch) * net.input_shape.count();
  report.per_layer.resize(net.layers.size());
  for (size_t i = 0; i < net.layers.size(); ++i)
    report.per_layer[i] = detail::layer_footprint(net.layers[i], algo, granularity, batch);
  for (const auto& s : net.skips)
    for (const auto& pl : s.projection)
      report.per_layer[size_t(s.dst)] +=
          detail::layer_footprint(pl, algo, granularity, batch);
  for (const auto& e : report.per_layer) report.totals += e;
  return report;
}

template <typename T>
void print_footprint(std::ostream& os, const Network<T>& net,
                     const FootprintReport& r, bool per_layer = false) {
  auto mb = [](int64_t bytes) { return double(bytes) / (1024.0 * 1024.0); };
  os << "footprint model=" << net.name << " algo=" << to_string(r.algo)
     << " granularity=" << to_string(r.granularity) << " batch=" << r.batch << "\n";
  if (per_layer) {
    for (size_t i = 0; i < r.per_layer.size(); ++i) {
      const auto& e = r.per_layer[i];
      os << "  layer " << i << " (" << to_string(net.layers[i].kind) << "): weights "
         << e.weight_bytes() << " B, bias " << e.biases << " B, bn " << e.bn_params
         << " B, activations " << e.activations << " B, scratch " << e.scratch << " B\n";
    }
  }
  os << "  weights dense:     " << r.totals.weights_dense << " B\n";
  os << "  weights sparse:    " << r.totals.sparse_values << " B values, "
     << r.totals.sparse_col_idx << " B col_idx, " << r.totals.sparse_row_ptr
     << " B row_ptr\n";
  os << "  biases:            " << r.totals.biases << " B\n";
  os << "  bn params:         " << r.totals.bn_params << " B\n";
  os << "  activations:       " << r.totals.activations << " B\n";
  os << "  scratch (im2col/pad): " << r.totals.scratch << " B\n";
  os << "  input buffer:      " << r.input_bytes << " B\n";
  os << "  total:             " << r.grand_total() << " B (" << mb(r.grand_total())
     << " MB)\n";
}

// Operation-count speedup prediction: dense MACs over effective MACs
// (non-zero multiplies for sparse nets, recast MACs for channel-pruned).
inline double expected_speedup(int64_t dense_macs, int64_t effective_macs) {
  if (dense_macs <= 0 || effective_macs <= 0)
    throw ConfigError("expected_speedup: MAC counts must be positive");
  return double(dense_macs) / double(effective_macs);
}

template <typename T>
double expected_speedup(const Network<T>& dense_net, const Network<T>& compressed) {
  return expected_speedup(count_macs(dense_net).total_macs,
                          count_effective_macs(compressed));
}

}  // namespace dlis
