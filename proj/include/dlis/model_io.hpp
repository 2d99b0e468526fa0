#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dlis/compress.hpp"
#include "dlis/graph.hpp"

namespace dlis {

// Model container ("DLIS" format, version 1). All integers little-endian,
// all reals IEEE-754 binary32. Layout:
//
//   magic "DLIS" | u32 version | u8 arch | u8 has_state
//   u32 name_len | name bytes
//   u32 input_c, input_h, input_w | u32 num_classes
//   u32 layer_count | layer table entries
//   u32 skip_count | per skip: i32 src, i32 dst, u32 proj_count + entries
//   payload per layer (list order), then per skip projection layer:
//     dense:  f32 weights[dense_weight_count]
//     csr:    u64 nnz | f32 values[nnz] | u32 col_idx[nnz] | u32 row_ptr[rows+1]
//     f32 bias[out]                   (if has_bias)
//     f32 gamma/beta/mean/var[ch]     (if has_bn)
//   optional compression-state block (if has_state)
//
// A layer table entry is: u8 kind | u8 format | u8 has_bias | u8 has_bn |
// i32 in_channels, out_channels, kernel, stride, pad.
//
// save/load round-trips a 32-bit network bit-exactly. A human-readable
// manifest of the layer table is written next to the model as
// <path>.manifest.json.

static_assert(std::endian::native == std::endian::little,
              "model i/o assumes a little-endian host");

inline constexpr char kModelMagic[4] = {'D', 'L', 'I', 'S'};
inline constexpr uint32_t kModelVersion = 1;

namespace detail {

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open " + path + " for writing");
  }
  template <typename V>
  void put(V v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  template <typename V>
  void put_array(const std::vector<V>& v) {
    if (!v.empty())
      out_.write(reinterpret_cast<const char*>(v.data()),
                 std::streamsize(v.size() * sizeof(V)));
  }
  void put_bytes(const void* p, size_t n) {
    out_.write(reinterpret_cast<const char*>(p), std::streamsize(n));
  }
  void close(const std::string& path) {
    out_.flush();
    if (!out_) throw IoError("write failed: " + path);
    out_.close();
  }

 private:
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open " + path);
  }
  template <typename V>
  V get() {
    V v;
    read_raw(&v, sizeof(V));
    return v;
  }
  template <typename V>
  void get_array(std::vector<V>& v, size_t count) {
    v.resize(count);
    if (count > 0) read_raw(v.data(), count * sizeof(V));
  }
  void get_bytes(void* p, size_t n) { read_raw(p, n); }
  size_t offset() const { return offset_; }
  bool at_eof() {
    char extra;
    in_.read(&extra, 1);
    return in_.gcount() == 0;
  }

 private:
  void read_raw(void* p, size_t n) {
    in_.read(reinterpret_cast<char*>(p), std::streamsize(n));
    if (size_t(in_.gcount()) != n)
      throw ParseError(path_ + ": truncated file", offset_ + size_t(in_.gcount()));
    offset_ += n;
  }
  std::ifstream in_;
  std::string path_;
  size_t offset_ = 0;
};

template <typename T>
std::vector<float> to_f32(const std::vector<T>& v) {
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = float(v[i]);
  return out;
}

template <typename T>
void from_f32(const std::vector<float>& in, std::vector<T>& out) {
  out.resize(in.size());
  for (size_t i = 0; i < in.size(); ++i) out[i] = T(in[i]);
}

template <typename T>
void write_layer_entry(BinaryWriter& w, const Layer<T>& l) {
  w.put(uint8_t(l.kind));
  w.put(uint8_t(l.weight_format));
  w.put(uint8_t(l.has_bias() ? 1 : 0));
  w.put(uint8_t(l.bn_gamma.empty() ? 0 : 1));
  w.put(int32_t(l.in_channels));
  w.put(int32_t(l.out_channels));
  w.put(int32_t(l.kernel));
  w.put(int32_t(l.stride));
  w.put(int32_t(l.pad));
}

template <typename T>
Layer<T> read_layer_entry(BinaryReader& r) {
  const uint8_t kind = r.template get<uint8_t>();
  if (kind > uint8_t(LayerKind::Softmax))
    throw ParseError("invalid layer kind " + std::to_string(int(kind)), r.offset());
  const uint8_t format = r.template get<uint8_t>();
  if (format > uint8_t(WeightFormat::Csr))
    throw ParseError("invalid weight format", r.offset());
  const uint8_t has_bias = r.template get<uint8_t>();
  const uint8_t has_bn = r.template get<uint8_t>();
  Layer<T> l;
  l.kind = LayerKind(kind);
  l.weight_format = WeightFormat(format);
  l.in_channels = r.template get<int32_t>();
  l.out_channels = r.template get<int32_t>();
  l.kernel = r.template get<int32_t>();
  l.stride = r.template get<int32_t>();
  l.pad = r.template get<int32_t>();
  if (has_bias) l.bias.assign(size_t(l.out_channels), T(0));
  if (has_bn) {
    l.bn_gamma.assign(size_t(l.out_channels), T(0));
    l.bn_beta.assign(size_t(l.out_channels), T(0));
    l.bn_mean.assign(size_t(l.out_channels), T(0));
    l.bn_var.assign(size_t(l.out_channels), T(0));
  }
  return l;
}

template <typename T>
void write_layer_payload(BinaryWriter& w, const Layer<T>& l) {
  if (l.has_weights()) {
    if (l.weight_format == WeightFormat::Dense) {
      w.put_array(to_f32(l.weights));
    } else {
      w.put(uint64_t(l.sparse_weights.nnz()));
      w.put_array(to_f32(l.sparse_weights.values));
      w.put_array(l.sparse_weights.col_idx);
      w.put_array(l.sparse_weights.row_ptr);
    }
  }
  if (l.has_bias()) w.put_array(to_f32(l.bias));
  if (!l.bn_gamma.empty()) {
    w.put_array(to_f32(l.bn_gamma));
    w.put_array(to_f32(l.bn_beta));
    w.put_array(to_f32(l.bn_mean));
    w.put_array(to_f32(l.bn_var));
  }
}

template <typename T>
void read_layer_payload(BinaryReader& r, Layer<T>& l) {
  std::vector<float> tmp;
  if (l.has_weights()) {
    if (l.weight_format == WeightFormat::Dense) {
      r.get_array(tmp, size_t(l.dense_weight_count()));
      from_f32(tmp, l.weights);
    } else {
      const uint64_t nnz = r.template get<uint64_t>();
      auto& sw = l.sparse_weights;
      sw.rows = l.flat_rows();
      sw.cols = l.flat_cols();
      if (nnz > uint64_t(sw.rows) * uint64_t(sw.cols))
        throw ParseError("csr nnz exceeds matrix capacity", r.offset());
      r.get_array(tmp, size_t(nnz));
      from_f32(tmp, sw.values);
      r.get_array(sw.col_idx, size_t(nnz));
      r.get_array(sw.row_ptr, size_t(sw.rows) + 1);
      validate_csr(sw);
    }
  }
  if (l.has_bias()) {
    r.get_array(tmp, l.bias.size());
    from_f32(tmp, l.bias);
  }
  if (!l.bn_gamma.empty()) {
    r.get_array(tmp, l.bn_gamma.size());
    from_f32(tmp, l.bn_gamma);
    r.get_array(tmp, l.bn_beta.size());
    from_f32(tmp, l.bn_beta);
    r.get_array(tmp, l.bn_mean.size());
    from_f32(tmp, l.bn_mean);
    r.get_array(tmp, l.bn_var.size());
    from_f32(tmp, l.bn_var);
  }
}

inline std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

template <typename T>
void write_manifest(const Network<T>& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const CostReport params = count_params(net);
  out << "{\n";
  out << "  \"format\": \"dlis-model\",\n";
  out << "  \"version\": " << kModelVersion << ",\n";
  out << "  \"name\": \"" << json_escape(net.name) << "\",\n";
  out << "  \"arch\": \"" << to_string(net.arch) << "\",\n";
  out << "  \"input_shape\": [" << net.input_shape.c << ", " << net.input_shape.h
      << ", " << net.input_shape.w << "],\n";
  out << "  \"num_classes\": " << net.num_classes << ",\n";
  out << "  \"total_params\": " << params.total_params << ",\n";
  out << "  \"layers\": [\n";
  for (size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    out << "    {\"kind\": \"" << to_string(l.kind) << "\", \"in\": " << l.in_channels
        << ", \"out\": " << l.out_channels << ", \"kernel\": " << l.kernel
        << ", \"stride\": " << l.stride << ", \"pad\": " << l.pad << ", \"format\": \""
        << to_string(l.weight_format) << "\", \"params\": " << l.param_count() << "}"
        << (i + 1 < net.layers.size() ? ",\n" : "\n");
  }
  out << "  ],\n";
  out << "  \"skips\": [";
  for (size_t s = 0; s < net.skips.size(); ++s)
    out << (s ? ", " : "") << "{\"src\": " << net.skips[s].src
        << ", \"dst\": " << net.skips[s].dst
        << ", \"projection_layers\": " << net.skips[s].projection.size() << "}";
  out << "]\n";
  out << "}\n";
}

}  // namespace detail

template <typename T>
void save_model(const Network<T>& net, const CompressionState& state,
                const std::string& path) {
  detail::BinaryWriter w(path);
  w.put_bytes(kModelMagic, 4);
  w.put(kModelVersion);
  w.put(uint8_t(net.arch));
  w.put(uint8_t(state.empty() ? 0 : 1));
  w.put(uint32_t(net.name.size()));
  w.put_bytes(net.name.data(), net.name.size());
  w.put(uint32_t(net.input_shape.c));
  w.put(uint32_t(net.input_shape.h));
  w.put(uint32_t(net.input_shape.w));
  w.put(uint32_t(net.num_classes));

  w.put(uint32_t(net.layers.size()));
  for (const auto& l : net.layers) detail::write_layer_entry(w, l);
  w.put(uint32_t(net.skips.size()));
  for (const auto& s : net.skips) {
    w.put(int32_t(s.src));
    w.put(int32_t(s.dst));
    w.put(uint32_t(s.projection.size()));
    for (const auto& pl : s.projection) detail::write_layer_entry(w, pl);
  }
  for (const auto& l : net.layers) detail::write_layer_payload(w, l);
  for (const auto& s : net.skips)
    for (const auto& pl : s.projection) detail::write_layer_payload(w, pl);

  if (!state.empty()) {
    auto put_mask = [&w](const std::vector<uint8_t>& m) {
      w.put(uint64_t(m.size()));
      std::vector<uint8_t> packed((m.size() + 7) / 8, 0);
      for (size_t i = 0; i < m.size(); ++i)
        if (m[i]) packed[i / 8] |= uint8_t(1u << (i % 8));
      w.put_array(packed);
    };
    w.put(uint32_t(state.mask.layers.size()));
    for (const auto& m : state.mask.layers) put_mask(m);
    w.put(uint32_t(state.mask.projections.size()));
    for (const auto& s : state.mask.projections) {
      w.put(uint32_t(s.size()));
      for (const auto& m : s) put_mask(m);
    }
    auto put_ternary = [&w](const TernaryLayerParams& tp) {
      w.put(uint8_t(tp.quantized ? 1 : 0));
      if (tp.quantized) {
        w.put(tp.wp);
        w.put(tp.wn);
        w.put(tp.threshold);
      }
    };
    w.put(double(state.ternary.t));
    w.put(uint32_t(state.ternary.layers.size()));
    for (const auto& tp : state.ternary.layers) put_ternary(tp);
    w.put(uint32_t(state.ternary.projections.size()));
    for (const auto& s : state.ternary.projections) {
      w.put(uint32_t(s.size()));
      for (const auto& tp : s) put_ternary(tp);
    }
    w.put(uint32_t(state.removals.removals.size()));
    for (const auto& rm : state.removals.removals) {
      w.put(int32_t(rm.layer));
      w.put(int32_t(rm.channel));
      w.put(rm.saliency);
      w.put(rm.penalized);
    }
    w.put(uint64_t(state.removals.original_params));
    w.put(uint64_t(state.removals.params_removed));
    w.put(uint32_t(state.sparsity_levels.size()));
    for (double lv : state.sparsity_levels) w.put(lv);
  }
  w.close(path);
  detail::write_manifest(net, path + ".manifest.json");
}

template <typename T>
void save_model(const Network<T>& net, const std::string& path) {
  save_model(net, CompressionState{}, path);
}

template <typename T>
std::pair<Network<T>, CompressionState> load_model(const std::string& path) {
  detail::BinaryReader r(path);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kModelMagic, 4) != 0)
    throw ParseError(path + ": bad magic", 0);
  const uint32_t version = r.template get<uint32_t>();
  if (version != kModelVersion)
    throw ParseError(path + ": unsupported version " + std::to_string(version), 4);
  const uint8_t arch = r.template get<uint8_t>();
  if (arch > uint8_t(Arch::Mobilenet)) throw ParseError(path + ": invalid arch id", 8);
  const uint8_t has_state = r.template get<uint8_t>();

  Network<T> net;
  net.arch = Arch(arch);
  const uint32_t name_len = r.template get<uint32_t>();
  if (name_len > (1u << 20)) throw ParseError(path + ": implausible name length", r.offset());
  net.name.resize(name_len);
  if (name_len > 0) r.get_bytes(net.name.data(), name_len);
  net.input_shape.c = int(r.template get<uint32_t>());
  net.input_shape.h = int(r.template get<uint32_t>());
  net.input_shape.w = int(r.template get<uint32_t>());
  net.num_classes = int(r.template get<uint32_t>());

  const uint32_t layer_count = r.template get<uint32_t>();
  net.layers.reserve(layer_count);
  for (uint32_t i = 0; i < layer_count; ++i)
    net.layers.push_back(detail::read_layer_entry<T>(r));
  const uint32_t skip_count = r.template get<uint32_t>();
  for (uint32_t s = 0; s < skip_count; ++s) {
    SkipConnection<T> skip;
    skip.src = r.template get<int32_t>();
    skip.dst = r.template get<int32_t>();
    const uint32_t proj_count = r.template get<uint32_t>();
    for (uint32_t p = 0; p < proj_count; ++p)
      skip.projection.push_back(detail::read_layer_entry<T>(r));
    net.skips.push_back(std::move(skip));
  }
  for (auto& l : net.layers) detail::read_layer_payload(r, l);
  for (auto& s : net.skips)
    for (auto& pl : s.projection) detail::read_layer_payload(r, pl);

  CompressionState state;
  if (has_state) {
    auto get_mask = [&r](std::vector<uint8_t>& m) {
      const uint64_t bits = r.template get<uint64_t>();
      std::vector<uint8_t> packed;
      r.get_array(packed, size_t((bits + 7) / 8));
      m.resize(size_t(bits));
      for (uint64_t b = 0; b < bits; ++b)
        m[size_t(b)] = (packed[size_t(b / 8)] >> (b % 8)) & 1u;
    };
    const uint32_t mask_layers = r.template get<uint32_t>();
    state.mask.layers.resize(mask_layers);
    for (uint32_t i = 0; i < mask_layers; ++i) get_mask(state.mask.layers[i]);
    const uint32_t mask_skips = r.template get<uint32_t>();
    state.mask.projections.resize(mask_skips);
    for (uint32_t s = 0; s < mask_skips; ++s) {
      const uint32_t protos = r.template get<uint32_t>();
      state.mask.projections[s].resize(protos);
      for (uint32_t p = 0; p < protos; ++p) get_mask(state.mask.projections[s][p]);
    }
    // Codes are implied by the decoded weights' signs.
    auto get_ternary = [&r](TernaryLayerParams& tp, const std::vector<T>* weights) {
      tp.quantized = r.template get<uint8_t>() != 0;
      if (!tp.quantized) return;
      tp.wp = r.template get<double>();
      tp.wn = r.template get<double>();
      tp.threshold = r.template get<double>();
      if (weights != nullptr && !weights->empty()) {
        tp.codes.resize(weights->size());
        for (size_t j = 0; j < tp.codes.size(); ++j) {
          const T v = (*weights)[j];
          tp.codes[j] = v > T(0) ? int8_t(1) : (v < T(0) ? int8_t(-1) : int8_t(0));
        }
      }
    };
    state.ternary.t = r.template get<double>();
    const uint32_t tern_layers = r.template get<uint32_t>();
    state.ternary.layers.resize(tern_layers);
    for (uint32_t i = 0; i < tern_layers; ++i)
      get_ternary(state.ternary.layers[i],
                  i < net.layers.size() ? &net.layers[i].weights : nullptr);
    const uint32_t tern_skips = r.template get<uint32_t>();
    state.ternary.projections.resize(tern_skips);
    for (uint32_t s = 0; s < tern_skips; ++s) {
      const uint32_t protos = r.template get<uint32_t>();
      state.ternary.projections[s].resize(protos);
      for (uint32_t p = 0; p < protos; ++p)
        get_ternary(state.ternary.projections[s][p],
                    s < net.skips.size() && p < net.skips[s].projection.size()
                        ? &net.skips[s].projection[p].weights
                        : nullptr);
    }
    const uint32_t removals = r.template get<uint32_t>();
    state.removals.removals.resize(removals);
    for (uint32_t i = 0; i < removals; ++i) {
      auto& rm = state.removals.removals[i];
      rm.layer = r.template get<int32_t>();
      rm.channel = r.template get<int32_t>();
      rm.saliency = r.template get<double>();
      rm.penalized = r.template get<double>();
    }
    state.removals.original_params = int64_t(r.template get<uint64_t>());
    state.removals.params_removed = int64_t(r.template get<uint64_t>());
    const uint32_t levels = r.template get<uint32_t>();
    state.sparsity_levels.resize(levels);
    for (uint32_t i = 0; i < levels; ++i)
      state.sparsity_levels[i] = r.template get<double>();
  }
  if (!r.at_eof()) throw ParseError(path + ": trailing data", r.offset());

  validate(net);
  return {std::move(net), std::move(state)};
}

}  // namespace dlis
