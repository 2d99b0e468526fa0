#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dlis/errors.hpp"
#include "dlis/rng.hpp"
#include "dlis/tensor.hpp"

namespace dlis {

template <typename T>
struct Dataset {
  Tensor<T> images;  // (n, c, h, w)
  std::vector<int32_t> labels;
  std::string split;
  int num_classes = 0;

  int64_t size() const { return images.n; }
};

// Deterministic class-conditional Gaussian blobs. Each class owns a fixed
// blob center on a circle and fixed per-channel amplitudes; samples add
// i.i.d. pixel noise. Two classes are linearly separable by construction.
template <typename T>
Dataset<T> synth_dataset(uint64_t seed, int n, int classes, int size) {
  if (n < 1 || classes < 1) throw ConfigError("synth_dataset: n and classes must be >= 1");
  if (size < 2) throw ConfigError("synth_dataset: size must be >= 2");

  Rng class_rng(seed ^ 0x5e11c0debull);
  std::vector<double> amp(static_cast<size_t>(classes) * 3);
  for (auto& a : amp) a = class_rng.uniform(0.6, 1.6);
  std::vector<double> cy(static_cast<size_t>(classes)), cx(static_cast<size_t>(classes));
  for (int k = 0; k < classes; ++k) {
    const double angle = 2.0 * 3.14159265358979323846 * double(k) / double(classes);
    cy[size_t(k)] = 0.5 * size + 0.25 * size * std::sin(angle);
    cx[size_t(k)] = 0.5 * size + 0.25 * size * std::cos(angle);
  }

  Dataset<T> ds;
  ds.images = Tensor<T>(n, 3, size, size);
  ds.labels.resize(size_t(n));
  ds.split = "synth";
  ds.num_classes = classes;
  const double sigma = double(size) / 6.0;

  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int k = i % classes;
    ds.labels[size_t(i)] = k;
    for (int ch = 0; ch < 3; ++ch) {
      const double a = amp[size_t(k) * 3 + ch];
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double dy = y - cy[size_t(k)], dx = x - cx[size_t(k)];
          const double blob = a * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
          ds.images.at(i, ch, y, x) = T(blob + 0.3 * rng.normal());
        }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: each record is 1 label byte + 3072 pixel bytes
// (1024 per RGB plane, row-major 32x32); 10,000 records per file.

inline constexpr int kCifarRecordBytes = 3073;
inline constexpr int kCifarRecordsPerFile = 10000;

namespace detail {

template <typename T>
void load_cifar_file(const std::string& path, Tensor<T>& images,
                     std::vector<int32_t>& labels, int offset) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (int r = 0; r < kCifarRecordsPerFile; ++r) {
    in.read(reinterpret_cast<char*>(record.data()), kCifarRecordBytes);
    if (in.gcount() != kCifarRecordBytes)
      throw IoError(path + ": short read at record " + std::to_string(r) +
                    " (expected " + std::to_string(kCifarRecordsPerFile) +
                    " records of " + std::to_string(kCifarRecordBytes) + " bytes)");
    const int label = record[0];
    if (label > 9) throw ParseError(path + ": label out of range [0,9]",
                                    size_t(r) * kCifarRecordBytes);
    labels[size_t(offset) + r] = label;
    T* dst = images.data.data() + images.index(offset + r, 0, 0, 0);
    for (int p = 0; p < 3072; ++p) dst[p] = T(record[size_t(p) + 1]) / T(255);
  }
  char extra;
  if (in.read(&extra, 1))
    throw ParseError(path + ": trailing data after last record",
                     size_t(kCifarRecordsPerFile) * kCifarRecordBytes);
}

}  // namespace detail

// Loads the standard 50,000/10,000 split from data_batch_{1..5}.bin and
// test_batch.bin. Pixels are scaled to [0,1]; with standardize set, each
// channel is shifted/scaled by the training split's mean and stddev.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_cifar10(const std::string& dir,
                                               bool standardize = false) {
  Dataset<T> train, test;
  train.images = Tensor<T>(5 * kCifarRecordsPerFile, 3, 32, 32);
  train.labels.resize(size_t(5) * kCifarRecordsPerFile);
  train.split = "train";
  train.num_classes = 10;
  for (int f = 0; f < 5; ++f)
    detail::load_cifar_file(dir + "/data_batch_" + std::to_string(f + 1) + ".bin",
                            train.images, train.labels, f * kCifarRecordsPerFile);

  test.images = Tensor<T>(kCifarRecordsPerFile, 3, 32, 32);
  test.labels.resize(kCifarRecordsPerFile);
  test.split = "test";
  test.num_classes = 10;
  detail::load_cifar_file(dir + "/test_batch.bin", test.images, test.labels, 0);

  if (standardize) {
    const int64_t per_channel = train.images.count() / 3;
    for (int ch = 0; ch < 3; ++ch) {
      double mean = 0;
      for (int i = 0; i < train.images.n; ++i) {
        const T* p = train.images.channel_ptr(i, ch);
        for (int64_t j = 0; j < train.images.plane(); ++j) mean += double(p[j]);
      }
      mean /= double(per_channel);
      double var = 0;
      for (int i = 0; i < train.images.n; ++i) {
        const T* p = train.images.channel_ptr(i, ch);
        for (int64_t j = 0; j < train.images.plane(); ++j) {
          const double d = double(p[j]) - mean;
          var += d * d;
        }
      }
      const double stddev = std::sqrt(var / double(per_channel)) + 1e-8;
      auto apply = [&](Dataset<T>& ds) {
        for (int i = 0; i < ds.images.n; ++i) {
          T* p = ds.images.channel_ptr(i, ch);
          for (int64_t j = 0; j < ds.images.plane(); ++j)
            p[j] = T((double(p[j]) - mean) / stddev);
        }
      };
      apply(train);
      apply(test);
    }
  }
  return {std::move(train), std::move(test)};
}

// Copies record [index] of a dataset into a batch tensor row.
template <typename T>
void copy_image(const Dataset<T>& ds, int index, Tensor<T>& batch, int row) {
  const T* src = ds.images.data.data() + ds.images.index(index, 0, 0, 0);
  T* dst = batch.data.data() + batch.index(row, 0, 0, 0);
  std::copy(src, src + ds.images.plane() * ds.images.c, dst);
}

}  // namespace dlis
