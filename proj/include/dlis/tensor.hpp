#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dlis/errors.hpp"
#include "dlis/parallel.hpp"

namespace dlis {

// Rank-4 dense array (batch, channels, height, width), row-major with W
// fastest. All activations and filter banks live in this container.
template <typename T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), data(size_t(n_) * c_ * h_ * w_, T(0)) {}

  int64_t count() const { return int64_t(n) * c * h * w; }
  int64_t plane() const { return int64_t(h) * w; }

  size_t index(int ni, int ci, int hi, int wi) const {
    return ((size_t(ni) * c + ci) * h + hi) * w + wi;
  }
  T& at(int ni, int ci, int hi, int wi) { return data[index(ni, ci, hi, wi)]; }
  const T& at(int ni, int ci, int hi, int wi) const {
    return data[index(ni, ci, hi, wi)];
  }

  T* channel_ptr(int ni, int ci) { return data.data() + index(ni, ci, 0, 0); }
  const T* channel_ptr(int ni, int ci) const {
    return data.data() + index(ni, ci, 0, 0);
  }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
};

template <typename T>
struct DenseMatrix {
  int rows = 0, cols = 0;
  std::vector<T> data;

  DenseMatrix() = default;
  DenseMatrix(int r, int c) : rows(r), cols(c), data(size_t(r) * c, T(0)) {}

  T& at(int r, int c) { return data[size_t(r) * cols + c]; }
  const T& at(int r, int c) const { return data[size_t(r) * cols + c]; }
  T* row(int r) { return data.data() + size_t(r) * cols; }
  const T* row(int r) const { return data.data() + size_t(r) * cols; }
};

// Strict CSR: no stored zeros, column indices strictly increasing within a
// row, 32-bit unsigned indices.
template <typename T>
struct CsrMatrix {
  int rows = 0, cols = 0;
  std::vector<T> values;
  std::vector<uint32_t> col_idx;
  std::vector<uint32_t> row_ptr;  // length rows + 1

  CsrMatrix() : row_ptr(1, 0) {}
  CsrMatrix(int r, int c) : rows(r), cols(c), row_ptr(1, 0) {}

  int64_t nnz() const { return int64_t(values.size()); }
};

template <typename T>
void validate_csr(const CsrMatrix<T>& a) {
  if (a.rows < 0 || a.cols < 0) throw ShapeError("csr: negative extent");
  if (a.row_ptr.size() != size_t(a.rows) + 1)
    throw ShapeError("csr: row_ptr length != rows + 1");
  if (a.row_ptr.front() != 0) throw ShapeError("csr: row_ptr[0] != 0");
  if (a.row_ptr.back() != a.values.size() || a.values.size() != a.col_idx.size())
    throw ShapeError("csr: row_ptr[rows] != nnz");
  for (int r = 0; r < a.rows; ++r) {
    if (a.row_ptr[r] > a.row_ptr[r + 1])
      throw ShapeError("csr: row_ptr not non-decreasing at row " + std::to_string(r));
    for (uint32_t p = a.row_ptr[r]; p < a.row_ptr[r + 1]; ++p) {
      if (a.col_idx[p] >= uint32_t(a.cols))
        throw ShapeError("csr: column index out of range");
      if (p > a.row_ptr[r] && a.col_idx[p] <= a.col_idx[p - 1])
        throw ShapeError("csr: column indices not strictly increasing in row " +
                         std::to_string(r));
      if (a.values[p] == T(0)) throw ShapeError("csr: stored zero value");
    }
  }
}

// Entries with |value| <= tol are dropped.
template <typename T>
CsrMatrix<T> csr_from_dense(const DenseMatrix<T>& m, T tol = T(0)) {
  if (tol < T(0)) throw ConfigError("csr_from_dense: tol must be >= 0");
  CsrMatrix<T> a(m.rows, m.cols);
  a.row_ptr.resize(size_t(m.rows) + 1);
  a.row_ptr[0] = 0;
  for (int r = 0; r < m.rows; ++r) {
    const T* src = m.row(r);
    for (int c = 0; c < m.cols; ++c) {
      const T v = src[c];
      if (std::abs(v) > tol) {
        a.values.push_back(v);
        a.col_idx.push_back(uint32_t(c));
      }
    }
    a.row_ptr[size_t(r) + 1] = uint32_t(a.values.size());
  }
  return a;
}

template <typename T>
DenseMatrix<T> csr_to_dense(const CsrMatrix<T>& a) {
  DenseMatrix<T> m(a.rows, a.cols);
  for (int r = 0; r < a.rows; ++r)
    for (uint32_t p = a.row_ptr[r]; p < a.row_ptr[r + 1]; ++p)
      m.at(r, int(a.col_idx[p])) = a.values[p];
  return m;
}

// c[i][j] = sum_k a[i][k] * b[k][j] with k strictly ascending, so results
// are bit-identical for any thread count (parallelism is over rows only).
template <typename T>
void gemm_raw(const T* a, int m, int k, const T* b, int n, T* c,
              const ExecConfig& cfg = {}, int trace_layer = -1) {
  parallel_for_traced(m, cfg, trace_layer, [&](int64_t i) {
    T* out = c + i * n;
    for (int j = 0; j < n; ++j) out[j] = T(0);
    const T* arow = a + i * k;
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + size_t(kk) * n;
      for (int j = 0; j < n; ++j) out[j] += av * brow[j];
    }
  });
}

template <typename T>
DenseMatrix<T> gemm(const DenseMatrix<T>& a, const DenseMatrix<T>& b,
                    const ExecConfig& cfg = {}) {
  if (a.cols != b.rows)
    throw ShapeError("gemm: a.cols (" + std::to_string(a.cols) + ") != b.rows (" +
                     std::to_string(b.rows) + ")");
  DenseMatrix<T> c(a.rows, b.cols);
  gemm_raw(a.data.data(), a.rows, a.cols, b.data.data(), b.cols, c.data.data(), cfg);
  return c;
}

// Same accumulation discipline as gemm_raw: per output row, stored entries
// are visited in ascending column order.
template <typename T>
void spmm_raw(const CsrMatrix<T>& a, const T* b, int n, T* c,
              const ExecConfig& cfg = {}, int trace_layer = -1) {
  parallel_for_traced(a.rows, cfg, trace_layer, [&](int64_t i) {
    T* out = c + i * n;
    for (int j = 0; j < n; ++j) out[j] = T(0);
    for (uint32_t p = a.row_ptr[i]; p < a.row_ptr[i + 1]; ++p) {
      const T av = a.values[p];
      const T* brow = b + size_t(a.col_idx[p]) * n;
      for (int j = 0; j < n; ++j) out[j] += av * brow[j];
    }
  });
}

template <typename T>
DenseMatrix<T> spmm(const CsrMatrix<T>& a, const DenseMatrix<T>& b,
                    const ExecConfig& cfg = {}) {
  if (a.cols != b.rows)
    throw ShapeError("spmm: a.cols (" + std::to_string(a.cols) + ") != b.rows (" +
                     std::to_string(b.rows) + ")");
  DenseMatrix<T> c(a.rows, b.cols);
  spmm_raw(a, b.data.data(), b.cols, c.data.data(), cfg);
  return c;
}

}  // namespace dlis
