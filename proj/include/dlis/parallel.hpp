#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "dlis/errors.hpp"

namespace dlis {

enum class ConvAlgo : uint8_t { Direct = 0, Im2colGemm = 1, SparseCsr = 2 };

inline const char* to_string(ConvAlgo a) {
  switch (a) {
    case ConvAlgo::Direct: return "direct";
    case ConvAlgo::Im2colGemm: return "im2col_gemm";
    case ConvAlgo::SparseCsr: return "sparse_csr";
  }
  return "?";
}

inline ConvAlgo parse_conv_algo(const std::string& s) {
  if (s == "direct") return ConvAlgo::Direct;
  if (s == "im2col_gemm") return ConvAlgo::Im2colGemm;
  if (s == "sparse_csr") return ConvAlgo::SparseCsr;
  throw ConfigError("unknown conv algorithm: " + s);
}

// Test instrumentation. Callbacks fire from worker threads; implementations
// must be thread-safe.
struct TraceHook {
  virtual ~TraceHook() = default;
  virtual void item_done(int /*layer*/, int64_t /*item*/) {}
  virtual void layer_done(int /*layer*/) {}
};

struct ExecConfig {
  int threads = 1;
  ConvAlgo conv_algo = ConvAlgo::Direct;
  int chunk = 1;  // work items pulled per grab from the shared list
  TraceHook* trace = nullptr;
};

// Dynamic work-list loop: items are claimed in chunks from a shared
// counter, so load balances across threads while every item is still
// processed exactly once by exactly one thread. Item payloads must write
// to disjoint outputs; reductions inside one item run sequentially, which
// keeps results bit-identical for any thread count or chunk size.
template <typename Fn>
void parallel_for(int64_t items, int threads, int chunk, Fn&& fn) {
  if (items <= 0) return;
  chunk = std::max(1, chunk);
  const int64_t max_workers = (items + chunk - 1) / chunk;
  const int nthreads = int(std::min<int64_t>(std::max(1, threads), max_workers));
  if (nthreads <= 1) {
    for (int64_t i = 0; i < items; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      const int64_t begin = next.fetch_add(chunk, std::memory_order_relaxed);
      if (begin >= items) break;
      const int64_t end = std::min<int64_t>(begin + chunk, items);
      for (int64_t i = begin; i < end; ++i) fn(i);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(size_t(nthreads - 1));
  for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

template <typename Fn>
void parallel_for(int64_t items, const ExecConfig& cfg, Fn&& fn) {
  parallel_for(items, cfg.threads, cfg.chunk, std::forward<Fn>(fn));
}

// Variant that reports item completion to cfg.trace under a layer id.
template <typename Fn>
void parallel_for_traced(int64_t items, const ExecConfig& cfg, int layer, Fn&& fn) {
  if (cfg.trace == nullptr) {
    parallel_for(items, cfg.threads, cfg.chunk, std::forward<Fn>(fn));
    return;
  }
  TraceHook* trace = cfg.trace;
  parallel_for(items, cfg.threads, cfg.chunk, [&](int64_t i) {
    fn(i);
    trace->item_done(layer, i);
  });
}

}  // namespace dlis
