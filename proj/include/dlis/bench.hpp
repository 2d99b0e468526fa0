#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dlis/compress.hpp"
#include "dlis/engine.hpp"
#include "dlis/footprint.hpp"
#include "dlis/graph.hpp"

namespace dlis {

// One measurement row. Latencies in nanoseconds from a monotonic clock.
struct BenchRecord {
  std::string model;
  std::string technique = "plain";  // plain | weight_prune | channel_prune | ttq
  double level = 0.0;               // sparsity | compression rate | ttq threshold
  std::string format = "dense";     // dense | csr
  int threads = 1;
  int reps = 0;
  int64_t latency_median_ns = 0;
  int64_t latency_min_ns = 0;
  int64_t latency_max_ns = 0;
  double accuracy = -1.0;
  int64_t total_macs = 0;
  int64_t effective_macs = 0;
  int64_t footprint_bytes = 0;
  double expected_speedup = 1.0;
  double observed_speedup = 1.0;
};

struct TimingStats {
  int64_t median_ns = 0;
  int64_t min_ns = 0;
  int64_t max_ns = 0;
  int reps = 0;
};

// Runs `warmup` unrecorded forwards, then `reps` timed ones. The median of
// an even rep count is the mean of the two middle values.
template <typename T>
TimingStats time_inference(const Network<T>& net, const Tensor<T>& input,
                           const ExecConfig& cfg, int reps, int warmup = 3) {
  if (reps < 1) throw ConfigError("time_inference: reps must be >= 1");
  for (int i = 0; i < warmup; ++i) (void)forward(net, input, cfg);
  std::vector<int64_t> times(static_cast<size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto start = std::chrono::steady_clock::now();
    (void)forward(net, input, cfg);
    const auto stop = std::chrono::steady_clock::now();
    times[size_t(i)] =
        std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count();
  }
  std::sort(times.begin(), times.end());
  TimingStats s;
  s.reps = reps;
  s.min_ns = times.front();
  s.max_ns = times.back();
  s.median_ns = reps % 2 == 1 ? times[size_t(reps) / 2]
                              : (times[size_t(reps) / 2 - 1] + times[size_t(reps) / 2]) / 2;
  return s;
}

inline void assert_bitwise_equal(const Tensor<float>& a, const Tensor<float>& b,
                                 const std::string& what) {
  if (!a.same_shape(b)) throw VerificationError(what + ": shapes differ");
  if (a.count() > 0 &&
      std::memcmp(a.data.data(), b.data.data(), size_t(a.count()) * sizeof(float)) != 0)
    throw VerificationError(what + ": outputs are not bitwise equal");
}

inline void assert_bitwise_equal(const Tensor<double>& a, const Tensor<double>& b,
                                 const std::string& what) {
  if (!a.same_shape(b)) throw VerificationError(what + ": shapes differ");
  if (a.count() > 0 &&
      std::memcmp(a.data.data(), b.data.data(), size_t(a.count()) * sizeof(double)) != 0)
    throw VerificationError(what + ": outputs are not bitwise equal");
}

// One record per thread count. Before timing, the logits at every thread
// count are asserted bitwise equal to the first count's (determinism
// guard; a mismatch aborts the sweep). observed_speedup is relative to
// the first record, so a leading thread count of 1 pins it to 1.0 there.
template <typename T>
std::vector<BenchRecord> thread_sweep(const Network<T>& net, const ExecConfig& base,
                                      const std::vector<int>& threads,
                                      const Tensor<T>& input, int reps, int warmup = 3) {
  if (threads.empty()) throw ConfigError("thread_sweep: thread list is empty");
  ExecConfig cfg = base;
  cfg.threads = threads.front();
  const Tensor<T> reference = forward(net, input, cfg);

  std::vector<BenchRecord> records;
  for (int t : threads) {
    if (t < 1) throw ConfigError("thread_sweep: thread counts must be >= 1");
    cfg.threads = t;
    assert_bitwise_equal(forward(net, input, cfg), reference,
                         "thread_sweep determinism guard (threads=" + std::to_string(t) + ")");
    const TimingStats stats = time_inference(net, input, cfg, reps, warmup);
    BenchRecord rec;
    rec.threads = t;
    rec.reps = reps;
    rec.latency_median_ns = stats.median_ns;
    rec.latency_min_ns = stats.min_ns;
    rec.latency_max_ns = stats.max_ns;
    records.push_back(rec);
  }
  const double base_median = double(records.front().latency_median_ns);
  for (auto& rec : records)
    rec.observed_speedup = base_median / double(std::max<int64_t>(1, rec.latency_median_ns));
  return records;
}

// ---------------------------------------------------------------------------
// CSV emission/parsing. Fixed column order, fixed decimal formatting,
// '.' radix; parse recovers every numeric field exactly at the emitted
// precision.

inline const char* kBenchCsvHeader =
    "model,technique,level,format,threads,reps,latency_median_ns,latency_min_ns,"
    "latency_max_ns,accuracy,total_macs,effective_macs,footprint_bytes,"
    "expected_speedup,observed_speedup";

namespace detail {

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, digits);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("bad numeric field '" + s + "'", 0);
  return v;
}

inline int64_t parse_int(const std::string& s) {
  int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("bad integer field '" + s + "'", 0);
  return v;
}

}  // namespace detail

inline std::string to_csv_row(const BenchRecord& r) {
  std::ostringstream os;
  os << r.model << ',' << r.technique << ',' << detail::format_fixed(r.level) << ','
     << r.format << ',' << r.threads << ',' << r.reps << ',' << r.latency_median_ns
     << ',' << r.latency_min_ns << ',' << r.latency_max_ns << ','
     << detail::format_fixed(r.accuracy) << ',' << r.total_macs << ','
     << r.effective_macs << ',' << r.footprint_bytes << ','
     << detail::format_fixed(r.expected_speedup) << ','
     << detail::format_fixed(r.observed_speedup);
  return os.str();
}

inline void emit_csv(const std::vector<BenchRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << kBenchCsvHeader << "\n";
  for (const auto& r : records) out << to_csv_row(r) << "\n";
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<BenchRecord> parse_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file", 0);
  if (line != kBenchCsvHeader) throw ParseError(path + ": unexpected header", 0);
  std::vector<BenchRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 15) throw ParseError(path + ": expected 15 fields", 0);
    BenchRecord r;
    r.model = f[0];
    r.technique = f[1];
    r.level = detail::parse_double(f[2]);
    r.format = f[3];
    r.threads = int(detail::parse_int(f[4]));
    r.reps = int(detail::parse_int(f[5]));
    r.latency_median_ns = detail::parse_int(f[6]);
    r.latency_min_ns = detail::parse_int(f[7]);
    r.latency_max_ns = detail::parse_int(f[8]);
    r.accuracy = detail::parse_double(f[9]);
    r.total_macs = detail::parse_int(f[10]);
    r.effective_macs = detail::parse_int(f[11]);
    r.footprint_bytes = detail::parse_int(f[12]);
    r.expected_speedup = detail::parse_double(f[13]);
    r.observed_speedup = detail::parse_double(f[14]);
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Expected-vs-observed analysis.

struct GapEntry {
  size_t record_index = 0;
  double expected_ns = 0.0;
  double gap = 0.0;  // observed median / expected time; > 1 = slower than predicted
};

// For every record: expected time = plain-baseline median (same model and
// thread count) / expected_speedup; gap = observed median / expected time.
inline std::vector<GapEntry> gap_report(const std::vector<BenchRecord>& records) {
  auto find_baseline = [&](const BenchRecord& r) -> const BenchRecord* {
    for (const auto& b : records)
      if (b.technique == "plain" && b.model == r.model && b.threads == r.threads)
        return &b;
    return nullptr;
  };
  std::vector<GapEntry> out;
  for (size_t i = 0; i < records.size(); ++i) {
    const BenchRecord* base = find_baseline(records[i]);
    if (base == nullptr)
      throw ConfigError("gap_report: records lack a plain baseline for model '" +
                        records[i].model + "' at " + std::to_string(records[i].threads) +
                        " threads");
    GapEntry e;
    e.record_index = i;
    e.expected_ns = double(base->latency_median_ns) / records[i].expected_speedup;
    e.gap = e.expected_ns > 0 ? double(records[i].latency_median_ns) / e.expected_ns : 0.0;
    out.push_back(e);
  }
  return out;
}

inline void print_gap_report(std::ostream& os, const std::vector<BenchRecord>& records,
                             const std::vector<GapEntry>& gaps) {
  os << "technique,level,threads,expected_speedup,observed_speedup,expected_ns,"
        "observed_ns,gap\n";
  for (const auto& g : gaps) {
    const auto& r = records[g.record_index];
    os << r.technique << ',' << detail::format_fixed(r.level, 4) << ',' << r.threads
       << ',' << detail::format_fixed(r.expected_speedup, 4) << ','
       << detail::format_fixed(r.observed_speedup, 4) << ','
       << detail::format_fixed(g.expected_ns, 1) << ',' << r.latency_median_ns << ','
       << detail::format_fixed(g.gap, 4) << "\n";
  }
}

// ---------------------------------------------------------------------------
// Pareto sweeps.

struct SweepPlan {
  std::string model = "model";
  std::string technique = "weight_prune";  // weight_prune | channel_prune | ttq
  std::vector<double> levels;
  std::vector<int> threads{1};
  int reps = 30;
  int warmup = 3;
  ExecConfig cfg;
  int finetune_epochs = 5;
  double finetune_lr = 0.01;
  int batch_size = 32;
  uint64_t seed = 1;
  double beta = 1e-6;
  int removal_period = 100;
  bool sparse_format = true;  // weight_prune/ttq evaluated in CSR
};

// Highest level whose accuracy is within `tolerance` of the best point on
// the curve (the elbow).
inline double select_elbow(const std::vector<std::pair<double, double>>& curve,
                           double tolerance) {
  if (curve.empty()) throw ConfigError("select_elbow: empty curve");
  double best_acc = curve.front().second;
  for (const auto& [level, acc] : curve) best_acc = std::max(best_acc, acc);
  double chosen = curve.front().first;
  for (const auto& [level, acc] : curve)
    if (acc >= best_acc - tolerance) chosen = std::max(chosen, level);
  return chosen;
}

// Highest level whose accuracy still meets `target`; nullopt if none does.
inline std::optional<double> select_fixed_accuracy(
    const std::vector<std::pair<double, double>>& curve, double target) {
  std::optional<double> chosen;
  for (const auto& [level, acc] : curve)
    if (acc >= target && (!chosen.has_value() || level > *chosen)) chosen = level;
  return chosen;
}

namespace detail {

inline void normalize_observed(std::vector<BenchRecord>& records, size_t group_begin) {
  if (group_begin >= records.size()) return;
  const double base = double(records[group_begin].latency_median_ns);
  for (size_t i = group_begin; i < records.size(); ++i)
    records[i].observed_speedup =
        base / double(std::max<int64_t>(1, records[i].latency_median_ns));
}

template <typename T>
BenchRecord measured_record(const Network<T>& net, const SweepPlan& plan,
                            const std::string& technique, double level,
                            const std::string& format, int threads, double accuracy,
                            int64_t base_macs, const Tensor<T>& probe) {
  ExecConfig cfg = plan.cfg;
  cfg.threads = threads;
  if (format == "csr") cfg.conv_algo = ConvAlgo::SparseCsr;
  const TimingStats stats = time_inference(net, probe, cfg, plan.reps, plan.warmup);
  BenchRecord rec;
  rec.model = plan.model;
  rec.technique = technique;
  rec.level = level;
  rec.format = format;
  rec.threads = threads;
  rec.reps = plan.reps;
  rec.latency_median_ns = stats.median_ns;
  rec.latency_min_ns = stats.min_ns;
  rec.latency_max_ns = stats.max_ns;
  rec.accuracy = accuracy;
  rec.total_macs = count_macs(net).total_macs;
  rec.effective_macs = count_effective_macs(net);
  rec.footprint_bytes = footprint(net, cfg.conv_algo).grand_total();
  rec.expected_speedup = expected_speedup(base_macs, rec.effective_macs);
  return rec;
}

}  // namespace detail

// Executes one technique sweep: per level, applies the technique (with its
// fine-tuning procedure), evaluates accuracy, and times the result at each
// thread count. A plain baseline row per thread count comes first. Levels
// are emitted in the order given; accuracy points are raw measurements.
template <typename T>
std::vector<BenchRecord> pareto_sweep(const SweepPlan& plan, const Network<T>& base,
                                      const Dataset<T>& train_ds, const Dataset<T>& eval_ds) {
  if (plan.levels.empty()) throw ConfigError("pareto_sweep: empty level list");
  for (size_t i = 1; i < plan.levels.size(); ++i)
    if (plan.levels[i] < plan.levels[i - 1])
      throw ConfigError("pareto_sweep: levels must be ascending");

  const int64_t base_macs = count_macs(base).total_macs;
  Tensor<T> probe(1, base.input_shape.c, base.input_shape.h, base.input_shape.w);
  for (int i = 0; i < int(probe.count()); ++i)
    probe.data[size_t(i)] = T(0.01) * T(i % 97);

  std::vector<BenchRecord> records;
  const double base_acc = evaluate_accuracy(base, eval_ds, plan.cfg);
  for (int t : plan.threads)
    records.push_back(detail::measured_record(base, plan, "plain", 0.0, "dense", t,
                                              base_acc, base_macs, probe));
  detail::normalize_observed(records, 0);

  TrainSchedule sched;
  sched.base_lr = plan.finetune_lr;
  sched.decay_factor = 1.0;
  sched.decay_every = 1000000;
  sched.batch_size = plan.batch_size;
  sched.seed = plan.seed;

  if (plan.technique == "weight_prune") {
    Network<T> net = base;
    auto stages = iterative_prune(net, train_ds, eval_ds, plan.levels,
                                  plan.finetune_epochs, sched, plan.cfg);
    for (const auto& stage : stages) {
      Network<T> eval_net = stage.net;
      std::string format = "dense";
      if (plan.sparse_format) {
        to_sparse_format(eval_net);
        format = "csr";
      }
      const size_t group = records.size();
      for (int t : plan.threads)
        records.push_back(detail::measured_record(eval_net, plan, "weight_prune",
                                                  stage.level, format, t, stage.accuracy,
                                                  base_macs, probe));
      detail::normalize_observed(records, group);
    }
  } else if (plan.technique == "ttq") {
    for (double level : plan.levels) {
      Network<T> net = base;
      TrainSchedule tsched = sched;
      tsched.epochs = plan.finetune_epochs;
      (void)ttq_train(net, train_ds, level, tsched);
      const double acc = evaluate_accuracy(net, eval_ds, plan.cfg);
      Network<T> eval_net = net;
      std::string format = "dense";
      if (plan.sparse_format) {
        to_sparse_format(eval_net);
        format = "csr";
      }
      const size_t group = records.size();
      for (int t : plan.threads)
        records.push_back(detail::measured_record(eval_net, plan, "ttq", level, format,
                                                  t, acc, base_macs, probe));
      detail::normalize_observed(records, group);
    }
  } else if (plan.technique == "channel_prune") {
    // Cumulative removals: fine-tune removal_period steps, drop one
    // channel, repeat until the running compression rate meets the level.
    Network<T> net = base;
    ChannelRecord running;
    running.original_params = count_params(net).total_params;
    for (double level : plan.levels) {
      while (running.compression_rate() < level) {
        ChannelPruneOptions one;
        one.steps = plan.removal_period;
        one.removal_period = plan.removal_period;
        one.beta = plan.beta;
        one.lr = plan.finetune_lr;
        one.batch_size = plan.batch_size;
        one.seed = plan.seed;
        one.cfg = plan.cfg;
        ChannelRecord delta = channel_prune(net, train_ds, one);
        if (delta.removals.empty()) break;
        running.params_removed += delta.params_removed;
        for (const auto& rm : delta.removals) running.removals.push_back(rm);
      }
      const double acc = evaluate_accuracy(net, eval_ds, plan.cfg);
      const size_t group = records.size();
      for (int t : plan.threads)
        records.push_back(detail::measured_record(net, plan, "channel_prune",
                                                  running.compression_rate(), "dense", t,
                                                  acc, base_macs, probe));
      detail::normalize_observed(records, group);
    }
  } else {
    throw ConfigError("pareto_sweep: unknown technique '" + plan.technique + "'");
  }
  return records;
}

// Emits a small python script that reads the CSV and plots the curves.
inline void emit_plot_script(const std::string& csv_path, const std::string& out_path) {
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot open " + out_path + " for writing");
  out << "#!/usr/bin/env python3\n"
         "# Plots accuracy/latency curves from a bench CSV.\n"
         "import csv, sys\n"
         "import matplotlib\n"
         "matplotlib.use('Agg')\n"
         "import matplotlib.pyplot as plt\n"
         "path = sys.argv[1] if len(sys.argv) > 1 else '" << csv_path << "'\n"
         "rows = list(csv.DictReader(open(path)))\n"
         "techs = sorted({r['technique'] for r in rows})\n"
         "fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))\n"
         "for t in techs:\n"
         "    pts = [(float(r['level']), float(r['accuracy'])) for r in rows\n"
         "           if r['technique'] == t]\n"
         "    if pts:\n"
         "        pts.sort()\n"
         "        ax1.plot([p[0] for p in pts], [p[1] for p in pts], marker='o', label=t)\n"
         "    lat = [(int(r['threads']), int(r['latency_median_ns']) / 1e6) for r in rows\n"
         "           if r['technique'] == t]\n"
         "    if lat:\n"
         "        lat.sort()\n"
         "        ax2.plot([p[0] for p in lat], [p[1] for p in lat], marker='s', label=t)\n"
         "ax1.set_xlabel('level'); ax1.set_ylabel('accuracy'); ax1.legend()\n"
         "ax2.set_xlabel('threads'); ax2.set_ylabel('median latency (ms)'); ax2.legend()\n"
         "fig.tight_layout(); fig.savefig(path + '.png', dpi=120)\n"
         "print('wrote', path + '.png')\n";
}

}  // namespace dlis
