// Command-line surface for the inference/compression/benchmark stack.
//
// Exit codes: 0 success, 2 usage error, 3 I/O or file-format error,
// 4 validation/config error, 5 verification failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dlis/dlis.hpp"

using Net = dlis::Network<float>;
using DatasetF = dlis::Dataset<float>;

namespace {

int default_threads() {
  if (const char* env = std::getenv("DLIS_THREADS")) {
    const int t = std::atoi(env);
    if (t >= 1) return t;
  }
  return 1;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  if (out.empty()) throw dlis::ConfigError("empty list: " + s);
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  if (out.empty()) throw dlis::ConfigError("empty list: " + s);
  return out;
}

// Dataset specs: "synth:<seed>,<n>,<classes>,<size>" or "cifar10:<dir>".
std::pair<DatasetF, DatasetF> load_data_spec(const std::string& spec) {
  if (spec.rfind("synth:", 0) == 0) {
    const auto parts = parse_int_list(spec.substr(6));
    if (parts.size() != 4)
      throw dlis::ConfigError("synth spec needs seed,n,classes,size: " + spec);
    const uint64_t seed = uint64_t(parts[0]);
    const int n = parts[1], classes = parts[2], size = parts[3];
    DatasetF train = dlis::synth_dataset<float>(seed, n, classes, size);
    DatasetF test = dlis::synth_dataset<float>(seed + 1, std::max(classes, n / 5), classes, size);
    test.split = "test";
    return {std::move(train), std::move(test)};
  }
  if (spec.rfind("cifar10:", 0) == 0)
    return dlis::load_cifar10<float>(spec.substr(8));
  throw dlis::ConfigError("unknown data spec (use synth:... or cifar10:<dir>): " + spec);
}

void write_history_csv(const std::vector<dlis::EpochStats>& history,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw dlis::IoError("cannot open " + path + " for writing");
  out << "epoch,lr,loss,train_acc,test_acc\n";
  for (const auto& row : history)
    out << row.epoch << ',' << row.lr << ',' << row.loss << ',' << row.train_accuracy
        << ',' << row.test_accuracy << "\n";
}

// Derive the technique/level columns from the stored compression state.
void stamp_from_state(const dlis::CompressionState& state, dlis::BenchRecord& rec) {
  if (!state.removals.removals.empty()) {
    rec.technique = "channel_prune";
    rec.level = state.removals.compression_rate();
  } else if (!state.ternary.layers.empty()) {
    rec.technique = "ttq";
    rec.level = state.ternary.t;
  } else if (!state.mask.empty()) {
    rec.technique = "weight_prune";
    rec.level = state.mask.overall_sparsity();
  }
}

struct PlanFile {
  dlis::SweepPlan plan;
  std::string model_path;
  std::string data_spec;
};

// Plan files are plain "key = value" lines; '#' starts a comment.
PlanFile parse_plan_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw dlis::IoError("cannot open plan file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw dlis::ParseError(path + ": expected key = value on line " +
                                 std::to_string(lineno),
                             0);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  if (kv.empty()) throw dlis::ConfigError("plan file is empty: " + path);

  PlanFile pf;
  auto need = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw dlis::ConfigError("plan file missing key '" + key + "'");
    return it->second;
  };
  pf.model_path = need("model");
  pf.data_spec = need("data");
  pf.plan.technique = need("technique");
  pf.plan.levels = parse_double_list(need("levels"));
  if (kv.count("threads")) pf.plan.threads = parse_int_list(kv["threads"]);
  if (kv.count("reps")) pf.plan.reps = std::stoi(kv["reps"]);
  if (kv.count("warmup")) pf.plan.warmup = std::stoi(kv["warmup"]);
  if (kv.count("finetune_epochs")) pf.plan.finetune_epochs = std::stoi(kv["finetune_epochs"]);
  if (kv.count("lr")) pf.plan.finetune_lr = std::stod(kv["lr"]);
  if (kv.count("batch")) pf.plan.batch_size = std::stoi(kv["batch"]);
  if (kv.count("seed")) pf.plan.seed = uint64_t(std::stoull(kv["seed"]));
  if (kv.count("beta")) pf.plan.beta = std::stod(kv["beta"]);
  if (kv.count("removal_period")) pf.plan.removal_period = std::stoi(kv["removal_period"]);
  if (kv.count("algo")) pf.plan.cfg.conv_algo = dlis::parse_conv_algo(kv["algo"]);
  if (kv.count("sparse_format")) pf.plan.sparse_format = kv["sparse_format"] != "false";
  return pf;
}

dlis::Tensor<float> probe_input(const Net& net, const DatasetF* data) {
  dlis::Tensor<float> probe(1, net.input_shape.c, net.input_shape.h, net.input_shape.w);
  if (data != nullptr && data->size() > 0) {
    dlis::copy_image(*data, 0, probe, 0);
  } else {
    for (int64_t i = 0; i < probe.count(); ++i)
      probe.data[size_t(i)] = 0.01f * float(i % 97);
  }
  return probe;
}

// ---------------------------------------------------------------------------
// verify suites: independent oracles, exit nonzero on any failure.

int verify_kernels(uint64_t seed) {
  dlis::Rng rng(seed);
  int failures = 0;
  double max_direct_gemm = 0.0, max_gemm_sparse = 0.0;
  for (int iter = 0; iter < 100; ++iter) {
    const int in_c = 1 + int(rng.uniform_int(16));
    const int out_c = 1 + int(rng.uniform_int(16));
    const int h = 3 + int(rng.uniform_int(14));
    const int w = 3 + int(rng.uniform_int(14));
    const int k = rng.uniform() < 0.5 ? 1 : 3;
    const int pad = int(rng.uniform_int(2));
    const int stride = 1 + int(rng.uniform_int(2));
    dlis::Tensor<float> x(1 + int(rng.uniform_int(2)), in_c, h, w);
    for (auto& v : x.data) v = float(rng.normal());
    std::vector<float> wts(static_cast<size_t>(out_c) * in_c * k * k);
    for (auto& v : wts) v = float(rng.normal(0.0, 0.3));
    std::vector<float> bias(static_cast<size_t>(out_c));
    for (auto& v : bias) v = float(rng.normal(0.0, 0.1));
    for (size_t i = 0; i < wts.size(); ++i)
      if (rng.uniform() < 0.6) wts[i] = 0.0f;

    const auto direct = dlis::conv2d_direct(x, wts, bias, out_c, k, stride, pad);
    const auto viagemm = dlis::conv2d_gemm(x, wts, bias, out_c, k, stride, pad);
    dlis::DenseMatrix<float> flat;
    flat.rows = out_c;
    flat.cols = in_c * k * k;
    flat.data = wts;
    const auto sparse = dlis::conv2d_sparse(x, dlis::csr_from_dense(flat, 0.0f), bias,
                                            k, stride, pad);
    for (int64_t i = 0; i < direct.count(); ++i) {
      max_direct_gemm = std::max(
          max_direct_gemm, std::abs(double(direct.data[size_t(i)]) -
                                    double(viagemm.data[size_t(i)])));
      max_gemm_sparse = std::max(
          max_gemm_sparse, std::abs(double(viagemm.data[size_t(i)]) -
                                    double(sparse.data[size_t(i)])));
    }
  }
  std::cout << "kernels: max |direct - im2col_gemm| = " << max_direct_gemm << "\n";
  std::cout << "kernels: max |gemm - sparse_csr|    = " << max_gemm_sparse << "\n";
  if (max_direct_gemm > 1e-4 || max_gemm_sparse > 1e-4) {
    std::cout << "kernels: FAIL (tolerance 1e-4)\n";
    ++failures;
  } else {
    std::cout << "kernels: OK\n";
  }
  return failures;
}

int verify_gradients() {
  using NetD = dlis::Network<double>;
  NetD net;
  net.name = "grad-check";
  net.input_shape = {2, 6, 6};
  net.num_classes = 3;
  net.layers.push_back(dlis::conv2d_layer<double>(2, 4, 3, 1, 1));
  net.layers.push_back(dlis::batchnorm_layer<double>(4));
  net.layers.push_back(dlis::relu_layer<double>());
  net.layers.push_back(dlis::maxpool2d_layer<double>(2, 2));
  net.layers.push_back(dlis::fully_connected_layer<double>(4 * 3 * 3, 3));
  dlis::validate(net);
  dlis::Rng rng(404);
  dlis::init_weights(net, rng);
  for (auto& g : net.layers[1].bn_gamma) g = 1.0 + 0.2 * rng.normal();
  dlis::Tensor<double> x(3, 2, 6, 6);
  for (auto& v : x.data) v = rng.normal();
  const std::vector<int32_t> labels{0, 2, 1};

  const double err = dlis::finite_diff_check(net, x, labels, 1e-5);
  std::cout << "gradients: max relative error = " << err << "\n";
  if (err > 1e-5) {
    std::cout << "gradients: FAIL (tolerance 1e-5)\n";
    return 1;
  }
  std::cout << "gradients: OK\n";
  return 0;
}

int verify_formats(const std::string& workdir) {
  int failures = 0;
  Net net = dlis::build_network<float>(dlis::Arch::Vgg16Cifar, 0.0625, 10);
  dlis::Rng rng(7);
  dlis::init_weights(net, rng);
  dlis::MagnitudePruneOptions popts;
  popts.value = 0.6;
  (void)dlis::magnitude_prune(net, popts);
  dlis::to_sparse_format(net);

  const std::string path = workdir + "/verify_model.dlis";
  dlis::save_model(net, path);
  auto [back, state] = dlis::load_model<float>(path);
  bool same = back.layers.size() == net.layers.size();
  if (same)
    for (size_t i = 0; i < net.layers.size(); ++i) {
      same = same && back.layers[i].weights == net.layers[i].weights;
      same = same && back.layers[i].sparse_weights.values ==
                         net.layers[i].sparse_weights.values;
      same = same && back.layers[i].sparse_weights.col_idx ==
                         net.layers[i].sparse_weights.col_idx;
      same = same && back.layers[i].bias == net.layers[i].bias;
    }
  std::cout << "formats: model round-trip " << (same ? "OK" : "FAIL") << "\n";
  failures += same ? 0 : 1;

  std::vector<dlis::BenchRecord> records(2);
  records[0].model = "m";
  records[0].technique = "plain";
  records[0].latency_median_ns = 1234;
  records[1].model = "m";
  records[1].technique = "ttq";
  records[1].level = 0.2;
  records[1].expected_speedup = 4.2;
  const std::string csv = workdir + "/verify_bench.csv";
  dlis::emit_csv(records, csv);
  const auto parsed = dlis::parse_csv(csv);
  const bool csv_ok = parsed.size() == 2 && parsed[0].latency_median_ns == 1234 &&
                      parsed[1].level == 0.2 && parsed[1].expected_speedup == 4.2;
  std::cout << "formats: csv round-trip " << (csv_ok ? "OK" : "FAIL") << "\n";
  failures += csv_ok ? 0 : 1;
  return failures;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dlis: CNN inference, compression and benchmarking toolkit"};
  app.require_subcommand(1);
  int exit_code = 0;

  // --- train ---------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "Train a model from scratch with SGD");
  struct {
    std::string arch = "vgg16_cifar";
    double scale = 1.0;
    std::string data;
    int epochs = 150;
    double lr = 0.1;
    double decay_factor = 0.1;
    int decay_every = 50;
    int batch = 128;
    uint64_t seed = 1;
    double momentum = 0.0;
    double weight_decay = 0.0;
    bool augment = false;
    int threads = default_threads();
    std::string out;
    std::string history;
  } tr;
  train_cmd->add_option("--arch", tr.arch, "vgg16_cifar | resnet18 | mobilenet");
  train_cmd->add_option("--scale", tr.scale, "width scale in (0,1]");
  train_cmd->add_option("--data", tr.data, "synth:seed,n,classes,size | cifar10:<dir>")
      ->required();
  train_cmd->add_option("--epochs", tr.epochs, "training epochs");
  train_cmd->add_option("--lr", tr.lr, "base learning rate (default 0.1)");
  train_cmd->add_option("--decay-every", tr.decay_every, "epochs per lr step (default 50)");
  train_cmd->add_option("--decay-factor", tr.decay_factor, "lr multiplier per step");
  train_cmd->add_option("--batch", tr.batch, "batch size");
  train_cmd->add_option("--seed", tr.seed, "rng seed");
  train_cmd->add_option("--momentum", tr.momentum, "SGD momentum (default 0)");
  train_cmd->add_option("--weight-decay", tr.weight_decay, "weight decay (default 0)");
  train_cmd->add_flag("--augment", tr.augment, "pad-2 random-crop augmentation (32x32)");
  train_cmd->add_option("--threads", tr.threads, "engine threads (env DLIS_THREADS)");
  train_cmd->add_option("--out", tr.out, "output model path")->required();
  train_cmd->add_option("--history", tr.history, "per-epoch CSV path");
  train_cmd->callback([&] {
    auto [train_ds, test_ds] = load_data_spec(tr.data);
    Net net = dlis::build_network<float>(dlis::parse_arch(tr.arch), tr.scale,
                                         train_ds.num_classes);
    net.input_shape = {train_ds.images.c, train_ds.images.h, train_ds.images.w};
    dlis::validate(net);
    dlis::Rng rng(tr.seed);
    dlis::init_weights(net, rng);

    dlis::TrainSchedule sched;
    sched.base_lr = tr.lr;
    sched.decay_factor = tr.decay_factor;
    sched.decay_every = tr.decay_every;
    sched.epochs = tr.epochs;
    sched.batch_size = tr.batch;
    sched.seed = tr.seed;
    sched.momentum = tr.momentum;
    sched.weight_decay = tr.weight_decay;
    sched.augment = tr.augment;

    dlis::TrainOptions<float> topts;
    topts.test = &test_ds;
    topts.cfg.threads = tr.threads;

    std::cout << "train arch=" << tr.arch << " scale=" << tr.scale
              << " epochs=" << tr.epochs << " lr=" << tr.lr
              << " decay_every=" << tr.decay_every << " decay_factor=" << tr.decay_factor
              << " batch=" << tr.batch << " seed=" << tr.seed
              << " threads=" << tr.threads << " augment=" << (tr.augment ? 1 : 0)
              << "\n";
    const auto history = dlis::train(net, train_ds, sched, topts);
    for (const auto& row : history)
      std::cout << "epoch " << row.epoch << " lr " << row.lr << " loss " << row.loss
                << " train_acc " << row.train_accuracy << " test_acc "
                << row.test_accuracy << "\n";
    dlis::save_model(net, tr.out);
    if (!tr.history.empty()) write_history_csv(history, tr.history);
    std::cout << "wrote " << tr.out << "\n";
  });

  // --- prune ---------------------------------------------------------------
  auto* prune_cmd = app.add_subcommand("prune", "Magnitude weight pruning");
  struct {
    std::string model, out, data, levels;
    double sparsity = -1.0;
    double std_factor = -1.0;
    int finetune_epochs = 30;
    double lr = 0.01;
    int batch = 32;
    uint64_t seed = 1;
    int threads = default_threads();
    bool global = false;
    bool sparse_out = false;
  } pr;
  prune_cmd->add_option("--model", pr.model, "input model")->required();
  prune_cmd->add_option("--out", pr.out, "output model")->required();
  prune_cmd->add_option("--levels", pr.levels,
                        "ascending sparsity levels for iterative pruning");
  prune_cmd->add_option("--sparsity", pr.sparsity, "one-shot target sparsity");
  prune_cmd->add_option("--std-factor", pr.std_factor, "one-shot std-factor threshold");
  prune_cmd->add_option("--data", pr.data, "dataset spec (needed with --levels)");
  prune_cmd->add_option("--finetune-epochs", pr.finetune_epochs,
                        "fine-tune epochs per level (default 30)");
  prune_cmd->add_option("--lr", pr.lr, "fine-tune learning rate");
  prune_cmd->add_option("--batch", pr.batch, "fine-tune batch size");
  prune_cmd->add_option("--seed", pr.seed, "rng seed");
  prune_cmd->add_option("--threads", pr.threads, "engine threads");
  prune_cmd->add_flag("--global", pr.global, "pool the quota across layers");
  prune_cmd->add_flag("--sparse-out", pr.sparse_out,
                      "store conv weights in CSR format in the output model");
  prune_cmd->callback([&] {
    auto [net, state] = dlis::load_model<float>(pr.model);
    if (!pr.levels.empty()) {
      if (pr.data.empty())
        throw dlis::ConfigError("--levels requires --data for fine-tuning");
      auto [train_ds, test_ds] = load_data_spec(pr.data);
      dlis::TrainSchedule sched;
      sched.base_lr = pr.lr;
      sched.decay_factor = 1.0;
      sched.decay_every = 1000000;
      sched.batch_size = pr.batch;
      sched.seed = pr.seed;
      dlis::ExecConfig cfg;
      cfg.threads = pr.threads;
      const auto levels = parse_double_list(pr.levels);
      const auto stages =
          dlis::iterative_prune(net, train_ds, test_ds, levels, pr.finetune_epochs,
                                sched, cfg);
      for (const auto& stage : stages) {
        std::cout << "level " << stage.level << " sparsity "
                  << stage.mask.overall_sparsity() << " accuracy " << stage.accuracy
                  << "\n";
        state.mask = stage.mask;
        state.sparsity_levels.push_back(stage.level);
      }
    } else if (pr.sparsity >= 0.0 || pr.std_factor >= 0.0) {
      dlis::MagnitudePruneOptions opts;
      opts.per_layer = !pr.global;
      if (pr.sparsity >= 0.0) {
        opts.mode = dlis::PruneMode::TargetSparsity;
        opts.value = pr.sparsity;
      } else {
        opts.mode = dlis::PruneMode::StdFactor;
        opts.value = pr.std_factor;
      }
      state.mask = dlis::magnitude_prune(net, opts);
      state.sparsity_levels.push_back(state.mask.overall_sparsity());
      std::cout << "sparsity " << state.mask.overall_sparsity() << "\n";
    } else {
      throw dlis::ConfigError("prune: give --levels, --sparsity or --std-factor");
    }
    // Two sparsity readings: conv weights only, and all weighted layers.
    int64_t conv_zeros = 0, conv_total = 0, all_zeros = 0, all_total = 0;
    auto tally = [&](const dlis::Layer<float>& l) {
      if (!l.has_weights() || l.weights.empty()) return;
      int64_t zeros = 0;
      for (float v : l.weights) zeros += (v == 0.0f);
      all_zeros += zeros;
      all_total += int64_t(l.weights.size());
      if (l.is_conv()) {
        conv_zeros += zeros;
        conv_total += int64_t(l.weights.size());
      }
    };
    for (const auto& l : net.layers) tally(l);
    for (const auto& s : net.skips)
      for (const auto& pl : s.projection) tally(pl);
    if (conv_total > 0)
      std::cout << "conv-weight sparsity " << double(conv_zeros) / double(conv_total)
                << ", all-weight sparsity " << double(all_zeros) / double(all_total)
                << "\n";
    if (pr.sparse_out) dlis::to_sparse_format(net);
    dlis::save_model(net, state, pr.out);
    std::cout << "wrote " << pr.out << "\n";
  });

  // --- channel-prune ---------------------------------------------------------
  auto* chan_cmd = app.add_subcommand("channel-prune", "Fisher channel pruning");
  struct {
    std::string model, out, data;
    int steps = 400;
    int removal_period = 100;
    double beta = 1e-6;
    double lr = 8e-3;
    int batch = 32;
    uint64_t seed = 1;
    double target = 0.0;
    int threads = default_threads();
  } ch;
  chan_cmd->add_option("--model", ch.model)->required();
  chan_cmd->add_option("--out", ch.out)->required();
  chan_cmd->add_option("--data", ch.data)->required();
  chan_cmd->add_option("--steps", ch.steps, "total fine-tune steps");
  chan_cmd->add_option("--removal-period", ch.removal_period,
                       "steps between removals (default 100)");
  chan_cmd->add_option("--beta", ch.beta, "FLOP penalty (default 1e-6)");
  chan_cmd->add_option("--lr", ch.lr, "fine-tune learning rate (default 8e-3)");
  chan_cmd->add_option("--batch", ch.batch, "batch size");
  chan_cmd->add_option("--seed", ch.seed, "rng seed");
  chan_cmd->add_option("--target-compression", ch.target, "stop at this rate");
  chan_cmd->add_option("--threads", ch.threads, "engine threads");
  chan_cmd->callback([&] {
    auto [net, state] = dlis::load_model<float>(ch.model);
    auto [train_ds, test_ds] = load_data_spec(ch.data);
    dlis::ChannelPruneOptions opts;
    opts.steps = ch.steps;
    opts.removal_period = ch.removal_period;
    opts.beta = ch.beta;
    opts.lr = ch.lr;
    opts.batch_size = ch.batch;
    opts.seed = ch.seed;
    opts.target_compression = ch.target;
    opts.cfg.threads = ch.threads;
    state.removals = dlis::channel_prune(net, train_ds, opts);
    std::cout << "removed " << state.removals.removals.size() << " channels, "
              << "compression rate " << state.removals.compression_rate() << "\n";
    std::cout << "accuracy " << dlis::evaluate_accuracy(net, test_ds, opts.cfg) << "\n";
    dlis::save_model(net, state, ch.out);
    std::cout << "wrote " << ch.out << "\n";
  });

  // --- quantize --------------------------------------------------------------
  auto* quant_cmd = app.add_subcommand("quantize", "Trained ternary quantisation");
  struct {
    std::string model, out, data;
    double threshold = 0.1;
    int epochs = 0;
    double lr = 0.01;
    int batch = 32;
    uint64_t seed = 1;
    int threads = default_threads();
    bool sparse_out = false;
  } qt;
  quant_cmd->add_option("--model", qt.model)->required();
  quant_cmd->add_option("--out", qt.out)->required();
  quant_cmd->add_option("--ttq-threshold", qt.threshold, "fraction of max |w| in [0,1]")
      ->required();
  quant_cmd->add_option("--epochs", qt.epochs, "ttq training epochs (0 = one-shot)");
  quant_cmd->add_option("--data", qt.data, "dataset spec (needed with --epochs > 0)");
  quant_cmd->add_option("--lr", qt.lr, "ttq learning rate");
  quant_cmd->add_option("--batch", qt.batch, "batch size");
  quant_cmd->add_option("--seed", qt.seed, "rng seed");
  quant_cmd->add_option("--threads", qt.threads, "engine threads");
  quant_cmd->add_flag("--sparse-out", qt.sparse_out,
                      "store conv weights in CSR format in the output model");
  quant_cmd->callback([&] {
    auto [net, state] = dlis::load_model<float>(qt.model);
    if (qt.epochs > 0) {
      if (qt.data.empty()) throw dlis::ConfigError("--epochs > 0 requires --data");
      auto [train_ds, test_ds] = load_data_spec(qt.data);
      dlis::TrainSchedule sched;
      sched.base_lr = qt.lr;
      sched.decay_factor = 1.0;
      sched.decay_every = 1000000;
      sched.epochs = qt.epochs;
      sched.batch_size = qt.batch;
      sched.seed = qt.seed;
      dlis::TtqTrainOptions<float> topts;
      topts.cfg.threads = qt.threads;
      state.ternary = dlis::ttq_train(net, train_ds, qt.threshold, sched, topts);
      dlis::ExecConfig cfg;
      cfg.threads = qt.threads;
      std::cout << "accuracy " << dlis::evaluate_accuracy(net, test_ds, cfg) << "\n";
    } else {
      state.ternary = dlis::ttq_quantize(net, qt.threshold);
    }
    std::cout << "ttq threshold " << qt.threshold << " sparsity "
              << state.ternary.sparsity() << "\n";
    if (qt.sparse_out) dlis::to_sparse_format(net);
    dlis::save_model(net, state, qt.out);
    std::cout << "wrote " << qt.out << "\n";
  });

  // --- bench -------------------------------------------------------------------
  auto* bench_cmd = app.add_subcommand("bench", "Thread sweep + expected-vs-observed");
  struct {
    std::string model, baseline, data, out, threads = "1,2,4,8", format = "dense",
                              algo = "im2col_gemm", plot;
    int reps = 30;
    int warmup = 3;
  } be;
  bench_cmd->add_option("--model", be.model)->required();
  bench_cmd->add_option("--baseline", be.baseline,
                        "plain model for the expected-speedup baseline");
  bench_cmd->add_option("--threads", be.threads, "comma list (default 1,2,4,8)");
  bench_cmd->add_option("--reps", be.reps, "timed reps per point (default 30)");
  bench_cmd->add_option("--warmup", be.warmup, "unrecorded warmup reps (default 3)");
  bench_cmd->add_option("--format", be.format, "dense | csr");
  bench_cmd->add_option("--algo", be.algo, "direct | im2col_gemm (dense format)");
  bench_cmd->add_option("--data", be.data, "dataset spec for the accuracy column");
  bench_cmd->add_option("--out", be.out, "output CSV")->required();
  bench_cmd->add_option("--plot", be.plot, "also emit a plot script here");
  bench_cmd->callback([&] {
    auto [net, state] = dlis::load_model<float>(be.model);
    std::optional<std::pair<DatasetF, DatasetF>> data;
    if (!be.data.empty()) data = load_data_spec(be.data);

    dlis::ExecConfig cfg;
    cfg.conv_algo = dlis::parse_conv_algo(be.algo);
    if (be.format == "csr") {
      const auto params = dlis::count_params(net);
      int64_t zeros = 0;
      bool already_csr = false;
      for (const auto& l : net.layers) {
        if (!l.has_weights()) continue;
        if (l.weight_format == dlis::WeightFormat::Csr) already_csr = true;
        for (float v : l.weights) zeros += (v == 0.0f);
      }
      if (zeros == 0 && !already_csr)
        std::cerr << "warning: converting a 0%-sparse model to csr ("
                  << params.total_params << " params)\n";
      dlis::to_sparse_format(net);
      cfg.conv_algo = dlis::ConvAlgo::SparseCsr;
    } else if (be.format != "dense") {
      throw dlis::ConfigError("--format must be dense or csr");
    }

    const auto thread_list = parse_int_list(be.threads);
    const dlis::Tensor<float> probe =
        probe_input(net, data ? &data->second : nullptr);
    auto records = dlis::thread_sweep(net, cfg, thread_list, probe, be.reps, be.warmup);

    int64_t baseline_macs = dlis::count_macs(net).total_macs;
    std::vector<dlis::BenchRecord> baseline_records;
    if (!be.baseline.empty()) {
      auto [base_net, base_state] = dlis::load_model<float>(be.baseline);
      baseline_macs = dlis::count_macs(base_net).total_macs;
      dlis::ExecConfig base_cfg;
      base_cfg.conv_algo = dlis::parse_conv_algo(be.algo);
      baseline_records = dlis::thread_sweep(base_net, base_cfg, thread_list, probe,
                                            be.reps, be.warmup);
      double base_acc = -1.0;
      if (data) base_acc = dlis::evaluate_accuracy(base_net, data->second, base_cfg);
      for (auto& rec : baseline_records) {
        rec.model = base_net.name;
        rec.technique = "plain";
        rec.format = "dense";
        rec.accuracy = base_acc;
        rec.total_macs = baseline_macs;
        rec.effective_macs = dlis::count_effective_macs(base_net);
        rec.footprint_bytes = dlis::footprint(base_net, base_cfg.conv_algo).grand_total();
        rec.expected_speedup = 1.0;
      }
    }

    double accuracy = -1.0;
    if (data) accuracy = dlis::evaluate_accuracy(net, data->second, cfg);
    const int64_t effective = dlis::count_effective_macs(net);
    const int64_t fp = dlis::footprint(net, cfg.conv_algo).grand_total();
    for (auto& rec : records) {
      rec.model = net.name.empty() ? be.model : net.name;
      rec.format = be.format;
      rec.accuracy = accuracy;
      rec.total_macs = dlis::count_macs(net).total_macs;
      rec.effective_macs = effective;
      rec.footprint_bytes = fp;
      rec.expected_speedup = dlis::expected_speedup(baseline_macs, effective);
      stamp_from_state(state, rec);
    }

    std::vector<dlis::BenchRecord> all = baseline_records;
    all.insert(all.end(), records.begin(), records.end());
    // The baseline rows double as the plain reference; without one, the
    // swept model itself is the baseline.
    if (baseline_records.empty() && records.front().technique != "plain") {
      std::cout << "note: no plain baseline given; gap analysis skipped\n";
      dlis::emit_csv(all, be.out);
    } else {
      dlis::emit_csv(all, be.out);
      const auto gaps = dlis::gap_report(all);
      dlis::print_gap_report(std::cout, all, gaps);
    }
    if (!be.plot.empty()) dlis::emit_plot_script(be.out, be.plot);
    std::cout << "wrote " << be.out << "\n";
  });

  // --- footprint ---------------------------------------------------------------
  auto* fp_cmd = app.add_subcommand("footprint", "Memory footprint model");
  struct {
    std::string model, algo = "direct", granularity = "per_filter_csr";
    int batch = 1;
    bool per_layer = false;
  } fo;
  fp_cmd->add_option("--model", fo.model)->required();
  fp_cmd->add_option("--algo", fo.algo, "direct | im2col_gemm | sparse_csr");
  fp_cmd->add_option("--granularity", fo.granularity, "per_filter_csr | per_layer_csr");
  fp_cmd->add_option("--batch", fo.batch, "live batch size (default 1)");
  fp_cmd->add_flag("--per-layer", fo.per_layer, "print per-layer rows");
  fp_cmd->callback([&] {
    auto [net, state] = dlis::load_model<float>(fo.model);
    const auto algo = dlis::parse_conv_algo(fo.algo);
    const auto gran = dlis::parse_granularity(fo.granularity);
    const auto report = dlis::footprint(net, algo, gran, fo.batch);
    dlis::print_footprint(std::cout, net, report, fo.per_layer);
    // When the model stores CSR layers the two granularities differ;
    // print the other one as well.
    bool has_csr = false;
    for (const auto& l : net.layers)
      has_csr = has_csr || (l.has_weights() && l.weight_format == dlis::WeightFormat::Csr);
    if (has_csr) {
      const auto other = gran == dlis::CsrGranularity::PerFilter
                             ? dlis::CsrGranularity::PerLayer
                             : dlis::CsrGranularity::PerFilter;
      const auto alt = dlis::footprint(net, algo, other, fo.batch);
      if (alt.grand_total() != report.grand_total()) {
        std::cout << "\n";
        dlis::print_footprint(std::cout, net, alt, false);
      }
    }
  });

  // --- pareto --------------------------------------------------------------------
  auto* pareto_cmd = app.add_subcommand("pareto", "Run a sweep plan file");
  struct {
    std::string plan, out, plot;
  } pa;
  pareto_cmd->add_option("--plan", pa.plan, "key = value plan file")->required();
  pareto_cmd->add_option("--out", pa.out, "output CSV")->required();
  pareto_cmd->add_option("--plot", pa.plot, "also emit a plot script here");
  pareto_cmd->callback([&] {
    PlanFile pf = parse_plan_file(pa.plan);
    auto [net, state] = dlis::load_model<float>(pf.model_path);
    pf.plan.model = net.name.empty() ? pf.model_path : net.name;
    auto [train_ds, test_ds] = load_data_spec(pf.data_spec);
    const auto records = dlis::pareto_sweep(pf.plan, net, train_ds, test_ds);
    dlis::emit_csv(records, pa.out);

    std::vector<std::pair<double, double>> curve;
    for (const auto& r : records)
      if (r.technique == pf.plan.technique && r.threads == pf.plan.threads.front())
        curve.push_back({r.level, r.accuracy});
    if (!curve.empty()) {
      std::cout << "elbow level (tol 0.02): " << dlis::select_elbow(curve, 0.02) << "\n";
      const auto fixed = dlis::select_fixed_accuracy(curve, 0.9);
      if (fixed.has_value())
        std::cout << "highest level with accuracy >= 0.90: " << *fixed << "\n";
      else
        std::cout << "no level reaches accuracy 0.90\n";
    }
    if (!pa.plot.empty()) dlis::emit_plot_script(pa.out, pa.plot);
    std::cout << "wrote " << pa.out << "\n";
  });

  // --- verify ------------------------------------------------------------------
  auto* verify_cmd = app.add_subcommand("verify", "Run the oracle suites");
  struct {
    std::string suite = "all";
    std::string workdir = "/tmp";
    uint64_t seed = 99;
  } ve;
  verify_cmd->add_option("--suite", ve.suite, "kernels | gradients | formats | all");
  verify_cmd->add_option("--workdir", ve.workdir, "scratch directory");
  verify_cmd->add_option("--seed", ve.seed, "rng seed for randomized checks");
  verify_cmd->callback([&] {
    int failures = 0;
    if (ve.suite == "kernels" || ve.suite == "all") failures += verify_kernels(ve.seed);
    if (ve.suite == "gradients" || ve.suite == "all") failures += verify_gradients();
    if (ve.suite == "formats" || ve.suite == "all") failures += verify_formats(ve.workdir);
    if (ve.suite != "kernels" && ve.suite != "gradients" && ve.suite != "formats" &&
        ve.suite != "all")
      throw dlis::ConfigError("unknown suite: " + ve.suite);
    if (failures > 0) throw dlis::VerificationError(std::to_string(failures) + " suite(s) failed");
    std::cout << "verify: all checks passed\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const dlis::VerificationError& e) {
    std::cerr << "verification failure: " << e.what() << "\n";
    return 5;
  } catch (const dlis::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const dlis::ParseError& e) {
    std::cerr << "file format error: " << e.what() << "\n";
    return 3;
  } catch (const dlis::ShapeError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 4;
  } catch (const dlis::GeometryError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 4;
  } catch (const dlis::ConfigError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
