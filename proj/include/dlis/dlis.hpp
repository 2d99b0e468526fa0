#pragma once

// Umbrella header for the deep learning inference stack: containers and
// matmul primitives, network graphs, forward kernels, reverse-mode
// gradients, compression (weight pruning, channel pruning, ternary
// quantisation), persistence, footprint accounting, and the benchmark
// harness.

#include "dlis/autodiff.hpp"
#include "dlis/bench.hpp"
#include "dlis/compress.hpp"
#include "dlis/data.hpp"
#include "dlis/engine.hpp"
#include "dlis/errors.hpp"
#include "dlis/footprint.hpp"
#include "dlis/graph.hpp"
#include "dlis/model_io.hpp"
#include "dlis/models.hpp"
#include "dlis/parallel.hpp"
#include "dlis/rng.hpp"
#include "dlis/tensor.hpp"
#include "dlis/train.hpp"
