// Copyright 2026 The qtrain Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

// Randomized engine-versus-oracle sweeps shared by the unit tests and the
// acceptance suite.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qtrain/model.hpp"

namespace qtrain::checks {

struct SweepResult {
  std::size_t cases = 0;
  std::size_t failures = 0;
  // Largest observed deviation in the sweep's own unit.
  double worst = 0.0;
  std::string first_failure;

  bool ok() const { return cases > 0 && failures == 0; }
};

// Random tensors.
QuantParams random_qparams(std::mt19937_64& rng);
QTensor random_qtensor(const Shape& shape, std::mt19937_64& rng);
FTensor random_ftensor(const Shape& shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f);

// Kernels compared against requantized double-precision oracle results.
// Deviation is measured in output quantization steps; one step passes.
enum class Kernel {
  QLinearForward,
  QConvForward,
  QLinearBackward,
  QConvBackward,
  QMaxPool,
  QReLU,
  DequantBoundary,
  FloatLinearVsQuant,
  FloatConvVsQuant,
};
std::string to_string(Kernel k);
std::vector<Kernel> all_kernels();
SweepResult kernel_sweep(Kernel k, std::size_t shapes, std::uint64_t seed);

// A random float32 model with at most four weighted layers.
Model random_toy_model(std::mt19937_64& rng, std::size_t& classes);

// Float32 backward against central differences of the double oracle loss,
// metric max|a - b| / max(1, |a|) per layer.
SweepResult gradient_sweep(std::size_t models, std::uint64_t seed, double h = 1e-3);

// Bounds, monotonicity and clamps of the sparse update rate over random
// (loss, max_loss, lambda) triples.
SweepResult sparse_rate_sweep(std::size_t triples, std::uint64_t seed);

}  // namespace qtrain::checks
