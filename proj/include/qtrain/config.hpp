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

#include <cstdint>
#include <optional>
#include <string>

#include "qtrain/qcore.hpp"

namespace qtrain {

// uint8: every layer quantized, logits dequantized at the very end.
// mixed: quantized feature extractor, float classification head.
// float32: float throughout, input pixels dequantized up front.
enum class PrecisionMode : std::uint8_t { Uint8 = 0, Mixed = 1, Float32 = 2 };

std::string to_string(PrecisionMode mode);
PrecisionMode parse_precision_mode(const std::string& name);

// Bounds of the loss-adaptive sparse update rate. max_loss_observed is
// running trainer state, carried across epochs.
struct SparseConfig {
  double lambda_min = 1.0;
  double lambda_max = 1.0;
  double max_loss_observed = 0.0;
  // Also select structures of the layer that produces the logits. Its error
  // is the loss gradient, which sums to zero over the classes; keeping only
  // the top entries leaves a one-sided push on the label logit.
  bool output_layer = false;

  void validate() const;
};

struct TrainConfig {
  double learning_rate = 0.001;
  std::uint32_t batch_size = 48;
  PrecisionMode precision = PrecisionMode::Uint8;
  std::optional<SparseConfig> sparse;
  std::uint64_t seed = 0;
  // Rounding of requantized errors and updated weights.
  Rounding rounding = Rounding::Nearest;

  void validate() const;
};

}  // namespace qtrain
