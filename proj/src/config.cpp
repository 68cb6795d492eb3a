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
#include "qtrain/config.hpp"

#include <cmath>

#include "qtrain/errors.hpp"

namespace qtrain {

std::string to_string(PrecisionMode mode) {
  switch (mode) {
    case PrecisionMode::Uint8: return "uint8";
    case PrecisionMode::Mixed: return "mixed";
    case PrecisionMode::Float32: return "float32";
  }
  return "unknown";
}

PrecisionMode parse_precision_mode(const std::string& name) {
  if (name == "uint8") return PrecisionMode::Uint8;
  if (name == "mixed") return PrecisionMode::Mixed;
  if (name == "float32" || name == "float") return PrecisionMode::Float32;
  throw ConfigError("unknown precision mode '" + name + "' (expected uint8, mixed or float32)");
}

void SparseConfig::validate() const {
  if (!(lambda_min >= 0.0 && lambda_min <= 1.0) || !(lambda_max >= 0.0 && lambda_max <= 1.0)) {
    throw ConfigError("sparse: lambda_min and lambda_max must lie in [0, 1]");
  }
  if (lambda_min > lambda_max) {
    throw ConfigError("sparse: lambda_min (" + std::to_string(lambda_min) +
                      ") must not exceed lambda_max (" + std::to_string(lambda_max) + ")");
  }
  if (!(max_loss_observed >= 0.0)) throw ConfigError("sparse: max_loss_observed must be >= 0");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be a positive number, got " +
                      std::to_string(learning_rate));
  }
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (sparse) sparse->validate();
}

}  // namespace qtrain
