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

// Buffered SGD with per-channel gradient standardization, the quantized
// weight update that re-derives scale and zero point, and the loss-adaptive
// sparse structure selector.

#include <cstdint>
#include <map>
#include <vector>

#include "qtrain/config.hpp"
#include "qtrain/layers.hpp"
#include "qtrain/model.hpp"

namespace qtrain {

// Float accumulation of one layer's gradients over a minibatch. Every weight
// and the bias of an output channel feed that channel's mean and variance.
// A channel's statistics cover only the samples that computed it.
class GradientBuffer {
 public:
  static constexpr float kSigmaFloor = 1e-8f;

  GradientBuffer() = default;
  GradientBuffer(const Shape& weight_shape, std::size_t channels);
  explicit GradientBuffer(const Layer& layer);

  const FTensor& accum() const { return accum_; }
  const std::vector<float>& bias_accum() const { return bias_accum_; }
  const std::vector<float>& mean() const { return mean_; }
  std::uint32_t sample_count() const { return sample_count_; }
  // Samples that computed channel c.
  std::uint32_t channel_count(std::size_t c) const { return channel_count_.at(c); }
  std::size_t channels() const { return mean_.size(); }

  // Population standard deviation of channel c, floored at kSigmaFloor.
  float sigma(std::size_t c) const;
  // Storage of the deployed layout: float accumulators, float mean, variance
  // basis and 32-bit count per channel, 32-bit sample counter.
  std::size_t byte_size() const;
  void reset();

  friend void accumulate(GradientBuffer& buf, const LayerGrad& grad);

 private:
  FTensor accum_;
  std::vector<float> bias_accum_;
  std::vector<float> mean_;
  std::vector<float> m2_;
  std::vector<std::uint32_t> channel_count_;
  std::uint32_t sample_count_ = 0;
};

// accum += d_weight, bias_accum += d_bias, merges the per-channel statistics
// of this sample and counts it.
void accumulate(GradientBuffer& buf, const LayerGrad& grad);

// Standardized minibatch step: each parameter moves by
// -lr * (mean_grad - mu_c) / sigma_c, where mean_grad is the buffered sum
// divided by the sample count. Quantized weights get fresh qparams from the
// min/max of the float candidates; the int32 bias is stored at scale
// s_w * input_scale. Throws StateError unless exactly `batch` samples are
// buffered. Resets the buffer.
void apply_update(Layer& layer, GradientBuffer& buf, double learning_rate, std::uint32_t batch,
                  float input_scale = 1.0f, Rounding rounding = Rounding::Nearest);

// Loss ratio in [0, 1] used by the sparse schedule: current / max, 1 when
// no loss has been observed yet.
double loss_ratio(double current_loss, double max_loss_observed);

// Number of structures to keep out of n:
// floor(min(lambda_min + r (lambda_max - lambda_min), 1) * n), at least 1
// when n >= 1.
std::size_t sparse_rate(const SparseConfig& cfg, double current_loss, std::size_t n);

// Indices of the k structures (channels of a C x H x W error, elements of a
// flat error) with the largest dequantized L1 norm, ascending. Ties go to the
// lower index.
std::vector<std::size_t> select_structures(const Activation& error, std::size_t k);
StructureMask structure_mask(std::span<const std::size_t> selected, std::size_t n);

struct StepMetrics {
  double loss = 0.0;
  std::size_t prediction = 0;
  std::uint64_t macs_fwd = 0;
  std::uint64_t macs_bwd = 0;
  std::map<std::size_t, double> selected_fraction;
  bool updated = false;

  // Mean of selected_fraction over visited weighted layers; 1 when none.
  double selected_frac_mean() const;
};

// Owns the gradient buffers for a model's trainable layers and runs the
// per-sample training loop.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig config, TrainerState state = {});

  StepMetrics train_step(const QTensor& input, std::size_t label);

  const TrainConfig& config() const { return config_; }
  const TrainerState& state() const { return state_; }
  const std::map<std::size_t, GradientBuffer>& buffers() const { return buffers_; }
  std::size_t buffer_bytes() const;
  // Kernel invocations per layer, summed over all steps so far.
  const std::vector<std::uint64_t>& visits() const { return visits_; }

 private:
  Model& model_;
  TrainConfig config_;
  TrainerState state_;
  std::map<std::size_t, GradientBuffer> buffers_;
  std::vector<std::uint64_t> visits_;
};

// Index of the largest logit, lowest index on ties.
std::size_t argmax(const FTensor& logits);

}  // namespace qtrain
