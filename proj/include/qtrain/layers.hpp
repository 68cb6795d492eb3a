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

// Forward and backward kernels for the layer types used by small sequential
// CNNs: convolution, fully connected, max pooling, ReLU, the quantized/float
// precision boundary and the softmax cross-entropy loss.
//
// Quantized kernels accumulate sum((w - z_w)(x - z_x)) in 32-bit integers and
// requantize with floor. Weight gradients are never requantized; they leave
// the kernels as float tensors.

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "qtrain/qcore.hpp"

namespace qtrain {

// A value flowing between layers: 8-bit quantized or float.
using Activation = std::variant<QTensor, FTensor>;

const Shape& shape_of(const Activation& a);
bool is_quantized(const Activation& a);
// Activation bytes: one per element when quantized, four when float.
std::size_t byte_size(const Activation& a);
FTensor to_float(const Activation& a);

struct ConvGeometry {
  std::uint32_t in_channels = 0;
  std::uint32_t out_channels = 0;
  std::uint32_t kernel_h = 0;
  std::uint32_t kernel_w = 0;
  std::uint32_t stride = 1;
  std::uint32_t padding = 0;

  void validate() const;
  Shape weight_shape() const;
  // Throws DimensionError unless `input` is in_channels x H x W with the
  // kernel fitting inside the padded input.
  Shape output_shape(const Shape& input) const;
  std::size_t fan_in() const { return std::size_t{in_channels} * kernel_h * kernel_w; }

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

struct LinearGeometry {
  std::uint32_t in_features = 0;
  std::uint32_t out_features = 0;

  void validate() const;
  Shape weight_shape() const;
  Shape output_shape(const Shape& input) const;
  std::size_t fan_in() const { return in_features; }

  friend bool operator==(const LinearGeometry&, const LinearGeometry&) = default;
};

// Non-overlapping windows only (stride >= size); trailing rows/columns that
// do not fill a window are dropped.
struct PoolGeometry {
  std::uint32_t size = 2;
  std::uint32_t stride = 2;

  void validate() const;
  Shape output_shape(const Shape& input) const;

  friend bool operator==(const PoolGeometry&, const PoolGeometry&) = default;
};

// 32-bit accumulators with the real-valued scale of one accumulator unit.
struct IntAccum {
  Shape shape;
  std::vector<std::int32_t> values;
  double scale = 1.0;

  float real(std::size_t i) const { return static_cast<float>(values[i] * scale); }
  // Real-valued [min, max] over all accumulators; [0, 0] when empty.
  std::pair<float, float> real_range() const;
};

// floor(acc * acc.scale / out_qp.scale) + z_out, saturated. With `relu` the
// result is clamped from below at the output zero point.
QTensor requantize(const IntAccum& acc, QuantParams out_qp, bool relu = false,
                   Rounding rounding = Rounding::Floor);

// Per-structure flags for sparse backward passes; a structure is an output
// channel (conv) or output feature (linear). Empty means every structure.
using StructureMask = std::vector<std::uint8_t>;

struct BackwardOptions {
  StructureMask keep;
  // Propagate the error to the layer input. False for the earliest layer
  // the backward pass visits.
  bool input_grad = true;
  // Compute d_weight / d_bias. False for frozen layers that only relay error.
  bool weight_grad = true;
};

struct LayerGrad {
  std::optional<Activation> d_input;
  FTensor d_weight;
  std::vector<float> d_bias;
  // Multiply-accumulates actually executed, skipped structures excluded.
  std::uint64_t macs = 0;
  // Structures whose gradients were computed; empty means all of them.
  StructureMask computed;
};

// Quantized backward before the error is requantized.
struct QuantizedBackward {
  std::optional<IntAccum> d_input;
  FTensor d_weight;
  std::vector<float> d_bias;
  std::uint64_t macs = 0;
};

// Zeroes (sets to the zero point) error entries whose forward output sat at
// the ReLU floor. `active[i]` is nonzero where the forward output was live.
void mask_error(QTensor& e, std::span<const std::uint8_t> active);
void mask_error(FTensor& e, std::span<const std::uint8_t> active);
// Flags positions where a fused-ReLU quantized output is above its zero point.
std::vector<std::uint8_t> relu_active(const QTensor& y);

// ---- fully connected ------------------------------------------------------

IntAccum qlinear_accumulate(const QTensor& x, const QTensor& w,
                            std::span<const std::int32_t> bias);
QTensor qlinear_forward(const QTensor& x, const QTensor& w,
                        std::span<const std::int32_t> bias, QuantParams out_qp,
                        bool fused_relu = false);
QuantizedBackward qlinear_backward_raw(const QTensor& e_out, const QTensor& x_cached,
                                       const QTensor& w,
                                       const BackwardOptions& opts = {});
LayerGrad qlinear_backward(const QTensor& e_out, const QTensor& x_cached,
                           const QTensor& w, QuantParams e_in_qp,
                           const BackwardOptions& opts = {},
                           Rounding rounding = Rounding::Floor);

FTensor linear_forward(const FTensor& x, const FTensor& w, std::span<const float> bias);
LayerGrad linear_backward(const FTensor& e_out, const FTensor& x_cached,
                          const FTensor& w, const BackwardOptions& opts = {});

// ---- 2D convolution -------------------------------------------------------

IntAccum qconv2d_accumulate(const QTensor& x, const QTensor& w,
                            std::span<const std::int32_t> bias, const ConvGeometry& g);
QTensor qconv2d_forward(const QTensor& x, const QTensor& w,
                        std::span<const std::int32_t> bias, const ConvGeometry& g,
                        QuantParams out_qp, bool fused_relu = false);
QuantizedBackward qconv2d_backward_raw(const QTensor& e_out, const QTensor& x_cached,
                                       const QTensor& w, const ConvGeometry& g,
                                       const BackwardOptions& opts = {});
LayerGrad qconv2d_backward(const QTensor& e_out, const QTensor& x_cached,
                           const QTensor& w, const ConvGeometry& g,
                           QuantParams e_in_qp, const BackwardOptions& opts = {},
                           Rounding rounding = Rounding::Floor);

FTensor conv2d_forward(const FTensor& x, const FTensor& w, std::span<const float> bias,
                       const ConvGeometry& g);
LayerGrad conv2d_backward(const FTensor& e_out, const FTensor& x_cached,
                          const FTensor& w, const ConvGeometry& g,
                          const BackwardOptions& opts = {});

// ---- max pooling ----------------------------------------------------------

template <typename Tensor>
struct PoolResult {
  Tensor output;
  // Linear input index of the winner of each output window.
  std::vector<std::uint32_t> argmax;
};

// Ties go to the lowest linear input index.
PoolResult<QTensor> maxpool_forward(const QTensor& x, const PoolGeometry& g);
PoolResult<FTensor> maxpool_forward(const FTensor& x, const PoolGeometry& g);
// Routes each error element to its window's winner; every other input
// position receives zero error.
QTensor maxpool_backward(const QTensor& e_out, std::span<const std::uint32_t> argmax,
                         const Shape& input_shape);
FTensor maxpool_backward(const FTensor& e_out, std::span<const std::uint32_t> argmax,
                         const Shape& input_shape);

// ---- elementwise ----------------------------------------------------------

FTensor relu_forward(const FTensor& x);
// Quantized ReLU clamps at the zero point.
QTensor relu_forward(const QTensor& x);
std::vector<std::uint8_t> relu_active(const FTensor& y);

// Precision boundary: the forward dequantizes, the backward quantizes the
// incoming float error with qparams derived from that error's own range.
FTensor dequant_boundary_forward(const QTensor& x);
QTensor dequant_boundary_backward(const FTensor& e_out, Rounding rounding = Rounding::Floor);

// ---- loss -----------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  FTensor d_logits;
};

// Max-subtracted softmax followed by -log p[label]; d_logits = p - onehot.
LossResult softmax_xent(const FTensor& logits, std::size_t label);

}  // namespace qtrain
