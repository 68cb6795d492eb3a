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

// Per-tensor asymmetric 8-bit linear quantization.
//
//   q = floor(v / scale) + zero_point, saturated to [0, 255]
//   v = (q - zero_point) * scale
//
// Weights, activations and backpropagated errors all use this one scheme, so
// the same kernels serve inference and training.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace qtrain {

using Shape = std::vector<std::size_t>;

// Product of all dimensions; 0 for an empty shape.
std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

struct QuantParams {
  float scale = 1.0f;
  std::uint8_t zero_point = 0;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

// Floor is the quantization scheme itself. Nearest (ties upward) is used by
// the training path where a one-sided bias would accumulate: requantized
// errors and updated weights.
enum class Rounding : std::uint8_t { Floor = 0, Nearest = 1 };

std::string to_string(Rounding r);
Rounding parse_rounding(const std::string& name);
std::int64_t round_to_int(double x, Rounding r);

// Derives the scale and zero point covering [f_min, f_max]. The range is
// widened to contain 0.0 so that zero is exactly representable. A degenerate
// range (f_min == f_max after widening, i.e. both zero) falls back to
// scale 1/255 and zero point clamp(floor(-f_min * 255)).
QuantParams derive_qparams(float f_min, float f_max);

// floor(v / scale) + zero_point, saturated. Quotients within float rounding
// distance below an integer snap up to it, so dequantized grid values
// round-trip exactly.
std::uint8_t quantize(float v, QuantParams qp, Rounding r = Rounding::Floor);
float dequantize(std::uint8_t q, QuantParams qp);

// Real-valued range [dequantize(0), dequantize(255)].
float representable_min(QuantParams qp);
float representable_max(QuantParams qp);

// Floor used throughout requantization, with the same snapping rule as
// quantize().
std::int64_t floor_snapped(double x);

std::uint8_t saturate_u8(std::int64_t v);

class FTensor {
 public:
  FTensor() = default;
  explicit FTensor(Shape shape);
  FTensor(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Same payload under a different shape with equal element count.
  void reshape(Shape shape);

  friend bool operator==(const FTensor&, const FTensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

class QTensor {
 public:
  QTensor() = default;
  // Filled with the zero point, i.e. dequantizes to all zeros.
  QTensor(Shape shape, QuantParams qparams);
  QTensor(Shape shape, std::vector<std::uint8_t> data, QuantParams qparams);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::span<std::uint8_t> values() { return data_; }
  std::span<const std::uint8_t> values() const { return data_; }
  std::uint8_t& operator[](std::size_t i) { return data_[i]; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }

  const QuantParams& qparams() const { return qparams_; }
  void set_qparams(QuantParams qp) { qparams_ = qp; }

  void reshape(Shape shape);

  float real(std::size_t i) const { return dequantize(data_[i], qparams_); }

  friend bool operator==(const QTensor&, const QTensor&) = default;

 private:
  Shape shape_;
  std::vector<std::uint8_t> data_;
  QuantParams qparams_;
};

// Quantizes with qparams derived from the tensor's own min/max.
QTensor quantize_tensor(const FTensor& t, Rounding r = Rounding::Floor);
// Quantizes with caller-supplied qparams.
QTensor quantize_tensor(const FTensor& t, QuantParams qp, Rounding r = Rounding::Floor);
FTensor dequantize_tensor(const QTensor& t);

}  // namespace qtrain
