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
#include "qtrain/qcore.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "qtrain/errors.hpp"

namespace qtrain {

std::size_t element_count(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t floor_snapped(double x) {
  double n = std::floor(x);
  // A dequantized grid value divided by its scale can land a few ulps below
  // the integer it came from.
  const double tol = 1e-6 * std::max(1.0, std::abs(x));
  if (x - n > 1.0 - tol) n += 1.0;
  return static_cast<std::int64_t>(n);
}

std::uint8_t saturate_u8(std::int64_t v) {
  return static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255));
}

QuantParams derive_qparams(float f_min, float f_max) {
  if (!(f_min <= f_max) || !std::isfinite(f_min) || !std::isfinite(f_max)) {
    std::ostringstream os;
    os << "derive_qparams: invalid range [" << f_min << ", " << f_max << "]";
    throw Error(os.str());
  }
  f_min = std::min(f_min, 0.0f);
  f_max = std::max(f_max, 0.0f);
  QuantParams qp;
  if (f_min == f_max) {
    qp.scale = 1.0f / 255.0f;
    qp.zero_point = saturate_u8(floor_snapped(-static_cast<double>(f_min) * 255.0));
    return qp;
  }
  qp.scale = static_cast<float>((static_cast<double>(f_max) - f_min) / 255.0);
  if (!(qp.scale > 0.0f)) qp.scale = std::numeric_limits<float>::min();
  qp.zero_point = saturate_u8(floor_snapped(-static_cast<double>(f_min) / qp.scale));
  return qp;
}

std::string to_string(Rounding r) { return r == Rounding::Floor ? "floor" : "nearest"; }

Rounding parse_rounding(const std::string& name) {
  if (name == "floor") return Rounding::Floor;
  if (name == "nearest") return Rounding::Nearest;
  throw ConfigError("unknown rounding '" + name + "' (expected floor or nearest)");
}

std::int64_t round_to_int(double x, Rounding r) {
  return r == Rounding::Floor ? floor_snapped(x) : floor_snapped(x + 0.5);
}

std::uint8_t quantize(float v, QuantParams qp, Rounding r) {
  const double x = static_cast<double>(v) / qp.scale;
  if (std::isnan(x)) return qp.zero_point;
  if (x >= 512.0) return 255;
  if (x <= -512.0) return 0;
  return saturate_u8(round_to_int(x, r) + qp.zero_point);
}

float dequantize(std::uint8_t q, QuantParams qp) {
  return static_cast<float>((static_cast<int>(q) - qp.zero_point) *
                            static_cast<double>(qp.scale));
}

float representable_min(QuantParams qp) { return dequantize(0, qp); }
float representable_max(QuantParams qp) { return dequantize(255, qp); }

FTensor::FTensor(Shape shape)
    : shape_(std::move(shape)), data_(element_count(shape_), 0.0f) {}

FTensor::FTensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != element_count(shape_)) {
    throw DimensionError("FTensor: payload of " + std::to_string(data_.size()) +
                         " elements does not match shape " + to_string(shape_));
  }
}

void FTensor::reshape(Shape shape) {
  if (element_count(shape) != data_.size()) {
    throw DimensionError("FTensor::reshape: " + to_string(shape_) + " -> " +
                         to_string(shape));
  }
  shape_ = std::move(shape);
}

QTensor::QTensor(Shape shape, QuantParams qparams)
    : shape_(std::move(shape)),
      data_(element_count(shape_), qparams.zero_point),
      qparams_(qparams) {}

QTensor::QTensor(Shape shape, std::vector<std::uint8_t> data, QuantParams qparams)
    : shape_(std::move(shape)), data_(std::move(data)), qparams_(qparams) {
  if (data_.size() != element_count(shape_)) {
    throw DimensionError("QTensor: payload of " + std::to_string(data_.size()) +
                         " elements does not match shape " + to_string(shape_));
  }
}

void QTensor::reshape(Shape shape) {
  if (element_count(shape) != data_.size()) {
    throw DimensionError("QTensor::reshape: " + to_string(shape_) + " -> " +
                         to_string(shape));
  }
  shape_ = std::move(shape);
}

QTensor quantize_tensor(const FTensor& t, Rounding r) {
  if (t.size() == 0) throw DimensionError("quantize_tensor: empty tensor");
  const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
  return quantize_tensor(t, derive_qparams(*lo, *hi), r);
}

QTensor quantize_tensor(const FTensor& t, QuantParams qp, Rounding r) {
  if (t.size() == 0) throw DimensionError("quantize_tensor: empty tensor");
  std::vector<std::uint8_t> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = quantize(t[i], qp, r);
  return QTensor(t.shape(), std::move(out), qp);
}

FTensor dequantize_tensor(const QTensor& t) {
  if (t.size() == 0) throw DimensionError("dequantize_tensor: empty tensor");
  std::vector<float> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t.real(i);
  return FTensor(t.shape(), std::move(out));
}

}  // namespace qtrain
