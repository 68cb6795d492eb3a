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

// Datasets of 8-bit images: IDX ingestion (plain or gzip), deterministic
// splits and epoch orders, and synthetic blobs for smoke tests.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qtrain/errors.hpp"
#include "qtrain/qcore.hpp"

namespace qtrain {

class IdxMagicError : public ParseError {
 public:
  using ParseError::ParseError;
};
class IdxTruncatedError : public ParseError {
 public:
  using ParseError::ParseError;
};
class IdxCountMismatchError : public ParseError {
 public:
  using ParseError::ParseError;
};
class LabelRangeError : public ParseError {
 public:
  using ParseError::ParseError;
};

struct Dataset {
  Shape sample_shape;                // C x H x W
  std::vector<std::uint8_t> pixels;  // size() * element_count(sample_shape)
  std::vector<std::uint8_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_bytes() const { return element_count(sample_shape); }
  std::span<const std::uint8_t> sample(std::size_t i) const;
  // Throws unless the invariants hold: N > 0, payload sizes agree, labels
  // below class_count.
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Reads an IDX image file (magic 0x00000803, N x H x W) and label file
// (magic 0x00000801, N). Gzip-compressed files are detected by their header
// and inflated transparently. class_count 0 infers max(label) + 1.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t class_count = 10);
// Same, over in-memory (uncompressed or gzip) file contents.
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  std::size_t class_count = 10);

// Pixels are already the quantized form of [0, 1]: scale 1/255, zero point 0.
QTensor to_input_qtensor(std::span<const std::uint8_t> pixels, const Shape& shape);
QTensor to_input_qtensor(const Dataset& ds, std::size_t i);

// Shuffles with the seed and puts round(fraction * N) samples in the first
// part. Requires 0 < fraction < 1.
std::pair<Dataset, Dataset> split_shuffle(const Dataset& ds, double fraction, std::uint64_t seed);

// Visiting order of one epoch; a pure function of (n, seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// Each class gets a distinct bright 2x2 block on a
// 1 x 8 x 8 canvas with mild uniform noise, so classes are linearly
// separable.
Dataset synthetic_blobs(std::size_t n, std::size_t classes, std::uint64_t seed);

}  // namespace qtrain
