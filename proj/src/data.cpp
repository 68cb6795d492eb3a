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
#include "qtrain/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "qtrain/model.hpp"

namespace qtrain {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

bool is_gzip(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> in, const std::string& what) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) throw ParseError(what + ": zlib init failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<std::uint8_t> out;
  std::uint8_t chunk[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof(chunk);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw IdxTruncatedError(what + ": corrupt or truncated gzip stream");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw IdxTruncatedError(what + ": gzip stream ends early");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::span<const std::uint8_t> payload;
};

IdxFile parse_header(std::span<const std::uint8_t> bytes, std::uint32_t magic, std::size_t rank,
                     const std::string& what) {
  if (bytes.size() < 4) {
    throw IdxTruncatedError(what + ": expected at least 4 header bytes, got " +
                            std::to_string(bytes.size()));
  }
  const std::uint32_t got = be32(bytes, 0);
  if (got != magic) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "bad magic 0x%08x, expected 0x%08x", got, magic);
    throw IdxMagicError(what + ": " + buf);
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) {
    throw IdxTruncatedError(what + ": expected " + std::to_string(header) +
                            " header bytes, got " + std::to_string(bytes.size()));
  }
  IdxFile f;
  std::size_t total = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    f.dims.push_back(be32(bytes, 4 + 4 * d));
    total *= f.dims.back();
  }
  if (bytes.size() - header < total) {
    throw IdxTruncatedError(what + ": truncated payload, expected " + std::to_string(header + total) +
                            " bytes, got " + std::to_string(bytes.size()));
  }
  f.payload = bytes.subspan(header, total);
  return f;
}

}  // namespace

std::span<const std::uint8_t> Dataset::sample(std::size_t i) const {
  if (i >= size()) throw Error("dataset: sample index out of range");
  return std::span<const std::uint8_t>(pixels).subspan(i * sample_bytes(), sample_bytes());
}

void Dataset::validate() const {
  if (labels.empty()) throw ParseError("dataset: no samples");
  if (pixels.size() != labels.size() * sample_bytes()) {
    throw IdxCountMismatchError("dataset: " + std::to_string(pixels.size()) +
                                " pixel bytes for " + std::to_string(labels.size()) +
                                " samples of " + to_string(sample_shape));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_count) {
      throw LabelRangeError("dataset: label " + std::to_string(labels[i]) + " at sample " +
                            std::to_string(i) + " is outside the " +
                            std::to_string(class_count) + "-class set");
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.sample_shape = sample_shape;
  out.class_count = class_count;
  out.labels.reserve(indices.size());
  out.pixels.reserve(indices.size() * sample_bytes());
  for (std::size_t i : indices) {
    const auto s = sample(i);
    out.pixels.insert(out.pixels.end(), s.begin(), s.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  std::size_t class_count) {
  std::vector<std::uint8_t> img_buf, lbl_buf;
  if (is_gzip(images)) {
    img_buf = gunzip(images, "images");
    images = img_buf;
  }
  if (is_gzip(labels)) {
    lbl_buf = gunzip(labels, "labels");
    labels = lbl_buf;
  }
  const IdxFile img = parse_header(images, kImagesMagic, 3, "images");
  const IdxFile lbl = parse_header(labels, kLabelsMagic, 1, "labels");
  if (img.dims[0] != lbl.dims[0]) {
    throw IdxCountMismatchError("idx: " + std::to_string(img.dims[0]) + " images but " +
                                std::to_string(lbl.dims[0]) + " labels");
  }
  Dataset ds;
  ds.sample_shape = {1, img.dims[1], img.dims[2]};
  ds.pixels.assign(img.payload.begin(), img.payload.end());
  ds.labels.assign(lbl.payload.begin(), lbl.payload.end());
  if (class_count == 0) {
    class_count = ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1u;
  }
  ds.class_count = class_count;
  ds.validate();
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t class_count) {
  const std::vector<std::uint8_t> images = read_file(images_path);
  const std::vector<std::uint8_t> labels = read_file(labels_path);
  return parse_idx(images, labels, class_count);
}

QTensor to_input_qtensor(std::span<const std::uint8_t> pixels, const Shape& shape) {
  if (pixels.size() != element_count(shape)) {
    throw DimensionError("to_input_qtensor: " + std::to_string(pixels.size()) +
                         " pixels for shape " + to_string(shape));
  }
  return QTensor(shape, std::vector<std::uint8_t>(pixels.begin(), pixels.end()),
                 Model::kInputQParams);
}

QTensor to_input_qtensor(const Dataset& ds, std::size_t i) {
  return to_input_qtensor(ds.sample(i), ds.sample_shape);
}

namespace {

// Fisher-Yates driven directly by the raw generator output, so the order
// does not depend on the standard library's distribution implementations.
void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

std::pair<Dataset, Dataset> split_shuffle(const Dataset& ds, double fraction,
                                          std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("split_shuffle: fraction must lie strictly between 0 and 1");
  }
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  shuffle(idx, rng);
  const auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
  const std::span<const std::size_t> all(idx);
  return {ds.subset(all.first(cut)), ds.subset(all.subspan(cut))};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x9e3779b9u};
  std::mt19937_64 rng(seq);
  shuffle(idx, rng);
  return idx;
}

Dataset synthetic_blobs(std::size_t n, std::size_t classes, std::uint64_t seed) {
  if (classes < 2 || classes > 16) throw ConfigError("synthetic_blobs: need 2..16 classes");
  if (n == 0) throw ConfigError("synthetic_blobs: need at least one sample");
  Dataset ds;
  ds.sample_shape = {1, 8, 8};
  ds.class_count = classes;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % classes;
    // Class c lights the 2x2 block at grid cell (c / 4, c % 4).
    const std::size_t by = 2 * (label / 4), bx = 2 * (label % 4);
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        const bool on = y / 2 * 2 == by && x / 2 * 2 == bx;
        const auto noise = static_cast<int>(rng() % 48);
        ds.pixels.push_back(static_cast<std::uint8_t>(on ? 255 - noise : noise));
      }
    }
    ds.labels.push_back(static_cast<std::uint8_t>(label));
  }
  return ds;
}

}  // namespace qtrain
