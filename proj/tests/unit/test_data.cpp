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

#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "qtrain/cli.hpp"
#include "qtrain/data.hpp"
#include "qtrain/errors.hpp"

using namespace qtrain;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w) {
  std::vector<std::uint8_t> b;
  put_u32(b, 0x00000803);
  put_u32(b, n);
  put_u32(b, h);
  put_u32(b, w);
  for (std::uint32_t i = 0; i < n * h * w; ++i) b.push_back(static_cast<std::uint8_t>(i * 7));
  return b;
}

std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> b;
  put_u32(b, 0x00000801);
  put_u32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

const std::string kMnistImages = std::string(QTRAIN_DATA_DIR) + "/mnist10k/images-idx3-ubyte.gz";
const std::string kMnistLabels = std::string(QTRAIN_DATA_DIR) + "/mnist10k/labels-idx1-ubyte.gz";

}  // namespace

TEST_CASE("parse_idx reads a well-formed pair") {
  const Dataset ds = parse_idx(idx_images(3, 2, 2), idx_labels({0, 9, 4}));
  CHECK(ds.size() == 3);
  CHECK(ds.sample_shape == Shape{1, 2, 2});
  CHECK(ds.class_count == 10);
  CHECK(ds.labels[1] == 9);
  const auto s1 = ds.sample(1);
  CHECK(s1[0] == static_cast<std::uint8_t>(4 * 7));
  CHECK_THROWS_AS(ds.sample(3), Error);
}

TEST_CASE("parse_idx error kinds") {
  auto images = idx_images(3, 2, 2);
  const auto labels = idx_labels({0, 1, 2});

  auto bad_magic = images;
  bad_magic[2] = 0x09;
  CHECK_THROWS_AS(parse_idx(bad_magic, labels), IdxMagicError);
  CHECK_THROWS_AS(parse_idx(images, bad_magic), IdxMagicError);

  const std::vector<std::uint8_t> truncated(images.begin(), images.end() - 1);
  try {
    parse_idx(truncated, labels);
    FAIL("expected a truncation error");
  } catch (const IdxTruncatedError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(images.size())) != std::string::npos);
    CHECK(msg.find(std::to_string(truncated.size())) != std::string::npos);
  }
  CHECK_THROWS_AS(parse_idx(std::vector<std::uint8_t>{0, 0}, labels), IdxTruncatedError);

  CHECK_THROWS_AS(parse_idx(images, idx_labels({0, 1})), IdxCountMismatchError);
  CHECK_THROWS_AS(parse_idx(images, idx_labels({0, 10, 1})), LabelRangeError);
  CHECK_NOTHROW(parse_idx(images, idx_labels({0, 10, 1}), 11));
  // Every specific error is still a parse error.
  CHECK_THROWS_AS(parse_idx(images, idx_labels({0, 10, 1})), ParseError);
}

TEST_CASE("load_idx reads plain and gzip files and is pure") {
  const auto dir = std::filesystem::temp_directory_path() / "qtrain_test_data";
  std::filesystem::create_directories(dir);
  const auto write = [&](const std::string& name, const std::vector<std::uint8_t>& b) {
    std::ofstream os(dir / name, std::ios::binary);
    os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    return (dir / name).string();
  };
  const std::string img = write("img", idx_images(4, 3, 3));
  const std::string lab = write("lab", idx_labels({1, 2, 3, 4}));
  const Dataset a = load_idx(img, lab), b = load_idx(img, lab);
  CHECK(a == b);
  CHECK(a.size() == 4);
  CHECK_THROWS_AS(load_idx((dir / "missing").string(), lab), ParseError);
  CHECK_THROWS_AS(load_idx(write("junk.gz", {0x1f, 0x8b, 8, 0, 1, 2}), lab), ParseError);
}

TEST_CASE("bundled MNIST subset") {
  const Dataset ds = load_idx(kMnistImages, kMnistLabels);
  CHECK(ds.size() == 10000);
  CHECK(ds.sample_shape == Shape{1, 28, 28});
  CHECK(ds.class_count == 10);
  CHECK_NOTHROW(ds.validate());
  std::set<int> seen(ds.labels.begin(), ds.labels.end());
  CHECK(seen.size() == 10);
  CHECK(load_idx(kMnistImages, kMnistLabels) == ds);
}

TEST_CASE("to_input_qtensor wraps pixels exactly") {
  const std::vector<std::uint8_t> zeros(4, 0);
  const QTensor z = to_input_qtensor(zeros, {1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) CHECK(z.real(i) == 0.0f);
  const std::vector<std::uint8_t> px{0, 1, 128, 255};
  const QTensor q = to_input_qtensor(px, {1, 2, 2});
  CHECK(q.qparams().scale == doctest::Approx(1.0 / 255.0));
  CHECK(q.qparams().zero_point == 0);
  CHECK(q.real(3) == doctest::Approx(1.0));
  for (std::size_t i = 0; i < 4; ++i) CHECK(q[i] == px[i]);
  CHECK_THROWS_AS(to_input_qtensor(px, {1, 3, 3}), DimensionError);
}

TEST_CASE("split_shuffle properties") {
  const Dataset ds = synthetic_blobs(100, 4, 1);
  const auto [train, test] = split_shuffle(ds, 0.8, 7);
  CHECK(train.size() == 80);
  CHECK(test.size() == 20);
  const auto [train2, test2] = split_shuffle(ds, 0.8, 7);
  CHECK(train == train2);
  CHECK(test == test2);
  const auto [train3, test3] = split_shuffle(ds, 0.8, 8);
  CHECK_FALSE(train == train3);

  // Blob samples carry random noise, so each pixel row identifies its sample.
  std::multiset<std::vector<std::uint8_t>> all, parts;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto s = ds.sample(i);
    std::vector<std::uint8_t> v(s.begin(), s.end());
    v.push_back(ds.labels[i]);
    all.insert(v);
  }
  for (const Dataset* part : {&train, &test})
    for (std::size_t i = 0; i < part->size(); ++i) {
      auto s = part->sample(i);
      std::vector<std::uint8_t> v(s.begin(), s.end());
      v.push_back(part->labels[i]);
      parts.insert(v);
    }
  CHECK(all == parts);
  CHECK(all.size() == std::set<std::vector<std::uint8_t>>(all.begin(), all.end()).size());

  CHECK_THROWS_AS(split_shuffle(ds, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(split_shuffle(ds, 1.0, 1), ConfigError);
}

TEST_CASE("epoch_order is a seeded permutation") {
  const auto a = epoch_order(50, 3, 0), b = epoch_order(50, 3, 0), c = epoch_order(50, 3, 1);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 50);
}

TEST_CASE("dataset validation") {
  Dataset ds = synthetic_blobs(8, 2, 1);
  CHECK_NOTHROW(ds.validate());
  ds.labels[0] = 2;
  CHECK_THROWS_AS(ds.validate(), LabelRangeError);
  ds.labels.pop_back();
  CHECK_THROWS_AS(ds.validate(), IdxCountMismatchError);
  CHECK_THROWS_AS(synthetic_blobs(0, 2, 1), ConfigError);
  CHECK_THROWS_AS(synthetic_blobs(10, 1, 1), ConfigError);
}

TEST_CASE("two-class blobs are learned perfectly by a single linear layer") {
  RunConfig cfg;
  cfg.data.synthetic = 200;
  cfg.data.class_count = 2;
  cfg.blocks = {{BlockSpec::Type::Flatten}, {BlockSpec::Type::Linear, 2}};
  cfg.train.batch_size = 4;
  cfg.train.learning_rate = 0.01;
  cfg.train.seed = 3;
  cfg.epochs = 3;
  for (PrecisionMode mode : {PrecisionMode::Uint8, PrecisionMode::Float32}) {
    cfg.train.precision = mode;
    const Splits data = load_splits(cfg);
    Model model = make_model(cfg, data.train);
    const TrainRun run = train_model(model, cfg, data);
    CHECK(run.epochs.size() == 4);
    CHECK(run.epochs.back().test_acc == 1.0);
    CHECK(evaluate(model, data.train).accuracy == 1.0);
  }
}
