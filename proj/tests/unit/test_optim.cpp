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

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "checks.hpp"
#include "doctest.h"
#include "qtrain/data.hpp"
#include "qtrain/errors.hpp"
#include "qtrain/optim.hpp"

using namespace qtrain;

namespace {

LayerGrad uniform_grad(const Shape& ws, std::size_t channels, float v) {
  LayerGrad g;
  g.d_weight = FTensor(ws);
  for (float& x : g.d_weight.values()) x = v;
  g.d_bias.assign(channels, v);
  return g;
}

Layer qlinear_layer(const std::vector<float>& w, std::size_t out, std::size_t in) {
  Layer l;
  l.spec = LayerSpec{LayerKind::QLinear, Precision::Quantized,
                     LinearGeometry{static_cast<std::uint32_t>(in), static_cast<std::uint32_t>(out)}, false};
  l.qweight = quantize_tensor(FTensor({out, in}, w), Rounding::Nearest);
  l.qbias.assign(out, 0);
  return l;
}

Layer linear_layer(const std::vector<float>& w, std::size_t out, std::size_t in) {
  Layer l;
  l.spec = LayerSpec{LayerKind::Linear, Precision::Float,
                     LinearGeometry{static_cast<std::uint32_t>(in), static_cast<std::uint32_t>(out)}, false};
  l.fweight = FTensor({out, in}, w);
  l.fbias.assign(out, 0.0f);
  return l;
}

Model blob_model(PrecisionMode mode, std::uint64_t seed) {
  using T = BlockSpec::Type;
  const std::vector<BlockSpec> blocks{{T::Conv, 4, 3, 1, 1, true, 2},
                                      {T::MaxPool, 0, 0, 0, 0, false, 2},
                                      {T::Flatten, 0, 0, 0, 0, false, 2},
                                      {T::Linear, 16, 0, 0, 0, true, 2},
                                      {T::Linear, 4, 0, 0, 0, false, 2}};
  return build_model({1, 8, 8}, blocks, mode, seed);
}

std::string bytes_of(const Model& m) {
  std::ostringstream os;
  save_checkpoint(os, m);
  return os.str();
}

std::vector<StepMetrics> run_steps(Model& m, const TrainConfig& cfg, const Dataset& ds, std::size_t steps) {
  Trainer t(m, cfg);
  std::vector<StepMetrics> out;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t i = s % ds.size();
    out.push_back(t.train_step(to_input_qtensor(ds, i), ds.labels[i]));
  }
  return out;
}

}  // namespace

TEST_CASE("accumulating zeros leaves a zero buffer") {
  GradientBuffer buf({3, 4}, 3);
  for (int i = 0; i < 5; ++i) accumulate(buf, uniform_grad({3, 4}, 3, 0.0f));
  CHECK(buf.sample_count() == 5);
  for (float v : buf.accum().values()) CHECK(v == 0.0f);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(buf.mean()[c] == 0.0f);
    CHECK(buf.sigma(c) == GradientBuffer::kSigmaFloor);
  }
}

TEST_CASE("Welford statistics over two samples") {
  GradientBuffer buf({2, 3}, 2);
  accumulate(buf, uniform_grad({2, 3}, 2, 1.0f));
  accumulate(buf, uniform_grad({2, 3}, 2, 3.0f));
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(buf.mean()[c] == doctest::Approx(2.0));
    CHECK(buf.sigma(c) == doctest::Approx(1.0));
    CHECK(buf.channel_count(c) == 2);
  }
  for (float v : buf.accum().values()) CHECK(v == 4.0f);
  CHECK(buf.bias_accum()[1] == 4.0f);
}

TEST_CASE("Welford statistics match a two-pass computation") {
  std::mt19937_64 rng(1);
  GradientBuffer buf({3, 5}, 3);
  std::vector<std::vector<double>> per_channel(3);
  for (int s = 0; s < 7; ++s) {
    LayerGrad g;
    g.d_weight = checks::random_ftensor({3, 5}, rng, -2.0f, 2.0f);
    g.d_bias = {0.1f * s, -0.3f, 0.7f};
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t j = 0; j < 5; ++j) per_channel[c].push_back(g.d_weight[c * 5 + j]);
      per_channel[c].push_back(g.d_bias[c]);
    }
    accumulate(buf, g);
  }
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& v = per_channel[c];
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= v.size();
    CHECK(buf.mean()[c] == doctest::Approx(mean).epsilon(1e-5));
    CHECK(buf.sigma(c) == doctest::Approx(std::sqrt(var)).epsilon(1e-5));
  }
}

TEST_CASE("accumulate shape errors") {
  GradientBuffer buf({2, 3}, 2);
  CHECK_THROWS_AS(accumulate(buf, uniform_grad({3, 2}, 2, 1.0f)), DimensionError);
  CHECK_THROWS_AS(accumulate(buf, uniform_grad({2, 3}, 3, 1.0f)), DimensionError);
  LayerGrad g = uniform_grad({2, 3}, 2, 1.0f);
  g.computed = {1, 0, 1};
  CHECK_THROWS_AS(accumulate(buf, g), DimensionError);
  CHECK_THROWS_AS(GradientBuffer({2, 3}, 3), DimensionError);
}

TEST_CASE("skipped channels stay out of the channel statistics") {
  GradientBuffer buf({2, 1}, 2);
  LayerGrad a = uniform_grad({2, 1}, 2, 2.0f);
  LayerGrad b = uniform_grad({2, 1}, 2, 0.0f);
  b.computed = {1, 0};
  accumulate(buf, a);
  accumulate(buf, b);
  CHECK(buf.channel_count(0) == 2);
  CHECK(buf.channel_count(1) == 1);
  CHECK(buf.mean()[0] == doctest::Approx(1.0));
  CHECK(buf.mean()[1] == doctest::Approx(2.0));
  CHECK(buf.sample_count() == 2);
}

TEST_CASE("buffer bytes do not depend on the batch size") {
  Model m = blob_model(PrecisionMode::Uint8, 1);
  std::size_t expect = 0;
  for (std::uint32_t b : {1u, 8u, 48u}) {
    TrainConfig cfg;
    cfg.batch_size = b;
    Trainer t(m, cfg);
    if (expect == 0) expect = t.buffer_bytes();
    CHECK(t.buffer_bytes() == expect);
  }
  std::size_t sum = 0;
  for (std::size_t i : m.weighted_layers()) sum += GradientBuffer(m.layer(i)).byte_size();
  CHECK(expect == sum);
}

TEST_CASE("apply_update with a zero gradient keeps the weights") {
  const std::vector<float> w{0.5f, -0.25f, 0.75f, 0.1f, -0.6f, 0.3f};
  Layer l = qlinear_layer(w, 2, 3);
  const FTensor before = dequantize_tensor(l.qweight);
  GradientBuffer buf(l);
  for (int i = 0; i < 4; ++i) accumulate(buf, uniform_grad({2, 3}, 2, 0.0f));
  apply_update(l, buf, 0.1, 4, 0.01f);
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(std::abs(l.qweight.real(i) - before[i]) <= l.qweight.qparams().scale * 1.0001f);
}

TEST_CASE("apply_update single weight example") {
  // Channel values {w: 1, b: -1} give mean 0 and sigma 1.
  Layer l = qlinear_layer({1.0f}, 1, 1);
  REQUIRE(l.qweight.real(0) == doctest::Approx(1.0));
  GradientBuffer buf(l);
  LayerGrad g;
  g.d_weight = FTensor({1, 1}, {1.0f});
  g.d_bias = {-1.0f};
  accumulate(buf, g);
  CHECK(buf.mean()[0] == 0.0f);
  CHECK(buf.sigma(0) == 1.0f);
  apply_update(l, buf, 0.1, 1, 0.01f);
  CHECK(std::abs(l.qweight.real(0) - 0.9f) <= l.qweight.qparams().scale);

  Layer f = linear_layer({1.0f}, 1, 1);
  GradientBuffer fb(f);
  accumulate(fb, g);
  apply_update(f, fb, 0.1, 1);
  CHECK(f.fweight[0] == doctest::Approx(0.9));
  CHECK(f.fbias[0] == doctest::Approx(0.1));
}

TEST_CASE("apply_update refreshes qparams from the candidate range") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const FTensor w0 = checks::random_ftensor({4, 6}, rng);
    Layer l = qlinear_layer({w0.values().begin(), w0.values().end()}, 4, 6);
    GradientBuffer buf(l);
    std::vector<LayerGrad> grads;
    for (int s = 0; s < 3; ++s) {
      LayerGrad g;
      g.d_weight = checks::random_ftensor({4, 6}, rng);
      g.d_bias = {0.1f, -0.2f, 0.3f, 0.0f};
      accumulate(buf, g);
    }
    // Independent recomputation of the candidates.
    std::vector<float> cand(24);
    for (std::size_t i = 0; i < 24; ++i) {
      const std::size_t c = i / 6;
      const double step = 0.05 * (buf.accum()[i] - buf.channel_count(c) * double{buf.mean()[c]}) / buf.sigma(c);
      cand[i] = static_cast<float>(l.qweight.real(i) - step);
    }
    const auto [lo, hi] = std::minmax_element(cand.begin(), cand.end());
    apply_update(l, buf, 0.05, 3, 0.01f);
    CHECK(l.qweight.qparams() == derive_qparams(*lo, *hi));
    for (std::size_t i = 0; i < 24; ++i)
      CHECK(std::abs(l.qweight.real(i) - cand[i]) <= l.qweight.qparams().scale * 1.0001f);
  }
}

TEST_CASE("apply_update resets the buffer and rejects partial batches") {
  Layer l = qlinear_layer({0.5f, -0.5f}, 1, 2);
  GradientBuffer buf(l);
  accumulate(buf, uniform_grad({1, 2}, 1, 0.3f));
  CHECK_THROWS_AS(apply_update(l, buf, 0.1, 2, 0.01f), StateError);
  accumulate(buf, uniform_grad({1, 2}, 1, -0.7f));
  apply_update(l, buf, 0.1, 2, 0.01f);
  CHECK(buf.sample_count() == 0);
  CHECK(buf.channel_count(0) == 0);
  for (float v : buf.accum().values()) CHECK(v == 0.0f);
  CHECK(buf.bias_accum()[0] == 0.0f);
  CHECK(buf.mean()[0] == 0.0f);
}

TEST_CASE("a constant shift of one channel's gradients does not change its update") {
  std::mt19937_64 rng(3);
  const FTensor w0 = checks::random_ftensor({3, 4}, rng);
  Layer a = linear_layer({w0.values().begin(), w0.values().end()}, 3, 4);
  Layer b = a;
  GradientBuffer ba(a), bb(b);
  for (int s = 0; s < 4; ++s) {
    LayerGrad g;
    g.d_weight = checks::random_ftensor({3, 4}, rng);
    g.d_bias = {0.2f, -0.1f, 0.4f};
    accumulate(ba, g);
    for (std::size_t j = 0; j < 4; ++j) g.d_weight[4 + j] += 2.5f;
    g.d_bias[1] += 2.5f;
    accumulate(bb, g);
  }
  apply_update(a, ba, 0.01, 4);
  apply_update(b, bb, 0.01, 4);
  for (std::size_t i = 0; i < 12; ++i) CHECK(a.fweight[i] == doctest::Approx(b.fweight[i]).epsilon(1e-5));
  CHECK(a.fbias[1] == doctest::Approx(b.fbias[1]).epsilon(1e-5));
}

TEST_CASE("sparse_rate examples") {
  SparseConfig cfg{0.1, 0.5, 2.0};
  CHECK(sparse_rate(cfg, 0.0, 100) == 10);
  CHECK(sparse_rate(cfg, 2.0, 100) == 50);
  CHECK(sparse_rate(cfg, 1.0, 100) == 30);
  CHECK(sparse_rate(SparseConfig{0.8, 1.0, 1.0}, 1.0, 100) == 100);
  CHECK(sparse_rate(cfg, 0.0, 5) == 1);
  CHECK(sparse_rate(cfg, 0.0, 0) == 0);
  // Nothing observed yet counts as the worst loss.
  CHECK(sparse_rate(SparseConfig{0.1, 0.5, 0.0}, 0.0, 100) == 50);
  CHECK_THROWS_AS(sparse_rate(cfg, -1.0, 10), Error);
  CHECK_THROWS_AS((SparseConfig{0.6, 0.5, 0.0}.validate()), ConfigError);
  CHECK_THROWS_AS((SparseConfig{-0.1, 0.5, 0.0}.validate()), ConfigError);
}

TEST_CASE("sparse_rate properties") {
  const auto r = checks::sparse_rate_sweep(2000, 5);
  CAPTURE(r.first_failure);
  CHECK(r.ok());
}

TEST_CASE("select_structures single nonzero channel") {
  QTensor e({4, 3, 3}, QuantParams{0.1f, 50});
  for (std::size_t j = 0; j < 9; ++j) e[2 * 9 + j] = 40;
  CHECK(select_structures(e, 1) == std::vector<std::size_t>{2});
  FTensor f({5});
  f[3] = -0.5f;
  CHECK(select_structures(f, 1) == std::vector<std::size_t>{3});
  CHECK(select_structures(f, 5) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(select_structures(f, 6), Error);
}

TEST_CASE("select_structures matches a brute-force L1 ranking") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> small(0, 6);
  for (int trial = 0; trial < 300; ++trial) {
    // Few distinct values so that ties are common.
    const QuantParams qp{0.05f, 3};
    QTensor e({8, 2, 2}, qp);
    for (auto& v : e.values()) v = static_cast<std::uint8_t>(small(rng));
    const std::size_t k = 1 + static_cast<std::size_t>(trial % 8);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t c = 0; c < 8; ++c) {
      double l1 = 0;
      for (std::size_t j = 0; j < 4; ++j) l1 += std::abs(e.real(c * 4 + j));
      ranked.emplace_back(-l1, c);
    }
    // Integer L1 in units of the scale avoids float ties drifting.
    for (auto& [score, c] : ranked) {
      int s = 0;
      for (std::size_t j = 0; j < 4; ++j) s += std::abs(int{e[c * 4 + j]} - 3);
      score = -s;
    }
    std::sort(ranked.begin(), ranked.end());
    std::vector<std::size_t> expect;
    for (std::size_t i = 0; i < k; ++i) expect.push_back(ranked[i].second);
    std::sort(expect.begin(), expect.end());
    CHECK(select_structures(e, k) == expect);
  }
}

TEST_CASE("keeping every structure is bit-identical to dense backward") {
  std::mt19937_64 rng(5);
  const Dataset ds = synthetic_blobs(8, 4, 1);
  for (PrecisionMode mode : {PrecisionMode::Uint8, PrecisionMode::Mixed, PrecisionMode::Float32}) {
    Model m = blob_model(mode, 2);
    const ForwardResult fr = forward(m, to_input_qtensor(ds, 0), ForwardMode::Train);
    const LossResult loss = softmax_xent(fr.logits, ds.labels[0]);
    Model m1 = m, m2 = m;
    const BackwardResult dense = backward(m1, *fr.tape, loss.d_logits);
    const StructureSelector all = [&](std::size_t layer, const Activation& err) {
      const std::size_t n = m.layer(layer).spec.structures();
      return structure_mask(select_structures(err, n), n);
    };
    const BackwardResult full = backward(m2, *fr.tape, loss.d_logits, all);
    CHECK(dense.macs == full.macs);
    for (const auto& [i, g] : dense.grads) {
      const LayerGrad& h = full.grads.at(i);
      CHECK(g.d_weight == h.d_weight);
      CHECK(g.d_bias == h.d_bias);
      CHECK(full.selected_fraction.at(i) == 1.0);
    }
  }
}

TEST_CASE("dense training reports a full selected fraction") {
  const Dataset ds = synthetic_blobs(24, 4, 2);
  Model m = blob_model(PrecisionMode::Uint8, 3);
  TrainConfig cfg;
  cfg.batch_size = 6;
  const auto steps = run_steps(m, cfg, ds, 12);
  for (const StepMetrics& s : steps) {
    CHECK(s.selected_frac_mean() == 1.0);
    for (const auto& [i, f] : s.selected_fraction) CHECK(f == 1.0);
    CHECK(s.macs_bwd > 0);
  }
  CHECK(steps[5].updated);
  CHECK_FALSE(steps[4].updated);
}

TEST_CASE("lambda = 1 sparse training is bit-identical to dense training") {
  const Dataset ds = synthetic_blobs(40, 4, 3);
  for (PrecisionMode mode : {PrecisionMode::Uint8, PrecisionMode::Mixed, PrecisionMode::Float32}) {
    for (bool output_layer : {false, true}) {
      Model dense = blob_model(mode, 4), sparse = dense;
      TrainConfig cfg;
      cfg.batch_size = 8;
      const auto a = run_steps(dense, cfg, ds, 80);
      cfg.sparse = SparseConfig{1.0, 1.0, 0.0, output_layer};
      const auto b = run_steps(sparse, cfg, ds, 80);
      for (std::size_t s = 0; s < a.size(); ++s) {
        CHECK(a[s].loss == b[s].loss);
        CHECK(a[s].macs_bwd == b[s].macs_bwd);
      }
      CHECK(bytes_of(dense) == bytes_of(sparse));
    }
  }
}

TEST_CASE("sparse training skips backward work and still learns") {
  const Dataset ds = synthetic_blobs(64, 4, 4);
  Model dense = blob_model(PrecisionMode::Uint8, 5), sparse = dense;
  TrainConfig cfg;
  cfg.batch_size = 8;
  const auto a = run_steps(dense, cfg, ds, 320);
  cfg.sparse = SparseConfig{0.25, 0.25, 0.0};
  const auto b = run_steps(sparse, cfg, ds, 320);
  std::uint64_t ma = 0, mb = 0;
  for (const auto& s : a) ma += s.macs_bwd;
  for (const auto& s : b) mb += s.macs_bwd;
  CHECK(mb * 2 < ma);
  for (const auto& s : b) CHECK(s.selected_frac_mean() < 1.0);
  double late = 0;
  for (std::size_t s = 256; s < 320; ++s) late += b[s].loss;
  CHECK(late / 64 < b[0].loss);
}

TEST_CASE("training is deterministic") {
  const Dataset ds = synthetic_blobs(32, 4, 6);
  Model a = blob_model(PrecisionMode::Mixed, 7), b = a;
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.sparse = SparseConfig{0.1, 0.5, 0.0};
  run_steps(a, cfg, ds, 64);
  run_steps(b, cfg, ds, 64);
  CHECK(bytes_of(a) == bytes_of(b));
}

TEST_CASE("the trainer tracks the largest loss seen") {
  const Dataset ds = synthetic_blobs(16, 4, 7);
  Model m = blob_model(PrecisionMode::Uint8, 8);
  Trainer t(m, TrainConfig{});
  double worst = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    worst = std::max(worst, t.train_step(to_input_qtensor(ds, i), ds.labels[i]).loss);
    CHECK(t.state().max_loss_observed == worst);
  }
  CHECK(t.state().steps == 16);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.learning_rate = 0.01;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
