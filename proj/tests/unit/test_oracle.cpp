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

// Checks on the reference implementations themselves, so that agreement
// between engine and oracle means something.

#include <cmath>
#include <random>

#include "checks.hpp"
#include "doctest.h"
#include "oracle.hpp"
#include "qtrain/memory.hpp"

using namespace qtrain;

TEST_CASE("finite_diff recovers an analytic gradient") {
  const auto f = [](const std::vector<double>& x) { return x[0] * x[0] * x[1] + std::sin(x[1]); };
  const auto g = oracle::finite_diff(f, {1.5, -0.3}, 1e-5);
  CHECK(g[0] == doctest::Approx(2 * 1.5 * -0.3).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(1.5 * 1.5 + std::cos(-0.3)).epsilon(1e-8));
  CHECK_THROWS(oracle::finite_diff(f, {0.0, 0.0}, 0.0));
}

TEST_CASE("relative_error uses an absolute floor of one") {
  CHECK(oracle::relative_error({0.0, 10.0}, {0.5, 11.0}) == doctest::Approx(0.5));
  CHECK(oracle::relative_error({100.0}, {101.0}) == doctest::Approx(0.01));
}

TEST_CASE("quantize_ref hand values") {
  CHECK(oracle::quantize_ref(2.0, {0.5f, 10}) == 14);
  CHECK(oracle::quantize_ref(1.9, {0.5f, 10}) == 13);
  CHECK(oracle::quantize_ref(-100.0, {0.5f, 10}) == 0);
  CHECK(oracle::quantize_ref(1000.0, {0.5f, 10}) == 255);
}

TEST_CASE("conv_ref hand-computed 2x2 kernel") {
  // 1x3x3 input 1..9, one 2x2 kernel of ones, bias 0.5.
  std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8, 9};
  const ConvGeometry g{1, 1, 2, 2, 1, 0};
  const auto y = oracle::conv_ref(x, {1, 3, 3}, {1, 1, 1, 1}, {0.5}, g);
  REQUIRE(y.size() == 4);
  CHECK(y[0] == 12.5);
  CHECK(y[1] == 16.5);
  CHECK(y[2] == 24.5);
  CHECK(y[3] == 28.5);

  const auto back = oracle::conv_back_ref(x, {1, 3, 3}, {1, 1, 1, 1}, {1, 0, 0, 0}, g);
  CHECK(back.d_weight == std::vector<double>{1, 2, 4, 5});
  CHECK(back.d_bias == std::vector<double>{1});
  CHECK(back.d_input == std::vector<double>{1, 1, 0, 1, 1, 0, 0, 0, 0});
}

TEST_CASE("linear_ref hand values") {
  const auto y = oracle::linear_ref({1, 2}, {1, 0, 0.5, -1}, {0, 1}, 2, 2);
  CHECK(y == std::vector<double>{1, -0.5});
}

TEST_CASE("oracle model backward agrees with finite differences in double") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::size_t classes = 0;
    const Model m = checks::random_toy_model(rng, classes);
    auto om = oracle::OracleModel<double>::from_model(m);
    const QTensor in = checks::random_qtensor(m.input_shape(), rng);
    const auto x = oracle::input_tensor<double>(in);
    const auto r = om.backward(x, trial % classes);
    for (std::size_t li : om.weighted()) {
      const auto f = [&](const std::vector<double>& w) {
        auto copy = om;
        copy.layers[li].w = w;
        return copy.loss(x, trial % classes);
      };
      const auto fd = oracle::finite_diff(f, om.layers[li].w, 1e-6);
      CHECK(oracle::relative_error(fd, r.dw[li]) < 1e-5);
    }
  }
}

TEST_CASE("softmax_xent gradient sums to zero") {
  std::vector<double> z{0.3, -1.2, 2.5, 0.0};
  double loss = 0;
  std::vector<double> d;
  oracle::OracleModel<double>::softmax_xent(z, 2, loss, d);
  double s = 0;
  for (double v : d) s += v;
  CHECK(std::abs(s) < 1e-15);
  CHECK(d[2] < 0.0);
  CHECK(loss > 0.0);
}

TEST_CASE("brute_force_arena known optima") {
  // Disjoint lifetimes share offset 0.
  CHECK(oracle::brute_force_arena({{"a", 10, {0, 1}}, {"b", 20, {2, 3}}}) == 20);
  // Overlapping lifetimes stack.
  CHECK(oracle::brute_force_arena({{"a", 10, {0, 2}}, {"b", 20, {1, 3}}}) == 30);
  // A chain where first-fit by order would be suboptimal is still solved.
  const std::vector<BufferLifetime> chain{
      {"a", 4, {0, 1}}, {"b", 8, {1, 2}}, {"c", 4, {2, 3}}, {"d", 8, {3, 4}}};
  CHECK(oracle::brute_force_arena(chain) == 12);
  CHECK(oracle::brute_force_arena({}) == 0);
  std::vector<BufferLifetime> seven(7, BufferLifetime{"x", 1, {0, 0}});
  CHECK_THROWS(oracle::brute_force_arena(seven));
}

TEST_CASE("small kernel sweeps pass") {
  for (checks::Kernel k : checks::all_kernels()) {
    CAPTURE(checks::to_string(k));
    const auto r = checks::kernel_sweep(k, 20, 99);
    CAPTURE(r.first_failure);
    CHECK(r.ok());
  }
}

TEST_CASE("small gradient sweep passes") {
  const auto r = checks::gradient_sweep(5, 99);
  CAPTURE(r.first_failure);
  CHECK(r.ok());
}

TEST_CASE("small sparse-rate sweep passes") {
  const auto r = checks::sparse_rate_sweep(500, 99);
  CAPTURE(r.first_failure);
  CHECK(r.ok());
}
