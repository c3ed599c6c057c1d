// Copyright 2026 The kpn-coherence Authors. All Rights Reserved.
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

#include <cmath>
#include <stdexcept>
#include <random>

#include "doctest.h"
#include "kpn/ops.hpp"
#include "kpn/tensor.hpp"

using namespace kpn;

namespace {

Tensor iota_tensor(std::vector<std::size_t> dims) {
  Tensor t(std::move(dims));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i) * 0.5 - 3.0;
  return t;
}

}  // namespace

TEST_CASE("tensor construction checks lengths") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5, 0.0)), std::invalid_argument);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t(1, 2) == 1.5);
  CHECK(shape_string(t.dims()) == "[2,3]");
  CHECK_THROWS_AS(require_shape(t, {3, 2}, "t"), std::invalid_argument);
  Tensor u = t;
  u.add(t);
  CHECK(u(0, 0) == 3.0);
  CHECK_THROWS_AS(u.add(Tensor({6})), std::invalid_argument);
}

TEST_CASE("relu") {
  const Tensor x({2}, std::vector<double>{-1.0, 2.0});
  const auto y = ops::relu_forward(x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 2.0);
  const auto g = ops::relu_backward(x, Tensor({2}, std::vector<double>{5.0, 7.0}));
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 7.0);
}

TEST_CASE("linear") {
  const Tensor w({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor b({2}, std::vector<double>{0.5, -0.5});
  const Tensor x({3}, std::vector<double>{1, 0, -1});
  const auto y = ops::linear_forward(w, b, x);
  CHECK(y[0] == 1 - 3 + 0.5);
  CHECK(y[1] == 4 - 6 - 0.5);
  const auto g = ops::linear_backward(w, x, Tensor({2}, std::vector<double>{1.0, 2.0}));
  CHECK(g.bias[1] == 2.0);
  CHECK(g.weight(1, 2) == -2.0);
  CHECK(g.input[0] == 1 * 1 + 2 * 4);
  CHECK_THROWS_AS(ops::linear_forward(w, b, Tensor({2})), std::invalid_argument);
}

TEST_CASE("softmax") {
  const auto u = ops::softmax(std::vector<double>(5, 3.7));
  for (double v : u) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 3.0);
  std::vector<double> z(6);
  for (double& v : z) v = n(rng);
  auto shifted = z;
  for (double& v : shifted) v += 123.0;
  const auto p = ops::softmax(z), q = ops::softmax(shifted);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s += p[i];
    CHECK(std::abs(p[i] - q[i]) < 1e-9);
  }
  CHECK(std::abs(s - 1.0) < 1e-9);

  const auto big = ops::softmax(std::vector<double>{1000.0, -1000.0});
  CHECK(big[0] == 1.0);
  CHECK(big[1] == 0.0);
}

TEST_CASE("bilinear pooling forward") {
  const Tensor f = iota_tensor({2, 5, 4});  // C=2, H=5, W=4
  const std::vector<ops::Point> node{{2.0, 3.0}};
  const auto at_node = ops::bilinear_pool_forward(f, node);
  CHECK(at_node(0, 0) == f(0, 3, 2));
  CHECK(at_node(0, 1) == f(1, 3, 2));

  const std::vector<ops::Point> mid{{1.5, 1.5}};
  const auto m = ops::bilinear_pool_forward(f, mid);
  for (std::size_t c = 0; c < 2; ++c) {
    const double expect = (f(c, 1, 1) + f(c, 1, 2) + f(c, 2, 1) + f(c, 2, 2)) / 4.0;
    CHECK(m(0, c) == doctest::Approx(expect).epsilon(1e-15));
  }

  const Tensor constant({3, 4, 4}, 2.25);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  std::vector<ops::Point> pts(10);
  for (auto& p : pts) p = {u(rng), u(rng)};
  pts.push_back({3.0, 3.0});
  const auto c = ops::bilinear_pool_forward(constant, pts);
  for (double v : c.values()) CHECK(v == doctest::Approx(2.25).epsilon(1e-15));

  const std::vector<ops::Point> outside{{3.5, 1.0}};
  CHECK_THROWS_AS(ops::bilinear_pool_forward(constant, outside), std::out_of_range);
  const std::vector<ops::Point> negative{{0.0, -0.1}};
  CHECK_THROWS_AS(ops::bilinear_pool_forward(constant, negative), std::out_of_range);
}

TEST_CASE("bilinear pooling backward") {
  const std::vector<std::size_t> dims{2, 4, 4};
  const std::vector<ops::Point> one{{1.0, 2.0}};
  const auto g = ops::bilinear_pool_backward(dims, one, Tensor({1, 2}, 1.0));
  double total = 0.0;
  for (double v : g.values()) total += v;
  CHECK(total == 2.0);
  CHECK(g(0, 2, 1) == 1.0);
  CHECK(g(1, 2, 1) == 1.0);

  const std::vector<ops::Point> twice{{1.0, 2.0}, {1.0, 2.0}};
  const auto g2 = ops::bilinear_pool_backward(dims, twice, Tensor({2, 2}, 1.0));
  CHECK(g2(0, 2, 1) == 2.0);

  // The four weights of any in-bounds point sum to one.
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 50; ++i) {
    const std::vector<ops::Point> p{{u(rng), u(rng)}};
    const auto w = ops::bilinear_pool_backward(std::vector<std::size_t>{1, 4, 4}, p, Tensor({1, 1}, 1.0));
    double s = 0.0;
    for (double v : w.values()) s += v;
    CHECK(s == 1.0);
  }
}

TEST_CASE("mean_rows") {
  const Tensor t = iota_tensor({4, 3});
  const std::vector<std::size_t> single{2};
  const auto r = ops::mean_rows_forward(t, single);
  for (std::size_t c = 0; c < 3; ++c) CHECK(r[c] == t(2, c));

  const Tensor k({4, 3}, -1.25);
  const std::vector<std::size_t> all{0, 1, 2, 3};
  const auto km = ops::mean_rows_forward(k, all);
  for (double v : km.values()) CHECK(v == -1.25);

  const std::vector<std::size_t> sub{1, 3};
  const auto g = ops::mean_rows_backward(t.dims(), sub, Tensor({3}, 4.0));
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(g(0, c) == 0.0);
    CHECK(g(1, c) == 2.0);
    CHECK(g(2, c) == 0.0);
    CHECK(g(3, c) == 2.0);
  }
  CHECK_THROWS_AS(ops::mean_rows_forward(t, std::vector<std::size_t>{}), std::invalid_argument);
  CHECK_THROWS_AS(ops::mean_rows_forward(t, std::vector<std::size_t>{4}), std::out_of_range);
}

TEST_CASE("global average pooling") {
  const Tensor f = iota_tensor({2, 3, 3});
  const auto g = ops::global_avg_pool_forward(f);
  double s0 = 0.0;
  for (std::size_t i = 0; i < 9; ++i) s0 += f[i];
  CHECK(g[0] == doctest::Approx(s0 / 9.0).epsilon(1e-15));
  const auto b = ops::global_avg_pool_backward(f.dims(), Tensor({2}, std::vector<double>{9.0, 18.0}));
  CHECK(b(0, 1, 1) == 1.0);
  CHECK(b(1, 2, 0) == 2.0);
}
