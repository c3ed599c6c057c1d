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

#include "doctest.h"
#include "kpn/gradcheck.hpp"

using namespace kpn;

namespace {

GradcheckCase square_case(double gradient_bias) {
  GradcheckCase c;
  Tensor x({3});
  x[0] = 0.5;
  x[1] = -1.25;
  x[2] = 2.0;
  c.inputs = {x};
  c.value = [](const std::vector<Tensor>& in) {
    double s = 0.0;
    for (double v : in[0].values()) s += v * v;
    return s;
  };
  c.gradient = [gradient_bias](const std::vector<Tensor>& in) {
    Tensor g = in[0];
    for (double& v : g.values()) v = 2.0 * v + gradient_bias;
    return std::vector<Tensor>{g};
  };
  return c;
}

}  // namespace

TEST_CASE("relative error on a quadratic") {
  CHECK(gradcheck_relative_error(square_case(0.0), 1e-5) < 1e-9);
  // Numeric gradient max is 4; a 0.01 bias gives 0.0025.
  CHECK(gradcheck_relative_error(square_case(0.01), 1e-5) == doctest::Approx(0.0025).epsilon(1e-6));

  auto wrong_sign = square_case(0.0);
  wrong_sign.gradient = [](const std::vector<Tensor>& in) {
    Tensor g = in[0];
    for (double& v : g.values()) v = -2.0 * v;
    return std::vector<Tensor>{g};
  };
  CHECK(gradcheck_relative_error(wrong_sign, 1e-5) > 1.0);

  auto non_finite = square_case(0.0);
  non_finite.value = [](const std::vector<Tensor>&) { return std::nan(""); };
  CHECK(std::isinf(gradcheck_relative_error(non_finite, 1e-5)));
}

TEST_CASE("constant inputs are skipped") {
  auto c = square_case(0.0);
  c.inputs.push_back(Tensor({2}, 7.0));
  const auto inner = c.gradient;
  c.gradient = [inner](const std::vector<Tensor>& in) {
    auto g = inner(in);
    g.emplace_back();
    return g;
  };
  CHECK(gradcheck_relative_error(c, 1e-5) < 1e-9);
}

TEST_CASE("every op passes for two seeds") {
  GradcheckOptions opts;
  opts.instances = 5;
  for (const auto& op : gradcheck_ops()) {
    for (std::uint64_t seed : {0u, 1u}) {
      const auto r = run_gradcheck(op, seed, opts);
      INFO(op, " seed ", seed, " error ", r.max_rel_error);
      CHECK(r.passed());
      CHECK(r.instances == 5);
    }
  }
  CHECK(gradcheck_ops().size() == 13);
}

TEST_CASE("cases are reproducible") {
  const auto a = make_gradcheck_case("kpn_model", 3, 1);
  const auto b = make_gradcheck_case("kpn_model", 3, 1);
  REQUIRE(a.inputs.size() == b.inputs.size());
  for (std::size_t i = 0; i < a.inputs.size(); ++i) CHECK(a.inputs[i] == b.inputs[i]);
  CHECK(a.value(a.inputs) == b.value(b.inputs));
  CHECK_THROWS_AS(make_gradcheck_case("no_such_op", 0, 0), std::invalid_argument);
}
