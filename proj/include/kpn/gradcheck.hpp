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

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kpn/tensor.hpp"

// Finite-difference verification of every hand-written backward pass.
namespace kpn {

struct GradcheckOptions {
  int instances = 20;
  double step = 1e-5;
  double tolerance = 1e-5;
};

// A scalar function of some tensors plus its claimed gradient. Inputs whose
// gradient slot is left empty are treated as constants.
struct GradcheckCase {
  std::vector<Tensor> inputs;
  std::function<double(const std::vector<Tensor>&)> value;
  std::function<std::vector<Tensor>(const std::vector<Tensor>&)> gradient;
};

// Central differences over every coordinate of every differentiable input.
// Returns max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, 1e-8).
double gradcheck_relative_error(const GradcheckCase& c, double step);

struct GradcheckResult {
  std::string op;
  std::uint64_t seed = 0;
  int instances = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

// conv2d, relu, linear, softmax, bilinear_pool, mean_rows, global_avg_pool,
// weighted_ce, incoherence, gmm_log_prob, combined_loss, kpn_model,
// global_model.
const std::vector<std::string>& gradcheck_ops();

// Random case for `op`. Throws std::invalid_argument on an unknown name.
GradcheckCase make_gradcheck_case(std::string_view op, std::uint64_t seed, int instance);

GradcheckResult run_gradcheck(std::string_view op, std::uint64_t seed, const GradcheckOptions& opts = {});

}  // namespace kpn
