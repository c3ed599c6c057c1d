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

#include <cstddef>
#include <span>
#include <vector>

#include "kpn/tensor.hpp"

// Differentiable primitives used by the network. Every forward has a matching
// backward that maps an upstream gradient (shaped like the forward output) to
// gradients for each input.
namespace kpn::ops {

Tensor relu_forward(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& upstream);

// y = W x + b with W [out, in], x [in], b [out].
Tensor linear_forward(const Tensor& weight, const Tensor& bias, const Tensor& x);
struct LinearGrads {
  Tensor weight;
  Tensor bias;
  Tensor input;
};
LinearGrads linear_backward(const Tensor& weight, const Tensor& x, const Tensor& upstream);

// Max-subtracted softmax over a 1-d vector.
std::vector<double> softmax(std::span<const double> logits);
Tensor softmax_forward(const Tensor& logits);
// Vector-Jacobian product of softmax given its output p: p * (u - <p, u>).
std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> upstream);
Tensor softmax_backward(const Tensor& probs, const Tensor& upstream);

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Samples every channel of f [C, H, W] at each point (feature coordinates,
// x along W, y along H) with bilinear weights. Returns [N, C].
Tensor bilinear_pool_forward(const Tensor& f, std::span<const Point> pts);
// Scatters upstream [N, C] back onto the grid with the same four weights;
// coincident points accumulate.
Tensor bilinear_pool_backward(std::span<const std::size_t> f_dims, std::span<const Point> pts,
                              const Tensor& upstream);

// Per-column mean over a subset of rows of t [N, C]. Returns [C].
Tensor mean_rows_forward(const Tensor& t, std::span<const std::size_t> rows);
Tensor mean_rows_backward(std::span<const std::size_t> t_dims, std::span<const std::size_t> rows,
                          const Tensor& upstream);

// Per-channel spatial mean of f [C, H, W]. Returns [C].
Tensor global_avg_pool_forward(const Tensor& f);
Tensor global_avg_pool_backward(std::span<const std::size_t> f_dims, const Tensor& upstream);

}  // namespace kpn::ops
