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

#include "kpn/tensor.hpp"

// Convolution kernels, the hot loops of the backbone.
//
// Each kernel exists twice: a plain serial reference in `reference`, and an
// OpenMP version in `omp` that partitions work so that every output element
// receives its contributions in the same order as the reference. The two are
// therefore bitwise identical, which the kernel tests assert. The un-namespaced
// entry points forward to the OpenMP version.
//
// Geometry: same zero padding (pad = k/2, odd k) and stride s, so an input of
// H x W produces H/s x W/s. H and W must be divisible by s.
namespace kpn::kernels {

struct ConvGrads {
  Tensor input;   // [C_in, H, W]
  Tensor kernel;  // [C_out, C_in, kh, kw]
  Tensor bias;    // [C_out]
};

namespace reference {
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride);
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                          std::size_t stride, bool need_input_grad = true);
}  // namespace reference

namespace omp {
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride);
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                          std::size_t stride, bool need_input_grad = true);
}  // namespace omp

inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                             std::size_t stride) {
  return omp::conv2d_forward(input, kernel, bias, stride);
}
inline ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                                 std::size_t stride, bool need_input_grad = true) {
  return omp::conv2d_backward(input, kernel, upstream, stride, need_input_grad);
}

// Throws std::invalid_argument if the shapes are not a valid convolution.
void check_conv_shapes(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride);

}  // namespace kpn::kernels
