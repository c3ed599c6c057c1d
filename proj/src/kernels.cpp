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

#include "kpn/kernels.hpp"

#include <stdexcept>
#include <string>

namespace kpn::kernels {

namespace {

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, kh, kw, stride, pad_y, pad_x, h_out, w_out;
};

ConvGeometry geometry(const Tensor& input, const Tensor& kernel, std::size_t stride) {
  ConvGeometry g{};
  g.c_in = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.c_out = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad_y = g.kh / 2;
  g.pad_x = g.kw / 2;
  g.h_out = g.h / stride;
  g.w_out = g.w / stride;
  return g;
}

// Input row/column touched by output position `o` and tap `k`; false when it
// falls in the zero padding.
inline bool tap(std::size_t o, std::size_t k, std::size_t stride, std::size_t pad, std::size_t extent,
                std::size_t& i) {
  const auto pos = static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
  if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(extent)) return false;
  i = static_cast<std::size_t>(pos);
  return true;
}

}  // namespace

void check_conv_shapes(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
  if (input.rank() != 3) throw std::invalid_argument("conv2d: input must be [C_in,H,W], got " + shape_string(input.dims()));
  if (kernel.rank() != 4) throw std::invalid_argument("conv2d: kernel must be [C_out,C_in,kh,kw], got " + shape_string(kernel.dims()));
  if (kernel.dim(1) != input.dim(0)) throw std::invalid_argument("conv2d: kernel C_in does not match input channels");
  if (kernel.dim(2) % 2 == 0 || kernel.dim(3) % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
  if (stride == 0 || input.dim(1) % stride != 0 || input.dim(2) % stride != 0) {
    throw std::invalid_argument("conv2d: spatial size " + shape_string(input.dims()) +
                                " not divisible by stride " + std::to_string(stride));
  }
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) throw std::invalid_argument("conv2d: bias must be [C_out]");
}

namespace reference {

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
  check_conv_shapes(input, kernel, bias, stride);
  const auto g = geometry(input, kernel, stride);
  Tensor out({g.c_out, g.h_out, g.w_out});
  for (std::size_t co = 0; co < g.c_out; ++co) {
    for (std::size_t oy = 0; oy < g.h_out; ++oy) {
      for (std::size_t ox = 0; ox < g.w_out; ++ox) {
        double sum = bias[co];
        for (std::size_t ci = 0; ci < g.c_in; ++ci) {
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            std::size_t iy = 0;
            if (!tap(oy, ky, g.stride, g.pad_y, g.h, iy)) continue;
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              std::size_t ix = 0;
              if (!tap(ox, kx, g.stride, g.pad_x, g.w, ix)) continue;
              sum += kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] * input(ci, iy, ix);
            }
          }
        }
        out(co, oy, ox) = sum;
      }
    }
  }
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                          std::size_t stride, bool need_input_grad) {
  const auto g = geometry(input, kernel, stride);
  check_conv_shapes(input, kernel, Tensor({g.c_out}), stride);
  require_shape(upstream, {g.c_out, g.h_out, g.w_out}, "conv2d_backward upstream");
  ConvGrads grads{Tensor::zeros_like(input), Tensor::zeros_like(kernel), Tensor({g.c_out})};
  for (std::size_t co = 0; co < g.c_out; ++co) {
    for (std::size_t oy = 0; oy < g.h_out; ++oy) {
      for (std::size_t ox = 0; ox < g.w_out; ++ox) {
        const double up = upstream(co, oy, ox);
        grads.bias[co] += up;
        for (std::size_t ci = 0; ci < g.c_in; ++ci) {
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            std::size_t iy = 0;
            if (!tap(oy, ky, g.stride, g.pad_y, g.h, iy)) continue;
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              std::size_t ix = 0;
              if (!tap(ox, kx, g.stride, g.pad_x, g.w, ix)) continue;
              const std::size_t widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
              grads.kernel[widx] += up * input(ci, iy, ix);
              if (need_input_grad) grads.input(ci, iy, ix) += up * kernel[widx];
            }
          }
        }
      }
    }
  }
  return grads;
}

}  // namespace reference

namespace omp {

// Output channels are independent. Within a channel the taps are hoisted out
// of the spatial loops, but each output still accumulates bias first and
// then (ci, ky, kx) in order, exactly like the reference.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
  check_conv_shapes(input, kernel, bias, stride);
  const auto g = geometry(input, kernel, stride);
  Tensor out({g.c_out, g.h_out, g.w_out});
  const double* in = input.data();
  const double* wt = kernel.data();
  double* o = out.data();
  const auto c_out = static_cast<std::ptrdiff_t>(g.c_out);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t co_i = 0; co_i < c_out; ++co_i) {
    const auto co = static_cast<std::size_t>(co_i);
    double* oc = o + co * g.h_out * g.w_out;
    for (std::size_t i = 0; i < g.h_out * g.w_out; ++i) oc[i] = bias[co];
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
      const double* ic = in + ci * g.h * g.w;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const double wv = wt[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
          for (std::size_t oy = 0; oy < g.h_out; ++oy) {
            std::size_t iy = 0;
            if (!tap(oy, ky, g.stride, g.pad_y, g.h, iy)) continue;
            const double* irow = ic + iy * g.w;
            double* orow = oc + oy * g.w_out;
            for (std::size_t ox = 0; ox < g.w_out; ++ox) {
              std::size_t ix = 0;
              if (!tap(ox, kx, g.stride, g.pad_x, g.w, ix)) continue;
              orow[ox] += wv * irow[ix];
            }
          }
        }
      }
    }
  }
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                          std::size_t stride, bool need_input_grad) {
  const auto g = geometry(input, kernel, stride);
  check_conv_shapes(input, kernel, Tensor({g.c_out}), stride);
  require_shape(upstream, {g.c_out, g.h_out, g.w_out}, "conv2d_backward upstream");
  ConvGrads grads{Tensor::zeros_like(input), Tensor::zeros_like(kernel), Tensor({g.c_out})};
  const double* in = input.data();
  const double* wt = kernel.data();
  const double* up = upstream.data();
  const auto c_out = static_cast<std::ptrdiff_t>(g.c_out);
  const auto c_in = static_cast<std::ptrdiff_t>(g.c_in);

  // Kernel and bias gradients: each weight sums over (oy, ox) in order.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t co_i = 0; co_i < c_out; ++co_i) {
    const auto co = static_cast<std::size_t>(co_i);
    const double* uc = up + co * g.h_out * g.w_out;
    double b = 0.0;
    for (std::size_t i = 0; i < g.h_out * g.w_out; ++i) b += uc[i];
    grads.bias[co] = b;
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
      const double* ic = in + ci * g.h * g.w;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          double acc = 0.0;
          for (std::size_t oy = 0; oy < g.h_out; ++oy) {
            std::size_t iy = 0;
            if (!tap(oy, ky, g.stride, g.pad_y, g.h, iy)) continue;
            for (std::size_t ox = 0; ox < g.w_out; ++ox) {
              std::size_t ix = 0;
              if (!tap(ox, kx, g.stride, g.pad_x, g.w, ix)) continue;
              acc += uc[oy * g.w_out + ox] * ic[iy * g.w + ix];
            }
          }
          grads.kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] = acc;
        }
      }
    }
  }

  if (!need_input_grad) return grads;

  // Input gradient: partition over input channels; per element the
  // contributions arrive in (co, oy, ox, ky, kx) order as in the reference.
  double* gin = grads.input.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci_i = 0; ci_i < c_in; ++ci_i) {
    const auto ci = static_cast<std::size_t>(ci_i);
    double* gc = gin + ci * g.h * g.w;
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const double* uc = up + co * g.h_out * g.w_out;
      const double* wc = wt + (co * g.c_in + ci) * g.kh * g.kw;
      for (std::size_t oy = 0; oy < g.h_out; ++oy) {
        for (std::size_t ox = 0; ox < g.w_out; ++ox) {
          const double u = uc[oy * g.w_out + ox];
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            std::size_t iy = 0;
            if (!tap(oy, ky, g.stride, g.pad_y, g.h, iy)) continue;
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              std::size_t ix = 0;
              if (!tap(ox, kx, g.stride, g.pad_x, g.w, ix)) continue;
              gc[iy * g.w + ix] += u * wc[ky * g.kw + kx];
            }
          }
        }
      }
    }
  }
  return grads;
}

}  // namespace omp

}  // namespace kpn::kernels
