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

#include "kpn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kpn::ops {

namespace {

struct BilinearTap {
  std::size_t x0, x1, y0, y1;
  double w00, w01, w10, w11;  // w{row}{col}: (y0,x0) (y0,x1) (y1,x0) (y1,x1)
};

BilinearTap bilinear_tap(const Point& p, std::size_t h, std::size_t w) {
  if (!(p.x >= 0.0 && p.y >= 0.0 && p.x <= static_cast<double>(w - 1) &&
        p.y <= static_cast<double>(h - 1))) {
    throw std::out_of_range("bilinear_pool: point (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                            ") outside feature map " + std::to_string(w) + "x" + std::to_string(h));
  }
  BilinearTap t{};
  t.x0 = static_cast<std::size_t>(std::floor(p.x));
  t.y0 = static_cast<std::size_t>(std::floor(p.y));
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  const double dx = p.x - static_cast<double>(t.x0);
  const double dy = p.y - static_cast<double>(t.y0);
  t.w00 = (1.0 - dx) * (1.0 - dy);
  t.w01 = dx * (1.0 - dy);
  t.w10 = (1.0 - dx) * dy;
  t.w11 = dx * dy;
  return t;
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(t.dims()));
  }
}

}  // namespace

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& upstream) {
  if (!x.same_shape(upstream)) throw std::invalid_argument("relu_backward: shape mismatch");
  Tensor g = upstream;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(x[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

Tensor linear_forward(const Tensor& weight, const Tensor& bias, const Tensor& x) {
  require_rank(weight, 2, "linear weight");
  const std::size_t out = weight.dim(0);
  const std::size_t in = weight.dim(1);
  require_shape(bias, {out}, "linear bias");
  require_shape(x, {in}, "linear input");
  Tensor y({out});
  for (std::size_t o = 0; o < out; ++o) {
    double s = bias[o];
    for (std::size_t i = 0; i < in; ++i) s += weight(o, i) * x[i];
    y[o] = s;
  }
  return y;
}

LinearGrads linear_backward(const Tensor& weight, const Tensor& x, const Tensor& upstream) {
  require_rank(weight, 2, "linear weight");
  const std::size_t out = weight.dim(0);
  const std::size_t in = weight.dim(1);
  require_shape(x, {in}, "linear input");
  require_shape(upstream, {out}, "linear upstream");
  LinearGrads g{Tensor::zeros_like(weight), upstream, Tensor({in})};
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) {
      g.weight(o, i) = upstream[o] * x[i];
      g.input[i] += upstream[o] * weight(o, i);
    }
  }
  return g;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

Tensor softmax_forward(const Tensor& logits) {
  require_rank(logits, 1, "softmax");
  return Tensor(logits.dims(), softmax(logits.values()));
}

std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> upstream) {
  if (probs.size() != upstream.size()) throw std::invalid_argument("softmax_backward: length mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * upstream[i];
  std::vector<double> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = probs[i] * (upstream[i] - dot);
  return g;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& upstream) {
  require_rank(probs, 1, "softmax_backward");
  return Tensor(probs.dims(), softmax_backward(probs.values(), upstream.values()));
}

Tensor bilinear_pool_forward(const Tensor& f, std::span<const Point> pts) {
  require_rank(f, 3, "bilinear_pool feature map");
  const std::size_t c = f.dim(0);
  const std::size_t h = f.dim(1);
  const std::size_t w = f.dim(2);
  if (pts.empty()) throw std::invalid_argument("bilinear_pool: no points");
  Tensor out({pts.size(), c});
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const auto t = bilinear_tap(pts[n], h, w);
    for (std::size_t ch = 0; ch < c; ++ch) {
      out(n, ch) = t.w00 * f(ch, t.y0, t.x0) + t.w01 * f(ch, t.y0, t.x1) + t.w10 * f(ch, t.y1, t.x0) +
                   t.w11 * f(ch, t.y1, t.x1);
    }
  }
  return out;
}

Tensor bilinear_pool_backward(std::span<const std::size_t> f_dims, std::span<const Point> pts,
                              const Tensor& upstream) {
  if (f_dims.size() != 3) throw std::invalid_argument("bilinear_pool_backward: f must be rank 3");
  const std::size_t c = f_dims[0];
  const std::size_t h = f_dims[1];
  const std::size_t w = f_dims[2];
  require_shape(upstream, {pts.size(), c}, "bilinear_pool_backward upstream");
  Tensor g({c, h, w});
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const auto t = bilinear_tap(pts[n], h, w);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double u = upstream(n, ch);
      g(ch, t.y0, t.x0) += t.w00 * u;
      g(ch, t.y0, t.x1) += t.w01 * u;
      g(ch, t.y1, t.x0) += t.w10 * u;
      g(ch, t.y1, t.x1) += t.w11 * u;
    }
  }
  return g;
}

Tensor mean_rows_forward(const Tensor& t, std::span<const std::size_t> rows) {
  require_rank(t, 2, "mean_rows");
  if (rows.empty()) throw std::invalid_argument("mean_rows: empty row subset");
  const std::size_t c = t.dim(1);
  Tensor out({c});
  for (std::size_t r : rows) {
    if (r >= t.dim(0)) throw std::out_of_range("mean_rows: row index out of range");
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] += t(r, ch);
  }
  out.scale(1.0 / static_cast<double>(rows.size()));
  return out;
}

Tensor mean_rows_backward(std::span<const std::size_t> t_dims, std::span<const std::size_t> rows,
                          const Tensor& upstream) {
  if (t_dims.size() != 2) throw std::invalid_argument("mean_rows_backward: t must be rank 2");
  if (rows.empty()) throw std::invalid_argument("mean_rows: empty row subset");
  const std::size_t c = t_dims[1];
  require_shape(upstream, {c}, "mean_rows_backward upstream");
  Tensor g({t_dims[0], c});
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r : rows) {
    if (r >= t_dims[0]) throw std::out_of_range("mean_rows: row index out of range");
    for (std::size_t ch = 0; ch < c; ++ch) g(r, ch) += upstream[ch] * inv;
  }
  return g;
}

Tensor global_avg_pool_forward(const Tensor& f) {
  require_rank(f, 3, "global_avg_pool");
  const std::size_t c = f.dim(0);
  const std::size_t hw = f.dim(1) * f.dim(2);
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += f[ch * hw + i];
    out[ch] = s / static_cast<double>(hw);
  }
  return out;
}

Tensor global_avg_pool_backward(std::span<const std::size_t> f_dims, const Tensor& upstream) {
  if (f_dims.size() != 3) throw std::invalid_argument("global_avg_pool_backward: f must be rank 3");
  require_shape(upstream, {f_dims[0]}, "global_avg_pool_backward upstream");
  Tensor g({f_dims[0], f_dims[1], f_dims[2]});
  const std::size_t hw = f_dims[1] * f_dims[2];
  for (std::size_t ch = 0; ch < f_dims[0]; ++ch) {
    const double v = upstream[ch] / static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] = v;
  }
  return g;
}

}  // namespace kpn::ops
