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

#include "kpn/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "kpn/kernels.hpp"

namespace kpn {

namespace {

Tensor uniform_init(std::vector<std::size_t> dims, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(dims));
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-a, a);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

template <typename T>
std::vector<std::size_t> all_rows(const T& n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return rows;
}

}  // namespace

std::string_view to_string(Compartment c) {
  switch (c) {
    case Compartment::fl: return "FL";
    case Compartment::fm: return "FM";
    case Compartment::tl: return "TL";
    case Compartment::tm: return "TM";
  }
  return "?";
}

Compartment parse_compartment(std::string_view s) {
  if (s == "FL") return Compartment::fl;
  if (s == "FM") return Compartment::fm;
  if (s == "TL") return Compartment::tl;
  if (s == "TM") return Compartment::tm;
  throw std::invalid_argument("unknown compartment '" + std::string(s) + "'");
}

void KeypointSet::validate(std::size_t image_side) const {
  std::array<bool, kNumCompartments> seen{};
  const double hi = static_cast<double>(image_side - 1);
  for (const auto& p : points) {
    if (!(p.x >= 0.0 && p.y >= 0.0 && p.x <= hi && p.y <= hi)) {
      throw std::out_of_range("keypoint (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                              ") outside image of side " + std::to_string(image_side));
    }
    seen[static_cast<std::size_t>(p.compartment)] = true;
  }
  for (std::size_t c = 0; c < kNumCompartments; ++c) {
    if (!seen[c]) {
      throw std::invalid_argument("keypoint set has no " + std::string(to_string(static_cast<Compartment>(c))) +
                                  " keypoint");
    }
  }
}

std::array<std::vector<std::size_t>, kNumCompartments> KeypointSet::rows_by_compartment() const {
  std::array<std::vector<std::size_t>, kNumCompartments> rows;
  for (std::size_t i = 0; i < points.size(); ++i) rows[static_cast<std::size_t>(points[i].compartment)].push_back(i);
  return rows;
}

std::map<std::int64_t, KeypointSet> read_keypoints_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open keypoints file " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id,idx,x,y,compartment") throw std::runtime_error(path.string() + ": unexpected header '" + line + "'");
  std::map<std::int64_t, std::vector<std::pair<long, Keypoint>>> staged;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string f[5];
    for (auto& field : f) {
      if (!std::getline(is, field, ',')) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
      }
    }
    try {
      Keypoint kp{std::stod(f[2]), std::stod(f[3]), parse_compartment(f[4])};
      staged[std::stoll(f[0])].emplace_back(std::stol(f[1]), kp);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::map<std::int64_t, KeypointSet> out;
  for (auto& [id, pts] : staged) {
    std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    auto& set = out[id];
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (pts[i].first != static_cast<long>(i)) {
        throw std::runtime_error(path.string() + ": keypoint indices for id " + std::to_string(id) +
                                 " are not 0..N-1");
      }
      set.points.push_back(pts[i].second);
    }
  }
  return out;
}

void write_keypoints_csv(const std::filesystem::path& path,
                         const std::vector<std::pair<std::int64_t, const KeypointSet*>>& sets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write keypoints file " + path.string());
  out << "id,idx,x,y,compartment\n";
  char buf[64];
  for (const auto& [id, set] : sets) {
    for (std::size_t i = 0; i < set->points.size(); ++i) {
      const auto& p = set->points[i];
      out << id << ',' << i << ',';
      std::snprintf(buf, sizeof buf, "%.17g", p.x);
      out << buf << ',';
      std::snprintf(buf, sizeof buf, "%.17g", p.y);
      out << buf << ',' << to_string(p.compartment) << '\n';
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<Tensor*> ModelParams::tensors() {
  std::vector<Tensor*> out{&conv1_w, &conv1_b, &conv2_w, &conv2_b};
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    out.push_back(&head_w[h]);
    out.push_back(&head_b[h]);
  }
  return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
  std::vector<const Tensor*> out{&conv1_w, &conv1_b, &conv2_w, &conv2_b};
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    out.push_back(&head_w[h]);
    out.push_back(&head_b[h]);
  }
  return out;
}

std::vector<std::string> ModelParams::names() {
  std::vector<std::string> out{"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"};
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const std::string name(kSchema.head_names[h]);
    out.push_back("head." + name + ".weight");
    out.push_back("head." + name + ".bias");
  }
  return out;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  for (Tensor* t : z.tensors()) t->fill(0.0);
  return z;
}

void ModelParams::add(const ModelParams& other) {
  auto dst = tensors();
  const auto src = other.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->add(*src[i]);
}

void ModelParams::scale(double factor) {
  for (Tensor* t : tensors()) t->scale(factor);
}

Model make_model(Pooling pooling, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model m;
  m.pooling = pooling;
  auto& p = m.params;
  p.conv1_w = uniform_init({kConv1Channels, 1, 3, 3}, 9, rng);
  p.conv1_b = Tensor({kConv1Channels});
  p.conv2_w = uniform_init({kFeatureChannels, kConv1Channels, 3, 3}, kConv1Channels * 9, rng);
  p.conv2_b = Tensor({kFeatureChannels});
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    p.head_w[h] = uniform_init({kSchema.cardinality(h), kFeatureChannels}, kFeatureChannels, rng);
    p.head_b[h] = Tensor({kSchema.cardinality(h)});
  }
  return m;
}

ForwardResult forward(const Model& m, const Tensor& image, const KeypointSet* kps) {
  if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) != image.dim(2)) {
    throw std::invalid_argument("forward: image must be [1,S,S], got " + shape_string(image.dims()));
  }
  const std::size_t side = image.dim(1);
  if (side % kStrideTotal != 0) throw std::invalid_argument("forward: image side must be divisible by 4");

  ForwardResult r;
  auto& c = r.cache;
  const auto& p = m.params;
  c.image = image;
  c.pre1 = kernels::conv2d_forward(image, p.conv1_w, p.conv1_b, kConvStride);
  c.act1 = ops::relu_forward(c.pre1);
  c.pre2 = kernels::conv2d_forward(c.act1, p.conv2_w, p.conv2_b, kConvStride);
  c.act2 = ops::relu_forward(c.pre2);

  if (m.pooling == Pooling::keypoint) {
    if (kps == nullptr) throw std::invalid_argument("forward: keypoint pooling needs keypoints");
    kps->validate(side);
    c.feature_points.reserve(kps->points.size());
    // The last feature row/column covers the last kStrideTotal image pixels;
    // points past its center are clamped onto it.
    const double fmax = static_cast<double>(c.act2.dim(2) - 1);
    for (const auto& kp : kps->points) {
      c.feature_points.push_back({std::min(kp.x / static_cast<double>(kStrideTotal), fmax),
                                  std::min(kp.y / static_cast<double>(kStrideTotal), fmax)});
    }
    c.compartment_rows = kps->rows_by_compartment();
    c.pooled = ops::bilinear_pool_forward(c.act2, c.feature_points);
    const auto rows = all_rows(kps->points.size());
    const Tensor combined = ops::mean_rows_forward(c.pooled, rows);
    c.head_inputs[kHeadKl] = combined;
    c.head_inputs[kHeadJsnL] = combined;
    c.head_inputs[kHeadJsnM] = combined;
    for (std::size_t comp = 0; comp < kNumCompartments; ++comp) {
      c.head_inputs[kHeadOFl + comp] = ops::mean_rows_forward(c.pooled, c.compartment_rows[comp]);
    }
  } else {
    const Tensor g = ops::global_avg_pool_forward(c.act2);
    for (auto& in : c.head_inputs) in = g;
  }

  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const Tensor z = ops::linear_forward(p.head_w[h], p.head_b[h], c.head_inputs[h]);
    r.logits[h].assign(z.values().begin(), z.values().end());
    r.probs.probs[h] = ops::softmax(r.logits[h]);
  }
  c.probs = r.probs;
  return r;
}

ModelParams backward(const Model& m, const ForwardCache& c, const HeadLogits& logit_grads) {
  const auto& p = m.params;
  ModelParams g;
  std::array<Tensor, kNumHeads> input_grads;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    if (logit_grads[h].size() != kSchema.cardinality(h)) {
      throw std::invalid_argument("backward: logit gradient for head " + std::string(kSchema.head_names[h]) +
                                  " has wrong length");
    }
    const Tensor up({kSchema.cardinality(h)}, logit_grads[h]);
    auto lg = ops::linear_backward(p.head_w[h], c.head_inputs[h], up);
    g.head_w[h] = std::move(lg.weight);
    g.head_b[h] = std::move(lg.bias);
    input_grads[h] = std::move(lg.input);
  }

  Tensor grad_f;
  if (m.pooling == Pooling::keypoint) {
    if (c.pooled.empty()) throw std::invalid_argument("backward: cache does not come from a keypoint forward");
    const auto n = c.pooled.dim(0);
    const auto rows = all_rows(n);
    Tensor combined_grad = input_grads[kHeadKl];
    combined_grad.add(input_grads[kHeadJsnL]);
    combined_grad.add(input_grads[kHeadJsnM]);
    Tensor pooled_grad = ops::mean_rows_backward(c.pooled.dims(), rows, combined_grad);
    for (std::size_t comp = 0; comp < kNumCompartments; ++comp) {
      pooled_grad.add(ops::mean_rows_backward(c.pooled.dims(), c.compartment_rows[comp], input_grads[kHeadOFl + comp]));
    }
    grad_f = ops::bilinear_pool_backward(c.act2.dims(), c.feature_points, pooled_grad);
  } else {
    if (!c.pooled.empty()) throw std::invalid_argument("backward: cache does not come from a global forward");
    Tensor feat_grad = input_grads[0];
    for (std::size_t h = 1; h < kNumHeads; ++h) feat_grad.add(input_grads[h]);
    grad_f = ops::global_avg_pool_backward(c.act2.dims(), feat_grad);
  }

  const Tensor grad_pre2 = ops::relu_backward(c.pre2, grad_f);
  auto conv2 = kernels::conv2d_backward(c.act1, p.conv2_w, grad_pre2, kConvStride, true);
  const Tensor grad_pre1 = ops::relu_backward(c.pre1, conv2.input);
  auto conv1 = kernels::conv2d_backward(c.image, p.conv1_w, grad_pre1, kConvStride, false);
  g.conv1_w = std::move(conv1.kernel);
  g.conv1_b = std::move(conv1.bias);
  g.conv2_w = std::move(conv2.kernel);
  g.conv2_b = std::move(conv2.bias);
  return g;
}

ForwardResult kpn_forward(const Model& m, const Tensor& image, const KeypointSet& kps) {
  if (m.pooling != Pooling::keypoint) throw std::invalid_argument("kpn_forward: model uses global pooling");
  return forward(m, image, &kps);
}

ModelParams kpn_backward(const Model& m, const ForwardCache& cache, const HeadLogits& logit_grads) {
  if (m.pooling != Pooling::keypoint) throw std::invalid_argument("kpn_backward: model uses global pooling");
  return backward(m, cache, logit_grads);
}

ForwardResult global_forward(const Model& m, const Tensor& image) {
  if (m.pooling != Pooling::global) throw std::invalid_argument("global_forward: model uses keypoint pooling");
  return forward(m, image, nullptr);
}

ModelParams global_backward(const Model& m, const ForwardCache& cache, const HeadLogits& logit_grads) {
  if (m.pooling != Pooling::global) throw std::invalid_argument("global_backward: model uses keypoint pooling");
  return backward(m, cache, logit_grads);
}

}  // namespace kpn
