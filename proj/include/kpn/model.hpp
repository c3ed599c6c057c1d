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

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kpn/grades.hpp"
#include "kpn/ops.hpp"
#include "kpn/tensor.hpp"

namespace kpn {

enum class Compartment : std::uint8_t { fl = 0, fm = 1, tl = 2, tm = 3 };
inline constexpr std::size_t kNumCompartments = 4;

std::string_view to_string(Compartment c);
Compartment parse_compartment(std::string_view s);

// Osteophyte head fed by compartment c.
constexpr std::size_t osteophyte_head(Compartment c) { return kHeadOFl + static_cast<std::size_t>(c); }

struct Keypoint {
  double x = 0.0;  // image pixels, along width
  double y = 0.0;  // image pixels, along height
  Compartment compartment = Compartment::fl;
};

struct KeypointSet {
  std::vector<Keypoint> points;

  // Every compartment present and all points inside a side x side image.
  void validate(std::size_t image_side) const;
  std::array<std::vector<std::size_t>, kNumCompartments> rows_by_compartment() const;
};

// Keypoints CSV: id,idx,x,y,compartment
std::map<std::int64_t, KeypointSet> read_keypoints_csv(const std::filesystem::path& path);
void write_keypoints_csv(const std::filesystem::path& path,
                         const std::vector<std::pair<std::int64_t, const KeypointSet*>>& sets);

enum class Pooling { keypoint, global };

inline constexpr std::size_t kConv1Channels = 8;
inline constexpr std::size_t kFeatureChannels = 16;
inline constexpr std::size_t kConvStride = 2;
inline constexpr std::size_t kStrideTotal = kConvStride * kConvStride;

// Trainable tensors of the network, also used as the gradient container.
struct ModelParams {
  Tensor conv1_w;  // [8, 1, 3, 3]
  Tensor conv1_b;  // [8]
  Tensor conv2_w;  // [16, 8, 3, 3]
  Tensor conv2_b;  // [16]
  std::array<Tensor, kNumHeads> head_w;  // [cardinality, 16]
  std::array<Tensor, kNumHeads> head_b;  // [cardinality]

  // Stable order shared by the optimizer and checkpoints.
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  static std::vector<std::string> names();

  ModelParams zeros_like() const;
  void add(const ModelParams& other);
  void scale(double factor);
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Desk-scale keypoint pooling network (Pooling::keypoint) or its global
// average pooling ablation (Pooling::global). Both share the backbone
// conv(1->8, 3x3, s2) -> relu -> conv(8->16, 3x3, s2) -> relu and seven
// linear heads over a 16-d feature.
struct Model {
  Pooling pooling = Pooling::keypoint;
  ModelParams params;
};

// Weights uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
Model make_model(Pooling pooling, std::uint64_t seed);

struct ForwardCache {
  Tensor image;
  Tensor pre1, act1;  // conv1 output before / after relu
  Tensor pre2, act2;  // conv2 output: the feature map f
  std::vector<ops::Point> feature_points;  // keypoints / stride_total, clamped to the map
  std::array<std::vector<std::size_t>, kNumCompartments> compartment_rows;
  Tensor pooled;                                // [N, 16] (keypoint pooling)
  std::array<Tensor, kNumHeads> head_inputs;    // 16-d feature per head
  PredictionSet probs;
};

struct ForwardResult {
  HeadLogits logits;
  PredictionSet probs;
  ForwardCache cache;
};

// Runs either variant. `kps` is required for keypoint pooling and ignored
// otherwise. Images are [1, S, S] with S divisible by 4.
ForwardResult forward(const Model& m, const Tensor& image, const KeypointSet* kps);
// Parameter gradients given d(loss)/d(logits) per head.
ModelParams backward(const Model& m, const ForwardCache& cache, const HeadLogits& logit_grads);

ForwardResult kpn_forward(const Model& m, const Tensor& image, const KeypointSet& kps);
ModelParams kpn_backward(const Model& m, const ForwardCache& cache, const HeadLogits& logit_grads);
ForwardResult global_forward(const Model& m, const Tensor& image);
ModelParams global_backward(const Model& m, const ForwardCache& cache, const HeadLogits& logit_grads);

}  // namespace kpn
