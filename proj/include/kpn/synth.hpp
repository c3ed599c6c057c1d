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
#include <random>
#include <vector>

#include "kpn/dataset.hpp"

// Synthetic knees. A latent severity s ~ U[0,1] drives every grade:
//
//   osteophyte_c = clamp(round(3 s + eta_c), 0, 3)      c in FL, FM, TL, TM
//   jsn_side     = clamp(round(3 s + eta_side), 0, 3)   side in L, M
//   kl           = 0 if all six OARSI grades are 0, else 1 + clamp(round(3 s), 0, 3)
//
// with eta ~ N(0, severity_jitter^2). With probability grade_noise_prob one
// random head is then moved by +-1. The image is Gaussian background noise
// plus one blob per compartment quadrant, centered on that compartment's
// keypoints: amplitude grows with the osteophyte grade and the vertical
// width with the JSN grade of the compartment's side.
namespace kpn {

struct SynthConfig {
  std::size_t n_samples = 400;
  std::size_t image_side = 64;
  std::size_t n_keypoints = 16;
  double label_fraction = 1.0;
  double noise_std = 0.25;
  double grade_noise_prob = 0.1;
  double severity_jitter = 0.15;
  double keypoint_jitter = 2.0;
  double blob_amplitude = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CoherentDraw {
  double severity = 0.0;
  GradeVector grades;
};

CoherentDraw sample_coherent_grades(const SynthConfig& cfg, std::mt19937_64& rng);

// n_keypoints / 4 points per compartment along the bone surface of its
// quadrant, each jittered by up to keypoint_jitter pixels.
KeypointSet make_keypoints(const SynthConfig& cfg, std::mt19937_64& rng);

// Deterministic blob rendering; background noise only when `noise_rng` is
// non-null and noise_std > 0. Each blob is confined to its quadrant.
Tensor render_image(const GradeVector& grades, const KeypointSet& kps, const SynthConfig& cfg,
                    std::mt19937_64* noise_rng);

// Quadrant [x0, x1) x [y0, y1) of a compartment in image pixels.
struct Quadrant {
  std::size_t x0, x1, y0, y1;
};
Quadrant compartment_quadrant(Compartment c, std::size_t image_side);

// Per-sample RNG streams are derived from (seed, index), so generation is
// order independent and reproducible.
std::vector<Sample> generate(const SynthConfig& cfg);

// Disjoint, exhaustive partition with sizes from largest-remainder rounding
// of n * ratios, stratified on the KL grade. Throws std::invalid_argument if
// any partition would be empty.
Split split(std::span<const Sample> samples, std::array<double, 3> ratios, std::uint64_t seed);

Manifest synth_manifest(const SynthConfig& cfg, std::span<const Sample> samples, const Split& split);

}  // namespace kpn
