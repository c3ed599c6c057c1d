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

#include "kpn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>

namespace kpn {

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), salt};
  return std::mt19937_64(seq);
}

int clamp_grade(double v, int hi) { return std::clamp(static_cast<int>(std::lround(v)), 0, hi); }

bool is_lateral(Compartment c) { return c == Compartment::fl || c == Compartment::tl; }
bool is_femur(Compartment c) { return c == Compartment::fl || c == Compartment::fm; }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_samples == 0) throw std::invalid_argument("synth: n_samples must be > 0");
  if (image_side < 16 || image_side % 4 != 0) throw std::invalid_argument("synth: image_side must be >= 16 and divisible by 4");
  if (n_keypoints == 0 || n_keypoints % 4 != 0) throw std::invalid_argument("synth: n_keypoints must be a positive multiple of 4");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw std::invalid_argument("synth: label_fraction must be in (0, 1]");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("synth: noise_std must be >= 0");
  if (!(grade_noise_prob >= 0.0 && grade_noise_prob <= 1.0)) throw std::invalid_argument("synth: grade_noise_prob must be in [0, 1]");
  if (!(severity_jitter >= 0.0)) throw std::invalid_argument("synth: severity_jitter must be >= 0");
  if (!(keypoint_jitter >= 0.0)) throw std::invalid_argument("synth: keypoint_jitter must be >= 0");
}

CoherentDraw sample_coherent_grades(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> eta(0.0, 1.0);
  CoherentDraw d;
  d.severity = unit(rng);
  const double base = 3.0 * d.severity;
  auto& g = d.grades;
  for (std::size_t h = kHeadJsnL; h < kNumHeads; ++h) g[h] = clamp_grade(base + cfg.severity_jitter * eta(rng), 3);
  bool any = false;
  for (std::size_t h = kHeadJsnL; h < kNumHeads; ++h) any = any || g[h] > 0;
  g[kHeadKl] = any ? 1 + clamp_grade(base, 3) : 0;

  if (unit(rng) < cfg.grade_noise_prob) {
    std::uniform_int_distribution<std::size_t> head(0, kNumHeads - 1);
    const std::size_t h = head(rng);
    const int delta = unit(rng) < 0.5 ? -1 : 1;
    const int hi = kSchema.cardinalities[h] - 1;
    int v = g[h] + delta;
    if (v < 0 || v > hi) v = g[h] - delta;
    g[h] = v;
  }
  return d;
}

Quadrant compartment_quadrant(Compartment c, std::size_t side) {
  const std::size_t half = side / 2;
  const std::size_t x0 = is_lateral(c) ? 0 : half;
  const std::size_t y0 = is_femur(c) ? 0 : half;
  return {x0, x0 + half, y0, y0 + half};
}

KeypointSet make_keypoints(const SynthConfig& cfg, std::mt19937_64& rng) {
  const std::size_t per = cfg.n_keypoints / kNumCompartments;
  const double side = static_cast<double>(cfg.image_side);
  const double half = side / 2.0;
  std::uniform_real_distribution<double> jitter(-cfg.keypoint_jitter, cfg.keypoint_jitter);
  KeypointSet kps;
  for (std::size_t c = 0; c < kNumCompartments; ++c) {
    const auto comp = static_cast<Compartment>(c);
    const auto q = compartment_quadrant(comp, cfg.image_side);
    // Bone surfaces sit an eighth of the image above/below the joint line.
    const double surface_y = is_femur(comp) ? half - side / 8.0 : half + side / 8.0;
    const double lo_x = static_cast<double>(q.x0) + 1.0;
    const double hi_x = static_cast<double>(q.x1) - 2.0;
    const double lo_y = static_cast<double>(q.y0) + 1.0;
    const double hi_y = static_cast<double>(q.y1) - 2.0;
    for (std::size_t j = 0; j < per; ++j) {
      const double ax = static_cast<double>(q.x0) + static_cast<double>(j + 1) * half / static_cast<double>(per + 1);
      const double x = std::clamp(ax + jitter(rng), lo_x, hi_x);
      const double y = std::clamp(surface_y + jitter(rng), lo_y, hi_y);
      kps.points.push_back({x, y, comp});
    }
  }
  return kps;
}

Tensor render_image(const GradeVector& grades, const KeypointSet& kps, const SynthConfig& cfg,
                    std::mt19937_64* noise_rng) {
  const std::size_t side = cfg.image_side;
  Tensor img({1, side, side});
  const auto rows = kps.rows_by_compartment();
  const double sigma_x = static_cast<double>(side) / 8.0;
  for (std::size_t c = 0; c < kNumCompartments; ++c) {
    const auto comp = static_cast<Compartment>(c);
    if (rows[c].empty()) continue;
    double cx = 0.0, cy = 0.0;
    for (std::size_t r : rows[c]) {
      cx += kps.points[r].x;
      cy += kps.points[r].y;
    }
    cx /= static_cast<double>(rows[c].size());
    cy /= static_cast<double>(rows[c].size());
    const int osteophyte = grades[osteophyte_head(comp)];
    const int jsn = grades[is_lateral(comp) ? kHeadJsnL : kHeadJsnM];
    // A faint blob is drawn even for grade 0 so the JSN width stays visible.
    const double amplitude = cfg.blob_amplitude * (0.25 + static_cast<double>(osteophyte));
    const double sigma_y = 1.0 + 0.75 * static_cast<double>(jsn);
    const auto q = compartment_quadrant(comp, side);
    for (std::size_t y = q.y0; y < q.y1; ++y) {
      const double dy = (static_cast<double>(y) - cy) / sigma_y;
      for (std::size_t x = q.x0; x < q.x1; ++x) {
        const double dx = (static_cast<double>(x) - cx) / sigma_x;
        img(0, y, x) += amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
      }
    }
  }
  if (noise_rng != nullptr && cfg.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (double& v : img.values()) v += noise(*noise_rng);
  }
  return img;
}

std::vector<Sample> generate(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Sample> samples(cfg.n_samples);
  const auto n = static_cast<std::ptrdiff_t>(cfg.n_samples);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    auto rng = stream(cfg.seed, static_cast<std::uint64_t>(i), 0x5eed);
    auto& s = samples[static_cast<std::size_t>(i)];
    s.id = i;
    s.grades = sample_coherent_grades(cfg, rng).grades;
    s.keypoints = make_keypoints(cfg, rng);
    s.image = render_image(s.grades, s.keypoints, cfg, &rng);
  }
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  assign_label_fraction(samples, all, cfg.label_fraction, cfg.seed ^ 0x1abe1ULL);
  return samples;
}

Split split(std::span<const Sample> samples, std::array<double, 3> ratios, std::uint64_t seed) {
  double rsum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw std::invalid_argument("split: ratios must be positive");
    rsum += r;
  }
  if (std::abs(rsum - 1.0) > 1e-9) {
    // Accept 2:1:1 style weights too.
    for (double& r : ratios) r /= rsum;
  }
  const std::size_t n = samples.size();

  auto largest_remainder = [](std::span<const double> quotas, std::size_t total) {
    std::vector<std::size_t> out(quotas.size());
    std::size_t used = 0;
    std::vector<std::pair<double, std::size_t>> rem;
    for (std::size_t j = 0; j < quotas.size(); ++j) {
      out[j] = static_cast<std::size_t>(std::floor(quotas[j] + 1e-9));
      used += out[j];
      rem.emplace_back(quotas[j] - static_cast<double>(out[j]), j);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; used < total && i < rem.size(); ++i, ++used) ++out[rem[i].second];
    return out;
  };

  const std::array<double, 3> target_quota{n * ratios[0], n * ratios[1], n * ratios[2]};
  const auto targets = largest_remainder(target_quota, n);
  for (std::size_t t : targets) {
    if (t == 0) throw std::invalid_argument("split: partition too small to stratify (" + std::to_string(n) + " samples)");
  }

  std::array<std::vector<std::size_t>, 5> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(samples[i].grades[kHeadKl])].push_back(i);

  // Floor allocation per (class, partition), then hand out the leftovers by
  // descending fractional part while respecting row and column totals.
  std::array<std::array<std::size_t, 3>, 5> alloc{};
  std::array<std::size_t, 5> row_left{};
  std::array<std::size_t, 3> col_left = {targets[0], targets[1], targets[2]};
  struct Leftover {
    double frac;
    std::size_t c, j;
  };
  std::vector<Leftover> leftovers;
  for (std::size_t c = 0; c < 5; ++c) {
    const double nc = static_cast<double>(by_class[c].size());
    std::size_t assigned = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      const double q = nc * ratios[j];
      alloc[c][j] = static_cast<std::size_t>(std::floor(q + 1e-9));
      assigned += alloc[c][j];
      col_left[j] -= alloc[c][j];
      leftovers.push_back({q - static_cast<double>(alloc[c][j]), c, j});
    }
    row_left[c] = by_class[c].size() - assigned;
  }
  std::stable_sort(leftovers.begin(), leftovers.end(), [](const Leftover& a, const Leftover& b) { return a.frac > b.frac; });
  for (const auto& l : leftovers) {
    if (row_left[l.c] > 0 && col_left[l.j] > 0) {
      ++alloc[l.c][l.j];
      --row_left[l.c];
      --col_left[l.j];
    }
  }
  for (std::size_t c = 0; c < 5; ++c) {
    for (std::size_t j = 0; j < 3 && row_left[c] > 0; ++j) {
      while (row_left[c] > 0 && col_left[j] > 0) {
        ++alloc[c][j];
        --row_left[c];
        --col_left[j];
      }
    }
  }

  std::mt19937_64 rng(seed);
  Split out;
  std::array<std::vector<std::size_t>*, 3> parts{&out.train, &out.val, &out.test};
  for (std::size_t c = 0; c < 5; ++c) {
    auto idx = by_class[c];
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t pos = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t k = 0; k < alloc[c][j]; ++k) parts[j]->push_back(idx[pos++]);
    }
  }
  for (auto* p : parts) std::sort(p->begin(), p->end());
  return out;
}

Manifest synth_manifest(const SynthConfig& cfg, std::span<const Sample> samples, const Split& sp) {
  Manifest m;
  std::size_t labeled = 0;
  for (const auto& s : samples) labeled += s.labeled ? 1 : 0;
  m["format"] = "kpn-synth-1";
  m["n_samples"] = std::to_string(samples.size());
  m["labeled"] = std::to_string(labeled);
  m["unlabeled"] = std::to_string(samples.size() - labeled);
  m["image_side"] = std::to_string(cfg.image_side);
  m["n_keypoints"] = std::to_string(cfg.n_keypoints);
  m["label_fraction"] = fmt(cfg.label_fraction);
  m["noise_std"] = fmt(cfg.noise_std);
  m["grade_noise_prob"] = fmt(cfg.grade_noise_prob);
  m["severity_jitter"] = fmt(cfg.severity_jitter);
  m["keypoint_jitter"] = fmt(cfg.keypoint_jitter);
  m["blob_amplitude"] = fmt(cfg.blob_amplitude);
  m["seed"] = std::to_string(cfg.seed);
  m["train"] = std::to_string(sp.train.size());
  m["val"] = std::to_string(sp.val.size());
  m["test"] = std::to_string(sp.test.size());
  return m;
}

}  // namespace kpn
