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
#include <span>
#include <string>
#include <vector>

#include "kpn/grades.hpp"
#include "kpn/model.hpp"
#include "kpn/tensor.hpp"

namespace kpn {

// One knee: image, keypoints, its true grades, and whether those grades may
// be used for training. `grades` is the hidden truth for unlabeled samples
// and is only ever read by evaluation.
struct Sample {
  std::int64_t id = 0;
  Tensor image;  // [1, S, S]
  KeypointSet keypoints;
  GradeVector grades;
  bool labeled = false;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

using Manifest = std::map<std::string, std::string>;

struct LoadedDataset {
  std::vector<Sample> samples;
  Split split;
  Manifest manifest;
};

// Directory layout:
//   manifest.txt    key = value (config, counts, per-file FNV-1a hashes)
//   grades.csv      training labels; unlabeled rows hold -1 placeholders
//   truth.csv       all grades, for evaluation only
//   keypoints.csv   id,idx,x,y,compartment
//   images.kpnt     tensor "images" [n, 1, S, S]
//   splits.csv      id,split with split in {train, val, test}
void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples, const Split& split,
                   Manifest manifest);
LoadedDataset read_dataset(const std::filesystem::path& dir);

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Marks exactly ceil(fraction * |subset|) of `subset` as labeled and the rest
// unlabeled. Uses one seeded permutation, so smaller fractions give nested
// label sets.
void assign_label_fraction(std::vector<Sample>& samples, std::span<const std::size_t> subset, double fraction,
                           std::uint64_t seed);

std::size_t labeled_count_for(double fraction, std::size_t n);

}  // namespace kpn
