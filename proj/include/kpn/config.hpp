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

#include <filesystem>
#include <string>
#include <string_view>

#include "kpn/gmm.hpp"
#include "kpn/losses.hpp"
#include "kpn/training.hpp"

namespace kpn {

struct ExperimentConfig {
  TrainConfig train;
  LossConfig loss;
  GmmFitConfig gmm;

  void validate() const;
};

// Flat `key = value` text, one key per line, '#' starts a comment.
// Keys mirror the field names: epochs, batch_size, lr, weight_decay,
// lr_decay_epochs (comma list), lr_decay_factor, warmup_epochs, seed,
// unlabeled_ratio (number or "auto"), lambda_cls, lambda_gmm, tau, k, sigma,
// max_iters, rel_tol, cov_jitter, gmm_seed, draws_per_sample.
// Unknown keys, duplicate keys and unparsable values throw
// std::invalid_argument naming the line.
ExperimentConfig parse_config(std::string_view text, const ExperimentConfig& defaults = {});
ExperimentConfig read_config(const std::filesystem::path& path, const ExperimentConfig& defaults = {});
// Inverse of parse_config; doubles are written with 17 significant digits.
std::string config_to_text(const ExperimentConfig& cfg);

}  // namespace kpn
