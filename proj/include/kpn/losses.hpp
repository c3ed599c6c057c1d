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
#include <span>
#include <vector>

#include "kpn/gmm.hpp"
#include "kpn/grades.hpp"

namespace kpn {

// Per-head class weights for the classification loss.
struct PrevalenceWeights {
  std::array<std::vector<double>, kNumHeads> per_head;

  static PrevalenceWeights uniform(const GradeSchema& s = kSchema);
};

// Inverse class frequency with add-one smoothing, normalized so a balanced
// head gets unit weights: w_c = (N + C) / (C * (n_c + 1)).
PrevalenceWeights compute_prevalence_weights(std::span<const GradeVector> labeled, const GradeSchema& s = kSchema);

struct LossConfig {
  double lambda_cls = 1.0;
  double lambda_gmm = 1.0;
  double tau = 0.5;

  void validate() const;
};

struct HeadLoss {
  double value = 0.0;
  HeadLogits logit_grads;
};

// sum_i w_i[y_i] * (-log softmax(z_i)[y_i]), evaluated in logit space.
// Gradient per head: w_i[y_i] * (softmax(z_i) - onehot(y_i)).
HeadLoss weighted_ce(const HeadLogits& logits, const GradeVector& y, const PrevalenceWeights& w);

// L(g) = (1/tau) * log(1 + exp(-tau * g)), via a stable softplus.
double incoherence_value(double log_prob, double tau);
// dL/dg = -1 / (1 + exp(tau * g)), always in (-1, 0).
double incoherence_slope(double log_prob, double tau);

struct IncoherenceResult {
  double value = 0.0;
  double log_prob = 0.0;       // g(flatten(p))
  EmbeddingVector grad_probs;  // dL/d flatten(p)
};
IncoherenceResult incoherence_loss(const GmmModel& m, const PredictionSet& p, double tau);
// Same loss, with the gradient chained through every head's softmax.
HeadLoss incoherence_loss_logits(const GmmModel& m, const PredictionSet& p, double tau);

struct BatchItem {
  const HeadLogits* logits = nullptr;
  const PredictionSet* probs = nullptr;
  const GradeVector* label = nullptr;  // null for unlabeled samples
};

struct CombinedLoss {
  double total = 0.0;
  double cls = 0.0;  // lambda_cls * mean weighted CE over labeled items
  double gmm = 0.0;  // lambda_gmm * mean incoherence over all items
  std::size_t labeled = 0;
  std::vector<HeadLogits> logit_grads;  // d(total)/d(logits), one per item
};

// lambda_cls * L_cls + lambda_gmm * L_gmm. Classification averages over the
// labeled items only; incoherence averages over every item. While warm-up is
// active (or gmm is null) the incoherence term is exactly zero.
CombinedLoss combined_loss(std::span<const BatchItem> batch, const GmmModel* gmm, const PrevalenceWeights& w,
                           const LossConfig& cfg, bool warmup_active);

}  // namespace kpn
