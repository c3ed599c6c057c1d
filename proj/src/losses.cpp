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

#include "kpn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kpn/ops.hpp"

namespace kpn {

namespace {

double softplus(double u) { return std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u))); }

void check_logits(const HeadLogits& z) {
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    if (z[h].size() != kSchema.cardinality(h)) {
      throw std::invalid_argument("logits for head " + std::string(kSchema.head_names[h]) + " have wrong length");
    }
  }
}

HeadLogits zero_grads() {
  HeadLogits g;
  for (std::size_t h = 0; h < kNumHeads; ++h) g[h].assign(kSchema.cardinality(h), 0.0);
  return g;
}

}  // namespace

PrevalenceWeights PrevalenceWeights::uniform(const GradeSchema& s) {
  PrevalenceWeights w;
  for (std::size_t h = 0; h < kNumHeads; ++h) w.per_head[h].assign(s.cardinality(h), 1.0);
  return w;
}

PrevalenceWeights compute_prevalence_weights(std::span<const GradeVector> labeled, const GradeSchema& s) {
  if (labeled.empty()) throw std::invalid_argument("compute_prevalence_weights: no labeled grades");
  PrevalenceWeights w;
  const double n = static_cast<double>(labeled.size());
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const std::size_t c = s.cardinality(h);
    std::vector<double> counts(c, 0.0);
    for (const auto& g : labeled) {
      validate(g, s);
      counts[static_cast<std::size_t>(g[h])] += 1.0;
    }
    w.per_head[h].resize(c);
    for (std::size_t k = 0; k < c; ++k) {
      w.per_head[h][k] = (n + static_cast<double>(c)) / (static_cast<double>(c) * (counts[k] + 1.0));
    }
  }
  return w;
}

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  if (!(lambda_cls >= 0.0) || !(lambda_gmm >= 0.0)) throw std::invalid_argument("loss weights must be >= 0");
}

HeadLoss weighted_ce(const HeadLogits& logits, const GradeVector& y, const PrevalenceWeights& w) {
  check_logits(logits);
  validate(y);
  HeadLoss out;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const auto& z = logits[h];
    const auto cls = static_cast<std::size_t>(y[h]);
    const double weight = w.per_head[h].at(cls);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double log_z = mx + std::log(sum);
    out.value += weight * (log_z - z[cls]);
    auto& g = out.logit_grads[h];
    g.resize(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) g[k] = weight * std::exp(z[k] - log_z);
    g[cls] -= weight;
  }
  return out;
}

double incoherence_value(double log_prob, double tau) { return softplus(-tau * log_prob) / tau; }

double incoherence_slope(double log_prob, double tau) {
  // -sigmoid(-tau * g), written to avoid overflow on either side.
  const double u = tau * log_prob;
  if (u >= 0.0) {
    const double e = std::exp(-u);
    return -e / (1.0 + e);
  }
  return -1.0 / (1.0 + std::exp(u));
}

IncoherenceResult incoherence_loss(const GmmModel& m, const PredictionSet& p, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("incoherence_loss: tau must be > 0");
  const auto x = flatten_predictions(p);
  const auto lp = gmm_log_prob_and_grad(m, x);
  IncoherenceResult r;
  r.log_prob = lp.value;
  r.value = incoherence_value(lp.value, tau);
  const double slope = incoherence_slope(lp.value, tau);
  r.grad_probs.resize(lp.grad.size());
  for (std::size_t i = 0; i < lp.grad.size(); ++i) r.grad_probs[i] = slope * lp.grad[i];
  return r;
}

HeadLoss incoherence_loss_logits(const GmmModel& m, const PredictionSet& p, double tau) {
  const auto r = incoherence_loss(m, p, tau);
  HeadLoss out;
  out.value = r.value;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const auto block = std::span<const double>(r.grad_probs).subspan(kSchema.offset(h), kSchema.cardinality(h));
    out.logit_grads[h] = ops::softmax_backward(p.probs[h], block);
  }
  return out;
}

CombinedLoss combined_loss(std::span<const BatchItem> batch, const GmmModel* gmm, const PrevalenceWeights& w,
                           const LossConfig& cfg, bool warmup_active) {
  cfg.validate();
  CombinedLoss out;
  out.logit_grads.assign(batch.size(), zero_grads());
  if (batch.empty()) return out;
  for (const auto& item : batch) {
    if (item.label) ++out.labeled;
  }

  if (out.labeled > 0 && cfg.lambda_cls > 0.0) {
    const double scale = cfg.lambda_cls / static_cast<double>(out.labeled);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (!batch[i].label) continue;
      const auto ce = weighted_ce(*batch[i].logits, *batch[i].label, w);
      out.cls += ce.value;
      for (std::size_t h = 0; h < kNumHeads; ++h) {
        for (std::size_t k = 0; k < ce.logit_grads[h].size(); ++k) out.logit_grads[i][h][k] += scale * ce.logit_grads[h][k];
      }
    }
    out.cls *= scale;
  }

  const bool coherence_on = !warmup_active && gmm != nullptr && cfg.lambda_gmm > 0.0;
  if (coherence_on) {
    const double scale = cfg.lambda_gmm / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto inc = incoherence_loss_logits(*gmm, *batch[i].probs, cfg.tau);
      out.gmm += inc.value;
      for (std::size_t h = 0; h < kNumHeads; ++h) {
        for (std::size_t k = 0; k < inc.logit_grads[h].size(); ++k) out.logit_grads[i][h][k] += scale * inc.logit_grads[h][k];
      }
    }
    out.gmm *= scale;
  }
  out.total = out.cls + out.gmm;
  return out;
}

}  // namespace kpn
