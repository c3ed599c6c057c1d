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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "kpn/losses.hpp"
#include "kpn/synth.hpp"

using namespace kpn;

namespace {

HeadLogits random_logits(std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  HeadLogits z;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    z[h].resize(kSchema.cardinality(h));
    for (double& v : z[h]) v = n(rng);
  }
  return z;
}

PredictionSet softmax_all(const HeadLogits& z) {
  PredictionSet p;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const double mx = *std::max_element(z[h].begin(), z[h].end());
    double s = 0.0;
    p.probs[h].resize(z[h].size());
    for (std::size_t k = 0; k < z[h].size(); ++k) s += (p.probs[h][k] = std::exp(z[h][k] - mx));
    for (double& v : p.probs[h]) v /= s;
  }
  return p;
}

GradeVector random_grades(std::mt19937_64& rng) {
  GradeVector g;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    g[h] = std::uniform_int_distribution<int>(0, static_cast<int>(kSchema.cardinality(h)) - 1)(rng);
  }
  return g;
}

GmmModel fit_coherent_gmm(std::uint64_t seed) {
  SynthConfig sc;
  sc.grade_noise_prob = 0.0;
  std::mt19937_64 rng(seed);
  std::vector<GradeVector> grades(300);
  for (auto& g : grades) g = sample_coherent_grades(sc, rng).grades;
  GmmFitConfig cfg;
  cfg.seed = seed;
  return gmm_fit_em(make_gmm_training_set(grades, cfg.sigma, cfg.draws_per_sample, seed), cfg).model;
}

}  // namespace

TEST_CASE("incoherence values") {
  CHECK(incoherence_value(0.0, 0.5) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-15));
  CHECK(incoherence_value(40.0, 0.5) < 1e-8);
  CHECK(incoherence_value(-10.0, 0.5) == doctest::Approx(2.0 * std::log(1.0 + std::exp(5.0))).epsilon(1e-14));
  CHECK(std::isfinite(incoherence_value(-1e4, 0.5)));
  CHECK(incoherence_value(-1e4, 0.5) == doctest::Approx(1e4).epsilon(1e-12));
  CHECK(std::isfinite(incoherence_value(1e4, 0.5)));
  CHECK(incoherence_value(1e4, 0.5) >= 0.0);

  double prev = incoherence_value(-50.0, 0.5);
  for (double g = -49.9; g <= 50.0; g += 0.1) {
    const double v = incoherence_value(g, 0.5);
    REQUIRE(v < prev);
    prev = v;
    const double s = incoherence_slope(g, 0.5);
    REQUIRE(s < 0.0);
    REQUIRE(s > -1.0);
    const double h = 1e-6;
    REQUIRE(s == doctest::Approx((incoherence_value(g + h, 0.5) - incoherence_value(g - h, 0.5)) / (2 * h))
                     .epsilon(1e-6)
                     .scale(1e-3));
  }
  CHECK(incoherence_slope(0.0, 0.5) == -0.5);
  CHECK(std::isfinite(incoherence_slope(-1e4, 0.5)));
  CHECK(std::isfinite(incoherence_slope(1e4, 0.5)));
}

TEST_CASE("weighted cross-entropy") {
  HeadLogits zeros;
  for (std::size_t h = 0; h < kNumHeads; ++h) zeros[h].assign(kSchema.cardinality(h), 0.0);
  const auto r = weighted_ce(zeros, GradeVector{{2, 1, 0, 3, 2, 1, 0}}, PrevalenceWeights::uniform());
  CHECK(r.value == doctest::Approx(std::log(5.0) + 6.0 * std::log(4.0)).epsilon(1e-14));
  CHECK(r.logit_grads[kHeadKl][2] == doctest::Approx(0.2 - 1.0).epsilon(1e-15));
  CHECK(r.logit_grads[kHeadKl][0] == doctest::Approx(0.2).epsilon(1e-15));

  // Large logits stay finite.
  HeadLogits big = zeros;
  big[kHeadKl] = {800.0, -800.0, 0.0, 0.0, 0.0};
  const auto rb = weighted_ce(big, GradeVector{{1, 0, 0, 0, 0, 0, 0}}, PrevalenceWeights::uniform());
  CHECK(std::isfinite(rb.value));
  CHECK(rb.value == doctest::Approx(1600.0 + 6.0 * std::log(4.0)).epsilon(1e-12));

  // Class weights scale each head's term and gradient.
  auto w = PrevalenceWeights::uniform();
  w.per_head[kHeadOTm][3] = 2.5;
  std::mt19937_64 rng(1);
  const auto z = random_logits(rng);
  const GradeVector y{{0, 0, 0, 0, 0, 0, 3}};
  const auto a = weighted_ce(z, y, PrevalenceWeights::uniform());
  const auto b = weighted_ce(z, y, w);
  const auto p = softmax_all(z);
  const double tm_term = -std::log(p.probs[kHeadOTm][3]);
  CHECK(b.value - a.value == doctest::Approx(1.5 * tm_term).epsilon(1e-12));
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(b.logit_grads[kHeadOTm][k] == doctest::Approx(2.5 * a.logit_grads[kHeadOTm][k]).epsilon(1e-14));
  }
  GradeVector out_of_range = y;
  out_of_range[kHeadKl] = 5;
  CHECK_THROWS(weighted_ce(z, out_of_range, w));
}

TEST_CASE("prevalence weights from the published KL distribution") {
  const std::array<std::size_t, 5> counts{2827, 2930, 10231, 5578, 1683};
  std::vector<GradeVector> labels;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (std::size_t i = 0; i < counts[c]; ++i) {
      GradeVector g;
      g[kHeadKl] = static_cast<int>(c);
      labels.push_back(g);
    }
  }
  const double n = static_cast<double>(labels.size());
  CHECK(n == 23249.0);
  const auto w = compute_prevalence_weights(labels);
  for (std::size_t c = 0; c < 5; ++c) {
    CHECK(w.per_head[kHeadKl][c] == doctest::Approx((n + 5.0) / (5.0 * (static_cast<double>(counts[c]) + 1.0))).epsilon(1e-14));
  }
  CHECK(w.per_head[kHeadKl][4] == doctest::Approx(23254.0 / (5.0 * 1684.0)).epsilon(1e-14));
  CHECK(w.per_head[kHeadKl][4] > w.per_head[kHeadKl][0]);
  CHECK(w.per_head[kHeadKl][0] > w.per_head[kHeadKl][1]);
  CHECK(w.per_head[kHeadKl][2] < 1.0);
  // Every OARSI grade is 0 here: the empty classes get the largest weight.
  CHECK(w.per_head[kHeadJsnL][3] == doctest::Approx((n + 4.0) / 4.0).epsilon(1e-14));

  // A balanced head gets unit weights.
  std::vector<GradeVector> balanced;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 10; ++i) {
      GradeVector g;
      g[kHeadOFl] = c;
      g[kHeadKl] = i % 5;
      balanced.push_back(g);
    }
  const auto wb = compute_prevalence_weights(balanced);
  for (double v : wb.per_head[kHeadOFl]) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("incoherence gradient through the softmax") {
  const GmmModel gmm = fit_coherent_gmm(2);
  std::mt19937_64 rng(3);
  const double h = 1e-6;
  for (int trial = 0; trial < 5; ++trial) {
    auto z = random_logits(rng, 2.0);
    const auto r = incoherence_loss_logits(gmm, softmax_all(z), 0.5);
    const auto direct = incoherence_loss(gmm, softmax_all(z), 0.5);
    CHECK(r.value == direct.value);
    CHECK(direct.log_prob == gmm_log_prob(gmm, flatten_predictions(softmax_all(z))));
    double worst = 0.0, scale = 1e-8;
    for (std::size_t hd = 0; hd < kNumHeads; ++hd) {
      for (std::size_t k = 0; k < z[hd].size(); ++k) {
        const double keep = z[hd][k];
        z[hd][k] = keep + h;
        const double up = incoherence_loss(gmm, softmax_all(z), 0.5).value;
        z[hd][k] = keep - h;
        const double down = incoherence_loss(gmm, softmax_all(z), 0.5).value;
        z[hd][k] = keep;
        const double numeric = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(numeric - r.logit_grads[hd][k]));
        scale = std::max(scale, std::abs(numeric));
      }
    }
    CHECK(worst / scale < 1e-5);
  }
}

TEST_CASE("combined loss is the weighted sum of its parts") {
  const GmmModel gmm = fit_coherent_gmm(4);
  std::mt19937_64 rng(5);
  std::vector<HeadLogits> z(6);
  std::vector<PredictionSet> p(6);
  std::vector<GradeVector> y(6);
  for (std::size_t i = 0; i < 6; ++i) {
    z[i] = random_logits(rng);
    p[i] = softmax_all(z[i]);
    y[i] = random_grades(rng);
  }
  std::vector<BatchItem> batch(6);
  for (std::size_t i = 0; i < 6; ++i) batch[i] = {&z[i], &p[i], i % 3 == 2 ? nullptr : &y[i]};
  const auto w = compute_prevalence_weights(y);
  const LossConfig cfg{0.7, 1.3, 0.5};

  double ce = 0.0, inc = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    if (batch[i].label) ce += weighted_ce(z[i], y[i], w).value / 4.0;
    inc += incoherence_loss(gmm, p[i], 0.5).value / 6.0;
  }
  const auto r = combined_loss(batch, &gmm, w, cfg, false);
  CHECK(r.labeled == 4);
  CHECK(r.cls == doctest::Approx(0.7 * ce).epsilon(1e-13));
  CHECK(r.gmm == doctest::Approx(1.3 * inc).epsilon(1e-13));
  CHECK(r.total == doctest::Approx(r.cls + r.gmm).epsilon(1e-15));
  REQUIRE(r.logit_grads.size() == 6);
  const auto unlabeled_grad = incoherence_loss_logits(gmm, p[2], 0.5);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(r.logit_grads[2][kHeadKl][k] == doctest::Approx(1.3 / 6.0 * unlabeled_grad.logit_grads[kHeadKl][k]).epsilon(1e-12));
  }

  const auto warm = combined_loss(batch, &gmm, w, cfg, true);
  CHECK(warm.gmm == 0.0);
  CHECK(warm.cls == r.cls);
  for (std::size_t k = 0; k < 4; ++k) CHECK(warm.logit_grads[2][kHeadOFl][k] == 0.0);
  const auto none = combined_loss(batch, nullptr, w, cfg, false);
  CHECK(none.gmm == 0.0);
  CHECK(none.total == warm.total);

  // An all-unlabeled batch has no classification term.
  std::vector<BatchItem> unl{{&z[0], &p[0], nullptr}};
  const auto u = combined_loss(unl, &gmm, w, cfg, false);
  CHECK(u.cls == 0.0);
  CHECK(u.labeled == 0);
  CHECK(u.gmm > 0.0);
}

TEST_CASE("coherent grade tuples score lower incoherence than shuffled ones") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const GmmModel gmm = fit_coherent_gmm(100 + seed);
    SynthConfig sc;
    sc.grade_noise_prob = 0.0;
    std::mt19937_64 rng(seed);
    std::vector<GradeVector> held(200);
    for (auto& g : held) g = sample_coherent_grades(sc, rng).grades;
    std::vector<GradeVector> shuffled = held;
    for (std::size_t h = 0; h < kNumHeads; ++h) {
      std::vector<int> col(held.size());
      for (std::size_t i = 0; i < held.size(); ++i) col[i] = held[i][h];
      std::shuffle(col.begin(), col.end(), rng);
      for (std::size_t i = 0; i < held.size(); ++i) shuffled[i][h] = col[i];
    }
    const auto mean_loss = [&](const std::vector<GradeVector>& gs) {
      double s = 0.0;
      for (const auto& g : gs) s += incoherence_value(gmm_log_prob(gmm, one_hot_encode(g)), 0.5);
      return s / static_cast<double>(gs.size());
    };
    CHECK(mean_loss(held) < mean_loss(shuffled));
  }
}
