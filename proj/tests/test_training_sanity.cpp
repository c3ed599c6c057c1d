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

#include "doctest.h"
#include "kpn/synth.hpp"
#include "kpn/training.hpp"

using namespace kpn;

namespace {

// Classification loss of the first step and of the 200th, on 64 labeled samples.
std::pair<double, double> first_and_last_loss(const TrainConfig& cfg) {
  SynthConfig sc;
  sc.n_samples = 64;
  sc.seed = 1;
  const auto samples = generate(sc);
  TrainSets sets;
  for (std::size_t i = 0; i < samples.size(); ++i) sets.labeled.push_back(i);
  Trainer t(samples, sets, make_model(Pooling::keypoint, 1), nullptr, cfg, LossConfig{});
  double first = 0.0, last = 0.0;
  int step = 0;
  for (int e = 0; e < cfg.epochs && step < 200; ++e) {
    for (const auto& b : t.batches_for(e)) {
      const double l = t.step(b, e).loss_cls;
      if (step == 0) first = l;
      last = l;
      if (++step == 200) break;
    }
  }
  MESSAGE("loss step 1 = ", first, ", step 200 = ", last);
  return {first, last};
}

}  // namespace

TEST_CASE("classification loss halves within 200 steps at the desk-scale rate") {
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 16;
  cfg.lr = 3e-3;
  cfg.lr_decay_epochs = {};
  const auto [first, last] = first_and_last_loss(cfg);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("classification loss halves within 200 steps at the default rate") {
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.lr_decay_epochs = {};
  const auto [first, last] = first_and_last_loss(cfg);
  CHECK(last <= 0.5 * first);
}
