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
#include <filesystem>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "kpn/persist.hpp"
#include "kpn/synth.hpp"
#include "kpn/training.hpp"

using namespace kpn;

namespace {

struct Fixture {
  std::vector<Sample> samples;
  TrainSets sets;
  GmmModel gmm;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    SynthConfig sc;
    sc.n_samples = 48;
    sc.image_side = 16;
    sc.n_keypoints = 4;
    sc.label_fraction = 0.5;
    sc.seed = 3;
    x.samples = generate(sc);
    std::vector<GradeVector> labeled;
    for (std::size_t i = 0; i < 40; ++i) {
      (x.samples[i].labeled ? x.sets.labeled : x.sets.unlabeled).push_back(i);
      if (x.samples[i].labeled) labeled.push_back(x.samples[i].grades);
    }
    for (std::size_t i = 40; i < 48; ++i) x.sets.val.push_back(i);
    GmmFitConfig gc;
    gc.k = 2;
    x.gmm = gmm_fit_em(make_gmm_training_set(labeled, gc.sigma, gc.draws_per_sample, 1), gc).model;
    return x;
  }();
  return f;
}

TrainConfig small_train() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 8;
  c.lr = 3e-3;
  c.lr_decay_epochs = {2};
  c.warmup_epochs = 1;
  c.seed = 11;
  return c;
}

std::vector<std::size_t> iota(std::size_t from, std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = from + i;
  return v;
}

// Scalar Adam with decoupled decay, written out for one parameter.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double x, double g, double lr, double wd) {
    ++t;
    x *= 1.0 - lr * wd;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    return x - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

}  // namespace

TEST_CASE("adam") {
  Tensor p({3}, 0.0);
  p[0] = 1.5;
  p[1] = -2.0;
  const Tensor zero({3});
  std::vector<Tensor*> ps{&p};
  std::vector<const Tensor*> gs{&zero};
  auto st = AdamState::zeros_for(std::vector<const Tensor*>{&p});
  const Tensor before = p;
  for (int i = 0; i < 10; ++i) adam_step(ps, gs, st, 0.1, 0.0);
  CHECK(p == before);
  CHECK(st.t == 10);

  adam_step(ps, gs, st, 0.1, 0.01);
  for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == before[i] * (1.0 - 0.1 * 0.01));

  // f(x) = x^2 from 5.
  Tensor x({1}, 5.0);
  Tensor g({1});
  std::vector<Tensor*> xs{&x};
  std::vector<const Tensor*> grads{&g};
  auto sx = AdamState::zeros_for(std::vector<const Tensor*>{&x});
  ScalarAdam oracle;
  double y = 5.0;
  for (int i = 0; i < 500; ++i) {
    g[0] = 2.0 * x[0];
    adam_step(xs, grads, sx, 0.1, 0.0);
    y = oracle.step(y, 2.0 * y, 0.1, 0.0);
    REQUIRE(std::abs(x[0] - y) < 1e-9);
  }
  CHECK(std::abs(x[0]) < 1e-3);
  for (double v : sx.v[0].values()) CHECK(v >= 0.0);

  Tensor wrong({2});
  std::vector<const Tensor*> bad{&wrong};
  CHECK_THROWS_AS(adam_step(xs, bad, sx, 0.1, 0.0), std::invalid_argument);
}

TEST_CASE("learning-rate schedule") {
  const TrainConfig c;
  CHECK(lr_at(0, c) == 1e-4);
  CHECK(lr_at(9, c) == 1e-4);
  CHECK(lr_at(10, c) == 5e-5);
  CHECK(lr_at(29, c) == 5e-5);
  CHECK(lr_at(30, c) == 2.5e-5);
  CHECK(lr_at(35, c) == 2.5e-5);
  CHECK_THROWS_AS(lr_at(60, c), std::out_of_range);
  TrainConfig bad;
  bad.warmup_epochs = 61;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("epoch batches") {
  const auto lab = iota(0, 30);
  const auto unl = iota(100, 50);
  TrainConfig c;
  c.batch_size = 16;
  c.seed = 4;

  const auto check_once = [](const std::vector<Batch>& bs, std::size_t nl, std::size_t nu) {
    std::set<std::size_t> seen;
    std::size_t cl = 0, cu = 0;
    for (const auto& b : bs) {
      for (std::size_t i : b.labeled) {
        REQUIRE(i < 100);
        REQUIRE(seen.insert(i).second);
        ++cl;
      }
      for (std::size_t i : b.unlabeled) {
        REQUIRE(i >= 100);
        REQUIRE(seen.insert(i).second);
        ++cu;
      }
    }
    CHECK(cl == nl);
    CHECK(cu <= nu);
  };

  const auto a = make_epoch_batches(lab, unl, c, 0);
  CHECK(a.size() == 5);
  check_once(a, 30, 50);
  std::size_t cu = 0;
  for (const auto& b : a) {
    CHECK(b.labeled.size() + b.unlabeled.size() <= 16);
    CHECK(b.labeled.size() >= 6);
    cu += b.unlabeled.size();
  }
  CHECK(cu == 50);
  CHECK(make_epoch_batches(lab, unl, c, 0)[2].labeled == a[2].labeled);
  CHECK(make_epoch_batches(lab, unl, c, 1)[0].labeled != a[0].labeled);

  c.unlabeled_ratio = 0.25;
  const auto r = make_epoch_batches(lab, unl, c, 0);
  CHECK(r.size() == 3);
  check_once(r, 30, 50);
  for (const auto& b : r) CHECK(b.unlabeled.size() == 4);

  c.unlabeled_ratio = 0.99;
  for (const auto& b : make_epoch_batches(lab, unl, c, 0)) CHECK(b.labeled.size() >= 1);
  CHECK_THROWS_AS(make_epoch_batches({}, unl, c, 0), std::invalid_argument);
}

TEST_CASE("warm-up logging and determinism") {
  const auto& f = fixture();
  const auto cfg = small_train();
  std::vector<EpochLog> logs;
  const auto a = train(f.samples, f.sets, make_model(Pooling::keypoint, 2), &f.gmm, cfg, LossConfig{},
                       [&](const EpochLog& l) { logs.push_back(l); });
  REQUIRE(logs.size() == 3);
  CHECK(logs[0].epoch == 1);
  CHECK(logs[0].loss_gmm == 0.0);
  CHECK(logs[1].loss_gmm > 0.0);
  CHECK(logs[2].loss_gmm > 0.0);
  CHECK(logs[2].lr == 1.5e-3);
  CHECK(a.best_epoch >= 1);
  CHECK(a.best_epoch <= 3);

  const auto b = train(f.samples, f.sets, make_model(Pooling::keypoint, 2), &f.gmm, cfg, LossConfig{});
  CHECK(a.last.params == b.last.params);
  CHECK(a.best.params == b.best.params);
  for (std::size_t i = 0; i < 3; ++i) CHECK(metrics_csv_row(a.log[i]) == metrics_csv_row(b.log[i]));
}

TEST_CASE("runs without an active incoherence term equal supervised training") {
  const auto& f = fixture();
  auto cfg = small_train();
  const auto supervised = train(f.samples, f.sets, make_model(Pooling::keypoint, 5), nullptr, cfg, LossConfig{});

  auto all_warm = cfg;
  all_warm.warmup_epochs = cfg.epochs;
  const auto w = train(f.samples, f.sets, make_model(Pooling::keypoint, 5), &f.gmm, all_warm, LossConfig{});
  CHECK(w.last.params == supervised.last.params);
  for (const auto& l : w.log) CHECK(l.loss_gmm == 0.0);

  LossConfig zero;
  zero.lambda_gmm = 0.0;
  const auto z = train(f.samples, f.sets, make_model(Pooling::keypoint, 5), &f.gmm, cfg, zero);
  CHECK(z.last.params == supervised.last.params);

  const auto with = train(f.samples, f.sets, make_model(Pooling::keypoint, 5), &f.gmm, cfg, LossConfig{});
  CHECK_FALSE(with.last.params == supervised.last.params);
}

TEST_CASE("checkpoint resume is bitwise identical") {
  const auto& f = fixture();
  const auto cfg = small_train();
  const auto path = std::filesystem::temp_directory_path() / "kpn_test_ckpt.kpnt";

  Trainer a(f.samples, f.sets, make_model(Pooling::keypoint, 6), &f.gmm, cfg, LossConfig{});
  a.run_epoch();
  a.save_checkpoint(path);
  const auto batches = a.batches_for(1);
  a.step(batches[0], 1);

  Trainer b(f.samples, f.sets, make_model(Pooling::keypoint, 99), &f.gmm, cfg, LossConfig{});
  b.load_checkpoint(path);
  CHECK(b.next_epoch() == 1);
  CHECK(b.adam().t == a.adam().t - 1);
  b.step(b.batches_for(1)[0], 1);
  CHECK(b.model().params == a.model().params);
  CHECK(b.adam().m == a.adam().m);
  CHECK(b.adam().v == a.adam().v);

  // Resuming whole epochs matches too.
  Trainer c(f.samples, f.sets, make_model(Pooling::keypoint, 6), &f.gmm, cfg, LossConfig{});
  c.run_epoch();
  const auto full = metrics_csv_row(c.run_epoch());
  Trainer d(f.samples, f.sets, make_model(Pooling::keypoint, 6), &f.gmm, cfg, LossConfig{});
  d.load_checkpoint(path);
  CHECK(metrics_csv_row(d.run_epoch()) == full);
  CHECK(d.model().params == c.model().params);

  CHECK(load_model(path).pooling == Pooling::keypoint);
  Trainer g(f.samples, f.sets, make_model(Pooling::global, 6), &f.gmm, cfg, LossConfig{});
  CHECK_THROWS_AS(g.load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("model files") {
  const auto path = std::filesystem::temp_directory_path() / "kpn_test_model.kpnt";
  const Model m = make_model(Pooling::global, 8);
  save_model(path, m);
  const Model back = load_model(path);
  CHECK(back.pooling == Pooling::global);
  CHECK(back.params == m.params);
  std::filesystem::remove(path);
}

TEST_CASE("argument checks") {
  const auto& f = fixture();
  TrainSets none = f.sets;
  none.labeled.clear();
  CHECK_THROWS_AS(Trainer(f.samples, none, make_model(Pooling::keypoint, 1), nullptr, small_train(), LossConfig{}),
                  std::invalid_argument);
  TrainSets wrong = f.sets;
  wrong.labeled.push_back(f.sets.unlabeled[0]);
  CHECK_THROWS_AS(Trainer(f.samples, wrong, make_model(Pooling::keypoint, 1), nullptr, small_train(), LossConfig{}),
                  std::invalid_argument);
}

TEST_CASE("arm names") {
  CHECK(arm_name({Pooling::keypoint, true}) == "kpn+cl");
  CHECK(arm_name({Pooling::keypoint, false}) == "kpn");
  CHECK(arm_name({Pooling::global, true}) == "global+cl");
  CHECK(arm_name({Pooling::global, false}) == "global");
}
