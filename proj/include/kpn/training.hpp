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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kpn/dataset.hpp"
#include "kpn/gmm.hpp"
#include "kpn/losses.hpp"
#include "kpn/metrics.hpp"
#include "kpn/model.hpp"

namespace kpn {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 48;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  std::vector<int> lr_decay_epochs{10, 30};
  double lr_decay_factor = 0.5;
  int warmup_epochs = 1;
  std::uint64_t seed = 0;
  // Share of each batch drawn from the unlabeled pool. Unset means the
  // unlabeled pool's share of all training samples.
  std::optional<double> unlabeled_ratio;

  void validate() const;
};

// lr * factor^(number of decay epochs <= epoch), epoch 0-based.
double lr_at(int epoch, const TrainConfig& cfg);

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  static AdamState zeros_for(std::span<const Tensor* const> params);
};

// Decoupled decay, param <- param * (1 - lr * wd), then the bias-corrected
// Adam update. Throws std::invalid_argument on any shape mismatch.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state, double lr,
               double weight_decay);

// Indices into a sample array.
struct TrainSets {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  std::vector<std::size_t> val;
};

struct Batch {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};

// Shuffles both pools with a stream derived from (seed, epoch). With no
// unlabeled_ratio, both pools are dealt evenly over ceil(total / batch_size)
// batches. With a ratio, each batch takes round(batch_size * ratio) unlabeled
// (at most batch_size - 1) plus the rest labeled; the labeled pool sets the
// batch count and unlabeled slots are filled until that pool runs out.
// Every sample appears at most once.
std::vector<Batch> make_epoch_batches(std::span<const std::size_t> labeled, std::span<const std::size_t> unlabeled,
                                      const TrainConfig& cfg, int epoch);

struct StepStats {
  double loss_cls = 0.0;
  double loss_gmm = 0.0;
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double loss_cls = 0.0;  // mean over the epoch's batches
  double loss_gmm = 0.0;
  EvalReport val;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochLog& log);

// Predictions for the given samples, in order.
std::vector<PredictionSet> predict(const Model& m, std::span<const Sample> samples,
                                   std::span<const std::size_t> indices);
EvalReport evaluate_model(const Model& m, std::span<const Sample> samples, std::span<const std::size_t> indices,
                          KappaWeighting weighting = KappaWeighting::quadratic);

// Owns the model, the optimizer state and the epoch counter. Unlabeled
// samples are only run through the network while the incoherence term is
// active, so a run with gmm == nullptr or lambda_gmm == 0 performs exactly
// the arithmetic of a purely supervised run.
class Trainer {
 public:
  Trainer(std::span<const Sample> samples, TrainSets sets, Model model, const GmmModel* gmm, TrainConfig cfg,
          LossConfig loss_cfg);

  const Model& model() const { return model_; }
  const AdamState& adam() const { return adam_; }
  int next_epoch() const { return next_epoch_; }  // 0-based
  const TrainConfig& config() const { return cfg_; }
  const PrevalenceWeights& weights() const { return weights_; }

  std::vector<Batch> batches_for(int epoch) const;
  bool coherence_active(int epoch) const;
  StepStats step(const Batch& batch, int epoch);
  // Trains the next epoch, then validates.
  EpochLog run_epoch();

  // Parameters, Adam moments and step count, epoch counter, config echo.
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::span<const Sample> samples_;
  TrainSets sets_;
  Model model_;
  const GmmModel* gmm_;
  TrainConfig cfg_;
  LossConfig loss_cfg_;
  PrevalenceWeights weights_;
  AdamState adam_;
  int next_epoch_ = 0;
};

struct TrainResult {
  Model best;
  int best_epoch = 0;  // 1-based
  Model last;
  std::vector<EpochLog> log;
};

// Runs all epochs, keeping the model with the highest mean of validation KL
// accuracy and OARSI-average accuracy (earliest epoch on ties).
TrainResult train(std::span<const Sample> samples, const TrainSets& sets, Model init, const GmmModel* gmm,
                  const TrainConfig& cfg, const LossConfig& loss_cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Model-only checkpoint (also readable from a Trainer checkpoint).
void save_model(const std::filesystem::path& path, const Model& m, const std::map<std::string, std::string>& meta = {});
Model load_model(const std::filesystem::path& path);

// Train split labeled/unlabeled by the samples' flags, validation = val split.
TrainSets train_sets_from(std::span<const Sample> samples, const Split& split);

// One ablation arm: pooling variant and whether incoherence is used.
struct Arm {
  Pooling pooling = Pooling::keypoint;
  bool coherence = true;
};
std::string arm_name(const Arm& arm);

struct ExperimentConfig;

struct ArmResult {
  Arm arm;
  TrainResult train;
  EvalReport val;  // of the selected model
};

// Fits the GMM on the labeled training grades when the arm uses coherence,
// then trains. Arms without coherence train on the labeled pool only.
ArmResult run_arm(std::span<const Sample> samples, const Split& split, const Arm& arm, const ExperimentConfig& cfg);

struct LabelFractionRow {
  double fraction = 0.0;
  Arm arm;
  std::size_t labeled = 0;
  EvalReport val;
};

// Relabels nested subsets of the training split at each fraction and runs
// the full method and the global-pooling supervised baseline.
std::vector<LabelFractionRow> run_label_fractions(std::vector<Sample> samples, const Split& split,
                                                  std::span<const double> fractions, const ExperimentConfig& cfg);

std::string label_fraction_csv_header();
std::string label_fraction_csv_row(const LabelFractionRow& row);

}  // namespace kpn
