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

#include "kpn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <random>
#include <stdexcept>

#include "kpn/config.hpp"
#include "kpn/persist.hpp"

namespace kpn {

namespace {

std::mt19937_64 epoch_stream(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0xba7c4u};
  return std::mt19937_64(seq);
}

// Runs body(i) for i in [0, n) under OpenMP and rethrows the first exception
// on the calling thread.
template <class F>
void parallel_for(std::size_t n, F&& body) {
  std::exception_ptr error;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(kpn_parallel_for_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

std::string_view pooling_name(Pooling p) { return p == Pooling::keypoint ? "keypoint" : "global"; }

Pooling parse_pooling(const std::string& s) {
  if (s == "keypoint") return Pooling::keypoint;
  if (s == "global") return Pooling::global;
  throw FormatError("unknown pooling '" + s + "'");
}

void add_params(Container& c, const ModelParams& p) {
  const auto names = ModelParams::names();
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) c.add(names[i], *ts[i]);
}

void read_params(const Container& c, ModelParams& p) {
  const auto names = ModelParams::names();
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const Tensor& t = c.tensor(names[i]);
    if (!t.same_shape(*ts[i])) {
      throw FormatError("tensor " + names[i] + " has shape " + shape_string(t.dims()) + ", expected " +
                        shape_string(ts[i]->dims()));
    }
    *ts[i] = t;
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void deal_evenly(const std::vector<std::size_t>& pool, std::vector<Batch>& batches,
                 std::vector<std::size_t> Batch::*member) {
  const std::size_t nb = batches.size();
  std::size_t pos = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t take = pool.size() / nb + (b < pool.size() % nb ? 1 : 0);
    (batches[b].*member).assign(pool.begin() + static_cast<std::ptrdiff_t>(pos),
                                pool.begin() + static_cast<std::ptrdiff_t>(pos + take));
    pos += take;
  }
}

double selection_score(const EvalReport& r) { return 0.5 * (r.heads[kHeadKl].accuracy + r.oarsi_average.accuracy); }

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw std::invalid_argument("need epochs >= warmup_epochs >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("lr_decay_factor must be > 0");
  for (int e : lr_decay_epochs) {
    if (e < 0) throw std::invalid_argument("lr_decay_epochs must be >= 0");
  }
  if (unlabeled_ratio && !(*unlabeled_ratio >= 0.0 && *unlabeled_ratio < 1.0)) {
    throw std::invalid_argument("unlabeled_ratio must be in [0, 1)");
  }
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs) throw std::out_of_range("lr_at: epoch out of range");
  double lr = cfg.lr;
  for (int e : cfg.lr_decay_epochs) {
    if (e <= epoch) lr *= cfg.lr_decay_factor;
  }
  return lr;
}

AdamState AdamState::zeros_for(std::span<const Tensor* const> params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.m.push_back(Tensor::zeros_like(*p));
    s.v.push_back(Tensor::zeros_like(*p));
  }
  return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state, double lr,
               double weight_decay) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.m[i]) ||
        !params[i]->same_shape(state.v[i])) {
      throw std::invalid_argument("adam_step: shape mismatch at tensor " + std::to_string(i));
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double bc2 = 1.0 - std::pow(AdamState::kBeta2, t);
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->values();
    const auto g = grads[i]->values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= decay;
      m[j] = AdamState::kBeta1 * m[j] + (1.0 - AdamState::kBeta1) * g[j];
      v[j] = AdamState::kBeta2 * v[j] + (1.0 - AdamState::kBeta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + AdamState::kEps);
    }
  }
}

std::vector<Batch> make_epoch_batches(std::span<const std::size_t> labeled, std::span<const std::size_t> unlabeled,
                                      const TrainConfig& cfg, int epoch) {
  std::vector<std::size_t> lab(labeled.begin(), labeled.end());
  std::vector<std::size_t> unl(unlabeled.begin(), unlabeled.end());
  auto rng = epoch_stream(cfg.seed, epoch);
  std::shuffle(lab.begin(), lab.end(), rng);
  std::shuffle(unl.begin(), unl.end(), rng);

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<Batch> out;
  if (lab.empty() && unl.empty()) return out;

  if (!cfg.unlabeled_ratio) {
    // Both pools dealt evenly over ceil(total / batch_size) batches, so they
    // run out together and each batch keeps the pools' proportions.
    const std::size_t nb = (lab.size() + unl.size() + bs - 1) / bs;
    out.resize(nb);
    deal_evenly(lab, out, &Batch::labeled);
    deal_evenly(unl, out, &Batch::unlabeled);
    return out;
  }

  std::size_t n_u = unl.empty() ? 0 : static_cast<std::size_t>(std::lround(static_cast<double>(bs) * *cfg.unlabeled_ratio));
  n_u = std::min(n_u, bs - 1);
  const std::size_t n_l = bs - n_u;
  if (lab.empty()) throw std::invalid_argument("make_epoch_batches: empty labeled pool");
  const std::size_t nb = (lab.size() + n_l - 1) / n_l;
  out.resize(nb);
  std::size_t lpos = 0, upos = 0;
  for (auto& b : out) {
    const std::size_t lt = std::min(n_l, lab.size() - lpos);
    b.labeled.assign(lab.begin() + static_cast<std::ptrdiff_t>(lpos), lab.begin() + static_cast<std::ptrdiff_t>(lpos + lt));
    lpos += lt;
    const std::size_t ut = std::min(n_u, unl.size() - upos);
    b.unlabeled.assign(unl.begin() + static_cast<std::ptrdiff_t>(upos), unl.begin() + static_cast<std::ptrdiff_t>(upos + ut));
    upos += ut;
  }
  return out;
}

std::string metrics_csv_header() { return "epoch,lr,loss_cls,loss_gmm," + report_csv_header(); }

std::string metrics_csv_row(const EpochLog& log) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,", log.epoch, log.lr, log.loss_cls, log.loss_gmm);
  return buf + report_csv_row(log.val);
}

std::vector<PredictionSet> predict(const Model& m, std::span<const Sample> samples,
                                   std::span<const std::size_t> indices) {
  std::vector<PredictionSet> out(indices.size());
  parallel_for(indices.size(), [&](std::size_t i) {
    const Sample& s = samples[indices[i]];
    out[i] = forward(m, s.image, &s.keypoints).probs;
  });
  return out;
}

EvalReport evaluate_model(const Model& m, std::span<const Sample> samples, std::span<const std::size_t> indices,
                          KappaWeighting weighting) {
  const auto preds = predict(m, samples, indices);
  std::vector<GradeVector> truths;
  truths.reserve(indices.size());
  for (std::size_t i : indices) truths.push_back(samples[i].grades);
  return evaluate(preds, truths, weighting);
}

Trainer::Trainer(std::span<const Sample> samples, TrainSets sets, Model model, const GmmModel* gmm, TrainConfig cfg,
                 LossConfig loss_cfg)
    : samples_(samples),
      sets_(std::move(sets)),
      model_(std::move(model)),
      gmm_(gmm),
      cfg_(std::move(cfg)),
      loss_cfg_(loss_cfg) {
  cfg_.validate();
  loss_cfg_.validate();
  if (sets_.labeled.empty()) throw std::invalid_argument("train: empty labeled set");
  for (const auto* pool : {&sets_.labeled, &sets_.unlabeled, &sets_.val}) {
    for (std::size_t i : *pool) {
      if (i >= samples_.size()) throw std::out_of_range("train: sample index out of range");
    }
  }
  std::vector<GradeVector> labels;
  for (std::size_t i : sets_.labeled) {
    if (!samples_[i].labeled) throw std::invalid_argument("train: labeled pool contains an unlabeled sample");
    labels.push_back(samples_[i].grades);
  }
  weights_ = compute_prevalence_weights(labels);
  adam_ = AdamState::zeros_for(std::as_const(model_.params).tensors());
}

std::vector<Batch> Trainer::batches_for(int epoch) const {
  return make_epoch_batches(sets_.labeled, sets_.unlabeled, cfg_, epoch);
}

bool Trainer::coherence_active(int epoch) const {
  return gmm_ != nullptr && loss_cfg_.lambda_gmm > 0.0 && epoch >= cfg_.warmup_epochs;
}

StepStats Trainer::step(const Batch& batch, int epoch) {
  const bool active = coherence_active(epoch);
  std::vector<std::size_t> items(batch.labeled);
  if (active) items.insert(items.end(), batch.unlabeled.begin(), batch.unlabeled.end());
  if (items.empty()) return {};

  std::vector<ForwardResult> fwd(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const Sample& s = samples_[items[i]];
    fwd[i] = forward(model_, s.image, &s.keypoints);
  });

  std::vector<BatchItem> loss_items(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    loss_items[i].logits = &fwd[i].logits;
    loss_items[i].probs = &fwd[i].probs;
    loss_items[i].label = i < batch.labeled.size() ? &samples_[items[i]].grades : nullptr;
  }
  const auto loss = combined_loss(loss_items, active ? gmm_ : nullptr, weights_, loss_cfg_, !active);

  std::vector<ModelParams> grads(items.size());
  parallel_for(items.size(), [&](std::size_t i) { grads[i] = backward(model_, fwd[i].cache, loss.logit_grads[i]); });
  // Summed in item order regardless of thread count.
  ModelParams total = std::move(grads[0]);
  for (std::size_t i = 1; i < grads.size(); ++i) total.add(grads[i]);

  adam_step(model_.params.tensors(), std::as_const(total).tensors(), adam_, lr_at(epoch, cfg_), cfg_.weight_decay);
  return {loss.cls, loss.gmm};
}

EpochLog Trainer::run_epoch() {
  if (next_epoch_ >= cfg_.epochs) throw std::logic_error("run_epoch: all epochs done");
  const int epoch = next_epoch_;
  EpochLog log;
  log.epoch = epoch + 1;
  log.lr = lr_at(epoch, cfg_);
  const auto batches = batches_for(epoch);
  for (const auto& b : batches) {
    const auto s = step(b, epoch);
    log.loss_cls += s.loss_cls;
    log.loss_gmm += s.loss_gmm;
  }
  if (!batches.empty()) {
    log.loss_cls /= static_cast<double>(batches.size());
    log.loss_gmm /= static_cast<double>(batches.size());
  }
  if (!sets_.val.empty()) log.val = evaluate_model(model_, samples_, sets_.val);
  ++next_epoch_;
  return log;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  Container c;
  c.metadata["kind"] = "checkpoint";
  c.metadata["pooling"] = std::string(pooling_name(model_.pooling));
  c.metadata["next_epoch"] = std::to_string(next_epoch_);
  c.metadata["adam_t"] = std::to_string(adam_.t);
  ExperimentConfig echo;
  echo.train = cfg_;
  echo.loss = loss_cfg_;
  c.metadata["config"] = config_to_text(echo);
  add_params(c, model_.params);
  const auto names = ModelParams::names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    c.add("adam.m." + names[i], adam_.m[i]);
    c.add("adam.v." + names[i], adam_.v[i]);
  }
  write_container(path, c);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.meta("kind") != "checkpoint") throw FormatError(path.string() + " is not a training checkpoint");
  if (parse_pooling(c.meta("pooling")) != model_.pooling) throw FormatError("checkpoint pooling differs from model");
  Model m = model_;
  read_params(c, m.params);
  AdamState a = adam_;
  const auto names = ModelParams::names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& mt = c.tensor("adam.m." + names[i]);
    const Tensor& vt = c.tensor("adam.v." + names[i]);
    if (!mt.same_shape(a.m[i]) || !vt.same_shape(a.v[i])) throw FormatError("adam state shape mismatch for " + names[i]);
    a.m[i] = mt;
    a.v[i] = vt;
  }
  a.t = std::stoull(c.meta("adam_t"));
  const int epoch = std::stoi(c.meta("next_epoch"));
  if (epoch < 0 || epoch > cfg_.epochs) throw FormatError("checkpoint epoch out of range");
  model_ = std::move(m);
  adam_ = std::move(a);
  next_epoch_ = epoch;
}

TrainResult train(std::span<const Sample> samples, const TrainSets& sets, Model init, const GmmModel* gmm,
                  const TrainConfig& cfg, const LossConfig& loss_cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  Trainer trainer(samples, sets, std::move(init), gmm, cfg, loss_cfg);
  TrainResult out;
  double best = -1.0;
  while (trainer.next_epoch() < cfg.epochs) {
    auto log = trainer.run_epoch();
    const double score = selection_score(log.val);
    if (score > best) {
      best = score;
      out.best = trainer.model();
      out.best_epoch = log.epoch;
    }
    if (on_epoch) on_epoch(log);
    out.log.push_back(std::move(log));
  }
  out.last = trainer.model();
  return out;
}

void save_model(const std::filesystem::path& path, const Model& m, const std::map<std::string, std::string>& meta) {
  Container c;
  c.metadata = meta;
  c.metadata["kind"] = "model";
  c.metadata["pooling"] = std::string(pooling_name(m.pooling));
  add_params(c, m.params);
  write_container(path, c);
}

Model load_model(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const auto& kind = c.meta("kind");
  if (kind != "model" && kind != "checkpoint") throw FormatError(path.string() + " holds no model");
  Model m = make_model(parse_pooling(c.meta("pooling")), 0);
  read_params(c, m.params);
  return m;
}

TrainSets train_sets_from(std::span<const Sample> samples, const Split& split) {
  TrainSets sets;
  for (std::size_t i : split.train) (samples[i].labeled ? sets.labeled : sets.unlabeled).push_back(i);
  sets.val = split.val;
  return sets;
}

std::string arm_name(const Arm& arm) {
  std::string s = arm.pooling == Pooling::keypoint ? "kpn" : "global";
  if (arm.coherence) s += "+cl";
  return s;
}

ArmResult run_arm(std::span<const Sample> samples, const Split& split, const Arm& arm, const ExperimentConfig& cfg) {
  cfg.validate();
  TrainSets sets = train_sets_from(samples, split);
  if (sets.labeled.empty()) throw std::invalid_argument("run_arm: no labeled training samples");
  std::optional<GmmModel> gmm;
  if (arm.coherence) {
    std::vector<GradeVector> grades;
    for (std::size_t i : sets.labeled) grades.push_back(samples[i].grades);
    const auto xs = make_gmm_training_set(grades, cfg.gmm.sigma, cfg.gmm.draws_per_sample, cfg.gmm.seed);
    gmm = gmm_fit_em(xs, cfg.gmm).model;
  } else {
    sets.unlabeled.clear();
  }
  ArmResult r;
  r.arm = arm;
  r.train = train(samples, sets, make_model(arm.pooling, cfg.train.seed), gmm ? &*gmm : nullptr, cfg.train, cfg.loss);
  r.val = evaluate_model(r.train.best, samples, sets.val);
  return r;
}

std::vector<LabelFractionRow> run_label_fractions(std::vector<Sample> samples, const Split& split,
                                                  std::span<const double> fractions, const ExperimentConfig& cfg) {
  const std::array<Arm, 2> arms{Arm{Pooling::keypoint, true}, Arm{Pooling::global, false}};
  std::vector<LabelFractionRow> rows;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("label fraction must be in (0, 1]");
    // Same permutation seed for every fraction, so the label sets are nested.
    assign_label_fraction(samples, split.train, f, cfg.train.seed ^ 0x1abe1ULL);
    for (const auto& arm : arms) {
      const auto r = run_arm(samples, split, arm, cfg);
      rows.push_back({f, arm, labeled_count_for(f, split.train.size()), r.val});
    }
  }
  return rows;
}

std::string label_fraction_csv_header() { return "fraction,arm,labeled," + report_csv_header(); }

std::string label_fraction_csv_row(const LabelFractionRow& row) {
  return fmt(row.fraction) + "," + arm_name(row.arm) + "," + std::to_string(row.labeled) + "," +
         report_csv_row(row.val);
}

}  // namespace kpn
