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

// kpn: synthetic data, GMM fitting, training, evaluation and gradient checks.
//
// Exit codes: 0 success, 1 usage, 2 data/IO, 3 check failure.

#include <omp.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kpn/config.hpp"
#include "kpn/dataset.hpp"
#include "kpn/gmm.hpp"
#include "kpn/gradcheck.hpp"
#include "kpn/losses.hpp"
#include "kpn/metrics.hpp"
#include "kpn/persist.hpp"
#include "kpn/synth.hpp"
#include "kpn/training.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheck = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

std::ofstream open_out(const fs::path& path) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

kpn::ExperimentConfig load_config(const fs::path& path) {
  if (path.empty()) return {};
  try {
    return kpn::read_config(path);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  kpn::SynthConfig cfg;
  bool force = false;
};

void run_synth(const SynthArgs& a) {
  if (fs::exists(a.out) && !fs::is_empty(a.out) && !a.force) {
    throw UsageError(a.out.string() + " exists and is not empty (use --force)");
  }
  const auto samples = kpn::generate(a.cfg);
  const auto sp = kpn::split(samples, {2.0, 1.0, 1.0}, a.cfg.seed);
  kpn::write_dataset(a.out, samples, sp, kpn::synth_manifest(a.cfg, samples, sp));
  const auto m = kpn::read_manifest(a.out / "manifest.txt");
  std::cout << "samples = " << m.at("n_samples") << "\nlabeled = " << m.at("labeled")
            << "\nunlabeled = " << m.at("unlabeled") << "\ntrain/val/test = " << m.at("train") << "/" << m.at("val")
            << "/" << m.at("test") << '\n';
}

// ---- fit-gmm --------------------------------------------------------------

struct FitArgs {
  fs::path grades, out, splits;
  kpn::GmmFitConfig cfg;
};

std::vector<std::int64_t> train_ids(const fs::path& splits) {
  std::ifstream in(splits);
  if (!in) throw std::runtime_error("cannot open " + splits.string());
  std::vector<std::int64_t> ids;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (line.substr(comma + 1).rfind("train", 0) == 0) ids.push_back(std::stoll(line.substr(0, comma)));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

void run_fit_gmm(const FitArgs& a) {
  const auto rows = kpn::read_grades_csv(a.grades);
  std::vector<std::int64_t> keep;
  if (!a.splits.empty()) keep = train_ids(a.splits);
  std::vector<kpn::GradeVector> grades;
  for (const auto& r : rows) {
    if (!r.labeled()) continue;
    if (!a.splits.empty() && !std::binary_search(keep.begin(), keep.end(), r.id)) continue;
    grades.push_back(*r.grades);
  }
  if (grades.empty()) throw std::runtime_error("no labeled rows in " + a.grades.string());
  const auto xs = kpn::make_gmm_training_set(grades, a.cfg.sigma, a.cfg.draws_per_sample, a.cfg.seed);
  const auto fit = kpn::gmm_fit_em(xs, a.cfg);
  ensure_parent(a.out);
  kpn::write_container(a.out, kpn::gmm_to_container(fit.model, a.cfg.sigma, a.cfg.seed));
  std::cout << "rows = " << grades.size() << "\niterations = " << fit.iterations
            << "\nconverged = " << (fit.converged ? "yes" : "no")
            << "\nlog_likelihood = " << fmt(fit.log_likelihood.back(), "%.10g") << '\n';
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  fs::path data, gmm, config, out, metrics, summary;
  bool no_kpn = false;
  bool no_coherence = false;
  std::optional<std::uint64_t> seed;
};

void run_train(const TrainArgs& a) {
  const kpn::Arm arm{a.no_kpn ? kpn::Pooling::global : kpn::Pooling::keypoint, !a.no_coherence};
  if (arm.coherence && a.gmm.empty()) throw UsageError("--gmm is required unless --no-coherence is given");
  auto cfg = load_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;

  const auto ds = kpn::read_dataset(a.data);
  auto sets = kpn::train_sets_from(ds.samples, ds.split);
  if (sets.labeled.empty()) throw std::runtime_error("no labeled training samples in " + a.data.string());
  std::optional<kpn::GmmModel> gmm;
  if (arm.coherence) {
    gmm = kpn::gmm_from_container(kpn::read_container(a.gmm));
  } else {
    sets.unlabeled.clear();
  }

  const fs::path metrics = a.metrics.empty() ? fs::path(a.out.string() + ".metrics.csv") : a.metrics;
  auto mout = open_out(metrics);
  mout << kpn::metrics_csv_header() << '\n';
  const auto result = kpn::train(ds.samples, sets, kpn::make_model(arm.pooling, cfg.train.seed), gmm ? &*gmm : nullptr,
                                 cfg.train, cfg.loss, [&](const kpn::EpochLog& log) {
                                   mout << kpn::metrics_csv_row(log) << '\n';
                                   mout.flush();
                                 });
  ensure_parent(a.out);
  kpn::save_model(a.out, result.best,
                  {{"arm", kpn::arm_name(arm)}, {"best_epoch", std::to_string(result.best_epoch)},
                   {"config", kpn::config_to_text(cfg)}});
  const auto& best = result.log[static_cast<std::size_t>(result.best_epoch - 1)].val;
  std::cout << "arm = " << kpn::arm_name(arm) << "\nbest_epoch = " << result.best_epoch
            << "\nval_kl_acc = " << fmt(best.heads[kpn::kHeadKl].accuracy)
            << "\nval_oarsi_acc = " << fmt(best.oarsi_average.accuracy) << '\n';

  if (!a.summary.empty()) {
    const bool fresh = !fs::exists(a.summary) || fs::file_size(a.summary) == 0;
    ensure_parent(a.summary);
    std::ofstream s(a.summary, std::ios::app);
    if (!s) throw std::runtime_error("cannot write " + a.summary.string());
    if (fresh) s << "arm,best_epoch," << kpn::report_csv_header() << '\n';
    s << kpn::arm_name(arm) << ',' << result.best_epoch << ',' << kpn::report_csv_row(best) << '\n';
  }
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  fs::path data, ckpt, report;
  std::string split = "test";
  std::string kappa = "quadratic";
};

void run_eval(const EvalArgs& a) {
  const auto weighting = kpn::parse_kappa_weighting(a.kappa);
  const auto ds = kpn::read_dataset(a.data);
  const auto model = kpn::load_model(a.ckpt);
  const auto& idx = a.split == "train" ? ds.split.train : a.split == "val" ? ds.split.val : ds.split.test;
  const auto report = kpn::evaluate_model(model, ds.samples, idx, weighting);
  if (!a.report.empty()) {
    ensure_parent(a.report);
    kpn::write_report(a.report, report);
  }
  std::cout << kpn::report_csv_header() << '\n' << kpn::report_csv_row(report) << '\n';
}

// ---- score ----------------------------------------------------------------

struct ScoreArgs {
  fs::path gmm, grades, out;
  double tau = 0.5;
  std::uint64_t seed = 0;
};

void run_score(const ScoreArgs& a) {
  const auto gmm = kpn::gmm_from_container(kpn::read_container(a.gmm));
  const auto rows = kpn::read_grades_csv(a.grades);
  std::vector<std::int64_t> ids;
  std::vector<kpn::GradeVector> grades;
  for (const auto& r : rows) {
    if (!r.labeled()) continue;
    ids.push_back(r.id);
    grades.push_back(*r.grades);
  }
  if (grades.empty()) throw std::runtime_error("no labeled rows in " + a.grades.string());

  // Coordinate shuffle: every head's column permuted independently, which
  // keeps the per-head marginals and destroys the joint structure.
  auto shuffled = grades;
  std::mt19937_64 rng(a.seed);
  for (std::size_t h = 0; h < kpn::kNumHeads; ++h) {
    std::vector<int> col;
    for (const auto& g : grades) col.push_back(g[h]);
    std::shuffle(col.begin(), col.end(), rng);
    for (std::size_t i = 0; i < grades.size(); ++i) shuffled[i][h] = col[i];
  }

  std::ofstream file;
  if (!a.out.empty()) file = open_out(a.out);
  std::ostream& out = a.out.empty() ? std::cout : file;
  out << "id,g,loss\n";
  double coherent = 0.0, incoherent = 0.0;
  for (std::size_t i = 0; i < grades.size(); ++i) {
    const auto e = kpn::one_hot_encode(grades[i]);
    const double g = kpn::gmm_log_prob(gmm, e);
    const double loss = kpn::incoherence_value(g, a.tau);
    coherent += loss;
    incoherent += kpn::incoherence_value(kpn::gmm_log_prob(gmm, kpn::one_hot_encode(shuffled[i])), a.tau);
    out << ids[i] << ',' << fmt(g, "%.10g") << ',' << fmt(loss, "%.10g") << '\n';
  }
  const double n = static_cast<double>(grades.size());
  std::cout << "mean_loss_coherent = " << fmt(coherent / n, "%.10g") << '\n'
            << "mean_loss_shuffled = " << fmt(incoherent / n, "%.10g") << '\n';
}

// ---- gradcheck ------------------------------------------------------------

struct GradcheckArgs {
  std::string op = "all";
  std::uint64_t seed = 0;
  int seeds = 5;
  kpn::GradcheckOptions opts;
};

void run_gradcheck(const GradcheckArgs& a) {
  std::vector<std::string> ops;
  if (a.op == "all") {
    ops = kpn::gradcheck_ops();
  } else {
    const auto& known = kpn::gradcheck_ops();
    if (std::find(known.begin(), known.end(), a.op) == known.end()) throw UsageError("unknown op '" + a.op + "'");
    ops = {a.op};
  }
  int failures = 0;
  for (const auto& op : ops) {
    for (int s = 0; s < a.seeds; ++s) {
      const auto r = kpn::run_gradcheck(op, a.seed + static_cast<std::uint64_t>(s), a.opts);
      std::cout << (r.passed() ? "PASS " : "FAIL ") << op << " seed=" << r.seed << " instances=" << r.instances
                << " max_rel_err=" << fmt(r.max_rel_error, "%.3e") << '\n';
      failures += r.passed() ? 0 : 1;
    }
  }
  if (failures > 0) throw CheckFailure(std::to_string(failures) + " gradient check(s) failed");
}

// ---- labelfrac ------------------------------------------------------------

struct LabelFracArgs {
  fs::path data, config, out;
  std::vector<double> fractions{0.2, 0.4, 1.0};
  std::optional<std::uint64_t> seed;
};

void run_labelfrac(const LabelFracArgs& a) {
  auto cfg = load_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  for (double f : a.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw UsageError("fractions must be in (0, 1]");
  }
  auto ds = kpn::read_dataset(a.data);
  const auto rows = kpn::run_label_fractions(std::move(ds.samples), ds.split, a.fractions, cfg);
  std::ofstream file;
  if (!a.out.empty()) file = open_out(a.out);
  std::ostream& out = a.out.empty() ? std::cout : file;
  out << kpn::label_fraction_csv_header() << '\n';
  for (const auto& r : rows) out << kpn::label_fraction_csv_row(r) << '\n';
}

void apply_thread_env() {
  if (const char* t = std::getenv("KPN_THREADS")) {
    const int n = std::atoi(t);
    if (n < 1) throw UsageError("KPN_THREADS must be a positive integer");
    omp_set_num_threads(n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coherence learning for multi-grade knee assessment at desk scale"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_option("--n", synth.cfg.n_samples, "Number of samples")->check(CLI::PositiveNumber);
  c_synth->add_option("--label-fraction", synth.cfg.label_fraction, "Share of labeled samples, in (0, 1]")
      ->check(CLI::Range(0.0, 1.0) & CLI::PositiveNumber);
  c_synth->add_option("--seed", synth.cfg.seed, "Random seed");
  c_synth->add_option("--image-side", synth.cfg.image_side, "Image side in pixels");
  c_synth->add_option("--noise-std", synth.cfg.noise_std, "Background noise std");
  c_synth->add_option("--grade-noise-prob", synth.cfg.grade_noise_prob, "Chance of a +-1 grade deviation")
      ->check(CLI::Range(0.0, 1.0));
  c_synth->add_option("--severity-jitter", synth.cfg.severity_jitter, "Std of per-grade severity jitter");
  c_synth->add_flag("--force", synth.force, "Write into a non-empty directory");

  FitArgs fit;
  auto* c_fit = app.add_subcommand("fit-gmm", "Fit the grade-coherence GMM on labeled grades");
  c_fit->add_option("--grades", fit.grades, "Grades CSV")->required();
  c_fit->add_option("--out", fit.out, "Output GMM container")->required();
  c_fit->add_option("--k", fit.cfg.k, "Number of components")->check(CLI::PositiveNumber);
  c_fit->add_option("--sigma", fit.cfg.sigma, "One-hot perturbation std")->check(CLI::PositiveNumber);
  c_fit->add_option("--draws", fit.cfg.draws_per_sample, "Perturbed draws per grade tuple")->check(CLI::PositiveNumber);
  c_fit->add_option("--seed", fit.cfg.seed, "Random seed");
  c_fit->add_option("--splits", fit.splits, "splits.csv; restricts fitting to the train split");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train one ablation arm");
  c_train->add_option("--data", tr.data, "Dataset directory")->required();
  c_train->add_option("--gmm", tr.gmm, "GMM container (needed unless --no-coherence)");
  c_train->add_option("--config", tr.config, "Training config file");
  c_train->add_option("--out", tr.out, "Best-model checkpoint")->required();
  c_train->add_option("--metrics", tr.metrics, "Per-epoch metrics CSV (default <out>.metrics.csv)");
  c_train->add_option("--summary", tr.summary, "Append one comparison row to this CSV");
  c_train->add_flag("--no-kpn", tr.no_kpn, "Global average pooling instead of keypoint pooling");
  c_train->add_flag("--no-coherence", tr.no_coherence, "Supervised only, no incoherence loss");
  c_train->add_option("--seed", tr.seed, "Overrides the config seed");

  EvalArgs ev;
  std::uint64_t unused_seed = 0;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  c_eval->add_option("--data", ev.data, "Dataset directory")->required();
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_eval->add_option("--report", ev.report, "key = value report file");
  c_eval->add_option("--split", ev.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  c_eval->add_option("--kappa", ev.kappa, "none, linear or quadratic")
      ->check(CLI::IsMember({"none", "linear", "quadratic"}));
  c_eval->add_option("--seed", unused_seed, "Accepted for uniformity; evaluation is deterministic");

  ScoreArgs sc;
  auto* c_score = app.add_subcommand("score", "Score grade tuples under a GMM");
  c_score->add_option("--gmm", sc.gmm, "GMM container")->required();
  c_score->add_option("--grades", sc.grades, "Grades CSV")->required();
  c_score->add_option("--tau", sc.tau, "Incoherence temperature")->check(CLI::PositiveNumber);
  c_score->add_option("--out", sc.out, "Per-row CSV (default stdout)");
  c_score->add_option("--seed", sc.seed, "Seed of the coordinate shuffle");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c_gc->add_option("--op", gc.op, "Operation name or 'all'");
  c_gc->add_option("--seed", gc.seed, "First seed");
  c_gc->add_option("--seeds", gc.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  c_gc->add_option("--instances", gc.opts.instances, "Random instances per seed")->check(CLI::PositiveNumber);

  LabelFracArgs lf;
  auto* c_lf = app.add_subcommand("labelfrac", "Label-fraction study: full method vs baseline");
  c_lf->add_option("--data", lf.data, "Dataset directory")->required();
  c_lf->add_option("--fractions", lf.fractions, "Comma-separated fractions")->delimiter(',');
  c_lf->add_option("--config", lf.config, "Training config file");
  c_lf->add_option("--out", lf.out, "Output CSV (default stdout)");
  c_lf->add_option("--seed", lf.seed, "Overrides the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    apply_thread_env();
    if (*c_synth) run_synth(synth);
    else if (*c_fit) run_fit_gmm(fit);
    else if (*c_train) run_train(tr);
    else if (*c_eval) run_eval(ev);
    else if (*c_score) run_score(sc);
    else if (*c_gc) run_gradcheck(gc);
    else if (*c_lf) run_labelfrac(lf);
  } catch (const UsageError& e) {
    std::cerr << "kpn: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CheckFailure& e) {
    std::cerr << "kpn: " << e.what() << '\n';
    return kExitCheck;
  } catch (const std::exception& e) {
    std::cerr << "kpn: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}
