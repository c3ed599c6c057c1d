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

#include "kpn/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace kpn {

KappaWeighting parse_kappa_weighting(std::string_view s) {
  if (s == "none") return KappaWeighting::none;
  if (s == "linear") return KappaWeighting::linear;
  if (s == "quadratic") return KappaWeighting::quadratic;
  throw std::invalid_argument("unknown kappa weighting '" + std::string(s) + "'");
}

std::string_view to_string(KappaWeighting w) {
  switch (w) {
    case KappaWeighting::none: return "none";
    case KappaWeighting::linear: return "linear";
    case KappaWeighting::quadratic: return "quadratic";
  }
  return "?";
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0.0) {
  if (classes == 0) throw std::invalid_argument("ConfusionMatrix: need at least one class");
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::vector<double> counts)
    : classes_(classes), counts_(std::move(counts)) {
  if (classes == 0 || counts_.size() != classes * classes) throw std::invalid_argument("ConfusionMatrix: bad size");
  for (double v : counts_) {
    if (!(v >= 0.0)) throw std::invalid_argument("ConfusionMatrix: counts must be >= 0");
  }
}

double ConfusionMatrix::total() const {
  double s = 0.0;
  for (double v : counts_) s += v;
  return s;
}

double kappa(const ConfusionMatrix& confusion, KappaWeighting weighting) {
  const std::size_t c = confusion.classes();
  const double n = confusion.total();
  if (!(n > 0.0)) throw std::invalid_argument("kappa: empty confusion matrix");
  std::vector<double> rows(c, 0.0), cols(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      rows[i] += confusion.at(i, j);
      cols[j] += confusion.at(i, j);
    }
  }
  double observed = 0.0;
  double expected = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double d = std::abs(static_cast<double>(i) - static_cast<double>(j));
      double w = 0.0;
      switch (weighting) {
        case KappaWeighting::none: w = i == j ? 0.0 : 1.0; break;
        case KappaWeighting::linear: w = d; break;
        case KappaWeighting::quadratic: w = d * d; break;
      }
      observed += w * confusion.at(i, j);
      expected += w * rows[i] * cols[j] / n;
    }
  }
  if (expected == 0.0) return observed == 0.0 ? 1.0 : 0.0;
  return 1.0 - observed / expected;
}

GradeVector predicted_grades(const PredictionSet& p) {
  GradeVector g;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const auto& v = p.probs[h];
    std::size_t best = 0;
    for (std::size_t k = 1; k < v.size(); ++k) {
      if (v[k] > v[best]) best = k;
    }
    g[h] = static_cast<int>(best);
  }
  return g;
}

EvalReport evaluate(std::span<const PredictionSet> predictions, std::span<const GradeVector> truths,
                    KappaWeighting weighting) {
  if (predictions.size() != truths.size()) throw std::invalid_argument("evaluate: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("evaluate: empty input");
  EvalReport report;
  report.count = predictions.size();
  report.weighting = weighting;
  const double n = static_cast<double>(predictions.size());
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    ConfusionMatrix cm(kSchema.cardinality(h));
    double hits = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      validate(truths[i]);
      const auto pred = predicted_grades(predictions[i]);
      const int t = truths[i][h];
      const int q = pred[h];
      cm.add(static_cast<std::size_t>(t), static_cast<std::size_t>(q));
      if (t == q) hits += 1.0;
      sq += static_cast<double>((t - q) * (t - q));
    }
    report.heads[h] = {hits / n, std::sqrt(sq / n), kappa(cm, weighting)};
  }
  for (std::size_t h = kHeadJsnL; h < kNumHeads; ++h) {
    report.oarsi_average.accuracy += report.heads[h].accuracy;
    report.oarsi_average.rmse += report.heads[h].rmse;
    report.oarsi_average.kappa += report.heads[h].kappa;
  }
  report.oarsi_average.accuracy /= static_cast<double>(kNumOarsiHeads);
  report.oarsi_average.rmse /= static_cast<double>(kNumOarsiHeads);
  report.oarsi_average.kappa /= static_cast<double>(kNumOarsiHeads);
  return report;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  char buf[64];
  auto put = [&](const std::string& key, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out << key << " = " << buf << '\n';
  };
  out << "count = " << report.count << '\n';
  out << "kappa_weighting = " << to_string(report.weighting) << '\n';
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const std::string name(kSchema.head_names[h]);
    put(name + ".accuracy", report.heads[h].accuracy);
    put(name + ".rmse", report.heads[h].rmse);
    put(name + ".kappa", report.heads[h].kappa);
  }
  put("oarsi_average.accuracy", report.oarsi_average.accuracy);
  put("oarsi_average.rmse", report.oarsi_average.rmse);
  put("oarsi_average.kappa", report.oarsi_average.kappa);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string report_csv_header() { return "val_kl_acc,val_oarsi_acc,val_kl_rmse,val_oarsi_rmse"; }

std::string report_csv_row(const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f", r.heads[kHeadKl].accuracy, r.oarsi_average.accuracy,
                r.heads[kHeadKl].rmse, r.oarsi_average.rmse);
  return buf;
}

}  // namespace kpn
