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
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kpn/grades.hpp"

namespace kpn {

enum class KappaWeighting { none, linear, quadratic };

KappaWeighting parse_kappa_weighting(std::string_view s);
std::string_view to_string(KappaWeighting w);

// Square count matrix: rows are true grades, columns predicted grades.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);
  ConfusionMatrix(std::size_t classes, std::vector<double> counts);

  std::size_t classes() const { return classes_; }
  double& at(std::size_t truth, std::size_t pred) { return counts_[truth * classes_ + pred]; }
  double at(std::size_t truth, std::size_t pred) const { return counts_[truth * classes_ + pred]; }
  void add(std::size_t truth, std::size_t pred) { at(truth, pred) += 1.0; }
  double total() const;

 private:
  std::size_t classes_;
  std::vector<double> counts_;
};

// Weighted Cohen's kappa, 1 - sum(w O) / sum(w E), with E from the product of
// the marginals. When the expected disagreement is zero the margins are
// degenerate; kappa is then 1 if observed disagreement is also zero, else 0.
double kappa(const ConfusionMatrix& confusion, KappaWeighting weighting);

struct HeadMetrics {
  double accuracy = 0.0;
  double rmse = 0.0;
  double kappa = 0.0;
};

struct EvalReport {
  std::array<HeadMetrics, kNumHeads> heads{};
  HeadMetrics oarsi_average{};  // unweighted mean over the six OARSI heads
  std::size_t count = 0;
  KappaWeighting weighting = KappaWeighting::quadratic;
};

// Argmax per head (ties to the lowest grade), then accuracy, RMSE over
// integer grade differences, and kappa.
EvalReport evaluate(std::span<const PredictionSet> predictions, std::span<const GradeVector> truths,
                    KappaWeighting weighting = KappaWeighting::quadratic);

GradeVector predicted_grades(const PredictionSet& p);

// key = value lines, one per head and metric plus the OARSI averages.
void write_report(const std::filesystem::path& path, const EvalReport& report);
std::string report_csv_header();
std::string report_csv_row(const EvalReport& report);

}  // namespace kpn
