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
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "kpn/grades.hpp"

namespace kpn {

struct Container;

// Full-covariance Gaussian mixture over the embedding space.
//
// Immutable once built: the Cholesky factor and the log normalizer of every
// component are computed in the constructor and all densities go through
// them (no explicit inverse or determinant anywhere).
class GmmModel {
 public:
  GmmModel() = default;
  // Throws std::invalid_argument on inconsistent sizes, weights that are
  // negative or do not sum to 1, or a covariance that is not SPD.
  GmmModel(std::vector<double> weights, std::vector<Eigen::VectorXd> means,
           std::vector<Eigen::MatrixXd> covariances);

  std::size_t k() const { return weights_.size(); }
  std::size_t dim() const { return means_.empty() ? 0 : static_cast<std::size_t>(means_[0].size()); }

  const std::vector<double>& weights() const { return weights_; }
  const std::vector<Eigen::VectorXd>& means() const { return means_; }
  const std::vector<Eigen::MatrixXd>& covariances() const { return covariances_; }
  const std::vector<Eigen::MatrixXd>& chol_factors() const { return chol_; }
  // -1/2 log((2 pi)^D |Sigma_i|) per component.
  const std::vector<double>& log_norm_consts() const { return log_norm_; }

 private:
  std::vector<double> weights_;
  std::vector<Eigen::VectorXd> means_;
  std::vector<Eigen::MatrixXd> covariances_;
  std::vector<Eigen::MatrixXd> chol_;
  std::vector<double> log_norm_;
};

struct GmmFitConfig {
  int k = 10;
  double sigma = 0.2;  // one-hot perturbation std, see make_gmm_training_set
  int max_iters = 200;
  double rel_tol = 1e-6;
  double cov_jitter = 1e-6;
  std::uint64_t seed = 0;
  // Independent perturbation draws per labeled grade tuple.
  int draws_per_sample = 10;

  void validate() const;
};

struct GmmFitResult {
  GmmModel model;
  // Mean per-sample log-likelihood: entry 0 is the initialization, entry t
  // the model after the t-th M-step.
  std::vector<double> log_likelihood;
  int iterations = 0;
  bool converged = false;
  int rescued_components = 0;
};

// Classic EM. Initialization is k-means++ seeding followed by one hard
// assignment pass; cov_jitter * I is added to every covariance after each
// M-step. Deterministic in cfg.seed.
GmmFitResult gmm_fit_em(std::span<const EmbeddingVector> samples, const GmmFitConfig& cfg);

// draws_per_sample perturbed one-hot embeddings for every grade tuple.
std::vector<EmbeddingVector> make_gmm_training_set(std::span<const GradeVector> grades, double sigma,
                                                   int draws_per_sample, std::uint64_t seed);

// log(alpha_i) + log N(x; mu_i, Sigma_i) for every component.
std::vector<double> gmm_component_log_densities(const GmmModel& m, std::span<const double> x);
// g(x) = log sum_i alpha_i N(x; mu_i, Sigma_i), via log-sum-exp.
double gmm_log_prob(const GmmModel& m, std::span<const double> x);
// Responsibilities r_i(x), normalized in log space.
std::vector<double> gmm_responsibilities(const GmmModel& m, std::span<const double> x);

struct LogProbWithGrad {
  double value = 0.0;
  EmbeddingVector grad;
};
// dg/dx = -sum_i r_i(x) Sigma_i^{-1} (x - mu_i).
LogProbWithGrad gmm_log_prob_and_grad(const GmmModel& m, std::span<const double> x);
EmbeddingVector gmm_log_prob_grad(const GmmModel& m, std::span<const double> x);

// Batched scoring: serial reference and an OpenMP loop over samples. Both
// evaluate each sample the same way, so results are bitwise identical.
namespace reference {
std::vector<double> gmm_log_prob_batch(const GmmModel& m, std::span<const EmbeddingVector> xs);
}
namespace omp {
std::vector<double> gmm_log_prob_batch(const GmmModel& m, std::span<const EmbeddingVector> xs);
}

// Round trip through the tensor container: tensors weights [K], means [K,D],
// covariances [K,D,D]; metadata k, d, sigma, seed.
Container gmm_to_container(const GmmModel& m, double sigma, std::uint64_t seed);
GmmModel gmm_from_container(const Container& c);

}  // namespace kpn
