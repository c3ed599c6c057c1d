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

#include "kpn/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

#include "kpn/persist.hpp"

namespace kpn {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

Eigen::Map<const VectorXd> as_vector(std::span<const double> x) {
  return {x.data(), static_cast<Eigen::Index>(x.size())};
}

void check_dim(const GmmModel& m, std::size_t n) {
  if (m.k() == 0) throw std::invalid_argument("gmm: empty model");
  if (n != m.dim()) {
    throw std::invalid_argument("gmm: dimension mismatch, model D=" + std::to_string(m.dim()) +
                                ", input length " + std::to_string(n));
  }
}

// Lower Cholesky factor, or nullopt if the matrix is not SPD.
bool cholesky(const MatrixXd& cov, MatrixXd& lower) {
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return false;
  lower = llt.matrixL();
  for (Eigen::Index i = 0; i < lower.rows(); ++i) {
    if (!(lower(i, i) > 0.0) || !std::isfinite(lower(i, i))) return false;
  }
  return true;
}

// Mahalanobis half-solve y = L^{-1} (x - mu) for one component.
VectorXd whiten(const GmmModel& m, std::size_t i, std::span<const double> x) {
  VectorXd d = as_vector(x) - m.means()[i];
  m.chol_factors()[i].triangularView<Eigen::Lower>().solveInPlace(d);
  return d;
}

// [K x N] matrix of log(alpha_k) + log N(x_n | k), one column per sample.
MatrixXd log_density_matrix(const GmmModel& m, const MatrixXd& data) {
  const auto k = static_cast<Eigen::Index>(m.k());
  MatrixXd out(k, data.cols());
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < k; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    MatrixXd centered = data.colwise() - m.means()[ci];
    m.chol_factors()[ci].triangularView<Eigen::Lower>().solveInPlace(centered);
    const double log_w = m.weights()[ci] > 0.0 ? std::log(m.weights()[ci]) : -std::numeric_limits<double>::infinity();
    out.row(c) = ((-0.5 * centered.colwise().squaredNorm()).array() + (m.log_norm_consts()[ci] + log_w)).matrix();
  }
  return out;
}

MatrixXd to_matrix(std::span<const EmbeddingVector> xs, std::size_t d) {
  MatrixXd data(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(xs.size()));
  for (std::size_t n = 0; n < xs.size(); ++n) {
    if (xs[n].size() != d) throw std::invalid_argument("gmm: sample " + std::to_string(n) + " has wrong length");
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(xs[n][j])) throw std::invalid_argument("gmm: non-finite sample value");
      data(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(n)) = xs[n][j];
    }
  }
  return data;
}

struct EStep {
  MatrixXd resp;                  // [K x N]
  std::vector<double> sample_ll;  // per-sample log-likelihood
  double mean_ll = 0.0;
};

EStep e_step(const GmmModel& m, const MatrixXd& data) {
  EStep e;
  e.resp = log_density_matrix(m, data);
  const auto n = data.cols();
  e.sample_ll.resize(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
  for (Eigen::Index j = 0; j < n; ++j) {
    auto col = e.resp.col(j);
    const double mx = col.maxCoeff();
    const double lse = mx + std::log((col.array() - mx).exp().sum());
    col = (col.array() - lse).exp().matrix();
    e.sample_ll[static_cast<std::size_t>(j)] = lse;
  }
  double total = 0.0;
  for (double v : e.sample_ll) total += v;
  e.mean_ll = total / static_cast<double>(n);
  return e;
}

MatrixXd sample_covariance(const MatrixXd& data, const VectorXd& mean, const VectorXd* weights, double mass) {
  MatrixXd centered = data.colwise() - mean;
  if (weights) {
    MatrixXd scaled = centered * weights->asDiagonal();
    return scaled * centered.transpose() / mass;
  }
  return centered * centered.transpose() / mass;
}

GmmModel build_with_jitter(std::vector<double> weights, std::vector<VectorXd> means, std::vector<MatrixXd> covs,
                           double jitter) {
  const auto d = means.empty() ? 0 : means[0].size();
  for (auto& cov : covs) {
    cov = 0.5 * (cov + cov.transpose()).eval();
    cov.diagonal().array() += jitter;
    // Escalate the ridge if rounding left the matrix indefinite.
    MatrixXd lower;
    double extra = std::max(jitter, 1e-12);
    for (int attempt = 0; attempt < 12 && !cholesky(cov, lower); ++attempt) {
      cov += extra * MatrixXd::Identity(d, d);
      extra *= 10.0;
    }
  }
  return GmmModel(std::move(weights), std::move(means), std::move(covs));
}

GmmModel initialize(const MatrixXd& data, const GmmFitConfig& cfg, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(data.cols());
  const auto k = static_cast<std::size_t>(cfg.k);
  const auto d = data.rows();

  // k-means++ seeding.
  std::vector<Eigen::Index> centers;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  centers.push_back(static_cast<Eigen::Index>(pick(rng)));
  std::vector<double> dist2(n, std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (centers.size() < k) {
    const auto last = data.col(centers.back());
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dist2[j] = std::min(dist2[j], (data.col(static_cast<Eigen::Index>(j)) - last).squaredNorm());
      total += dist2[j];
    }
    std::size_t chosen = n - 1;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        acc += dist2[j];
        if (acc > target && dist2[j] > 0.0) {
          chosen = j;
          break;
        }
      }
    } else {
      chosen = pick(rng);
    }
    centers.push_back(static_cast<Eigen::Index>(chosen));
  }

  // One hard-assignment pass.
  std::vector<std::size_t> assign(n);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double dd = (data.col(static_cast<Eigen::Index>(j)) - data.col(centers[c])).squaredNorm();
      if (dd < best_d) {
        best_d = dd;
        best = c;
      }
    }
    assign[j] = best;
    ++counts[best];
  }

  const VectorXd global_mean = data.rowwise().mean();
  const MatrixXd global_cov = sample_covariance(data, global_mean, nullptr, static_cast<double>(n));

  std::vector<double> weights(k);
  std::vector<VectorXd> means(k, VectorXd::Zero(d));
  std::vector<MatrixXd> covs(k);
  for (std::size_t j = 0; j < n; ++j) means[assign[j]] += data.col(static_cast<Eigen::Index>(j));
  for (std::size_t c = 0; c < k; ++c) {
    weights[c] = static_cast<double>(counts[c]) / static_cast<double>(n);
    if (counts[c] == 0) {
      means[c] = data.col(centers[c]);
      covs[c] = global_cov;
      weights[c] = 0.0;
      continue;
    }
    means[c] /= static_cast<double>(counts[c]);
    // Clusters with no more points than dimensions have a singular scatter
    // matrix; start those from the pooled covariance instead.
    if (counts[c] > static_cast<std::size_t>(d)) {
      MatrixXd members(d, static_cast<Eigen::Index>(counts[c]));
      Eigen::Index col = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (assign[j] == c) members.col(col++) = data.col(static_cast<Eigen::Index>(j));
      }
      covs[c] = sample_covariance(members, means[c], nullptr, static_cast<double>(counts[c]));
    } else {
      covs[c] = global_cov;
    }
  }
  // An empty cluster gets a small share so every component stays alive.
  double wsum = 0.0;
  for (double& w : weights) {
    if (w == 0.0) w = 1.0 / static_cast<double>(n);
    wsum += w;
  }
  for (double& w : weights) w /= wsum;
  return build_with_jitter(std::move(weights), std::move(means), std::move(covs), cfg.cov_jitter);
}

}  // namespace

GmmModel::GmmModel(std::vector<double> weights, std::vector<Eigen::VectorXd> means,
                   std::vector<Eigen::MatrixXd> covariances)
    : weights_(std::move(weights)), means_(std::move(means)), covariances_(std::move(covariances)) {
  const std::size_t k = weights_.size();
  if (k == 0) throw std::invalid_argument("GmmModel: need at least one component");
  if (means_.size() != k || covariances_.size() != k) throw std::invalid_argument("GmmModel: component count mismatch");
  const auto d = means_[0].size();
  if (d == 0) throw std::invalid_argument("GmmModel: zero dimension");
  double wsum = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("GmmModel: weights must be non-negative");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw std::invalid_argument("GmmModel: weights must sum to 1");
  chol_.resize(k);
  log_norm_.resize(k);
  const double half_d_log_2pi = 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < k; ++i) {
    if (means_[i].size() != d || covariances_[i].rows() != d || covariances_[i].cols() != d) {
      throw std::invalid_argument("GmmModel: component " + std::to_string(i) + " has wrong dimension");
    }
    if (!covariances_[i].isApprox(covariances_[i].transpose(), 1e-12)) {
      throw std::invalid_argument("GmmModel: covariance " + std::to_string(i) + " is not symmetric");
    }
    if (!cholesky(covariances_[i], chol_[i])) {
      throw std::invalid_argument("GmmModel: covariance " + std::to_string(i) + " is not positive definite");
    }
    log_norm_[i] = -half_d_log_2pi - chol_[i].diagonal().array().log().sum();
  }
}

void GmmFitConfig::validate() const {
  if (k < 1) throw std::invalid_argument("gmm: k must be >= 1");
  if (max_iters < 1) throw std::invalid_argument("gmm: max_iters must be >= 1");
  if (!(rel_tol > 0.0)) throw std::invalid_argument("gmm: rel_tol must be > 0");
  if (!(cov_jitter >= 0.0)) throw std::invalid_argument("gmm: cov_jitter must be >= 0");
  if (!(sigma >= 0.0)) throw std::invalid_argument("gmm: sigma must be >= 0");
  if (draws_per_sample < 1) throw std::invalid_argument("gmm: draws_per_sample must be >= 1");
}

GmmFitResult gmm_fit_em(std::span<const EmbeddingVector> samples, const GmmFitConfig& cfg) {
  cfg.validate();
  if (samples.size() < static_cast<std::size_t>(cfg.k)) {
    throw std::invalid_argument("gmm_fit_em: " + std::to_string(samples.size()) + " samples for " +
                                std::to_string(cfg.k) + " components");
  }
  const std::size_t d = samples[0].size();
  if (d == 0) throw std::invalid_argument("gmm_fit_em: zero-length samples");
  const MatrixXd data = to_matrix(samples, d);
  const auto n = data.cols();
  const auto k = static_cast<std::size_t>(cfg.k);

  std::mt19937_64 rng(cfg.seed);
  GmmFitResult result;
  GmmModel model = initialize(data, cfg, rng);
  EStep e = e_step(model, data);
  result.log_likelihood.push_back(e.mean_ll);

  for (int it = 1; it <= cfg.max_iters; ++it) {
    // M-step. Reductions run over samples in index order, one component at a
    // time, so the result does not depend on the thread count.
    std::vector<double> weights(k);
    std::vector<VectorXd> means(k);
    std::vector<MatrixXd> covs(k);
    const double rescue_floor = 1e-10 * static_cast<double>(n);
    for (std::size_t c = 0; c < k; ++c) {
      const VectorXd r = e.resp.row(static_cast<Eigen::Index>(c)).transpose();
      double mass = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) mass += r[j];
      if (mass < rescue_floor) {
        // Restart the component at the worst-explained sample.
        const auto worst = static_cast<Eigen::Index>(
            std::min_element(e.sample_ll.begin(), e.sample_ll.end()) - e.sample_ll.begin());
        means[c] = data.col(worst);
        const VectorXd gm = data.rowwise().mean();
        covs[c] = sample_covariance(data, gm, nullptr, static_cast<double>(n));
        weights[c] = 1.0 / static_cast<double>(n);
        ++result.rescued_components;
        continue;
      }
      weights[c] = mass / static_cast<double>(n);
      VectorXd mu = VectorXd::Zero(static_cast<Eigen::Index>(d));
      for (Eigen::Index j = 0; j < n; ++j) mu += r[j] * data.col(j);
      mu /= mass;
      means[c] = mu;
      covs[c] = sample_covariance(data, mu, &r, mass);
    }
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    for (double& w : weights) w /= wsum;
    model = build_with_jitter(std::move(weights), std::move(means), std::move(covs), cfg.cov_jitter);

    const double prev = e.mean_ll;
    e = e_step(model, data);
    result.log_likelihood.push_back(e.mean_ll);
    result.iterations = it;
    if (e.mean_ll - prev < cfg.rel_tol * std::abs(prev)) {
      result.converged = true;
      break;
    }
  }
  result.model = std::move(model);
  return result;
}

std::vector<EmbeddingVector> make_gmm_training_set(std::span<const GradeVector> grades, double sigma,
                                                   int draws_per_sample, std::uint64_t seed) {
  if (draws_per_sample < 1) throw std::invalid_argument("draws_per_sample must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<EmbeddingVector> out;
  out.reserve(grades.size() * static_cast<std::size_t>(draws_per_sample));
  for (const auto& g : grades) {
    const auto e = one_hot_encode(g);
    for (int r = 0; r < draws_per_sample; ++r) out.push_back(perturb_embedding(e, sigma, rng));
  }
  return out;
}

std::vector<double> gmm_component_log_densities(const GmmModel& m, std::span<const double> x) {
  check_dim(m, x.size());
  std::vector<double> out(m.k());
  for (std::size_t i = 0; i < m.k(); ++i) {
    const VectorXd y = whiten(m, i, x);
    const double log_w = m.weights()[i] > 0.0 ? std::log(m.weights()[i]) : -std::numeric_limits<double>::infinity();
    out[i] = log_w + m.log_norm_consts()[i] - 0.5 * y.squaredNorm();
  }
  return out;
}

double gmm_log_prob(const GmmModel& m, std::span<const double> x) {
  return log_sum_exp(gmm_component_log_densities(m, x));
}

std::vector<double> gmm_responsibilities(const GmmModel& m, std::span<const double> x) {
  auto r = gmm_component_log_densities(m, x);
  const double lse = log_sum_exp(r);
  for (double& v : r) v = std::exp(v - lse);
  return r;
}

LogProbWithGrad gmm_log_prob_and_grad(const GmmModel& m, std::span<const double> x) {
  check_dim(m, x.size());
  const std::size_t k = m.k();
  std::vector<VectorXd> whitened(k);
  std::vector<double> logd(k);
  for (std::size_t i = 0; i < k; ++i) {
    whitened[i] = whiten(m, i, x);
    const double log_w = m.weights()[i] > 0.0 ? std::log(m.weights()[i]) : -std::numeric_limits<double>::infinity();
    logd[i] = log_w + m.log_norm_consts()[i] - 0.5 * whitened[i].squaredNorm();
  }
  LogProbWithGrad out;
  out.value = log_sum_exp(logd);
  VectorXd grad = VectorXd::Zero(static_cast<Eigen::Index>(m.dim()));
  for (std::size_t i = 0; i < k; ++i) {
    const double r = std::exp(logd[i] - out.value);
    if (r == 0.0) continue;
    // Sigma^{-1} (x - mu) = L^{-T} L^{-1} (x - mu)
    VectorXd z = whitened[i];
    m.chol_factors()[i].triangularView<Eigen::Lower>().transpose().solveInPlace(z);
    grad -= r * z;
  }
  out.grad.assign(grad.data(), grad.data() + grad.size());
  return out;
}

EmbeddingVector gmm_log_prob_grad(const GmmModel& m, std::span<const double> x) {
  return gmm_log_prob_and_grad(m, x).grad;
}

namespace reference {
std::vector<double> gmm_log_prob_batch(const GmmModel& m, std::span<const EmbeddingVector> xs) {
  std::vector<double> out(xs.size());
  for (std::size_t n = 0; n < xs.size(); ++n) out[n] = gmm_log_prob(m, xs[n]);
  return out;
}
}  // namespace reference

namespace omp {
std::vector<double> gmm_log_prob_batch(const GmmModel& m, std::span<const EmbeddingVector> xs) {
  std::vector<double> out(xs.size());
  const auto n = static_cast<std::ptrdiff_t>(xs.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] = gmm_log_prob(m, xs[static_cast<std::size_t>(i)]);
    } catch (...) {
#pragma omp critical(kpn_gmm_batch_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}
}  // namespace omp

Container gmm_to_container(const GmmModel& m, double sigma, std::uint64_t seed) {
  const std::size_t k = m.k();
  const std::size_t d = m.dim();
  Tensor weights({k});
  Tensor means({k, d});
  Tensor covs({k, d, d});
  for (std::size_t i = 0; i < k; ++i) {
    weights[i] = m.weights()[i];
    for (std::size_t a = 0; a < d; ++a) {
      means(i, a) = m.means()[i][static_cast<Eigen::Index>(a)];
      for (std::size_t b = 0; b < d; ++b) {
        covs(i, a, b) = m.covariances()[i](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      }
    }
  }
  Container c;
  c.metadata["kind"] = "gmm";
  c.metadata["k"] = std::to_string(k);
  c.metadata["d"] = std::to_string(d);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", sigma);
  c.metadata["sigma"] = buf;
  c.metadata["seed"] = std::to_string(seed);
  c.add("weights", std::move(weights));
  c.add("means", std::move(means));
  c.add("covariances", std::move(covs));
  return c;
}

GmmModel gmm_from_container(const Container& c) {
  const Tensor& weights = c.tensor("weights");
  const Tensor& means = c.tensor("means");
  const Tensor& covs = c.tensor("covariances");
  if (weights.rank() != 1 || means.rank() != 2 || covs.rank() != 3) throw FormatError("gmm container: bad tensor ranks");
  const std::size_t k = weights.dim(0);
  const std::size_t d = means.dim(1);
  if (means.dim(0) != k || covs.dim(0) != k || covs.dim(1) != d || covs.dim(2) != d) {
    throw FormatError("gmm container: inconsistent tensor shapes");
  }
  if (c.metadata.count("k") && c.meta("k") != std::to_string(k)) throw FormatError("gmm container: k metadata mismatch");
  if (c.metadata.count("d") && c.meta("d") != std::to_string(d)) throw FormatError("gmm container: d metadata mismatch");
  std::vector<double> w(weights.values().begin(), weights.values().end());
  std::vector<VectorXd> mu(k, VectorXd(static_cast<Eigen::Index>(d)));
  std::vector<MatrixXd> sigma(k, MatrixXd(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      mu[i][static_cast<Eigen::Index>(a)] = means(i, a);
      for (std::size_t b = 0; b < d; ++b) {
        sigma[i](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = covs(i, a, b);
      }
    }
  }
  try {
    return GmmModel(std::move(w), std::move(mu), std::move(sigma));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("gmm container: ") + e.what());
  }
}

}  // namespace kpn
