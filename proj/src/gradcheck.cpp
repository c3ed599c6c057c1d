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

#include "kpn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>

#include "kpn/gmm.hpp"
#include "kpn/kernels.hpp"
#include "kpn/losses.hpp"
#include "kpn/model.hpp"
#include "kpn/ops.hpp"

namespace kpn {

namespace {

using Rng = std::mt19937_64;
using Maker = GradcheckCase (*)(Rng&);

std::uint32_t name_hash(std::string_view s) {
  std::uint32_t h = 2166136261u;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 16777619u;
  }
  return h;
}

Tensor random_tensor(std::vector<std::size_t> dims, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(dims));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.values()) v = n(rng);
  return t;
}

std::size_t uniform_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor vec_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

HeadLogits logits_from(const std::vector<Tensor>& in, std::size_t offset) {
  HeadLogits z;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const auto vals = in[offset + h].values();
    z[h].assign(vals.begin(), vals.end());
  }
  return z;
}

void append_grads(std::vector<Tensor>& out, const HeadLogits& g) {
  for (const auto& v : g) out.push_back(vec_tensor(v));
}

PredictionSet softmax_all(const HeadLogits& z) {
  PredictionSet p;
  for (std::size_t h = 0; h < kNumHeads; ++h) p.probs[h] = ops::softmax(z[h]);
  return p;
}

std::vector<Tensor> random_head_logits(Rng& rng) {
  std::vector<Tensor> out;
  for (std::size_t h = 0; h < kNumHeads; ++h) out.push_back(random_tensor({static_cast<std::size_t>(kSchema.cardinalities[h])}, rng, 1.5));
  return out;
}

GradeVector random_grades(Rng& rng) {
  GradeVector g;
  for (std::size_t h = 0; h < kNumHeads; ++h) g[h] = static_cast<int>(uniform_size(rng, 0, static_cast<std::size_t>(kSchema.cardinalities[h]) - 1));
  return g;
}

PrevalenceWeights random_weights(Rng& rng) {
  std::uniform_real_distribution<double> u(0.5, 2.0);
  PrevalenceWeights w = PrevalenceWeights::uniform();
  for (auto& head : w.per_head) {
    for (double& v : head) v = u(rng);
  }
  return w;
}

// A small mixture over the grade embedding with well-conditioned
// covariances, centered near random one-hot tuples.
GmmModel random_gmm(Rng& rng) {
  const std::size_t k = 3;
  const auto d = static_cast<Eigen::Index>(kEmbeddingDim);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> w(k);
  double wsum = 0.0;
  for (double& v : w) wsum += (v = u(rng));
  for (double& v : w) v /= wsum;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covs;
  for (std::size_t i = 0; i < k; ++i) {
    const auto e = one_hot_encode(random_grades(rng));
    Eigen::VectorXd mu(d);
    for (Eigen::Index j = 0; j < d; ++j) mu[j] = e[static_cast<std::size_t>(j)] + 0.05 * n(rng);
    Eigen::MatrixXd a(d, d);
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) a(r, c) = n(rng);
    }
    Eigen::MatrixXd cov = 0.2 * (a * a.transpose()) / static_cast<double>(d) + 0.1 * Eigen::MatrixXd::Identity(d, d);
    cov = 0.5 * (cov + cov.transpose());
    means.push_back(std::move(mu));
    covs.push_back(std::move(cov));
  }
  return GmmModel(std::move(w), std::move(means), std::move(covs));
}

GradcheckCase conv2d_case(Rng& rng) {
  const std::size_t cin = uniform_size(rng, 1, 3), cout = uniform_size(rng, 1, 3);
  const std::size_t k = uniform_size(rng, 0, 1) ? 3 : 1;
  const std::size_t stride = uniform_size(rng, 1, 2);
  const std::size_t h = 2 * uniform_size(rng, 2, 3), w = 2 * uniform_size(rng, 2, 3);
  GradcheckCase c;
  c.inputs = {random_tensor({cin, h, w}, rng), random_tensor({cout, cin, k, k}, rng, 0.5), random_tensor({cout}, rng),
              random_tensor({cout, h / stride, w / stride}, rng)};
  c.value = [stride](const std::vector<Tensor>& in) {
    return dot(in[3], kernels::conv2d_forward(in[0], in[1], in[2], stride));
  };
  c.gradient = [stride](const std::vector<Tensor>& in) {
    auto g = kernels::conv2d_backward(in[0], in[1], in[3], stride);
    return std::vector<Tensor>{g.input, g.kernel, g.bias, Tensor()};
  };
  return c;
}

GradcheckCase relu_case(Rng& rng) {
  const std::size_t n = uniform_size(rng, 4, 24);
  Tensor x({n});
  std::uniform_real_distribution<double> mag(0.05, 2.0);
  for (double& v : x.values()) v = (uniform_size(rng, 0, 1) ? 1.0 : -1.0) * mag(rng);
  GradcheckCase c;
  c.inputs = {std::move(x), random_tensor({n}, rng)};
  c.value = [](const std::vector<Tensor>& in) { return dot(in[1], ops::relu_forward(in[0])); };
  c.gradient = [](const std::vector<Tensor>& in) {
    return std::vector<Tensor>{ops::relu_backward(in[0], in[1]), Tensor()};
  };
  return c;
}

GradcheckCase linear_case(Rng& rng) {
  const std::size_t out = uniform_size(rng, 1, 6), in_dim = uniform_size(rng, 1, 8);
  GradcheckCase c;
  c.inputs = {random_tensor({out, in_dim}, rng), random_tensor({out}, rng), random_tensor({in_dim}, rng),
              random_tensor({out}, rng)};
  c.value = [](const std::vector<Tensor>& in) { return dot(in[3], ops::linear_forward(in[0], in[1], in[2])); };
  c.gradient = [](const std::vector<Tensor>& in) {
    auto g = ops::linear_backward(in[0], in[2], in[3]);
    return std::vector<Tensor>{g.weight, g.bias, g.input, Tensor()};
  };
  return c;
}

GradcheckCase softmax_case(Rng& rng) {
  const std::size_t n = uniform_size(rng, 2, 6);
  GradcheckCase c;
  c.inputs = {random_tensor({n}, rng, 2.0), random_tensor({n}, rng)};
  c.value = [](const std::vector<Tensor>& in) { return dot(in[1], ops::softmax_forward(in[0])); };
  c.gradient = [](const std::vector<Tensor>& in) {
    return std::vector<Tensor>{ops::softmax_backward(ops::softmax_forward(in[0]), in[1]), Tensor()};
  };
  return c;
}

GradcheckCase bilinear_pool_case(Rng& rng) {
  const std::size_t ch = uniform_size(rng, 1, 4), h = uniform_size(rng, 2, 6), w = uniform_size(rng, 2, 6);
  const std::size_t n = uniform_size(rng, 1, 6);
  std::uniform_real_distribution<double> ux(0.0, static_cast<double>(w - 1)), uy(0.0, static_cast<double>(h - 1));
  std::vector<ops::Point> pts(n);
  for (auto& p : pts) p = {ux(rng), uy(rng)};
  // One point on the far corner to cover the clamped neighbour.
  pts.back() = {static_cast<double>(w - 1), static_cast<double>(h - 1)};
  GradcheckCase c;
  c.inputs = {random_tensor({ch, h, w}, rng), random_tensor({n, ch}, rng)};
  c.value = [pts](const std::vector<Tensor>& in) { return dot(in[1], ops::bilinear_pool_forward(in[0], pts)); };
  c.gradient = [pts](const std::vector<Tensor>& in) {
    return std::vector<Tensor>{ops::bilinear_pool_backward(in[0].dims(), pts, in[1]), Tensor()};
  };
  return c;
}

GradcheckCase mean_rows_case(Rng& rng) {
  const std::size_t n = uniform_size(rng, 1, 8), ch = uniform_size(rng, 1, 5);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < n; ++r) {
    if (uniform_size(rng, 0, 1)) rows.push_back(r);
  }
  if (rows.empty()) rows.push_back(uniform_size(rng, 0, n - 1));
  GradcheckCase c;
  c.inputs = {random_tensor({n, ch}, rng), random_tensor({ch}, rng)};
  c.value = [rows](const std::vector<Tensor>& in) { return dot(in[1], ops::mean_rows_forward(in[0], rows)); };
  c.gradient = [rows](const std::vector<Tensor>& in) {
    return std::vector<Tensor>{ops::mean_rows_backward(in[0].dims(), rows, in[1]), Tensor()};
  };
  return c;
}

GradcheckCase global_avg_pool_case(Rng& rng) {
  const std::size_t ch = uniform_size(rng, 1, 4), h = uniform_size(rng, 1, 5), w = uniform_size(rng, 1, 5);
  GradcheckCase c;
  c.inputs = {random_tensor({ch, h, w}, rng), random_tensor({ch}, rng)};
  c.value = [](const std::vector<Tensor>& in) { return dot(in[1], ops::global_avg_pool_forward(in[0])); };
  c.gradient = [](const std::vector<Tensor>& in) {
    return std::vector<Tensor>{ops::global_avg_pool_backward(in[0].dims(), in[1]), Tensor()};
  };
  return c;
}

GradcheckCase weighted_ce_case(Rng& rng) {
  const auto y = random_grades(rng);
  const auto w = random_weights(rng);
  GradcheckCase c;
  c.inputs = random_head_logits(rng);
  c.value = [y, w](const std::vector<Tensor>& in) { return weighted_ce(logits_from(in, 0), y, w).value; };
  c.gradient = [y, w](const std::vector<Tensor>& in) {
    std::vector<Tensor> g;
    append_grads(g, weighted_ce(logits_from(in, 0), y, w).logit_grads);
    return g;
  };
  return c;
}

GradcheckCase incoherence_case(Rng& rng) {
  const auto gmm = std::make_shared<GmmModel>(random_gmm(rng));
  const double tau = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
  GradcheckCase c;
  c.inputs = random_head_logits(rng);
  c.value = [gmm, tau](const std::vector<Tensor>& in) {
    return incoherence_loss_logits(*gmm, softmax_all(logits_from(in, 0)), tau).value;
  };
  c.gradient = [gmm, tau](const std::vector<Tensor>& in) {
    std::vector<Tensor> g;
    append_grads(g, incoherence_loss_logits(*gmm, softmax_all(logits_from(in, 0)), tau).logit_grads);
    return g;
  };
  return c;
}

GradcheckCase gmm_log_prob_case(Rng& rng) {
  const auto gmm = std::make_shared<GmmModel>(random_gmm(rng));
  const auto e = one_hot_encode(random_grades(rng));
  Tensor x({kEmbeddingDim});
  std::normal_distribution<double> n(0.0, 0.2);
  for (std::size_t i = 0; i < kEmbeddingDim; ++i) x[i] = e[i] + n(rng);
  GradcheckCase c;
  c.inputs = {std::move(x)};
  c.value = [gmm](const std::vector<Tensor>& in) { return gmm_log_prob(*gmm, in[0].values()); };
  c.gradient = [gmm](const std::vector<Tensor>& in) {
    return std::vector<Tensor>{vec_tensor(gmm_log_prob_grad(*gmm, in[0].values()))};
  };
  return c;
}

GradcheckCase combined_loss_case(Rng& rng) {
  constexpr std::size_t kItems = 3;
  const auto gmm = std::make_shared<GmmModel>(random_gmm(rng));
  const auto w = random_weights(rng);
  LossConfig cfg;
  std::uniform_real_distribution<double> u(0.25, 2.0);
  cfg.lambda_cls = u(rng);
  cfg.lambda_gmm = u(rng);
  cfg.tau = u(rng);
  // Items 0 and 1 labeled, item 2 unlabeled.
  const std::array<GradeVector, 2> labels{random_grades(rng), random_grades(rng)};
  GradcheckCase c;
  for (std::size_t i = 0; i < kItems; ++i) {
    auto z = random_head_logits(rng);
    c.inputs.insert(c.inputs.end(), z.begin(), z.end());
  }
  auto eval = [gmm, w, cfg, labels](const std::vector<Tensor>& in) {
    std::array<HeadLogits, kItems> z;
    std::array<PredictionSet, kItems> p;
    std::vector<BatchItem> batch(kItems);
    for (std::size_t i = 0; i < kItems; ++i) {
      z[i] = logits_from(in, i * kNumHeads);
      p[i] = softmax_all(z[i]);
      batch[i] = {&z[i], &p[i], i < labels.size() ? &labels[i] : nullptr};
    }
    return combined_loss(batch, gmm.get(), w, cfg, false);
  };
  c.value = [eval](const std::vector<Tensor>& in) { return eval(in).total; };
  c.gradient = [eval](const std::vector<Tensor>& in) {
    std::vector<Tensor> g;
    for (const auto& item : eval(in).logit_grads) append_grads(g, item);
    return g;
  };
  return c;
}

// Small images keep the full-model check fast; keypoints are spread over
// all four quadrants like the synthetic data.
constexpr std::size_t kModelSide = 16;

KeypointSet random_keypoints(Rng& rng) {
  KeypointSet kps;
  const double half = kModelSide / 2.0;
  std::uniform_real_distribution<double> u(0.0, half - 1.0);
  for (std::size_t c = 0; c < kNumCompartments; ++c) {
    const auto comp = static_cast<Compartment>(c);
    const double x0 = (comp == Compartment::fl || comp == Compartment::tl) ? 0.0 : half;
    const double y0 = (comp == Compartment::fl || comp == Compartment::fm) ? 0.0 : half;
    for (int j = 0; j < 2; ++j) kps.points.push_back({x0 + u(rng), y0 + u(rng), comp});
  }
  return kps;
}

Model model_from(Pooling pooling, const std::vector<Tensor>& in) {
  Model m = make_model(pooling, 0);
  const auto ts = m.params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) *ts[i] = in[i];
  return m;
}

double min_abs(const Tensor& t) {
  double m = INFINITY;
  for (double v : t.values()) m = std::min(m, std::abs(v));
  return m;
}

GradcheckCase model_case(Rng& rng, Pooling pooling) {
  // Redraw until no pre-activation sits within reach of a finite-difference
  // step of the relu kink.
  constexpr double kKinkMargin = 2e-4;
  for (;;) {
    Model m = make_model(pooling, rng());
    for (Tensor* b : {&m.params.conv1_b, &m.params.conv2_b}) *b = random_tensor(b->dims(), rng, 0.1);
    for (auto& b : m.params.head_b) b = random_tensor(b.dims(), rng, 0.1);
    const Tensor image = random_tensor({1, kModelSide, kModelSide}, rng);
    const KeypointSet kps = random_keypoints(rng);
    HeadLogits up;
    for (std::size_t h = 0; h < kNumHeads; ++h) {
      const auto t = random_tensor({static_cast<std::size_t>(kSchema.cardinalities[h])}, rng);
      up[h].assign(t.values().begin(), t.values().end());
    }
    const auto probe = forward(m, image, &kps);
    if (min_abs(probe.cache.pre1) < kKinkMargin || min_abs(probe.cache.pre2) < kKinkMargin) continue;

    GradcheckCase c;
    for (const Tensor* t : std::as_const(m.params).tensors()) c.inputs.push_back(*t);
    c.value = [pooling, image, kps, up](const std::vector<Tensor>& in) {
      const auto r = forward(model_from(pooling, in), image, &kps);
      double s = 0.0;
      for (std::size_t h = 0; h < kNumHeads; ++h) {
        for (std::size_t k = 0; k < up[h].size(); ++k) s += up[h][k] * r.logits[h][k];
      }
      return s;
    };
    c.gradient = [pooling, image, kps, up](const std::vector<Tensor>& in) {
      const Model mm = model_from(pooling, in);
      const auto r = forward(mm, image, &kps);
      const ModelParams g = backward(mm, r.cache, up);
      std::vector<Tensor> out;
      for (const Tensor* t : g.tensors()) out.push_back(*t);
      return out;
    };
    return c;
  }
}

GradcheckCase kpn_model_case(Rng& rng) { return model_case(rng, Pooling::keypoint); }
GradcheckCase global_model_case(Rng& rng) { return model_case(rng, Pooling::global); }

const std::vector<std::pair<std::string, Maker>>& registry() {
  static const std::vector<std::pair<std::string, Maker>> ops = {
      {"conv2d", conv2d_case},
      {"relu", relu_case},
      {"linear", linear_case},
      {"softmax", softmax_case},
      {"bilinear_pool", bilinear_pool_case},
      {"mean_rows", mean_rows_case},
      {"global_avg_pool", global_avg_pool_case},
      {"weighted_ce", weighted_ce_case},
      {"incoherence", incoherence_case},
      {"gmm_log_prob", gmm_log_prob_case},
      {"combined_loss", combined_loss_case},
      {"kpn_model", kpn_model_case},
      {"global_model", global_model_case},
  };
  return ops;
}

}  // namespace

double gradcheck_relative_error(const GradcheckCase& c, double step) {
  const auto analytic = c.gradient(c.inputs);
  if (analytic.size() != c.inputs.size()) throw std::logic_error("gradcheck: gradient count differs from inputs");
  std::vector<Tensor> x = c.inputs;
  double max_diff = 0.0, max_num = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    if (analytic[t].empty() && analytic[t].rank() == 0) continue;
    if (!analytic[t].same_shape(x[t])) throw std::logic_error("gradcheck: gradient shape differs from input");
    for (std::size_t i = 0; i < x[t].size(); ++i) {
      const double orig = x[t][i];
      x[t][i] = orig + step;
      const double fp = c.value(x);
      x[t][i] = orig - step;
      const double fm = c.value(x);
      x[t][i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[t][i])) return std::numeric_limits<double>::infinity();
      max_diff = std::max(max_diff, std::abs(analytic[t][i] - numeric));
      max_num = std::max(max_num, std::abs(numeric));
    }
  }
  return max_diff / std::max(max_num, 1e-8);
}

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, maker] : registry()) out.push_back(name);
    return out;
  }();
  return names;
}

GradcheckCase make_gradcheck_case(std::string_view op, std::uint64_t seed, int instance) {
  for (const auto& [name, maker] : registry()) {
    if (name != op) continue;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(instance), name_hash(op)};
    Rng rng(seq);
    return maker(rng);
  }
  throw std::invalid_argument("gradcheck: unknown op '" + std::string(op) + "'");
}

GradcheckResult run_gradcheck(std::string_view op, std::uint64_t seed, const GradcheckOptions& opts) {
  GradcheckResult r;
  r.op = std::string(op);
  r.seed = seed;
  r.tolerance = opts.tolerance;
  for (int i = 0; i < opts.instances; ++i) {
    const auto c = make_gradcheck_case(op, seed, i);
    r.max_rel_error = std::max(r.max_rel_error, gradcheck_relative_error(c, opts.step));
    ++r.instances;
  }
  return r;
}

}  // namespace kpn
