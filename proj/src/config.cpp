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

#include "kpn/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace kpn {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("bad number '" + v + "'");
  return out;
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(trim(item)));
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"epochs", [](ExperimentConfig& c, const std::string& v) { c.train.epochs = parse_number<int>(v); }},
      {"batch_size", [](ExperimentConfig& c, const std::string& v) { c.train.batch_size = parse_number<int>(v); }},
      {"lr", [](ExperimentConfig& c, const std::string& v) { c.train.lr = parse_number<double>(v); }},
      {"weight_decay", [](ExperimentConfig& c, const std::string& v) { c.train.weight_decay = parse_number<double>(v); }},
      {"lr_decay_epochs", [](ExperimentConfig& c, const std::string& v) { c.train.lr_decay_epochs = parse_int_list(v); }},
      {"lr_decay_factor", [](ExperimentConfig& c, const std::string& v) { c.train.lr_decay_factor = parse_number<double>(v); }},
      {"warmup_epochs", [](ExperimentConfig& c, const std::string& v) { c.train.warmup_epochs = parse_number<int>(v); }},
      {"seed", [](ExperimentConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>(v); }},
      {"unlabeled_ratio",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "auto") c.train.unlabeled_ratio.reset();
         else c.train.unlabeled_ratio = parse_number<double>(v);
       }},
      {"lambda_cls", [](ExperimentConfig& c, const std::string& v) { c.loss.lambda_cls = parse_number<double>(v); }},
      {"lambda_gmm", [](ExperimentConfig& c, const std::string& v) { c.loss.lambda_gmm = parse_number<double>(v); }},
      {"tau", [](ExperimentConfig& c, const std::string& v) { c.loss.tau = parse_number<double>(v); }},
      {"k", [](ExperimentConfig& c, const std::string& v) { c.gmm.k = parse_number<int>(v); }},
      {"sigma", [](ExperimentConfig& c, const std::string& v) { c.gmm.sigma = parse_number<double>(v); }},
      {"max_iters", [](ExperimentConfig& c, const std::string& v) { c.gmm.max_iters = parse_number<int>(v); }},
      {"rel_tol", [](ExperimentConfig& c, const std::string& v) { c.gmm.rel_tol = parse_number<double>(v); }},
      {"cov_jitter", [](ExperimentConfig& c, const std::string& v) { c.gmm.cov_jitter = parse_number<double>(v); }},
      {"gmm_seed", [](ExperimentConfig& c, const std::string& v) { c.gmm.seed = parse_number<std::uint64_t>(v); }},
      {"draws_per_sample", [](ExperimentConfig& c, const std::string& v) { c.gmm.draws_per_sample = parse_number<int>(v); }},
  };
  return table;
}

}  // namespace

void ExperimentConfig::validate() const {
  train.validate();
  loss.validate();
  gmm.validate();
}

ExperimentConfig parse_config(std::string_view text, const ExperimentConfig& defaults) {
  ExperimentConfig cfg = defaults;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const auto t = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (t.empty()) continue;
    const auto where = "config line " + std::to_string(lineno) + ": ";
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected key = value");
    const auto key = trim(t.substr(0, eq));
    const auto value = trim(t.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw std::invalid_argument(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw std::invalid_argument(where + "duplicate key '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig read_config(const std::filesystem::path& path, const ExperimentConfig& defaults) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), defaults);
}

std::string config_to_text(const ExperimentConfig& cfg) {
  std::ostringstream out;
  const auto& t = cfg.train;
  out << "epochs = " << t.epochs << '\n';
  out << "batch_size = " << t.batch_size << '\n';
  out << "lr = " << fmt(t.lr) << '\n';
  out << "weight_decay = " << fmt(t.weight_decay) << '\n';
  out << "lr_decay_epochs = ";
  for (std::size_t i = 0; i < t.lr_decay_epochs.size(); ++i) out << (i ? "," : "") << t.lr_decay_epochs[i];
  out << '\n';
  out << "lr_decay_factor = " << fmt(t.lr_decay_factor) << '\n';
  out << "warmup_epochs = " << t.warmup_epochs << '\n';
  out << "seed = " << t.seed << '\n';
  out << "unlabeled_ratio = " << (t.unlabeled_ratio ? fmt(*t.unlabeled_ratio) : std::string("auto")) << '\n';
  out << "lambda_cls = " << fmt(cfg.loss.lambda_cls) << '\n';
  out << "lambda_gmm = " << fmt(cfg.loss.lambda_gmm) << '\n';
  out << "tau = " << fmt(cfg.loss.tau) << '\n';
  out << "k = " << cfg.gmm.k << '\n';
  out << "sigma = " << fmt(cfg.gmm.sigma) << '\n';
  out << "max_iters = " << cfg.gmm.max_iters << '\n';
  out << "rel_tol = " << fmt(cfg.gmm.rel_tol) << '\n';
  out << "cov_jitter = " << fmt(cfg.gmm.cov_jitter) << '\n';
  out << "gmm_seed = " << cfg.gmm.seed << '\n';
  out << "draws_per_sample = " << cfg.gmm.draws_per_sample << '\n';
  return out.str();
}

}  // namespace kpn
