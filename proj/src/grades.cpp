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

#include "kpn/grades.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace kpn {

namespace {

constexpr std::string_view kGradesHeader = "id,kl,jsn_l,jsn_m,o_fl,o_fm,o_tl,o_tm,labeled";

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

long long parse_int(const std::string& s, const std::string& context) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size()) throw std::runtime_error(context + ": not an integer: '" + s + "'");
  return v;
}

}  // namespace

bool is_valid(const GradeVector& g, const GradeSchema& s) {
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    if (g[h] < 0 || g[h] >= s.cardinalities[h]) return false;
  }
  return true;
}

void validate(const GradeVector& g, const GradeSchema& s) {
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    if (g[h] < 0 || g[h] >= s.cardinalities[h]) {
      throw std::out_of_range("grade " + std::to_string(g[h]) + " out of range for head " +
                              std::string(s.head_names[h]) + " (cardinality " +
                              std::to_string(s.cardinalities[h]) + ")");
    }
  }
}

PredictionSet make_uniform_predictions(const GradeSchema& s) {
  PredictionSet p;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const auto c = s.cardinality(h);
    p.probs[h].assign(c, 1.0 / static_cast<double>(c));
  }
  return p;
}

bool is_valid(const PredictionSet& p, double tol, const GradeSchema& s) {
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    if (p.probs[h].size() != s.cardinality(h)) return false;
    double sum = 0.0;
    for (double v : p.probs[h]) {
      if (!(v >= 0.0 && v <= 1.0)) return false;
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol) return false;
  }
  return true;
}

EmbeddingVector one_hot_encode(const GradeVector& g, const GradeSchema& s) {
  validate(g, s);
  EmbeddingVector e(s.embedding_dim(), 0.0);
  for (std::size_t h = 0; h < kNumHeads; ++h) e[s.offset(h) + static_cast<std::size_t>(g[h])] = 1.0;
  return e;
}

GradeVector one_hot_decode(std::span<const double> e, const GradeSchema& s) {
  if (e.size() != s.embedding_dim()) {
    throw std::invalid_argument("one_hot_decode: embedding length " + std::to_string(e.size()) +
                                " != " + std::to_string(s.embedding_dim()));
  }
  GradeVector g;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const std::size_t off = s.offset(h);
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.cardinality(h); ++c) {
      if (e[off + c] > e[off + best]) best = c;
    }
    g[h] = static_cast<int>(best);
  }
  return g;
}

EmbeddingVector flatten_predictions(const PredictionSet& p, const GradeSchema& s) {
  EmbeddingVector e;
  e.reserve(s.embedding_dim());
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    if (p.probs[h].size() != s.cardinality(h)) {
      throw std::invalid_argument("flatten_predictions: head " + std::string(s.head_names[h]) +
                                  " has wrong length");
    }
    e.insert(e.end(), p.probs[h].begin(), p.probs[h].end());
  }
  return e;
}

PredictionSet unflatten_predictions(std::span<const double> e, const GradeSchema& s) {
  if (e.size() != s.embedding_dim()) throw std::invalid_argument("unflatten_predictions: bad length");
  PredictionSet p;
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    auto block = e.subspan(s.offset(h), s.cardinality(h));
    p.probs[h].assign(block.begin(), block.end());
  }
  return p;
}

EmbeddingVector perturb_embedding(std::span<const double> e, double sigma, std::mt19937_64& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("perturb_embedding: sigma must be >= 0");
  EmbeddingVector out(e.begin(), e.end());
  if (sigma == 0.0) return out;
  std::normal_distribution<double> noise(0.0, sigma);
  for (double& v : out) v += noise(rng);
  return out;
}

std::vector<GradeRow> read_grades_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open grades file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty grades file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kGradesHeader) {
    throw std::runtime_error(path.string() + ": unexpected header '" + line + "'");
  }
  std::vector<GradeRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string ctx = path.string() + ":" + std::to_string(lineno);
    const auto fields = split_csv_line(line);
    if (fields.size() != kNumHeads + 2) throw std::runtime_error(ctx + ": expected 9 fields");
    GradeRow row;
    row.id = parse_int(fields[0], ctx);
    const auto labeled = parse_int(fields[kNumHeads + 1], ctx);
    if (labeled != 0 && labeled != 1) throw std::runtime_error(ctx + ": labeled must be 0 or 1");
    if (labeled == 1) {
      GradeVector g;
      for (std::size_t h = 0; h < kNumHeads; ++h) g[h] = static_cast<int>(parse_int(fields[h + 1], ctx));
      if (!is_valid(g)) throw std::runtime_error(ctx + ": grade out of range");
      row.grades = g;
    }
    rows.push_back(row);
  }
  return rows;
}

void write_grades_csv(const std::filesystem::path& path, std::span<const GradeRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write grades file " + path.string());
  out << kGradesHeader << '\n';
  for (const auto& row : rows) {
    out << row.id;
    for (std::size_t h = 0; h < kNumHeads; ++h) out << ',' << (row.grades ? (*row.grades)[h] : -1);
    out << ',' << (row.labeled() ? 1 : 0) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace kpn
