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
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace kpn {

inline constexpr std::size_t kNumHeads = 7;
inline constexpr std::size_t kNumOarsiHeads = 6;

// Index of each grading head; the order is the single canonical one used by
// every file format, embedding and report in the project.
enum HeadIndex : std::size_t {
  kHeadKl = 0,
  kHeadJsnL = 1,
  kHeadJsnM = 2,
  kHeadOFl = 3,
  kHeadOFm = 4,
  kHeadOTl = 5,
  kHeadOTm = 6,
};

struct GradeSchema {
  std::array<std::string_view, kNumHeads> head_names{"kl",   "jsn_l", "jsn_m", "o_fl",
                                                     "o_fm", "o_tl",  "o_tm"};
  std::array<int, kNumHeads> cardinalities{5, 4, 4, 4, 4, 4, 4};

  constexpr std::size_t offset(std::size_t head) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < head; ++i) off += static_cast<std::size_t>(cardinalities[i]);
    return off;
  }
  constexpr std::size_t cardinality(std::size_t head) const {
    return static_cast<std::size_t>(cardinalities[head]);
  }
  constexpr std::size_t embedding_dim() const { return offset(kNumHeads); }
};

inline constexpr GradeSchema kSchema{};
inline constexpr std::size_t kEmbeddingDim = kSchema.embedding_dim();
static_assert(kEmbeddingDim == 29);

struct GradeVector {
  std::array<int, kNumHeads> values{};

  int& operator[](std::size_t head) { return values[head]; }
  int operator[](std::size_t head) const { return values[head]; }
  friend bool operator==(const GradeVector&, const GradeVector&) = default;
};

bool is_valid(const GradeVector& g, const GradeSchema& s = kSchema);
// Throws std::out_of_range naming the offending head.
void validate(const GradeVector& g, const GradeSchema& s = kSchema);

// Seven per-head probability vectors (softmax outputs).
struct PredictionSet {
  std::array<std::vector<double>, kNumHeads> probs;
};

// Per-head raw scores before softmax; same block layout as PredictionSet.
using HeadLogits = std::array<std::vector<double>, kNumHeads>;

// Flattened concatenation of the seven blocks in schema order.
using EmbeddingVector = std::vector<double>;

PredictionSet make_uniform_predictions(const GradeSchema& s = kSchema);
bool is_valid(const PredictionSet& p, double tol = 1e-6, const GradeSchema& s = kSchema);

EmbeddingVector one_hot_encode(const GradeVector& g, const GradeSchema& s = kSchema);
// Per-block argmax; ties resolve to the lowest class index.
GradeVector one_hot_decode(std::span<const double> e, const GradeSchema& s = kSchema);
EmbeddingVector flatten_predictions(const PredictionSet& p, const GradeSchema& s = kSchema);
PredictionSet unflatten_predictions(std::span<const double> e, const GradeSchema& s = kSchema);
// Adds independent N(0, sigma^2) noise per coordinate. No clipping.
EmbeddingVector perturb_embedding(std::span<const double> e, double sigma, std::mt19937_64& rng);

// One row of the grades CSV. Unlabeled rows carry no grades at all, so a
// loss cannot accidentally consume the -1 placeholders written to disk.
struct GradeRow {
  std::int64_t id = 0;
  std::optional<GradeVector> grades;
  bool labeled() const { return grades.has_value(); }
};

std::vector<GradeRow> read_grades_csv(const std::filesystem::path& path);
void write_grades_csv(const std::filesystem::path& path, std::span<const GradeRow> rows);

}  // namespace kpn
