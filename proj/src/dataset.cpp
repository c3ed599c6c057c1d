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

#include "kpn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "kpn/persist.hpp"

namespace kpn {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

const char* split_name(int which) {
  static constexpr const char* kNames[] = {"train", "val", "test"};
  return kNames[which];
}

constexpr const char* kHashedFiles[] = {"grades.csv", "truth.csv", "keypoints.csv", "images.kpnt", "splits.csv"};

}  // namespace

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    m[trim(std::string_view(t).substr(0, eq))] = trim(std::string_view(t).substr(eq + 1));
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& [k, v] : manifest) out << k << " = " << v << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::size_t labeled_count_for(double fraction, std::size_t n) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("label fraction must be in [0, 1]");
  const double raw = std::ceil(fraction * static_cast<double>(n) - 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, raw)));
}

void assign_label_fraction(std::vector<Sample>& samples, std::span<const std::size_t> subset, double fraction,
                           std::uint64_t seed) {
  const std::size_t k = labeled_count_for(fraction, subset.size());
  std::vector<std::size_t> order(subset.begin(), subset.end());
  std::sort(order.begin(), order.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) samples.at(order[i]).labeled = i < k;
}

void write_dataset(const fs::path& dir, std::span<const Sample> samples, const Split& split, Manifest manifest) {
  if (samples.empty()) throw std::invalid_argument("write_dataset: no samples");
  fs::create_directories(dir);
  const std::size_t side = samples.front().image.dim(1);

  std::vector<GradeRow> labels, truth;
  std::vector<std::pair<std::int64_t, const KeypointSet*>> kps;
  Tensor images({samples.size(), 1, side, side});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    require_shape(s.image, {1, side, side}, "write_dataset image");
    labels.push_back({s.id, s.labeled ? std::optional<GradeVector>(s.grades) : std::nullopt});
    truth.push_back({s.id, s.grades});
    kps.emplace_back(s.id, &s.keypoints);
    std::copy(s.image.values().begin(), s.image.values().end(), images.data() + i * side * side);
  }
  write_grades_csv(dir / "grades.csv", labels);
  write_grades_csv(dir / "truth.csv", truth);
  write_keypoints_csv(dir / "keypoints.csv", kps);
  Container c;
  c.metadata["kind"] = "images";
  c.add("images", std::move(images));
  write_container(dir / "images.kpnt", c);
  {
    std::ofstream out(dir / "splits.csv");
    if (!out) throw std::runtime_error("cannot write " + (dir / "splits.csv").string());
    out << "id,split\n";
    const std::array<const std::vector<std::size_t>*, 3> parts{&split.train, &split.val, &split.test};
    std::vector<int> which(samples.size(), -1);
    for (int p = 0; p < 3; ++p) {
      for (std::size_t i : *parts[static_cast<std::size_t>(p)]) which.at(i) = p;
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (which[i] < 0) throw std::invalid_argument("write_dataset: sample missing from split");
      out << samples[i].id << ',' << split_name(which[i]) << '\n';
    }
  }
  for (const char* f : kHashedFiles) manifest[std::string("hash.") + f] = fnv1a_hex(read_file_bytes(dir / f));
  write_manifest(dir / "manifest.txt", manifest);
}

LoadedDataset read_dataset(const fs::path& dir) {
  LoadedDataset out;
  out.manifest = read_manifest(dir / "manifest.txt");
  for (const char* f : kHashedFiles) {
    const auto it = out.manifest.find(std::string("hash.") + f);
    if (it == out.manifest.end()) continue;
    if (fnv1a_hex(read_file_bytes(dir / f)) != it->second) {
      throw std::runtime_error("hash mismatch for " + (dir / f).string());
    }
  }

  const auto labels = read_grades_csv(dir / "grades.csv");
  const auto truth = read_grades_csv(dir / "truth.csv");
  const auto kps = read_keypoints_csv(dir / "keypoints.csv");
  const auto c = read_container(dir / "images.kpnt");
  const Tensor& images = c.tensor("images");
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != images.dim(3)) {
    throw std::runtime_error("images.kpnt: expected [n, 1, S, S], got " + shape_string(images.dims()));
  }
  const std::size_t n = images.dim(0), side = images.dim(2);
  if (labels.size() != n || truth.size() != n) {
    throw std::runtime_error("dataset: grades/truth rows do not match image count");
  }

  std::map<std::int64_t, std::size_t> index;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = out.samples[i];
    s.id = labels[i].id;
    if (truth[i].id != s.id) throw std::runtime_error("dataset: truth.csv order differs from grades.csv");
    if (!truth[i].grades) throw std::runtime_error("dataset: truth.csv row without grades");
    s.grades = *truth[i].grades;
    s.labeled = labels[i].labeled();
    if (s.labeled && *labels[i].grades != s.grades) {
      throw std::runtime_error("dataset: labeled grades disagree with truth for id " + std::to_string(s.id));
    }
    const auto k = kps.find(s.id);
    if (k == kps.end()) throw std::runtime_error("dataset: no keypoints for id " + std::to_string(s.id));
    s.keypoints = k->second;
    s.keypoints.validate(side);
    s.image = Tensor({1, side, side}, std::vector<double>(images.data() + i * side * side,
                                                          images.data() + (i + 1) * side * side));
    if (!index.emplace(s.id, i).second) throw std::runtime_error("dataset: duplicate id " + std::to_string(s.id));
  }

  std::ifstream in(dir / "splits.csv");
  if (!in) throw std::runtime_error("cannot open " + (dir / "splits.csv").string());
  std::string line;
  std::getline(in, line);
  if (trim(line) != "id,split") throw std::runtime_error("splits.csv: bad header");
  std::vector<bool> seen(n, false);
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto comma = t.find(',');
    if (comma == std::string::npos) throw std::runtime_error("splits.csv: malformed row '" + t + "'");
    const auto id = std::stoll(t.substr(0, comma));
    const auto name = t.substr(comma + 1);
    const auto it = index.find(id);
    if (it == index.end()) throw std::runtime_error("splits.csv: unknown id " + std::to_string(id));
    if (seen[it->second]) throw std::runtime_error("splits.csv: duplicate id " + std::to_string(id));
    seen[it->second] = true;
    if (name == "train") out.split.train.push_back(it->second);
    else if (name == "val") out.split.val.push_back(it->second);
    else if (name == "test") out.split.test.push_back(it->second);
    else throw std::runtime_error("splits.csv: unknown split '" + name + "'");
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw std::runtime_error("splits.csv: not every sample is assigned");
  }
  return out;
}

}  // namespace kpn
