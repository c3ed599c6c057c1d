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

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include "doctest.h"
#include "kpn/persist.hpp"

using namespace kpn;

namespace {

Container sample_container() {
  Container c;
  c.metadata["kind"] = "test";
  c.metadata["note"] = "a = b, c";
  Tensor a({2, 3});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.1 * static_cast<double>(i) - 0.25;
  c.add("a", a);
  Tensor special({4});
  special[0] = -0.0;
  special[1] = std::numeric_limits<double>::denorm_min();
  special[2] = std::numeric_limits<double>::infinity();
  special[3] = std::numeric_limits<double>::max();
  c.add("special", special);
  c.add("narrow", Tensor({1, 2, 1, 2}, 1.5), DType::f32);
  return c;
}

void put_u64(std::vector<std::byte>& b, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
}

}  // namespace

TEST_CASE("round trip is bit exact") {
  const auto c = sample_container();
  const auto bytes = encode_container(c);
  const auto back = decode_container(bytes);
  CHECK(back.metadata == c.metadata);
  REQUIRE(back.tensors.size() == 3);
  CHECK(back.tensor("a") == c.tensor("a"));
  const auto& s = back.tensor("special");
  CHECK(std::signbit(s[0]));
  CHECK(s[1] == std::numeric_limits<double>::denorm_min());
  CHECK(std::isinf(s[2]));
  CHECK(s[3] == std::numeric_limits<double>::max());
  CHECK(back.tensors[2].dtype == DType::f32);
  CHECK(back.tensor("narrow").dims() == std::vector<std::size_t>{1, 2, 1, 2});
  CHECK(encode_container(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "kpn_test_container.kpnt";
  write_container(path, c);
  CHECK(read_file_bytes(path) == bytes);
  CHECK(read_container(path).tensor("a") == c.tensor("a"));
  std::filesystem::remove(path);
}

TEST_CASE("metadata-only and empty containers") {
  Container c;
  c.metadata["only"] = "meta";
  const auto back = decode_container(encode_container(c));
  CHECK(back.tensors.empty());
  CHECK(back.meta("only") == "meta");
  CHECK(decode_container(encode_container(Container{})).metadata.empty());
  CHECK_THROWS_AS(back.meta("missing"), FormatError);
  CHECK_THROWS_AS(back.tensor("missing"), FormatError);
  CHECK(back.find("missing") == nullptr);
}

TEST_CASE("layout of a minimal file") {
  Container c;
  c.add("x", Tensor({2}, 1.0));
  const auto b = encode_container(c);
  // magic, version, 0 metadata, 1 tensor, name, dtype, rank, dims, data
  CHECK(b.size() == 4 + 4 + 4 + 4 + (4 + 1) + 1 + 4 + 8 + 2 * 8);
  CHECK(std::memcmp(b.data(), "KPNT", 4) == 0);
  CHECK(b[4] == std::byte{1});
  CHECK(b[12] == std::byte{1});
  CHECK(b[20] == std::byte{'x'});
  CHECK(b[21] == std::byte{1});
  const double one = 1.0;
  CHECK(std::memcmp(b.data() + 34, &one, 8) == 0);
}

TEST_CASE("corruption is reported as FormatError") {
  Container c;
  c.add("x", Tensor({2}, 1.0));
  const auto good = encode_container(c);
  const std::size_t dims_at = 26;

  auto magic = good;
  magic[0] = std::byte{'X'};
  CHECK_THROWS_AS(decode_container(magic), FormatError);

  auto version = good;
  version[4] = std::byte{2};
  CHECK_THROWS_AS(decode_container(version), FormatError);

  auto longer = good;
  put_u64(longer, dims_at, 3);
  CHECK_THROWS_AS(decode_container(longer), FormatError);
  auto shorter = good;
  put_u64(shorter, dims_at, 1);
  CHECK_THROWS_AS(decode_container(shorter), FormatError);
  auto huge = good;
  put_u64(huge, dims_at, std::numeric_limits<std::uint64_t>::max() / 4);
  CHECK_THROWS_AS(decode_container(huge), FormatError);

  auto dtype = good;
  dtype[21] = std::byte{7};
  CHECK_THROWS_AS(decode_container(dtype), FormatError);

  for (std::size_t cut = 0; cut < good.size(); ++cut) {
    const std::vector<std::byte> t(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode_container(t), FormatError);
  }
  auto trailing = good;
  trailing.push_back(std::byte{0});
  CHECK_THROWS_AS(decode_container(trailing), FormatError);
}

TEST_CASE("random corruption never crashes") {
  const auto good = encode_container(sample_container());
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> pos(0, good.size() - 1);
  std::uniform_int_distribution<int> byte(0, 255);
  int decoded = 0, rejected = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    auto b = good;
    const int flips = 1 + trial % 4;
    for (int f = 0; f < flips; ++f) b[pos(rng)] = static_cast<std::byte>(byte(rng));
    try {
      (void)decode_container(b);
      ++decoded;
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  CHECK(decoded + rejected == 3000);
  CHECK(rejected > 0);
}

TEST_CASE("fnv1a") {
  CHECK(fnv1a_hex({}) == "cbf29ce484222325");
  const char* a = "a";
  CHECK(fnv1a_hex(std::as_bytes(std::span(a, 1))) == "af63dc4c8601ec8c");
  const char* foobar = "foobar";
  CHECK(fnv1a_hex(std::as_bytes(std::span(foobar, 6))) == "85944171f73967e8");
}

TEST_CASE("missing file") {
  CHECK_THROWS_AS(read_container("/nonexistent/kpn/file.kpnt"), std::runtime_error);
}
