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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpn/tensor.hpp"

// Binary tensor container (".kpnt"). Byte layout, all little-endian:
//
//   "KPNT"                         4 bytes magic
//   u32 format_version             currently 1
//   u32 metadata_count
//     metadata_count x { u32 key_len, key bytes, u32 value_len, value bytes }
//   u32 tensor_count
//     tensor_count x {
//       u32 name_len, name bytes (UTF-8)
//       u8  dtype                  0 = f32, 1 = f64
//       u32 rank
//       rank x u64 dims
//       prod(dims) x element       IEEE-754, 4 or 8 bytes
//     }
//
// The file must end exactly after the last tensor. See docs/container_format.md.
namespace kpn {

inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  DType dtype = DType::f64;
};

struct Container {
  std::map<std::string, std::string> metadata;
  std::vector<NamedTensor> tensors;

  const Tensor& tensor(const std::string& name) const;
  const Tensor* find(const std::string& name) const;
  const std::string& meta(const std::string& key) const;
  void add(std::string name, Tensor t, DType dtype = DType::f64);
};

// Reader/writer failures (bad magic, version, truncation, length mismatch).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::byte> encode_container(const Container& c);
Container decode_container(std::span<const std::byte> bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
// FNV-1a 64-bit, hex encoded. Used for manifest file hashes.
std::string fnv1a_hex(std::span<const std::byte> bytes);

}  // namespace kpn
