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

#include "kpn/persist.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace kpn {

namespace {

constexpr char kMagic[4] = {'K', 'P', 'N', 'T'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<std::byte>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    if (s.size() > std::numeric_limits<std::uint32_t>::max()) throw FormatError("string too long");
    u32(static_cast<std::uint32_t>(s.size()));
    for (char ch : s) u8(static_cast<std::uint8_t>(ch));
  }
  void raw(const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) u8(static_cast<std::uint8_t>(p[i]));
  }
  std::vector<std::byte> take() { return std::move(out_); }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated container while reading ") + what);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Container::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

const Tensor& Container::tensor(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  throw FormatError("container has no tensor named '" + name + "'");
}

const std::string& Container::meta(const std::string& key) const {
  const auto it = metadata.find(key);
  if (it == metadata.end()) throw FormatError("container has no metadata key '" + key + "'");
  return it->second;
}

void Container::add(std::string name, Tensor t, DType dtype) {
  tensors.push_back({std::move(name), std::move(t), dtype});
}

std::vector<std::byte> encode_container(const Container& c) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(c.metadata.size()));
  for (const auto& [k, v] : c.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& nt : c.tensors) {
    w.str(nt.name);
    w.u8(static_cast<std::uint8_t>(nt.dtype));
    w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.dims()) w.u64(d);
    for (double v : nt.tensor.values()) {
      if (nt.dtype == DType::f64) {
        w.u64(std::bit_cast<std::uint64_t>(v));
      } else {
        w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  return w.take();
}

Container decode_container(std::span<const std::byte> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8("magic"));
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic: not a KPNT container");
  const std::uint32_t version = r.u32("version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  Container c;
  const std::uint32_t n_meta = r.u32("metadata count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string key = r.str("metadata key");
    std::string value = r.str("metadata value");
    if (!c.metadata.emplace(std::move(key), std::move(value)).second) {
      throw FormatError("duplicate metadata key");
    }
  }
  const std::uint32_t n_tensors = r.u32("tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    NamedTensor nt;
    nt.name = r.str("tensor name");
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype));
    nt.dtype = static_cast<DType>(dtype);
    const std::size_t elem = nt.dtype == DType::f64 ? 8 : 4;
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 16) throw FormatError("tensor '" + nt.name + "': invalid rank " + std::to_string(rank));
    std::vector<std::size_t> dims(rank);
    // Bound the element count by the bytes actually left, so a corrupted
    // dims field is reported instead of triggering a giant allocation.
    const std::uint64_t max_elems = r.remaining() / elem;
    std::uint64_t count = 1;
    for (auto& d : dims) {
      const std::uint64_t v = r.u64("dims");
      if (v == 0) throw FormatError("tensor '" + nt.name + "': zero dimension");
      if (v > max_elems || count > max_elems / v) {
        throw FormatError("tensor '" + nt.name + "': dims/data length mismatch");
      }
      count *= v;
      d = static_cast<std::size_t>(v);
    }
    if (count * elem > r.remaining()) throw FormatError("tensor '" + nt.name + "': dims/data length mismatch");
    std::vector<double> data(count);
    for (auto& v : data) {
      v = nt.dtype == DType::f64 ? std::bit_cast<double>(r.u64("data"))
                                 : static_cast<double>(std::bit_cast<float>(r.u32("data")));
    }
    nt.tensor = Tensor(std::move(dims), std::move(data));
    c.tensors.push_back(std::move(nt));
  }
  if (r.remaining() != 0) {
    throw FormatError("dims/data length mismatch: " + std::to_string(r.remaining()) +
                      " trailing bytes after last tensor");
  }
  return c;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw std::runtime_error("failed reading " + path.string());
  }
  return bytes;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Container read_container(const std::filesystem::path& path) { return decode_container(read_file_bytes(path)); }

std::string fnv1a_hex(std::span<const std::byte> bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kHex[h & 0xF];
    h >>= 4;
  }
  return s;
}

}  // namespace kpn
