// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/numerics/layers.hpp"

namespace cfdiff {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointCrcError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Layout, all integers little-endian:
//   "PRSM" | u32 version | u32 metadata bytes | metadata (UTF-8 JSON) | u32 tensor count
//   per tensor: u32 name bytes | name | u8 dtype | u32 rank | i32 dims[rank] | f32 payload
//   u32 CRC32 of everything before it
inline constexpr char kCheckpointMagic[4] = {'P', 'R', 'S', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 1;

struct Checkpoint {
  std::string metadata = "{}";
  NamedTensors tensors;
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_bytes(std::vector<unsigned char>& b, const void* p, std::size_t n) {
  const auto* c = static_cast<const unsigned char*>(p);
  b.insert(b.end(), c, c + n);
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& buf, std::size_t end) : buf_(buf), end_(end) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(float* dst, std::size_t n) {
    need(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(buf_[pos_ + 4 * i + k]) << (8 * k);
      std::memcpy(dst + i, &bits, 4);
    }
    pos_ += n * 4;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointTruncatedError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<unsigned char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck, std::uint32_t version = kCheckpointVersion) {
  std::vector<unsigned char> b;
  detail::put_bytes(b, kCheckpointMagic, 4);
  detail::put_u32(b, version);
  detail::put_u32(b, static_cast<std::uint32_t>(ck.metadata.size()));
  detail::put_bytes(b, ck.metadata.data(), ck.metadata.size());
  detail::put_u32(b, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put_u32(b, static_cast<std::uint32_t>(name.size()));
    detail::put_bytes(b, name.data(), name.size());
    b.push_back(kDtypeFloat32);
    detail::put_u32(b, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::put_u32(b, static_cast<std::uint32_t>(d));
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_u32(b, bits);
    }
  }
  detail::put_u32(b, detail::crc32_of(b.data(), b.size()));
  return b;
}

/// Parses a whole container. Validation happens before any tensor is
/// returned, so failures never yield partial results.
inline Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& buf) {
  if (buf.size() < 12) throw CheckpointTruncatedError("checkpoint truncated: " + std::to_string(buf.size()) + " bytes");
  if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("not a checkpoint: bad magic bytes");
  detail::Reader head(buf, buf.size());
  head.str(4);
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(buf[body + i]) << (8 * i);
  if (detail::crc32_of(buf.data(), body) != stored) throw CheckpointCrcError("checkpoint CRC mismatch");

  detail::Reader r(buf, body);
  r.str(8);
  Checkpoint ck;
  ck.metadata = r.str(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeFloat32) throw CheckpointError("tensor '" + name + "': unsupported dtype " + std::to_string(dtype));
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("tensor '" + name + "': rank " + std::to_string(rank));
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(static_cast<int>(r.u32()));
      n *= static_cast<std::size_t>(shape.back());
    }
    if (n * 4 > body - r.pos()) throw CheckpointTruncatedError("tensor '" + name + "' payload exceeds file");
    std::vector<float> data(n);
    r.floats(data.data(), n);
    ck.tensors.emplace_back(std::move(name), Tensor::from_data(shape, std::move(data)));
  }
  if (r.pos() != body) throw CheckpointError("checkpoint has " + std::to_string(body - r.pos()) + " trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

inline void save_checkpoint(const ParameterSet& ps, const std::filesystem::path& path, const std::string& metadata = "{}") {
  save_checkpoint(Checkpoint{metadata, ps.named()}, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing checkpoint: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf);
}

/// Loads into an existing parameter set; names and shapes must match.
inline Checkpoint load_into(ParameterSet& ps, const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  ps.assign(ck.tensors);
  return ck;
}

}  // namespace cfdiff
