/*=========================================================================
 *
 *  Copyright The LMC Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>

#include "lmc/encoder.hpp"
#include "lmc/error.hpp"

// Layout (all integers and reals little-endian):
//
//   magic      8 bytes  "LMCCKPT\0"
//   version    u32
//   flags      u32      bit 0: trainer section present
//   encoder    i32 depth, heads, embed_dim, token_size, input_side, mlp_ratio,
//              projector_dim; u64 seed
//   tensors    u32 count, then per tensor: str path, u64 rows, u64 cols,
//              rows*cols f64 in row-major order
//   [trainer]  see trainer.hpp
//   end        8 bytes  "LMCEND\0\0"
//
// str = u32 byte length followed by the bytes.

namespace lmc::ckpt {

inline constexpr std::string_view kMagic{"LMCCKPT\0", 8};
inline constexpr std::string_view kEndMarker{"LMCEND\0\0", 8};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kFlagTrainer = 1u;

class Writer {
public:
  void bytes(std::string_view b) { buf_.append(b); }

  template <typename T> void pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    buf_.append(raw, sizeof(T));
  }

  void u32(std::uint32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void i32(std::int32_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  const std::string &buffer() const noexcept { return buf_; }

private:
  std::string buf_;
};

class Reader {
public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  std::string_view bytes(std::size_t n) {
    require(pos_ + n <= data_.size(), ErrorCode::Format, "truncated checkpoint");
    std::string_view out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  template <typename T> T pod() {
    const std::string_view raw = bytes(sizeof(T));
    char tmp[sizeof(T)];
    std::memcpy(tmp, raw.data(), sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(T));
    T v;
    std::memcpy(&v, tmp, sizeof(T));
    return v;
  }

  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::int32_t i32() { return pod<std::int32_t>(); }
  double f64() { return pod<double>(); }
  std::string str() {
    const std::uint32_t n = u32();
    return std::string(bytes(n));
  }

  bool at_end() const noexcept { return pos_ == data_.size(); }

private:
  std::string data_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::filesystem::path &path, const std::string &bytes) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::Io, "write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_header(Writer &w, std::uint32_t flags) {
  w.bytes(kMagic);
  w.u32(kVersion);
  w.u32(flags);
}

/// Returns the flags word.
inline std::uint32_t read_header(Reader &r) {
  require(r.bytes(kMagic.size()) == kMagic, ErrorCode::Format, "not an LMC checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  require(version == kVersion, ErrorCode::Format,
          "unsupported checkpoint version " + std::to_string(version) + " (expected " +
              std::to_string(kVersion) + ")");
  return r.u32();
}

inline void write_encoder_config(Writer &w, const EncoderConfig &c) {
  for (int v : {c.depth, c.heads, c.embed_dim, c.token_size, c.input_side, c.mlp_ratio, c.projector_dim})
    w.i32(v);
  w.u64(c.seed);
}

inline EncoderConfig read_encoder_config(Reader &r) {
  EncoderConfig c;
  c.depth = r.i32();
  c.heads = r.i32();
  c.embed_dim = r.i32();
  c.token_size = r.i32();
  c.input_side = r.i32();
  c.mlp_ratio = r.i32();
  c.projector_dim = r.i32();
  c.seed = r.u64();
  try {
    c.validate();
  } catch (const Error &e) {
    throw Error(ErrorCode::Format, std::string("checkpoint holds an invalid encoder config: ") + e.what());
  }
  return c;
}

inline void write_tensors(Writer &w, const EncoderParams &p) {
  const auto refs = tensor_refs(p);
  w.u32(static_cast<std::uint32_t>(refs.size()));
  for (const auto &[path, m] : refs) {
    w.str(path);
    w.u64(static_cast<std::uint64_t>(m->rows()));
    w.u64(static_cast<std::uint64_t>(m->cols()));
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) w.f64((*m)(r, c));
  }
}

/// Reads tensors into `p`, which must already have the expected layout.
inline void read_tensors(Reader &r, EncoderParams &p) {
  const auto refs = tensor_refs(p);
  const std::uint32_t count = r.u32();
  require(count == refs.size(), ErrorCode::Format,
          "checkpoint has " + std::to_string(count) + " tensors, config implies " +
              std::to_string(refs.size()));
  for (const auto &[path, m] : refs) {
    const std::string stored = r.str();
    require(stored == path, ErrorCode::Format, "tensor path mismatch: found '" + stored + "', expected '" + path + "'");
    const auto rows = static_cast<Eigen::Index>(r.u64());
    const auto cols = static_cast<Eigen::Index>(r.u64());
    require(rows == m->rows() && cols == m->cols(), ErrorCode::Format, "tensor shape mismatch for " + path);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) (*m)(i, j) = r.f64();
  }
}

struct EncoderCheckpoint {
  EncoderConfig config;
  EncoderParams params;
};

inline void save_encoder(const std::filesystem::path &path, const EncoderConfig &cfg, const EncoderParams &params) {
  Writer w;
  write_header(w, 0);
  write_encoder_config(w, cfg);
  write_tensors(w, params);
  w.bytes(kEndMarker);
  write_file(path, w.buffer());
}

/// Loads the encoder part of any checkpoint, including full training ones.
inline EncoderCheckpoint load_encoder(const std::filesystem::path &path) {
  Reader r(read_file(path));
  const std::uint32_t flags = read_header(r);
  EncoderCheckpoint out;
  out.config = read_encoder_config(r);
  out.params = zero_params(out.config);
  read_tensors(r, out.params);
  if ((flags & kFlagTrainer) == 0) {
    require(r.bytes(kEndMarker.size()) == kEndMarker, ErrorCode::Format, "missing checkpoint end marker");
    require(r.at_end(), ErrorCode::Format, "trailing bytes after checkpoint end marker");
  }
  return out;
}

} // namespace lmc::ckpt
