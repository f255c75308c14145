/*
 * Copyright (c) 2026 The oac-quant Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "oac/archive.hpp"
#include "oac/error.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

namespace oac {

namespace {

constexpr char kMagic[4] = {'O', 'A', 'C', 'K'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error(Errc::kMalformedArchive, "truncated archive");
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

std::uint64_t element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
      throw Error(Errc::kMalformedArchive, "tensor dims overflow");
    }
    n *= d;
  }
  return n;
}

}  // namespace

const Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& t : entries) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const Tensor& TensorArchive::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw Error(Errc::kMalformedArchive, "missing tensor '" + name + "'");
  return *t;
}

Tensor tensor_from_matrix(std::string name, const Matrix& m) {
  Tensor t{std::move(name), {m.rows(), m.cols()}, {}};
  t.payload.reserve(m.size());
  for (double v : m.data()) t.payload.push_back(static_cast<float>(v));
  return t;
}

Matrix matrix_from_tensor(const Tensor& t) {
  std::size_t rows = 0, cols = 0;
  if (t.dims.size() == 2) {
    rows = t.dims[0];
    cols = t.dims[1];
  } else if (t.dims.size() == 1) {
    rows = 1;
    cols = t.dims[0];
  } else {
    throw Error(Errc::kShapeMismatch, "tensor '" + t.name + "' is not a matrix");
  }
  std::vector<double> data(t.payload.begin(), t.payload.end());
  return Matrix(rows, cols, std::move(data));
}

std::vector<std::uint8_t> archive_encode(const std::vector<Tensor>& tensors) {
  std::set<std::string> names;
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(TensorArchive::kVersion);
  if (tensors.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(Errc::kMalformedArchive, "too many tensors");
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (!names.insert(t.name).second) throw Error(Errc::kDuplicateName, "tensor '" + t.name + "'");
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw Error(Errc::kMalformedArchive, "tensor name too long");
    }
    if (t.dims.size() > std::numeric_limits<std::uint8_t>::max()) {
      throw Error(Errc::kMalformedArchive, "too many dims for '" + t.name + "'");
    }
    if (element_count(t.dims) != t.payload.size()) {
      throw Error(Errc::kMalformedArchive,
                  "tensor '" + t.name + "': dims product != payload length");
    }
    for (float v : t.payload) {
      if (!std::isfinite(v)) throw Error(Errc::kNonFinite, "tensor '" + t.name + "'");
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u64(d);
    for (float v : t.payload) w.f32(v);
  }
  return w.take();
}

TensorArchive archive_decode(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw Error(Errc::kMalformedArchive, "bad magic");
  TensorArchive archive;
  archive.version = r.u32();
  if (archive.version != TensorArchive::kVersion) {
    throw Error(Errc::kMalformedArchive, "unsupported version " + std::to_string(archive.version));
  }
  const std::uint32_t count = r.u32();
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = r.str(r.u16());
    if (!names.insert(t.name).second) throw Error(Errc::kDuplicateName, "tensor '" + t.name + "'");
    const std::uint8_t ndim = r.u8();
    for (std::uint8_t d = 0; d < ndim; ++d) t.dims.push_back(r.u64());
    const std::uint64_t n = element_count(t.dims);
    if (n > r.remaining() / 4) {
      throw Error(Errc::kMalformedArchive, "tensor '" + t.name + "': payload shorter than dims");
    }
    t.payload.resize(n);
    for (auto& v : t.payload) v = r.f32();
    archive.entries.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw Error(Errc::kMalformedArchive, "trailing bytes after last entry");
  return archive;
}

void archive_write(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  const auto bytes = archive_encode(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::kIo, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::kIo, "short write to '" + path.string() + "'");
}

TensorArchive archive_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIo, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return archive_decode(bytes);
  } catch (const Error& e) {
    if (e.code() != Errc::kMalformedArchive && e.code() != Errc::kDuplicateName) throw;
    throw Error(e.code(), path.string() + ": " + e.message());
  }
}

}  // namespace oac
