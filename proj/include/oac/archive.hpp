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

#pragma once

#include "oac/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace oac {

// On-disk layout, all integers little-endian:
//   "OACK" | u32 version (=1) | u32 entry count
//   per entry: u16 name length | name bytes (UTF-8) | u8 ndim | ndim x u64 dims
//              | prod(dims) x f32 payload
struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> payload;
};

struct TensorArchive {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::vector<Tensor> entries;

  const Tensor* find(const std::string& name) const;
  /// Throws MalformedArchive when the name is missing.
  const Tensor& at(const std::string& name) const;
};

Tensor tensor_from_matrix(std::string name, const Matrix& m);
/// Throws ShapeMismatch unless the tensor is 2-D (or 1-D, read as one row).
Matrix matrix_from_tensor(const Tensor& t);

/// Throws DuplicateName, NonFinite, MalformedArchive (dims/payload disagree)
/// or Io.
void archive_write(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<std::uint8_t> archive_encode(const std::vector<Tensor>& tensors);

/// Throws MalformedArchive (bad magic, version, truncation, trailing bytes)
/// naming the path, or Io if the file cannot be opened.
TensorArchive archive_read(const std::filesystem::path& path);
TensorArchive archive_decode(const std::vector<std::uint8_t>& bytes);

}  // namespace oac
