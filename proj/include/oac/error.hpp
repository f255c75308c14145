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

#include <stdexcept>
#include <string>
#include <string_view>

namespace oac {

enum class Errc {
  kNotPositiveDefinite,
  kNonFinite,
  kMalformedArchive,
  kDuplicateName,
  kDimMismatch,
  kShapeMismatch,
  kEmptyAccumulator,
  kEmptyInput,
  kEmptyGroup,
  kNegativeAlpha,
  kNonPositiveDiagonal,
  kTokenOutOfRange,
  kCorpusTooSmall,
  kArchitectureMismatch,
  kConfig,
  kIo,
};

inline std::string_view errc_name(Errc code);

/// Every failure raised by the library carries one of the Errc kinds so that
/// callers (the CLI in particular) can map it onto a recovery path or an exit
/// code without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), message_(what) {}

  Errc code() const noexcept { return code_; }
  /// The message without the kind prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  Errc code_;
  std::string message_;
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::kNotPositiveDefinite: return "NotPositiveDefinite";
    case Errc::kNonFinite: return "NonFinite";
    case Errc::kMalformedArchive: return "MalformedArchive";
    case Errc::kDuplicateName: return "DuplicateName";
    case Errc::kDimMismatch: return "DimMismatch";
    case Errc::kShapeMismatch: return "ShapeMismatch";
    case Errc::kEmptyAccumulator: return "EmptyAccumulator";
    case Errc::kEmptyInput: return "EmptyInput";
    case Errc::kEmptyGroup: return "EmptyGroup";
    case Errc::kNegativeAlpha: return "NegativeAlpha";
    case Errc::kNonPositiveDiagonal: return "NonPositiveDiagonal";
    case Errc::kTokenOutOfRange: return "TokenOutOfRange";
    case Errc::kCorpusTooSmall: return "CorpusTooSmall";
    case Errc::kArchitectureMismatch: return "ArchitectureMismatch";
    case Errc::kConfig: return "ConfigError";
    case Errc::kIo: return "IoError";
  }
  return "Unknown";
}

}  // namespace oac
