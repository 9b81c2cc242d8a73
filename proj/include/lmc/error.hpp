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

#include <stdexcept>
#include <string>

namespace lmc {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  InsufficientTissue,
  DegenerateStains,
  EmptyDataset,
  Format,
  Io,
  NonFinite,
  Config,
};

inline const char *to_string(ErrorCode code) {
  switch (code) {
  case ErrorCode::InvalidArgument: return "InvalidArgument";
  case ErrorCode::ShapeMismatch: return "ShapeMismatch";
  case ErrorCode::InsufficientTissue: return "InsufficientTissue";
  case ErrorCode::DegenerateStains: return "DegenerateStains";
  case ErrorCode::EmptyDataset: return "EmptyDataset";
  case ErrorCode::Format: return "Format";
  case ErrorCode::Io: return "Io";
  case ErrorCode::NonFinite: return "NonFinite";
  case ErrorCode::Config: return "Config";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable code so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string &what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

namespace exit_code {
inline constexpr int kSuccess = 0;
inline constexpr int kConfig = 2;
inline constexpr int kData = 3;
inline constexpr int kNumeric = 4;
} // namespace exit_code

inline int exit_code_for(ErrorCode code) {
  switch (code) {
  case ErrorCode::Config:
  case ErrorCode::InvalidArgument:
    return exit_code::kConfig;
  case ErrorCode::NonFinite:
    return exit_code::kNumeric;
  default:
    return exit_code::kData;
  }
}

inline void require(bool cond, ErrorCode code, const std::string &what) {
  if (!cond) throw Error(code, what);
}

} // namespace lmc
