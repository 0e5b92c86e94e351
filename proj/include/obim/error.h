// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace obim {

enum class ErrorCode {
  kMalformedHeader,
  kOutOfBounds,
  kOverlappingOffsets,
  kUnsupportedDtype,
  kNonFinite,
  kEmptyTensor,
  kIo,
  kPrecondition,
  kMissingTensor,
  kShapeMismatch,
  kFingerprintMismatch,
  kDisjointness,
  kRatioSum,
  kMissingHessian,
  kMissingStats,
  kRankDeficient,
  kDivergence,
  kInvalidConfig,
  kUnavailableMethod,
};

// Stable lowercase identifier, printed by the CLI.
std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace obim
