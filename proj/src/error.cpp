// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/error.h"

namespace obim {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMalformedHeader: return "malformed_header";
    case ErrorCode::kOutOfBounds: return "out_of_bounds";
    case ErrorCode::kOverlappingOffsets: return "overlapping_offsets";
    case ErrorCode::kUnsupportedDtype: return "unsupported_dtype";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kEmptyTensor: return "empty_tensor";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kPrecondition: return "precondition";
    case ErrorCode::kMissingTensor: return "missing_tensor";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kFingerprintMismatch: return "fingerprint_mismatch";
    case ErrorCode::kDisjointness: return "disjointness";
    case ErrorCode::kRatioSum: return "ratio_sum";
    case ErrorCode::kMissingHessian: return "missing_hessian";
    case ErrorCode::kMissingStats: return "missing_stats";
    case ErrorCode::kRankDeficient: return "rank_deficient";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kInvalidConfig: return "invalid_config";
    case ErrorCode::kUnavailableMethod: return "unavailable_method";
  }
  return "unknown";
}

}  // namespace obim
