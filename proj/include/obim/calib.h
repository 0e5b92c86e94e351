// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

// Forward engine for small layered models, plus the per-layer input
// statistics that give the layer-wise diagonal Hessian of the squared output
// error ||dW X||^2, i.e. H = 2 X X^T.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obim/tensor.h"

namespace obim {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { kIdentity, kRelu, kTanh };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view name);

struct LayerSpec {
  std::string weight_name;  // [out_dim, in_dim]
  std::optional<std::string> bias_name;  // [out_dim]
  Activation activation = Activation::kIdentity;

  bool operator==(const LayerSpec&) const = default;
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::int64_t input_dim = 0;

  bool operator==(const ModelSpec&) const = default;
};

// Double-precision copy of model weights, used by the training engine.
using ParamSet = std::map<std::string, DeltaTensor>;
ParamSet to_params(const TensorMap& weights);
TensorMap from_params(const ParamSet& params);

// Checks names, 2-D weights, bias shapes and chained dimensions.
void validate_spec(const ModelSpec& spec, const TensorMap& weights);
void validate_spec(const ModelSpec& spec, const ParamSet& params);

// Whether `name` is the weight of some layer in spec.
bool is_linear_weight(const ModelSpec& spec, const std::string& name);

Matrix to_matrix(const Tensor& t);
Tensor from_matrix(const Matrix& m);

struct LayerStats {
  std::vector<double> sqmean;  // (1/N) sum_n x_j(n)^2
  std::vector<double> mean;    // (1/N) sum_n x_j(n)
};

struct ActivationStats {
  std::map<std::string, LayerStats> layers;  // keyed by weight name
  std::int64_t sample_count = 0;
};

// Per-layer values of one forward pass. inputs[l] feeds layer l,
// preact[l] = inputs[l] W^T + b, and output = act(preact.back()).
struct ForwardTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> preact;
  Matrix output;
};

ForwardTrace forward_trace(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs);
ForwardTrace forward_trace(const ModelSpec& spec, const TensorMap& weights, const Matrix& inputs);

// Derivative of the activation, evaluated at pre-activation values.
Matrix activation_derivative(Activation act, const Matrix& preact);

struct ForwardResult {
  Matrix outputs;
  ActivationStats stats;
};

// Runs the model on [N, input_dim] inputs and records, for every layer, the
// mean and mean square of each input feature. Needs inputs only, no targets.
ForwardResult forward_collect(const ModelSpec& spec, const TensorMap& weights, const Matrix& inputs);

// How the diagonal Hessian is formed from the collected statistics.
enum class HessianPolicy {
  kMeanOfSquares,  // h_j = 2 * mean(x_j^2), the diagonal of 2 X X^T / N
  kSquareOfMean,   // h_j = 2 * mean(x_j)^2
};

using HessianDiag = std::map<std::string, std::vector<double>>;

HessianDiag hessian_diag(const ActivationStats& stats, HessianPolicy policy = HessianPolicy::kMeanOfSquares);

// Sample-count-weighted combination; commutative.
ActivationStats merge_stats(const ActivationStats& a, const ActivationStats& b);

// Stats file: one "<weight>.sqmean" and one "<weight>.mean" tensor per layer,
// "sample_count" in the metadata.
void write_stats(const ActivationStats& stats, const std::filesystem::path& path);
ActivationStats read_stats(const std::filesystem::path& path);
TensorMap stats_to_tensors(const ActivationStats& stats);
ActivationStats stats_from_tensors(const TensorMap& map);

// Calibration input file: a single "inputs" tensor of shape [N, input_dim].
Matrix read_calibration_inputs(const std::filesystem::path& path);

}  // namespace obim
