// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/calib.h"

#include <cmath>

#include <fmt/format.h>

#include "obim/error.h"
#include "obim/tensorstore.h"

namespace obim {

namespace {

constexpr const char* kSampleCountKey = "sample_count";

void apply_activation(Activation act, Matrix& m) {
  switch (act) {
    case Activation::kIdentity:
      break;
    case Activation::kRelu:
      m = m.cwiseMax(0.0);
      break;
    case Activation::kTanh:
      m = m.array().tanh().matrix();
      break;
  }
}

}  // namespace

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
  }
  return "identity";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw Error(ErrorCode::kInvalidConfig, fmt::format("unknown activation '{}'", name));
}

namespace {

template <class Map>
const Shape& shape_of(const Map& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw Error(ErrorCode::kMissingTensor, "missing tensor '" + name + "'");
  return it->second.shape;
}

template <class Map>
void validate_shapes(const ModelSpec& spec, const Map& weights) {
  if (spec.input_dim <= 0) throw Error(ErrorCode::kPrecondition, "input_dim must be positive");
  if (spec.layers.empty()) throw Error(ErrorCode::kPrecondition, "model spec has no layers");
  std::int64_t in_dim = spec.input_dim;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerSpec& layer = spec.layers[l];
    const Shape& w = shape_of(weights, layer.weight_name);
    if (w.size() != 2 || w[1] != in_dim) {
      throw Error(ErrorCode::kShapeMismatch,
                  fmt::format("layer {} weight '{}' has shape {}, expected [*, {}]", l, layer.weight_name,
                              shape_to_string(w), in_dim));
    }
    if (layer.bias_name) {
      const Shape& b = shape_of(weights, *layer.bias_name);
      if (b != Shape{w[0]}) {
        throw Error(ErrorCode::kShapeMismatch,
                    fmt::format("layer {} bias '{}' has shape {}, expected [{}]", l, *layer.bias_name,
                                shape_to_string(b), w[0]));
      }
    }
    in_dim = w[0];
  }
}

}  // namespace

void validate_spec(const ModelSpec& spec, const TensorMap& weights) { validate_shapes(spec, weights.entries); }
void validate_spec(const ModelSpec& spec, const ParamSet& params) { validate_shapes(spec, params); }

ParamSet to_params(const TensorMap& weights) {
  ParamSet p;
  for (const auto& [name, t] : weights.entries) {
    p.emplace(name, DeltaTensor(t.shape, std::vector<double>(t.data.begin(), t.data.end())));
  }
  return p;
}

TensorMap from_params(const ParamSet& params) {
  TensorMap m;
  for (const auto& [name, t] : params) {
    std::vector<float> v(t.data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(t.data[i]);
    m.entries.emplace(name, Tensor(t.shape, std::move(v)));
  }
  return m;
}

Matrix activation_derivative(Activation act, const Matrix& preact) {
  switch (act) {
    case Activation::kIdentity:
      return Matrix::Ones(preact.rows(), preact.cols());
    case Activation::kRelu:
      return (preact.array() > 0.0).cast<double>().matrix();
    case Activation::kTanh: {
      Matrix t = preact.array().tanh().matrix();
      return (1.0 - t.array().square()).matrix();
    }
  }
  return Matrix::Ones(preact.rows(), preact.cols());
}

bool is_linear_weight(const ModelSpec& spec, const std::string& name) {
  for (const auto& l : spec.layers) {
    if (l.weight_name == name) return true;
  }
  return false;
}

Matrix to_matrix(const Tensor& t) {
  if (t.shape.size() != 2) {
    throw Error(ErrorCode::kShapeMismatch, "expected a 2-D tensor, got shape " + shape_to_string(t.shape));
  }
  Matrix m(t.shape[0], t.shape[1]);
  for (std::size_t i = 0; i < t.data.size(); ++i) m.data()[i] = t.data[i];
  return m;
}

Tensor from_matrix(const Matrix& m) {
  std::vector<float> v(static_cast<std::size_t>(m.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(m.data()[i]);
  return Tensor({m.rows(), m.cols()}, std::move(v));
}

ForwardTrace forward_trace(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs) {
  validate_spec(spec, params);
  if (inputs.rows() < 1) throw Error(ErrorCode::kPrecondition, "at least one input sample is required");
  if (inputs.cols() != spec.input_dim) {
    throw Error(ErrorCode::kShapeMismatch,
                fmt::format("inputs have {} features but the model expects {}", inputs.cols(), spec.input_dim));
  }
  ForwardTrace trace;
  Matrix x = inputs;
  for (const LayerSpec& layer : spec.layers) {
    const DeltaTensor& wt = params.at(layer.weight_name);
    const Eigen::Map<const Matrix> w(wt.data.data(), wt.shape[0], wt.shape[1]);
    Matrix z = x * w.transpose();
    if (layer.bias_name) {
      const auto& b = params.at(*layer.bias_name).data;
      for (Eigen::Index j = 0; j < z.cols(); ++j) z.col(j).array() += b[static_cast<std::size_t>(j)];
    }
    trace.inputs.push_back(std::move(x));
    x = z;
    apply_activation(layer.activation, x);
    if (!x.allFinite()) {
      throw Error(ErrorCode::kNonFinite, "non-finite activation after layer '" + layer.weight_name + "'");
    }
    trace.preact.push_back(std::move(z));
  }
  trace.output = std::move(x);
  return trace;
}

ForwardTrace forward_trace(const ModelSpec& spec, const TensorMap& weights, const Matrix& inputs) {
  validate_spec(spec, weights);
  ParamSet params;
  for (const LayerSpec& layer : spec.layers) {
    for (const std::string* name : {&layer.weight_name, layer.bias_name ? &*layer.bias_name : nullptr}) {
      if (!name) continue;
      const Tensor& t = weights.at(*name);
      params.emplace(*name, DeltaTensor(t.shape, std::vector<double>(t.data.begin(), t.data.end())));
    }
  }
  return forward_trace(spec, params, inputs);
}

ForwardResult forward_collect(const ModelSpec& spec, const TensorMap& weights, const Matrix& inputs) {
  ForwardTrace trace = forward_trace(spec, weights, inputs);
  ForwardResult result;
  result.stats.sample_count = inputs.rows();
  const double inv_n = 1.0 / static_cast<double>(inputs.rows());
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const Matrix& x = trace.inputs[l];
    LayerStats s;
    s.sqmean.resize(static_cast<std::size_t>(x.cols()));
    s.mean.resize(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      s.sqmean[j] = x.col(j).squaredNorm() * inv_n;
      s.mean[j] = x.col(j).sum() * inv_n;
    }
    result.stats.layers.emplace(spec.layers[l].weight_name, std::move(s));
  }
  result.outputs = std::move(trace.output);
  return result;
}

HessianDiag hessian_diag(const ActivationStats& stats, HessianPolicy policy) {
  if (stats.sample_count < 1) throw Error(ErrorCode::kPrecondition, "stats have no samples");
  HessianDiag h;
  for (const auto& [name, s] : stats.layers) {
    std::vector<double> d(s.sqmean.size());
    for (std::size_t j = 0; j < d.size(); ++j) {
      d[j] = policy == HessianPolicy::kMeanOfSquares ? 2.0 * s.sqmean[j] : 2.0 * s.mean[j] * s.mean[j];
    }
    h.emplace(name, std::move(d));
  }
  return h;
}

ActivationStats merge_stats(const ActivationStats& a, const ActivationStats& b) {
  if (a.layers.size() != b.layers.size()) {
    throw Error(ErrorCode::kShapeMismatch, "stats cover different layer sets");
  }
  if (a.sample_count < 1 || b.sample_count < 1) throw Error(ErrorCode::kPrecondition, "stats have no samples");
  ActivationStats out;
  out.sample_count = a.sample_count + b.sample_count;
  const double na = static_cast<double>(a.sample_count);
  const double nb = static_cast<double>(b.sample_count);
  const double n = na + nb;
  // Combine as (na*x + nb*y)/n with the operands ordered by value so the
  // result is independent of argument order.
  auto combine = [&](double x, double y) {
    double wx = na * x, wy = nb * y;
    return (std::min(wx, wy) + std::max(wx, wy)) / n;
  };
  for (const auto& [name, sa] : a.layers) {
    auto it = b.layers.find(name);
    if (it == b.layers.end()) throw Error(ErrorCode::kMissingTensor, "stats lack layer '" + name + "'");
    const LayerStats& sb = it->second;
    if (sa.sqmean.size() != sb.sqmean.size() || sa.mean.size() != sb.mean.size()) {
      throw Error(ErrorCode::kShapeMismatch, "feature count differs for layer '" + name + "'");
    }
    LayerStats s;
    s.sqmean.resize(sa.sqmean.size());
    s.mean.resize(sa.mean.size());
    for (std::size_t j = 0; j < s.sqmean.size(); ++j) s.sqmean[j] = combine(sa.sqmean[j], sb.sqmean[j]);
    for (std::size_t j = 0; j < s.mean.size(); ++j) s.mean[j] = combine(sa.mean[j], sb.mean[j]);
    out.layers.emplace(name, std::move(s));
  }
  return out;
}

TensorMap stats_to_tensors(const ActivationStats& stats) {
  TensorMap m;
  for (const auto& [name, s] : stats.layers) {
    const auto n = static_cast<std::int64_t>(s.sqmean.size());
    m.entries.emplace(name + ".sqmean", Tensor({n}, std::vector<float>(s.sqmean.begin(), s.sqmean.end())));
    m.entries.emplace(name + ".mean", Tensor({n}, std::vector<float>(s.mean.begin(), s.mean.end())));
  }
  m.metadata[kSampleCountKey] = std::to_string(stats.sample_count);
  return m;
}

ActivationStats stats_from_tensors(const TensorMap& map) {
  ActivationStats stats;
  auto it = map.metadata.find(kSampleCountKey);
  if (it == map.metadata.end()) throw Error(ErrorCode::kMalformedHeader, "stats lack sample_count metadata");
  try {
    stats.sample_count = std::stoll(it->second);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kMalformedHeader, "sample_count '" + it->second + "' is not an integer");
  }
  if (stats.sample_count < 1) throw Error(ErrorCode::kMalformedHeader, "sample_count must be positive");
  const std::string sq = ".sqmean";
  for (const auto& [name, t] : map.entries) {
    if (name.size() <= sq.size() || name.compare(name.size() - sq.size(), sq.size(), sq) != 0) continue;
    const std::string weight = name.substr(0, name.size() - sq.size());
    LayerStats s;
    s.sqmean.assign(t.data.begin(), t.data.end());
    auto mit = map.entries.find(weight + ".mean");
    if (mit != map.entries.end()) {
      if (mit->second.data.size() != t.data.size()) {
        throw Error(ErrorCode::kShapeMismatch, "mean and sqmean differ in length for '" + weight + "'");
      }
      s.mean.assign(mit->second.data.begin(), mit->second.data.end());
    } else {
      s.mean.assign(t.data.size(), 0.0);
    }
    for (double v : s.sqmean) {
      if (v < 0.0) throw Error(ErrorCode::kPrecondition, "negative second moment for '" + weight + "'");
    }
    stats.layers.emplace(weight, std::move(s));
  }
  return stats;
}

void write_stats(const ActivationStats& stats, const std::filesystem::path& path) {
  write_checkpoint(stats_to_tensors(stats), path);
}

ActivationStats read_stats(const std::filesystem::path& path) { return stats_from_tensors(read_checkpoint(path)); }

Matrix read_calibration_inputs(const std::filesystem::path& path) {
  TensorMap m = read_checkpoint(path);
  const Tensor& t = m.at("inputs");
  if (t.shape.size() != 2) {
    throw Error(ErrorCode::kShapeMismatch, "calibration 'inputs' must be 2-D, got " + shape_to_string(t.shape));
  }
  return to_matrix(t);
}

}  // namespace obim
