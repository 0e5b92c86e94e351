// Copyright 2026 The OBIM Authors
// SPDX-License-Identifier: Apache-2.0

#include "obim/config.h"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <string_view>

#include <fmt/format.h>

#include "obim/error.h"

namespace obim {

namespace {

namespace fs = std::filesystem;

class Reader {
 public:
  explicit Reader(fs::path source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw Error(ErrorCode::kInvalidConfig,
                source_.empty() ? fmt::format("{}: {}", field, what)
                                : fmt::format("{}: {}: {}", source_.string(), field, what));
  }

  const json& require(const json& obj, const std::string& key, const std::string& field) const {
    if (!obj.is_object() || !obj.contains(key)) fail(field, "required field is missing");
    return obj.at(key);
  }

  // Rejects keys outside `allowed` so that misspelt options do not pass silently.
  void only(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& field) const {
    for (const auto& [key, value] : obj.items()) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
        fail(field.empty() ? key : field + "." + key, "unknown key");
      }
    }
  }

  std::string string(const json& v, const std::string& field) const {
    if (!v.is_string()) fail(field, "expected a string");
    auto s = v.get<std::string>();
    if (s.empty()) fail(field, "must not be empty");
    return s;
  }

  double number(const json& v, const std::string& field) const {
    if (!v.is_number()) fail(field, "expected a number");
    return v.get<double>();
  }

  std::int64_t integer(const json& v, const std::string& field) const {
    if (!v.is_number_integer()) fail(field, "expected an integer");
    return v.get<std::int64_t>();
  }

  std::uint64_t unsigned_integer(const json& v, const std::string& field) const {
    if (!v.is_number_unsigned()) fail(field, "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const json& v, const std::string& field) const {
    if (!v.is_boolean()) fail(field, "expected true or false");
    return v.get<bool>();
  }

  fs::path path(const json& v, const std::string& field) const {
    fs::path p = string(v, field);
    if (p.is_relative() && !source_.empty()) p = source_.parent_path() / p;
    return p.lexically_normal();
  }

  template <class Fn>
  auto wrap(const std::string& field, Fn&& fn) const {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kIo) {
        throw Error(e.code(), source_.empty() ? fmt::format("{}: {}", field, e.what())
                                              : fmt::format("{}: {}: {}", source_.string(), field, e.what()));
      }
      throw;
    }
  }

  const fs::path& source() const { return source_; }

 private:
  fs::path source_;
};

MergeOrder parse_order(const Reader& r, const json& j, std::size_t k) {
  if (!j.is_object()) r.fail("order", "expected an object");
  r.only(j, {"policy", "first", "last", "sequence"}, "order");
  OrderPolicy policy = OrderPolicy::kRotation;
  if (j.contains("policy")) {
    const auto p = r.string(j["policy"], "order.policy");
    if (p == "rotation") policy = OrderPolicy::kRotation;
    else if (p == "fixed") policy = OrderPolicy::kFixed;
    else r.fail("order.policy", "must be \"rotation\" or \"fixed\"");
  }
  const int kk = static_cast<int>(k);
  if (j.contains("first") || j.contains("last")) {
    const bool first = j.contains("first");
    const auto idx = r.integer(j[first ? "first" : "last"], first ? "order.first" : "order.last");
    if (idx < 0 || idx >= kk) r.fail(first ? "order.first" : "order.last", "model index out of range");
    return first ? order_first(kk, static_cast<int>(idx)) : order_last(kk, static_cast<int>(idx));
  }
  MergeOrder o = identity_order(kk, policy);
  if (j.contains("sequence")) {
    const auto& seq = j["sequence"];
    if (!seq.is_array()) r.fail("order.sequence", "expected an array of model indices");
    o.order.clear();
    for (const auto& v : seq) o.order.push_back(static_cast<int>(r.integer(v, "order.sequence")));
  }
  return o;
}

json order_to_json(const MergeOrder& o) {
  return {{"policy", o.policy == OrderPolicy::kRotation ? "rotation" : "fixed"}, {"sequence", o.order}};
}

std::string_view basis_name(RatioBasis b) { return b == RatioBasis::kTotal ? "total" : "remaining"; }
std::string_view hessian_name(HessianPolicy p) {
  return p == HessianPolicy::kMeanOfSquares ? "mean_of_squares" : "square_of_mean";
}

HessianPolicy parse_hessian(const Reader& r, const json& v, const std::string& field) {
  const auto s = r.string(v, field);
  if (s == "mean_of_squares") return HessianPolicy::kMeanOfSquares;
  if (s == "square_of_mean") return HessianPolicy::kSquareOfMean;
  r.fail(field, "must be \"mean_of_squares\" or \"square_of_mean\"");
}

ModelSpec parse_spec(const Reader& r, const json& j) {
  return r.wrap("spec", [&] { return model_spec_from_json(j); });
}

}  // namespace

json model_spec_to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    json lj = {{"weight", l.weight_name}, {"activation", std::string(activation_name(l.activation))}};
    if (l.bias_name) lj["bias"] = *l.bias_name;
    layers.push_back(std::move(lj));
  }
  return {{"input_dim", spec.input_dim}, {"layers", std::move(layers)}};
}

ModelSpec model_spec_from_json(const json& j) {
  Reader r({});
  ModelSpec spec;
  spec.input_dim = r.integer(r.require(j, "input_dim", "input_dim"), "input_dim");
  if (spec.input_dim <= 0) r.fail("input_dim", "must be positive");
  const auto& layers = r.require(j, "layers", "layers");
  if (!layers.is_array() || layers.empty()) r.fail("layers", "expected a non-empty array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string f = fmt::format("layers[{}]", i);
    LayerSpec l;
    l.weight_name = r.string(r.require(layers[i], "weight", f + ".weight"), f + ".weight");
    if (layers[i].contains("bias") && !layers[i]["bias"].is_null()) {
      l.bias_name = r.string(layers[i]["bias"], f + ".bias");
    }
    if (layers[i].contains("activation")) {
      l.activation = parse_activation(r.string(layers[i]["activation"], f + ".activation"));
    }
    spec.layers.push_back(std::move(l));
  }
  return spec;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config '" + path.string() + "'");
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw Error(ErrorCode::kInvalidConfig, path.string() + ": not valid JSON");
  return j;
}

MergePlan plan_from_config(const RunConfig& c) {
  MergePlan plan;
  plan.method = c.method;
  for (const auto& m : c.models) plan.ratios.push_back(m.ratio);
  plan.lambda = c.lambda;
  plan.drop_p = c.drop_p;
  plan.order = c.order;
  plan.seed = c.seed;
  plan.ratio_basis = c.ratio_basis;
  plan.hessian_policy = c.hessian_policy;
  plan.global_rank_magnitude = c.global_rank_magnitude;
  return plan;
}

void validate_run_config(const RunConfig& c) {
  if (c.base_path.empty()) throw Error(ErrorCode::kInvalidConfig, "base: required");
  if (c.output_path.empty()) throw Error(ErrorCode::kInvalidConfig, "output: required");
  for (std::size_t i = 0; i < c.models.size(); ++i) {
    if (c.models[i].path.empty()) throw Error(ErrorCode::kInvalidConfig, fmt::format("models[{}].path: required", i));
  }
  validate_plan(plan_from_config(c), c.models.size());
  if (uses_obm(c.method)) {
    if (!c.spec) {
      throw Error(ErrorCode::kInvalidConfig, fmt::format("spec: required by {}", method_name(c.method)));
    }
    for (std::size_t i = 0; i < c.models.size(); ++i) {
      if (!c.models[i].stats_path && !c.stats_path) {
        throw Error(ErrorCode::kMissingStats,
                    fmt::format("models[{}].stats: {} needs calibration stats", i, method_name(c.method)));
      }
    }
  }
}

RunConfig parse_run_config(const json& j, const fs::path& source) {
  Reader r(source);
  if (!j.is_object()) r.fail("<root>", "expected a JSON object");
  r.only(j, {"base", "models", "method", "lambda", "drop_p", "order", "seed", "output", "report", "masks_dir", "spec",
             "stats", "ratio_basis", "hessian_policy", "global_rank_magnitude"},
         "");
  RunConfig c;
  c.base_path = r.path(r.require(j, "base", "base"), "base");
  const auto& models = r.require(j, "models", "models");
  if (!models.is_array() || models.empty()) r.fail("models", "expected a non-empty array");
  for (std::size_t i = 0; i < models.size(); ++i) {
    const std::string f = fmt::format("models[{}]", i);
    ModelEntry e;
    if (models[i].is_object()) r.only(models[i], {"path", "ratio", "stats"}, f);
    e.path = r.path(r.require(models[i], "path", f + ".path"), f + ".path");
    if (models[i].contains("ratio")) e.ratio = r.number(models[i]["ratio"], f + ".ratio");
    if (models[i].contains("stats")) e.stats_path = r.path(models[i]["stats"], f + ".stats");
    c.models.push_back(std::move(e));
  }
  c.method = r.wrap("method", [&] { return parse_method(r.string(r.require(j, "method", "method"), "method")); });
  if (j.contains("lambda")) c.lambda = r.number(j["lambda"], "lambda");
  if (j.contains("drop_p")) c.drop_p = r.number(j["drop_p"], "drop_p");
  c.order = j.contains("order") ? parse_order(r, j["order"], c.models.size())
                                : identity_order(static_cast<int>(c.models.size()));
  if (j.contains("seed")) c.seed = r.unsigned_integer(j["seed"], "seed");
  c.output_path = r.path(r.require(j, "output", "output"), "output");
  if (j.contains("report")) c.report_path = r.path(j["report"], "report");
  if (j.contains("masks_dir")) c.masks_dir = r.path(j["masks_dir"], "masks_dir");
  if (j.contains("spec")) {
    c.spec = j["spec"].is_string() ? parse_spec(r, read_json_file(r.path(j["spec"], "spec")))
                                   : parse_spec(r, j["spec"]);
  }
  if (j.contains("stats")) c.stats_path = r.path(j["stats"], "stats");
  if (j.contains("ratio_basis")) {
    const auto b = r.string(j["ratio_basis"], "ratio_basis");
    if (b == "total") c.ratio_basis = RatioBasis::kTotal;
    else if (b == "remaining") c.ratio_basis = RatioBasis::kRemaining;
    else r.fail("ratio_basis", "must be \"total\" or \"remaining\"");
  }
  if (j.contains("hessian_policy")) c.hessian_policy = parse_hessian(r, j["hessian_policy"], "hessian_policy");
  if (j.contains("global_rank_magnitude")) {
    c.global_rank_magnitude = r.boolean(j["global_rank_magnitude"], "global_rank_magnitude");
  }
  r.wrap("config", [&] {
    validate_run_config(c);
    return 0;
  });
  return c;
}

RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_json_file(path), path); }

json run_config_to_json(const RunConfig& c) {
  json models = json::array();
  for (const auto& m : c.models) {
    json mj = {{"path", m.path.string()}, {"ratio", m.ratio}};
    if (m.stats_path) mj["stats"] = m.stats_path->string();
    models.push_back(std::move(mj));
  }
  json j = {{"base", c.base_path.string()},
            {"models", std::move(models)},
            {"method", std::string(method_name(c.method))},
            {"lambda", c.lambda},
            {"drop_p", c.drop_p},
            {"order", order_to_json(c.order)},
            {"seed", c.seed},
            {"output", c.output_path.string()},
            {"ratio_basis", std::string(basis_name(c.ratio_basis))},
            {"hessian_policy", std::string(hessian_name(c.hessian_policy))},
            {"global_rank_magnitude", c.global_rank_magnitude}};
  if (c.report_path) j["report"] = c.report_path->string();
  if (c.masks_dir) j["masks_dir"] = c.masks_dir->string();
  if (c.spec) j["spec"] = model_spec_to_json(*c.spec);
  if (c.stats_path) j["stats"] = c.stats_path->string();
  return j;
}

StatsConfig parse_stats_config(const json& j, const fs::path& source) {
  Reader r(source);
  if (!j.is_object()) r.fail("<root>", "expected a JSON object");
  r.only(j, {"spec", "weights", "inputs", "output", "max_samples"}, "");
  StatsConfig c;
  const auto& spec = r.require(j, "spec", "spec");
  c.spec = spec.is_string() ? parse_spec(r, read_json_file(r.path(spec, "spec"))) : parse_spec(r, spec);
  c.weights_path = r.path(r.require(j, "weights", "weights"), "weights");
  c.inputs_path = r.path(r.require(j, "inputs", "inputs"), "inputs");
  c.output_path = r.path(r.require(j, "output", "output"), "output");
  if (j.contains("max_samples")) {
    const auto n = r.integer(j["max_samples"], "max_samples");
    if (n < 1) r.fail("max_samples", "must be positive");
    c.max_samples = static_cast<int>(n);
  }
  return c;
}

BenchRunConfig parse_bench_config(const json& j, const fs::path& source) {
  Reader r(source);
  if (!j.is_object()) r.fail("<root>", "expected a JSON object");
  r.only(j, {"suite", "methods", "ratios", "lambda", "drop_p", "order", "seed", "finetune", "ridge", "sgd",
             "calib_samples", "hessian_policy", "output"},
         "");
  BenchRunConfig out;
  BenchConfig& b = out.bench;
  if (j.contains("suite")) {
    const auto& s = j["suite"];
    if (!s.is_object()) r.fail("suite", "expected an object");
    r.only(s, {"seed", "tasks", "d_in", "d_out", "samples", "eval_samples", "overlap", "perturb_scale", "noise",
               "background", "hidden", "hidden_activation", "bias"},
           "suite");
    auto int_field = [&](const char* key, int& dst) {
      if (s.contains(key)) dst = static_cast<int>(r.integer(s[key], fmt::format("suite.{}", key)));
    };
    auto num_field = [&](const char* key, double& dst) {
      if (s.contains(key)) dst = r.number(s[key], fmt::format("suite.{}", key));
    };
    if (s.contains("seed")) b.suite.seed = r.unsigned_integer(s["seed"], "suite.seed");
    int_field("tasks", b.suite.tasks);
    int_field("d_in", b.suite.d_in);
    int_field("d_out", b.suite.d_out);
    int_field("samples", b.suite.samples);
    int_field("eval_samples", b.suite.eval_samples);
    num_field("overlap", b.suite.overlap);
    num_field("perturb_scale", b.suite.perturb_scale);
    num_field("noise", b.suite.noise);
    num_field("background", b.suite.background);
    int_field("hidden", b.suite.hidden);
    if (s.contains("bias")) b.suite.bias = r.boolean(s["bias"], "suite.bias");
    if (s.contains("hidden_activation")) {
      b.suite.hidden_activation =
          r.wrap("suite.hidden_activation", [&] { return parse_activation(r.string(s["hidden_activation"], "suite.hidden_activation")); });
    }
  }
  if (j.contains("methods")) {
    const auto& m = j["methods"];
    if (!m.is_array() || m.empty()) r.fail("methods", "expected a non-empty array");
    b.methods.clear();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const std::string f = fmt::format("methods[{}]", i);
      b.methods.push_back(r.wrap(f, [&] { return parse_method(r.string(m[i], f)); }));
    }
  }
  if (j.contains("ratios")) {
    const auto& rs = j["ratios"];
    if (!rs.is_array()) r.fail("ratios", "expected an array");
    for (const auto& v : rs) b.ratios.push_back(r.number(v, "ratios"));
  }
  if (j.contains("lambda")) b.lambda = r.number(j["lambda"], "lambda");
  if (j.contains("drop_p")) b.drop_p = r.number(j["drop_p"], "drop_p");
  const auto k = static_cast<std::size_t>(std::max(b.suite.tasks, 1));
  b.order = j.contains("order") ? parse_order(r, j["order"], k) : MergeOrder{};
  if (j.contains("seed")) b.seed = r.unsigned_integer(j["seed"], "seed");
  if (j.contains("finetune")) {
    const auto f = r.string(j["finetune"], "finetune");
    if (f == "closed_form") b.finetune = FinetuneMode::kClosedForm;
    else if (f == "sgd") b.finetune = FinetuneMode::kSgd;
    else r.fail("finetune", "must be \"closed_form\" or \"sgd\"");
  }
  if (j.contains("ridge")) b.ridge = r.number(j["ridge"], "ridge");
  if (j.contains("sgd")) {
    const auto& s = j["sgd"];
    if (!s.is_object()) r.fail("sgd", "expected an object");
    r.only(s, {"epochs", "lr"}, "sgd");
    if (s.contains("epochs")) b.sgd.epochs = static_cast<int>(r.integer(s["epochs"], "sgd.epochs"));
    if (s.contains("lr")) b.sgd.lr = r.number(s["lr"], "sgd.lr");
  }
  if (j.contains("calib_samples")) b.calib_samples = static_cast<int>(r.integer(j["calib_samples"], "calib_samples"));
  if (j.contains("hessian_policy")) b.hessian_policy = parse_hessian(r, j["hessian_policy"], "hessian_policy");
  if (j.contains("output")) out.output_path = r.path(j["output"], "output");

  if (b.calib_samples < 1) r.fail("calib_samples", "must be positive");
  if (!b.ratios.empty() && b.ratios.size() != k) r.fail("ratios", "need one ratio per task");
  r.wrap("config", [&] {
    for (Method m : b.methods) {
      MergePlan plan;
      plan.method = m;
      plan.ratios = b.ratios.empty() ? std::vector<double>(k, 1.0 / static_cast<double>(k)) : b.ratios;
      plan.lambda = b.lambda;
      plan.drop_p = b.drop_p;
      plan.order = b.order.order.empty() ? identity_order(static_cast<int>(k), b.order.policy) : b.order;
      validate_plan(plan, k);
    }
    return 0;
  });
  return out;
}

}  // namespace obim
