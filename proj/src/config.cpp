// SPDX-License-Identifier: Apache-2.0
#include "lt3r/config.hpp"

#include <fstream>
#include <set>

namespace lt3r {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "'");
  }
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  check_keys(j, {"seed", "model", "train", "policy", "bench"}, "top level");
  RunConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);

  if (j.contains("model")) {
    const json& jm = j.at("model");
    check_keys(jm, {"layers", "dim", "seq_len", "d_in", "d_out"}, "model");
    cfg.model.layers = get_or(jm, "layers", cfg.model.layers);
    cfg.model.dim = get_or(jm, "dim", cfg.model.dim);
    cfg.model.seq_len = get_or(jm, "seq_len", cfg.model.seq_len);
    cfg.model.d_in = get_or(jm, "d_in", cfg.model.d_in);
    cfg.model.d_out = get_or(jm, "d_out", cfg.model.d_out);
    if (cfg.model.layers < 1 || cfg.model.dim < 2 || cfg.model.seq_len < 1 ||
        cfg.model.d_in < 1 || cfg.model.d_out < 1) {
      throw ConfigError("config: invalid model dimensions");
    }
  }

  if (j.contains("train")) {
    const json& jt = j.at("train");
    check_keys(jt,
               {"gamma", "lr", "lr_qat_divisor", "epochs_qat", "epochs_baseline", "batch",
                "enable_act_quant", "keep_ratio", "train_samples", "eval_samples",
                "omit_kd_term"},
               "train");
    cfg.train.gamma = get_or(jt, "gamma", cfg.train.gamma);
    cfg.train.lr = get_or(jt, "lr", cfg.train.lr);
    cfg.train.lr_qat_divisor = get_or(jt, "lr_qat_divisor", cfg.train.lr_qat_divisor);
    cfg.train.epochs_qat = get_or(jt, "epochs_qat", cfg.train.epochs_qat);
    cfg.train.epochs_baseline = get_or(jt, "epochs_baseline", cfg.train.epochs_baseline);
    cfg.train.batch = get_or(jt, "batch", cfg.train.batch);
    cfg.train.enable_act_quant = get_or(jt, "enable_act_quant", cfg.train.enable_act_quant);
    cfg.train.keep_ratio = get_or(jt, "keep_ratio", cfg.train.keep_ratio);
    cfg.train.train_samples = get_or(jt, "train_samples", cfg.train.train_samples);
    cfg.train.eval_samples = get_or(jt, "eval_samples", cfg.train.eval_samples);
    cfg.train.omit_kd_term = get_or(jt, "omit_kd_term", cfg.train.omit_kd_term);
  }

  if (j.contains("policy")) {
    const json& jp = j.at("policy");
    check_keys(jp, {"include", "exclude", "min_params"}, "policy");
    cfg.train.policy.include =
        get_or<std::vector<std::string>>(jp, "include", cfg.train.policy.include);
    cfg.train.policy.exclude =
        get_or<std::vector<std::string>>(jp, "exclude", cfg.train.policy.exclude);
    cfg.train.policy.min_params = get_or(jp, "min_params", cfg.train.policy.min_params);
  }

  if (j.contains("bench")) {
    const json& jb = j.at("bench");
    check_keys(jb, {"seq_len", "repeats", "warmup"}, "bench");
    cfg.bench.seq_len = get_or(jb, "seq_len", cfg.bench.seq_len);
    cfg.bench.repeats = get_or(jb, "repeats", cfg.bench.repeats);
    cfg.bench.warmup = get_or(jb, "warmup", cfg.bench.warmup);
    if (cfg.bench.seq_len < 1 || cfg.bench.repeats < 3 || cfg.bench.warmup < 1) {
      throw ConfigError("config: bench needs seq_len >= 1, repeats >= 3, warmup >= 1");
    }
  }

  cfg.train.seed = cfg.seed;
  try {
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ConfigError("config: malformed JSON in " + path.string());
  return parse_run_config(j);
}

nlohmann::json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["model"] = {{"layers", model.layers}, {"dim", model.dim}, {"seq_len", model.seq_len},
                {"d_in", model.d_in}, {"d_out", model.d_out}};
  j["train"] = {{"gamma", train.gamma},
                {"lr", train.lr},
                {"lr_qat_divisor", train.lr_qat_divisor},
                {"epochs_qat", train.epochs_qat},
                {"epochs_baseline", train.epochs_baseline},
                {"batch", train.batch},
                {"enable_act_quant", train.enable_act_quant},
                {"keep_ratio", train.keep_ratio},
                {"train_samples", train.train_samples},
                {"eval_samples", train.eval_samples},
                {"omit_kd_term", train.omit_kd_term}};
  j["policy"] = {{"include", train.policy.include},
                 {"exclude", train.policy.exclude},
                 {"min_params", train.policy.min_params}};
  j["bench"] = {{"seq_len", bench.seq_len}, {"repeats", bench.repeats},
                {"warmup", bench.warmup}};
  return j;
}

}  // namespace lt3r
