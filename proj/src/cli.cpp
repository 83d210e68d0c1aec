// SPDX-License-Identifier: Apache-2.0
#include "lt3r/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <thread>

#include <json.hpp>

#include "lt3r/analysis.hpp"
#include "lt3r/checkpoint.hpp"
#include "lt3r/config.hpp"
#include "lt3r/distill.hpp"

namespace lt3r::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

int guard(const std::function<void()>& body) {
  try {
    body();
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

// Deterministic dumps: wall-clock numbers go to run_meta.json, never into the
// train log artifacts.
void write_train_artifacts(const fs::path& dir, const RunConfig& cfg, const TrainLog& log) {
  std::string csv = "step,task_loss,kd_loss,total_loss,wo_drift\n";
  for (const StepLog& s : log.steps) {
    csv += std::to_string(s.step) + "," + fmt_float(s.task_loss) + "," + fmt_float(s.kd_loss) +
           "," + fmt_float(s.total_loss) + "," + fmt_float(s.wo_drift) + "\n";
  }
  write_text(dir / "train_log.csv", csv);

  std::string eval_csv = "epoch,stage,eval_mse\n";
  for (const EpochLog& e : log.epochs) {
    eval_csv += std::to_string(e.epoch) + "," + e.stage + "," + fmt_float(e.eval_mse) + "\n";
  }
  write_text(dir / "eval_log.csv", eval_csv);

  json j;
  j["config"] = cfg.to_json();
  j["trainable_params"] = log.trainable_params;
  j["total_params"] = log.total_params;
  j["trainable_fraction"] = log.trainable_fraction;
  j["eval_mse_step0"] = log.eval_mse_step0;
  json steps = json::array();
  for (const StepLog& s : log.steps) {
    steps.push_back({{"step", s.step},
                     {"task_loss", s.task_loss},
                     {"kd_loss", s.kd_loss},
                     {"total_loss", s.total_loss},
                     {"wo_drift", s.wo_drift}});
  }
  j["steps"] = std::move(steps);
  json epochs = json::array();
  for (const EpochLog& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"stage", e.stage}, {"eval_mse", e.eval_mse}});
  }
  j["epochs"] = std::move(epochs);
  write_json(dir / "train_log.json", j);

  json meta;
  json walls = json::array();
  double total_wall = 0.0;
  for (const EpochLog& e : log.epochs) {
    walls.push_back(e.wall_seconds);
    total_wall += e.wall_seconds;
  }
  meta["wall_seconds_per_epoch"] = std::move(walls);
  meta["total_wall_seconds"] = total_wall;
  meta["unix_timestamp"] =
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count();
  write_json(dir / "run_meta.json", meta);
}

json eff_report_json(const EffReport& r, bool with_timing) {
  json j;
  j["variant"] = r.variant;
  j["seq_len"] = r.seq_len;
  j["dim"] = r.dim;
  j["keep_ratio"] = r.keep_ratio;
  j["attn_flops_per_layer"] = r.attn_flops_per_layer;
  j["model_flops"] = r.model_flops;
  j["param_bytes_full"] = r.param_bytes_full;
  j["param_bytes_weight_only"] = r.param_bytes_weight_only;
  j["repeats"] = r.repeats;
  if (with_timing) {
    j["peak_tensor_bytes"] = r.peak_tensor_bytes;
    j["wall_mean_ms"] = r.wall_mean_ms;
    j["wall_min_ms"] = r.wall_min_ms;
  }
  return j;
}

struct AblateRow {
  std::string variant;
  bool sla = false;
  bool qat = false;
  long long trainable_params = 0;
  float eval_mse = 0.0f;
  long long attn_flops = 0;
  long long param_bytes_full = 0;
  long long param_bytes_weight_only = 0;
};

AblateRow run_ablate_variant(const std::string& variant, const RunConfig& cfg) {
  ToyTransformer teacher = build_teacher(cfg.model, cfg.seed);
  ToyDataset data =
      make_toy_dataset(teacher, cfg.train.train_samples, cfg.train.eval_samples, cfg.seed + 1);

  AblateRow row;
  row.variant = variant;
  row.sla = variant == "full" || variant == "sla_noqat";
  row.qat = variant == "full" || variant == "nosla_qat";

  ToyTransformer model = row.sla ? derive_student(teacher, cfg.train.keep_ratio)
                                 : build_teacher(cfg.model, cfg.seed);
  if (row.qat) apply_policy(model, cfg.train.policy, cfg.train.enable_act_quant);

  row.trainable_params = model.trainable_params();
  if (model.trainable_params() > 0) {
    TrainLog log = run_qat(teacher, model, data, cfg.train);
    row.eval_mse = log.epochs.back().eval_mse;
  } else {
    row.eval_mse = eval_mse(model, data.eval_x, data.eval_y);
  }
  row.attn_flops = attention_flops(cfg.model.seq_len, cfg.model.dim, cfg.train.keep_ratio,
                                   row.sla ? AttentionVariant::kSla : AttentionVariant::kDense);
  row.param_bytes_full = full_param_bytes(model);
  row.param_bytes_weight_only = row.qat ? weight_only_param_bytes(model, cfg.train.policy)
                                        : full_param_bytes(model);
  return row;
}

}  // namespace

std::string resolve_out_dir(const std::string& cli_out) {
  if (const char* env = std::getenv("LT3R_OUT"); env != nullptr && *env != '\0') {
    return env;
  }
  if (!cli_out.empty()) return cli_out;
  const auto now = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  return "runs/" + std::to_string(now);
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed_override) {
  return guard([&] {
    RunConfig cfg = load_run_config(config_path);
    if (seed_override) {
      cfg.seed = *seed_override;
      cfg.train.seed = *seed_override;
    }

    ToyTransformer teacher = build_teacher(cfg.model, cfg.seed);
    ToyTransformer student = derive_student(teacher, cfg.train.keep_ratio);
    const int converted = apply_policy(student, cfg.train.policy, cfg.train.enable_act_quant);
    if (converted == 0) {
      std::cerr << "warning: quantization policy matched no layers\n";
    }
    ToyDataset data = make_toy_dataset(teacher, cfg.train.train_samples,
                                       cfg.train.eval_samples, cfg.seed + 1);
    TrainLog log = run_qat(teacher, student, data, cfg.train);

    const fs::path dir(out_dir);
    fs::create_directories(dir);
    write_json(dir / "config.json", cfg.to_json());
    write_train_artifacts(dir, cfg, log);
    CheckpointArchive ckpt = checkpoint_from_model(student);
    ckpt.save(dir / "student.lt3r");

    std::cout << "trained " << log.steps.size() << " steps; eval mse "
              << fmt_float(log.eval_mse_step0) << " -> "
              << fmt_float(log.epochs.back().eval_mse) << "; trainable "
              << log.trainable_params << "/" << log.total_params << " ("
              << fmt_float(100.0 * log.trainable_fraction) << "%)\n";
    std::cout << "artifacts in " << dir.string() << "\n";
  });
}

int cmd_export(const std::string& checkpoint_path, const std::string& out_dir) {
  return guard([&] {
    CheckpointArchive in = CheckpointArchive::load(checkpoint_path);
    CheckpointArchive out = export_fp8_archive(in);
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    const fs::path out_path = dir / "export.lt3r";
    out.save(out_path);
    std::cout << "exported " << out_path.string() << " ("
              << fs::file_size(out_path) << " bytes, input "
              << fs::file_size(checkpoint_path) << " bytes)\n";
  });
}

int cmd_bench(const std::string& config_path, const std::string& out_dir, int threads) {
  return guard([&] {
    RunConfig cfg = load_run_config(config_path);
    if (threads != 1) {
      std::cerr << "note: bench always runs single-threaded for timing stability\n";
    }

    std::vector<EffReport> reports;
    reports.push_back(benchmark(AttentionVariant::kDense, cfg.model, cfg.bench.seq_len,
                                cfg.train.keep_ratio, cfg.bench.repeats, cfg.bench.warmup,
                                cfg.seed, cfg.train.policy));
    reports.push_back(benchmark(AttentionVariant::kSla, cfg.model, cfg.bench.seq_len,
                                cfg.train.keep_ratio, cfg.bench.repeats, cfg.bench.warmup,
                                cfg.seed, cfg.train.policy));

    const fs::path dir(out_dir);
    fs::create_directories(dir);

    json jr = json::array();
    std::string csv =
        "variant,seq_len,dim,keep_ratio,attn_flops_per_layer,model_flops,"
        "param_bytes_full,param_bytes_weight_only,repeats\n";
    json timing = json::array();
    for (const EffReport& r : reports) {
      jr.push_back(eff_report_json(r, /*with_timing=*/false));
      csv += r.variant + "," + std::to_string(r.seq_len) + "," + std::to_string(r.dim) + "," +
             fmt_float(r.keep_ratio) + "," + std::to_string(r.attn_flops_per_layer) + "," +
             std::to_string(r.model_flops) + "," + std::to_string(r.param_bytes_full) + "," +
             std::to_string(r.param_bytes_weight_only) + "," + std::to_string(r.repeats) + "\n";
      timing.push_back(eff_report_json(r, /*with_timing=*/true));
    }
    write_json(dir / "bench.json", jr);
    write_text(dir / "bench.csv", csv);
    write_json(dir / "bench_timing.json", timing);

    const double ratio = static_cast<double>(reports[0].attn_flops_per_layer) /
                         static_cast<double>(reports[1].attn_flops_per_layer);
    std::cout << "attention FLOP ratio dense/sla = " << fmt_float(ratio) << " at N="
              << cfg.bench.seq_len << ", d=" << cfg.model.dim << ", keep_ratio="
              << fmt_float(cfg.train.keep_ratio) << "\n";
    std::cout << "reports in " << dir.string() << "\n";
  });
}

int cmd_sensitivity(const std::string& checkpoint_path, const std::string& out_dir) {
  return guard([&] {
    CheckpointArchive a = CheckpointArchive::load(checkpoint_path);
    ToyTransformer model = model_from_checkpoint(a);
    SensitivityReport report = model_report(model);

    const fs::path dir(out_dir);
    fs::create_directories(dir);

    json j;
    j["kurtosis_convention"] = "pearson";  // normal distribution scores 3
    j["score_formula"] = "0.4*dyn_range/10 + 0.3*outlier_frac + 0.3*kurtosis/10";
    json layers = json::array();
    std::string csv = "name,dyn_range,outlier_frac,kurtosis,score\n";
    for (const LayerSensitivity& s : report.layers) {
      layers.push_back({{"name", s.name},
                        {"dyn_range", s.dyn_range},
                        {"outlier_frac", s.outlier_frac},
                        {"kurtosis", s.kurtosis},
                        {"score", s.score}});
      csv += s.name + "," + fmt_float(s.dyn_range) + "," + fmt_float(s.outlier_frac) + "," +
             fmt_float(s.kurtosis) + "," + fmt_float(s.score) + "\n";
    }
    j["layers"] = std::move(layers);
    write_json(dir / "sensitivity.json", j);
    write_text(dir / "sensitivity.csv", csv);
    std::cout << report.layers.size() << " layers scored; reports in " << dir.string() << "\n";
  });
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir, int threads,
               std::optional<std::uint64_t> seed_override) {
  return guard([&] {
    RunConfig cfg = load_run_config(config_path);
    if (seed_override) {
      cfg.seed = *seed_override;
      cfg.train.seed = *seed_override;
    }

    const std::vector<std::string> variants = {"full", "sla_noqat", "nosla_qat", "original"};
    std::vector<AblateRow> rows(variants.size());
    if (threads > 1) {
      std::vector<std::thread> pool;
      for (std::size_t i = 0; i < variants.size(); ++i) {
        pool.emplace_back(
            [&rows, &variants, &cfg, i] { rows[i] = run_ablate_variant(variants[i], cfg); });
      }
      for (auto& t : pool) t.join();
    } else {
      for (std::size_t i = 0; i < variants.size(); ++i) {
        rows[i] = run_ablate_variant(variants[i], cfg);
      }
    }

    const fs::path dir(out_dir);
    fs::create_directories(dir);
    write_json(dir / "config.json", cfg.to_json());

    json jr = json::array();
    std::string csv =
        "variant,sla,qat,trainable_params,eval_mse,attn_flops,"
        "param_bytes_full,param_bytes_weight_only\n";
    for (const AblateRow& r : rows) {
      jr.push_back({{"variant", r.variant},
                    {"sla", r.sla},
                    {"qat", r.qat},
                    {"trainable_params", r.trainable_params},
                    {"eval_mse", r.eval_mse},
                    {"attn_flops", r.attn_flops},
                    {"param_bytes_full", r.param_bytes_full},
                    {"param_bytes_weight_only", r.param_bytes_weight_only}});
      csv += r.variant + "," + (r.sla ? "1" : "0") + "," + (r.qat ? "1" : "0") + "," +
             std::to_string(r.trainable_params) + "," + fmt_float(r.eval_mse) + "," +
             std::to_string(r.attn_flops) + "," + std::to_string(r.param_bytes_full) + "," +
             std::to_string(r.param_bytes_weight_only) + "\n";
    }
    write_json(dir / "ablation.json", jr);
    write_text(dir / "ablation.csv", csv);
    for (const AblateRow& r : rows) {
      std::cout << r.variant << ": eval mse " << fmt_float(r.eval_mse) << ", attn flops "
                << r.attn_flops << "\n";
    }
    std::cout << "reports in " << dir.string() << "\n";
  });
}

}  // namespace lt3r::cli
