// SPDX-License-Identifier: Apache-2.0
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "lt3r/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"lt3r: sparse-linear-attention + FP8 QAT adaptation toolkit"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, out_dir;
  std::optional<std::uint64_t> seed;
  int threads = 1;

  auto* train = app.add_subcommand("train", "train a student and write checkpoint + logs");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--seed", seed, "override the config seed");

  auto* exp = app.add_subcommand("export", "convert a checkpoint to weight-only FP8");
  exp->add_option("--ckpt", ckpt_path, "input checkpoint (.lt3r)")->required();
  exp->add_option("--out", out_dir, "output directory");

  auto* bench = app.add_subcommand("bench", "efficiency accounting for dense vs SLA");
  bench->add_option("--config", config_path, "run config JSON")->required();
  bench->add_option("--out", out_dir, "output directory");
  bench->add_option("--threads", threads, "ignored: bench always runs on one thread");

  auto* sens = app.add_subcommand("sensitivity", "layer-wise quantization sensitivity report");
  sens->add_option("--ckpt", ckpt_path, "input checkpoint (.lt3r)")->required();
  sens->add_option("--out", out_dir, "output directory");

  auto* ablate = app.add_subcommand("ablate", "run the four-variant component ablation");
  ablate->add_option("--config", config_path, "run config JSON")->required();
  ablate->add_option("--out", out_dir, "output directory");
  ablate->add_option("--threads", threads, "run variants in parallel threads");
  ablate->add_option("--seed", seed, "override the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : lt3r::cli::kExitConfig;
  }

  const std::string out = lt3r::cli::resolve_out_dir(out_dir);
  if (train->parsed()) return lt3r::cli::cmd_train(config_path, out, seed);
  if (exp->parsed()) return lt3r::cli::cmd_export(ckpt_path, out);
  if (bench->parsed()) return lt3r::cli::cmd_bench(config_path, out, threads);
  if (sens->parsed()) return lt3r::cli::cmd_sensitivity(ckpt_path, out);
  if (ablate->parsed()) return lt3r::cli::cmd_ablate(config_path, out, threads, seed);
  return lt3r::cli::kExitConfig;
}
