// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace lt3r::cli {

// Exit codes: 0 success, 1 usage/config error, 2 runtime/numerical error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

// Output directory resolution: LT3R_OUT env var wins, then the --out value,
// then a timestamped directory under ./runs.
std::string resolve_out_dir(const std::string& cli_out);

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed_override = {});
int cmd_export(const std::string& checkpoint_path, const std::string& out_dir);
int cmd_bench(const std::string& config_path, const std::string& out_dir, int threads = 1);
int cmd_sensitivity(const std::string& checkpoint_path, const std::string& out_dir);
int cmd_ablate(const std::string& config_path, const std::string& out_dir, int threads = 1,
               std::optional<std::uint64_t> seed_override = {});

}  // namespace lt3r::cli
