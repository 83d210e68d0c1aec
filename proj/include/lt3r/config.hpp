// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "lt3r/distill.hpp"
#include "lt3r/model.hpp"

namespace lt3r {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BenchSettings {
  int seq_len = 2048;
  int repeats = 5;
  int warmup = 1;
};

// Whole-run configuration. Every field has a default; unknown keys anywhere
// in the document are rejected.
struct RunConfig {
  std::uint64_t seed = 42;
  ModelConfig model;
  TrainConfig train;
  BenchSettings bench;

  nlohmann::json to_json() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace lt3r
