// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lt3r/model.hpp"
#include "lt3r/qlinear.hpp"
#include "lt3r/tensor.hpp"

namespace lt3r {

struct TrainConfig {
  float gamma = 0.1f;          // distillation coefficient
  float lr = 1e-2f;            // base learning rate (before the QAT divisor)
  float lr_qat_divisor = 10.0f;
  int epochs_qat = 1;
  int epochs_baseline = 0;     // optional full-precision warmup stage
  int batch = 4;
  bool enable_act_quant = true;
  float keep_ratio = 0.2f;
  std::uint64_t seed = 42;
  QuantPolicy policy = default_quant_policy();
  int train_samples = 64;
  int eval_samples = 8;
  bool omit_kd_term = false;   // drop the KD term from the objective entirely

  static QuantPolicy default_quant_policy();
  void validate() const;
};

struct StepLog {
  int step = 0;
  float task_loss = 0.0f;
  float kd_loss = 0.0f;
  float total_loss = 0.0f;
  float wo_drift = 0.0f;  // L2 distance of trainable params from their init
};

struct EpochLog {
  int epoch = 0;           // 0 = baseline stage epochs come first
  std::string stage;       // "baseline" | "qat"
  float eval_mse = 0.0f;
  double wall_seconds = 0.0;  // reported, excluded from deterministic dumps
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  float eval_mse_step0 = 0.0f;
  long long trainable_params = 0;
  long long total_params = 0;
  double trainable_fraction = 0.0;
};

// Synthetic task: inputs are seeded Gaussian token sequences, targets are the
// full-precision teacher outputs on those inputs.
struct ToyDataset {
  std::vector<Tensor> train_x, train_y;
  std::vector<Tensor> eval_x, eval_y;
};

ToyDataset make_toy_dataset(ToyTransformer& teacher, int train_n, int eval_n,
                            std::uint64_t seed);

// (1/L) * sum_l MSE(student_l, teacher_l). Teacher records must be plain
// tensors; gradients flow into the student side only.
Tensor attn_kd_loss(const std::vector<HookRecord>& teacher_records,
                    const std::vector<HookRecord>& student_records);

Tensor total_loss(const Tensor& task, const Tensor& kd, float gamma);

Tensor toy_task_loss(const Tensor& student_out, const Tensor& targets);

// Mean MSE of model outputs against targets, no tape.
float eval_mse(ToyTransformer& model, const std::vector<Tensor>& xs,
               const std::vector<Tensor>& ys);

// Two-stage training loop: optional full-precision baseline epochs, then QAT
// epochs at lr / lr_qat_divisor with fake quantization active on whatever the
// policy enabled. Only trainable parameters move.
TrainLog run_qat(ToyTransformer& teacher, ToyTransformer& student, const ToyDataset& data,
                 const TrainConfig& cfg);

}  // namespace lt3r
