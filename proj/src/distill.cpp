// SPDX-License-Identifier: Apache-2.0
#include "lt3r/distill.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lt3r {

QuantPolicy TrainConfig::default_quant_policy() {
  QuantPolicy p;
  p.include = {"*attn*", "*mlp*"};
  p.exclude = {"*norm*"};
  p.min_params = 0;
  return p;
}

void TrainConfig::validate() const {
  if (gamma < 0.0f) throw std::invalid_argument("TrainConfig: gamma must be >= 0");
  if (lr <= 0.0f) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (lr_qat_divisor <= 0.0f) {
    throw std::invalid_argument("TrainConfig: lr_qat_divisor must be > 0");
  }
  if (epochs_qat < 1) throw std::invalid_argument("TrainConfig: epochs_qat must be >= 1");
  if (epochs_baseline < 0) {
    throw std::invalid_argument("TrainConfig: epochs_baseline must be >= 0");
  }
  if (batch < 1) throw std::invalid_argument("TrainConfig: batch must be >= 1");
  if (keep_ratio < 0.0f || keep_ratio > 1.0f) {
    throw std::invalid_argument("TrainConfig: keep_ratio must be in [0, 1]");
  }
  if (train_samples < 1 || eval_samples < 1) {
    throw std::invalid_argument("TrainConfig: sample counts must be >= 1");
  }
}

ToyDataset make_toy_dataset(ToyTransformer& teacher, int train_n, int eval_n,
                            std::uint64_t seed) {
  Rng rng(seed);
  ToyDataset d;
  FwdCtx ctx;  // tapeless
  auto gen = [&](int n, std::vector<Tensor>& xs, std::vector<Tensor>& ys) {
    xs.reserve(static_cast<std::size_t>(n));
    ys.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      Tensor x = rng.normal_tensor({teacher.cfg.seq_len, teacher.cfg.d_in});
      ys.push_back(teacher.forward(ctx, x));
      xs.push_back(std::move(x));
    }
  };
  gen(train_n, d.train_x, d.train_y);
  gen(eval_n, d.eval_x, d.eval_y);
  return d;
}

Tensor attn_kd_loss(const std::vector<HookRecord>& teacher_records,
                    const std::vector<HookRecord>& student_records) {
  if (teacher_records.empty() || teacher_records.size() != student_records.size()) {
    throw std::invalid_argument("attn_kd_loss: record lists must be non-empty and equal length");
  }
  Tensor acc;
  for (std::size_t l = 0; l < teacher_records.size(); ++l) {
    const HookRecord& t = teacher_records[l];
    const HookRecord& s = student_records[l];
    if (t.module != s.module) {
      throw std::invalid_argument("attn_kd_loss: record names do not pair up");
    }
    if (t.value.shape != s.value.shape) {
      throw std::invalid_argument("attn_kd_loss: record shapes do not match");
    }
    Tensor term = mse(s.value, t.value.detached());
    acc = (l == 0) ? term : add(acc, term);
  }
  return scale(acc, 1.0f / static_cast<float>(teacher_records.size()));
}

Tensor total_loss(const Tensor& task, const Tensor& kd, float gamma) {
  if (gamma < 0.0f) throw std::invalid_argument("total_loss: gamma must be >= 0");
  return add(task, scale(kd, gamma));
}

Tensor toy_task_loss(const Tensor& student_out, const Tensor& targets) {
  return mse(student_out, targets);
}

float eval_mse(ToyTransformer& model, const std::vector<Tensor>& xs,
               const std::vector<Tensor>& ys) {
  if (xs.empty() || xs.size() != ys.size()) {
    throw std::invalid_argument("eval_mse: input/target counts must match and be non-empty");
  }
  FwdCtx ctx;
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += mse(model.forward(ctx, xs[i]), ys[i]).item();
  }
  return static_cast<float>(acc / static_cast<double>(xs.size()));
}

namespace {

struct InitSnapshot {
  std::vector<FloatBuf> values;  // trainable params in registry order
};

InitSnapshot snapshot_trainable(ToyTransformer& m) {
  InitSnapshot s;
  for (auto& [name, pg] : m.param_groups()) {
    if (pg->trainable) s.values.push_back(pg->tensor.data);
  }
  return s;
}

float trainable_drift(ToyTransformer& m, const InitSnapshot& init) {
  double acc = 0.0;
  std::size_t k = 0;
  for (auto& [name, pg] : m.param_groups()) {
    if (!pg->trainable) continue;
    const FloatBuf& v0 = init.values[k++];
    for (std::size_t i = 0; i < v0.size(); ++i) {
      const double d = static_cast<double>(pg->tensor.data[i]) - v0[i];
      acc += d * d;
    }
  }
  return static_cast<float>(std::sqrt(acc));
}

}  // namespace

TrainLog run_qat(ToyTransformer& teacher, ToyTransformer& student, const ToyDataset& data,
                 const TrainConfig& cfg) {
  cfg.validate();
  if (teacher.blocks.size() != student.blocks.size() ||
      teacher.cfg.dim != student.cfg.dim) {
    throw std::invalid_argument("run_qat: student does not match teacher layout");
  }
  if (data.train_x.empty() || data.eval_x.empty()) {
    throw std::invalid_argument("run_qat: dataset is empty");
  }

  register_hooks(teacher, "*attn*");
  register_hooks(student, "*attn*");

  TrainLog log;
  log.trainable_params = student.trainable_params();
  log.total_params = student.total_params();
  log.trainable_fraction =
      log.total_params > 0
          ? static_cast<double>(log.trainable_params) / static_cast<double>(log.total_params)
          : 0.0;
  log.eval_mse_step0 = eval_mse(student, data.eval_x, data.eval_y);

  const InitSnapshot init = snapshot_trainable(student);
  const bool use_kd = cfg.gamma > 0.0f && !cfg.omit_kd_term;
  const int n_train = static_cast<int>(data.train_x.size());
  int global_step = 0;
  int epoch_index = 0;

  auto run_epoch = [&](const std::string& stage, float lr, std::uint64_t shuffle_seed) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::vector<int> order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffler(shuffle_seed);
    for (int i = n_train - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffler.next_u64() % static_cast<std::uint64_t>(i + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    for (int begin = 0; begin < n_train; begin += cfg.batch) {
      const int end = std::min(begin + cfg.batch, n_train);
      Tape tape;
      FwdCtx ctx(&tape);
      FwdCtx teacher_ctx;  // tapeless

      Tensor task_acc, kd_acc;
      for (int s = begin; s < end; ++s) {
        const Tensor& x = data.train_x[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
        const Tensor& y = data.train_y[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];

        std::vector<HookRecord> student_rec;
        Tensor out = student.forward(ctx, x, &student_rec);
        Tensor task = toy_task_loss(out, y);
        task_acc = (s == begin) ? task : add(task_acc, task);

        if (!cfg.omit_kd_term) {
          std::vector<HookRecord> teacher_rec;
          teacher.forward(teacher_ctx, x, &teacher_rec);
          Tensor kd = attn_kd_loss(teacher_rec, student_rec);
          kd_acc = (s == begin) ? kd : add(kd_acc, kd);
        }
      }
      const float inv_b = 1.0f / static_cast<float>(end - begin);
      Tensor task = scale(task_acc, inv_b);
      Tensor kd = cfg.omit_kd_term ? Tensor::scalar(0.0f) : scale(kd_acc, inv_b);
      Tensor total = use_kd ? total_loss(task, kd, cfg.gamma) : task;

      if (!std::isfinite(total.item())) {
        throw std::runtime_error("run_qat: non-finite loss at step " +
                                 std::to_string(global_step));
      }
      tape.backward(total);
      sgd_step(student.param_groups(), ctx, lr);

      StepLog sl;
      sl.step = global_step++;
      sl.task_loss = task.item();
      sl.kd_loss = kd.item();
      sl.total_loss = total.item();
      sl.wo_drift = trainable_drift(student, init);
      log.steps.push_back(sl);
    }

    EpochLog el;
    el.epoch = epoch_index++;
    el.stage = stage;
    el.eval_mse = eval_mse(student, data.eval_x, data.eval_y);
    el.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    log.epochs.push_back(el);
  };

  try {
    if (cfg.epochs_baseline > 0) {
      // Full-precision warmup: quantization off, base learning rate.
      auto layers = student.linear_layers();
      std::vector<bool> saved;
      saved.reserve(layers.size());
      for (auto& [name, l] : layers) {
        saved.push_back(l->enabled);
        l->enabled = false;
      }
      for (int e = 0; e < cfg.epochs_baseline; ++e) {
        run_epoch("baseline", cfg.lr, cfg.seed + 0x9e3779b9ULL + static_cast<std::uint64_t>(e));
      }
      for (std::size_t i = 0; i < layers.size(); ++i) layers[i].second->enabled = saved[i];
    }

    const float qat_lr = cfg.lr / cfg.lr_qat_divisor;
    for (int e = 0; e < cfg.epochs_qat; ++e) {
      run_epoch("qat", qat_lr,
                cfg.seed + 0x51a3bull + static_cast<std::uint64_t>(cfg.epochs_baseline + e));
    }
  } catch (const std::runtime_error& err) {
    throw std::runtime_error(std::string("run_qat aborted: ") + err.what());
  }

  return log;
}

}  // namespace lt3r
