#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "densesiam/augment.hpp"
#include "densesiam/config.hpp"
#include "densesiam/dataset.hpp"
#include "densesiam/networks.hpp"

namespace dsiam {

// base_lr * batch_size / 256
double effective_lr(double base_lr, int batch_size);
// cosine: lr0 * (1 + cos(pi t / T)) / 2; constant: lr0.
double lr_at(double lr0, std::int64_t t, std::int64_t total, Schedule schedule);

// g = grad + wd * param; buf = momentum * buf + g; param -= lr * buf.
void sgd_update(std::span<float> param, std::span<const float> grad, std::vector<float>& buf, double lr,
                double momentum, double weight_decay);

// Mean over channels of the per-channel population std of the L2-normalized rows of z [B,D].
double collapse_metric(const TensorF& z);

struct StepMetrics {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0, l_sim = 0, l_dense = 0, l_region = 0, l_seg = 0, l_aux = 0, collapse = 0;
  double total = 0;
};

inline constexpr const char* kMetricsHeader = "step,epoch,lr,l_sim,l_dense,l_region,l_seg,l_aux,collapse";
std::string metrics_row(const StepMetrics& m);

/// Owns the model, optimizer state and schedule for one run. Every random
/// draw derives from (seed, role, epoch or step, item index), so the state
/// that must persist across a resume is just the counters, the parameters
/// and the momentum buffers.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const Dataset& data);

  const TrainConfig& config() const { return cfg_; }
  ModelF& model() { return model_; }
  const ModelF& model() const { return model_; }
  int num_classes() const { return num_classes_; }

  std::int64_t step() const { return step_; }
  std::int64_t epoch() const { return epoch_; }
  std::int64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::int64_t total_steps() const { return total_steps_; }
  bool finished() const;
  bool region_active(std::int64_t epoch) const;

  // Replaces the scheduled learning rate (tests use 0 to freeze parameters).
  void override_lr(std::optional<double> lr) { lr_override_ = lr; }
  void on_step(std::function<void(const StepMetrics&)> fn) { sink_ = std::move(fn); }

  StepMetrics train_step();
  // Runs the rest of the current epoch; returns per-step means.
  StepMetrics train_epoch();
  // Trains until the schedule ends or `until_epoch` epochs are complete.
  void run(std::optional<std::int64_t> until_epoch = std::nullopt);

  dst1::Container checkpoint() const;
  void save_checkpoint(const std::filesystem::path& path) const;
  // Rebuilds a trainer from a checkpoint written by save_checkpoint.
  static Trainer resume(const dst1::Container& ckpt, const Dataset& data);

 private:
  struct Batch {
    TensorF x1, x2;
    std::vector<CorrespondenceGrid> grids;
    std::vector<std::pair<ViewSpec, ViewSpec>> specs;
  };
  Batch make_batch(std::span<const std::size_t> indices);
  std::vector<std::size_t> epoch_order(std::int64_t epoch) const;
  void begin_epoch_if_needed();
  std::vector<CorrespondenceGrid> biased_grids(const Batch& b, const TensorF& z1, const TensorF& p1,
                                               const TensorF& z2, const TensorF& p2) const;

  TrainConfig cfg_;
  const Dataset& data_;
  int num_classes_;
  ModelF model_;
  LossWeights weights_;
  AugmentConfig aug_;
  ReplayAugmenter replay_;
  std::vector<std::vector<float>> momentum_;  // per parameter, empty for running statistics
  std::int64_t step_ = 0;
  std::int64_t epoch_ = 0;
  std::int64_t batch_ = 0;  // next batch within the epoch
  std::int64_t steps_per_epoch_ = 0;
  std::int64_t total_steps_ = 0;
  std::int64_t replay_epoch_ = -1;
  std::vector<std::size_t> order_;
  std::optional<double> lr_override_;
  std::function<void(const StepMetrics&)> sink_;
};

// Parses meta.config and meta.num_classes of a checkpoint.
TrainConfig checkpoint_config(const dst1::Container& ckpt);
int checkpoint_num_classes(const dst1::Container& ckpt);
// Model with parameters loaded from a checkpoint.
ModelF load_model(const dst1::Container& ckpt);

}  // namespace dsiam
