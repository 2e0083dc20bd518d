#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "densesiam/networks.hpp"
#include "densesiam/objectives.hpp"

namespace dsiam {

enum class Mode { Pretrain, Seg };
enum class Schedule { Auto, Cosine, Constant };
enum class GridStrategy { Uniform, Biased };

struct TrainConfig {
  Mode mode = Mode::Pretrain;
  double base_lr = 0.05;
  int batch_size = 32;
  int epochs = 10;
  std::int64_t max_steps = 0;  // 0: no cap
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Schedule schedule = Schedule::Auto;  // cosine for pretrain, constant for seg
  double region_start_fraction = 0.5;
  std::uint64_t seed = 0;

  double lambda_sim = 1.0;
  double lambda1 = 1.0;  // seg mode derives lambda1 and lambda4 from N and N_aux
  double lambda2 = 0.1;
  double lambda3 = 1.0;
  int K = 7;
  int N = 0;  // 0: 32 for pretrain, the dataset class count for seg
  int N_aux = 128;
  double tau = 0.1;
  Distance dist = Distance::CrossEntropy;
  bool region_stopgrad = true;
  bool seg_cross_view = false;
  GridStrategy grid_strategy = GridStrategy::Uniform;
  int grid_k = 3;
  double grid_beta = 0.75;

  std::vector<int> stage_channels{16, 32, 64};
  int output_stride = 0;  // 0: 8 for pretrain, 4 for seg
  int head_width = 64;
  int region_dim = 64;
  int global_dim = 64;
  int view_size = 64;
  bool augment = true;
  int num_workers = 1;
  std::string data;  // optional; the command line --data wins
};

/// Parses "key = value" lines; '#' starts a comment. Unknown or repeated keys
/// and malformed values raise ConfigError naming the line.
TrainConfig parse_config(const std::string& text, Mode mode);
TrainConfig load_config(const std::filesystem::path& path, Mode mode);

// Every key with its current value, one per line, in a stable order.
std::string to_text(const TrainConfig& cfg);

// Throws ConfigError when a value is out of range.
void validate(const TrainConfig& cfg);

int resolved_output_stride(const TrainConfig& cfg);
Schedule resolved_schedule(const TrainConfig& cfg);
// dataset_classes is 0 when the data carries no labels.
int resolved_num_classes(const TrainConfig& cfg, int dataset_classes);

ModelConfig model_config(const TrainConfig& cfg, int num_classes);
LossWeights loss_weights(const TrainConfig& cfg, int num_classes);

std::string to_string(Mode m);
std::string to_string(Schedule s);

}  // namespace dsiam
