#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "densesiam/dst1.hpp"
#include "densesiam/tensor.hpp"

namespace dsiam {

struct EncoderConfig {
  std::vector<int> stage_channels{16, 32, 64};
  int output_stride = 8;
  int input_size = 64;
};

struct ModelConfig {
  EncoderConfig encoder;
  int head_width = 64;      // hidden width of every projector
  int num_classes = 32;     // N: channels of the dense projector output
  int aux_classes = 0;      // N_aux; 0 disables the auxiliary dense head
  int region_dim = 64;      // D_r
  int global_dim = 64;
  bool region_heads = true;
  bool global_branch = true;

  int encoder_channels() const { return encoder.stage_channels.back(); }
  int feature_size() const { return encoder.input_size / encoder.output_stride; }
};

// Throws ConfigError on an unusable configuration.
void validate(const ModelConfig& cfg);

// Hidden width of a bottleneck predictor for an n-dimensional output.
inline int bottleneck_width(int n) { return std::max(n / 4, 8); }

enum class ParamKind { Weight, Bias, BnScale, BnShift, RunningMean, RunningVar };

template <typename T>
struct Param {
  std::string name;
  ParamKind kind;
  Tensor<T> tensor;

  bool trainable() const { return kind != ParamKind::RunningMean && kind != ParamKind::RunningVar; }
};

/// Encoder f plus every head. Layer layout:
///   encoder.stage{i}:    conv3x3 -> BN -> ReLU (stride 2 for the first log2(os) stages)
///   projector:           (conv1x1 -> BN -> ReLU) x2 -> conv1x1 -> BN without affine
///   predictor:           conv1x1 -> BN -> ReLU -> conv1x1 (+bias)
///   aux_projector/aux_predictor: same as above with N_aux channels
///   region_projector/global_projector: the same pattern with Linear + BN1d
///   region_predictor/global_predictor: Linear -> BN -> ReLU -> Linear (+bias)
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // x [B,3,S,S] -> [B,C_enc,S/os,S/os]
  Tensor<T> encode(const Tensor<T>& x, bool training);
  Tensor<T> project(const Tensor<T>& feat, bool training);
  Tensor<T> predict(const Tensor<T>& z, bool training);
  Tensor<T> project_aux(const Tensor<T>& feat, bool training);
  Tensor<T> predict_aux(const Tensor<T>& z, bool training);
  // e [B,N,C_enc] -> (u, v), each [B,N,D_r]; u = h'(g'(e)), v = g'(e).
  std::pair<Tensor<T>, Tensor<T>> region_heads(const Tensor<T>& e, bool training);
  // feat [B,C_enc,H,W] -> (p_g, z_g), each [B,D_g].
  std::pair<Tensor<T>, Tensor<T>> global_branch(const Tensor<T>& feat, bool training);

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  std::size_t trainable_count() const;

 private:
  void add(const std::string& name, ParamKind kind, Shape shape, std::uint64_t seed, std::size_t fan_in = 0);
  void add_conv(const std::string& prefix, int cin, int cout, int k, bool bias, std::uint64_t seed);
  void add_linear(const std::string& prefix, int in, int out, bool bias, std::uint64_t seed);
  void add_bn(const std::string& prefix, int c, bool affine, std::uint64_t seed);
  void add_dense_head(const std::string& proj, const std::string& pred, int in, int n, std::uint64_t seed);
  void add_mlp_head(const std::string& proj, const std::string& pred, int in, int d, std::uint64_t seed);

  Tensor<T> conv(const std::string& prefix, const Tensor<T>& x, std::size_t stride, std::size_t pad);
  Tensor<T> fc(const std::string& prefix, const Tensor<T>& x);
  Tensor<T> bn(const std::string& prefix, const Tensor<T>& x, bool training);
  Tensor<T> dense_projector(const std::string& p, const Tensor<T>& x, bool training);
  Tensor<T> dense_predictor(const std::string& p, const Tensor<T>& x, bool training);
  Tensor<T> mlp_projector(const std::string& p, const Tensor<T>& x, bool training);
  Tensor<T> mlp_predictor(const std::string& p, const Tensor<T>& x, bool training);

  ModelConfig cfg_;
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

// Closed-form count of trainable scalars (running statistics excluded).
std::size_t count_parameters(const ModelConfig& cfg);

// One f32 entry per parameter and running statistic, named hierarchically.
void write_parameters(const ModelF& model, dst1::Container& out);
// Throws ParseError when an entry is missing or has the wrong shape.
void read_parameters(ModelF& model, const dst1::Container& in);

// Copies every value from one precision to another (same config).
template <typename To, typename From>
void copy_parameters(Model<To>& dst, const Model<From>& src);

}  // namespace dsiam
