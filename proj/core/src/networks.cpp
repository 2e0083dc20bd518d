#include "densesiam/networks.hpp"

#include <cmath>
#include <string>

#include "densesiam/errors.hpp"
#include "densesiam/ops.hpp"
#include "densesiam/rng.hpp"

namespace dsiam {

void validate(const ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  if (e.stage_channels.empty()) throw ConfigError("stage_channels must not be empty");
  for (int c : e.stage_channels) {
    if (c < 1) throw ConfigError("stage_channels entries must be >= 1");
  }
  const int os = e.output_stride;
  if (os < 1 || (os & (os - 1)) != 0) throw ConfigError("output_stride must be a power of two");
  const int halvings = static_cast<int>(std::lround(std::log2(os)));
  if (halvings > static_cast<int>(e.stage_channels.size())) {
    throw ConfigError("output_stride " + std::to_string(os) + " needs at least " + std::to_string(halvings) +
                      " encoder stages");
  }
  if (e.input_size < 1 || e.input_size % os != 0) {
    throw ConfigError("view size " + std::to_string(e.input_size) + " is not divisible by output_stride " +
                      std::to_string(os));
  }
  if (cfg.head_width < 1 || cfg.region_dim < 1 || cfg.global_dim < 1) {
    throw ConfigError("head widths must be >= 1");
  }
  if (cfg.num_classes < 1) throw ConfigError("N must be >= 1");
  if (cfg.aux_classes < 0) throw ConfigError("N_aux must be >= 0");
}

namespace {

std::size_t dense_head_count(std::size_t in, std::size_t w, std::size_t n) {
  const std::size_t b = static_cast<std::size_t>(bottleneck_width(static_cast<int>(n)));
  const std::size_t proj = in * w + 2 * w + w * w + 2 * w + w * n;
  const std::size_t pred = n * b + 2 * b + b * n + n;
  return proj + pred;
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  int cin = 3;
  for (std::size_t i = 0; i < cfg_.encoder.stage_channels.size(); ++i) {
    const std::string p = "encoder.stage" + std::to_string(i);
    const int cout = cfg_.encoder.stage_channels[i];
    add_conv(p + ".conv", cin, cout, 3, false, seed);
    add_bn(p + ".bn", cout, true, seed);
    cin = cout;
  }
  add_dense_head("projector", "predictor", cin, cfg_.num_classes, seed);
  if (cfg_.aux_classes > 0) add_dense_head("aux_projector", "aux_predictor", cin, cfg_.aux_classes, seed);
  if (cfg_.region_heads) add_mlp_head("region_projector", "region_predictor", cin, cfg_.region_dim, seed);
  if (cfg_.global_branch) add_mlp_head("global_projector", "global_predictor", cin, cfg_.global_dim, seed);
}

template <typename T>
void Model<T>::add(const std::string& name, ParamKind kind, Shape shape, std::uint64_t seed, std::size_t fan_in) {
  Tensor<T> t(shape);
  auto v = t.data_mut();
  switch (kind) {
    case ParamKind::Weight: {
      Rng rng = make_rng(seed, {key(Stream::Init), fnv1a(name)});
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& x : v) x = static_cast<T>(normal(rng, 0.0, std));
      break;
    }
    case ParamKind::BnScale:
    case ParamKind::RunningVar:
      std::fill(v.begin(), v.end(), T(1));
      break;
    default:
      break;
  }
  Param<T> p{name, kind, t};
  if (p.trainable()) p.tensor.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
}

template <typename T>
void Model<T>::add_conv(const std::string& prefix, int cin, int cout, int k, bool bias, std::uint64_t seed) {
  const auto ci = static_cast<std::size_t>(cin), co = static_cast<std::size_t>(cout), kk = static_cast<std::size_t>(k);
  add(prefix + ".weight", ParamKind::Weight, {co, ci, kk, kk}, seed, ci * kk * kk);
  if (bias) add(prefix + ".bias", ParamKind::Bias, {co}, seed);
}

template <typename T>
void Model<T>::add_linear(const std::string& prefix, int in, int out, bool bias, std::uint64_t seed) {
  const auto i = static_cast<std::size_t>(in), o = static_cast<std::size_t>(out);
  add(prefix + ".weight", ParamKind::Weight, {o, i}, seed, i);
  if (bias) add(prefix + ".bias", ParamKind::Bias, {o}, seed);
}

template <typename T>
void Model<T>::add_bn(const std::string& prefix, int c, bool affine, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(c);
  if (affine) {
    add(prefix + ".weight", ParamKind::BnScale, {n}, seed);
    add(prefix + ".bias", ParamKind::BnShift, {n}, seed);
  }
  add(prefix + ".running_mean", ParamKind::RunningMean, {n}, seed);
  add(prefix + ".running_var", ParamKind::RunningVar, {n}, seed);
}

template <typename T>
void Model<T>::add_dense_head(const std::string& proj, const std::string& pred, int in, int n, std::uint64_t seed) {
  const int w = cfg_.head_width;
  add_conv(proj + ".layer0.conv", in, w, 1, false, seed);
  add_bn(proj + ".layer0.bn", w, true, seed);
  add_conv(proj + ".layer1.conv", w, w, 1, false, seed);
  add_bn(proj + ".layer1.bn", w, true, seed);
  add_conv(proj + ".layer2.conv", w, n, 1, false, seed);
  add_bn(proj + ".layer2.bn", n, false, seed);
  const int b = bottleneck_width(n);
  add_conv(pred + ".layer0.conv", n, b, 1, false, seed);
  add_bn(pred + ".layer0.bn", b, true, seed);
  add_conv(pred + ".layer1.conv", b, n, 1, true, seed);
}

template <typename T>
void Model<T>::add_mlp_head(const std::string& proj, const std::string& pred, int in, int d, std::uint64_t seed) {
  const int w = cfg_.head_width;
  add_linear(proj + ".layer0.fc", in, w, false, seed);
  add_bn(proj + ".layer0.bn", w, true, seed);
  add_linear(proj + ".layer1.fc", w, w, false, seed);
  add_bn(proj + ".layer1.bn", w, true, seed);
  add_linear(proj + ".layer2.fc", w, d, false, seed);
  add_bn(proj + ".layer2.bn", d, false, seed);
  const int b = bottleneck_width(d);
  add_linear(pred + ".layer0.fc", d, b, false, seed);
  add_bn(pred + ".layer0.bn", b, true, seed);
  add_linear(pred + ".layer1.fc", b, d, true, seed);
}

template <typename T>
Tensor<T>& Model<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("model has no parameter " + name);
  return params_[it->second].tensor;
}

template <typename T>
const Tensor<T>& Model<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("model has no parameter " + name);
  return params_[it->second].tensor;
}

template <typename T>
std::size_t Model<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable()) n += p.tensor.numel();
  return n;
}

template <typename T>
Tensor<T> Model<T>::conv(const std::string& prefix, const Tensor<T>& x, std::size_t stride, std::size_t pad) {
  const std::string b = prefix + ".bias";
  return conv2d(x, at(prefix + ".weight"), has(b) ? at(b) : Tensor<T>(), stride, pad);
}

template <typename T>
Tensor<T> Model<T>::fc(const std::string& prefix, const Tensor<T>& x) {
  const std::string b = prefix + ".bias";
  return linear(x, at(prefix + ".weight"), has(b) ? at(b) : Tensor<T>());
}

template <typename T>
Tensor<T> Model<T>::bn(const std::string& prefix, const Tensor<T>& x, bool training) {
  const std::string g = prefix + ".weight";
  const bool affine = has(g);
  return batch_norm(x, affine ? at(g) : Tensor<T>(), affine ? at(prefix + ".bias") : Tensor<T>(),
                    at(prefix + ".running_mean"), at(prefix + ".running_var"), training);
}

template <typename T>
Tensor<T> Model<T>::encode(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != 3) throw DimensionError("encode: expected [B,3,S,S], got " + shape_str(x.shape()));
  const int os = cfg_.encoder.output_stride;
  if (x.dim(2) % static_cast<std::size_t>(os) != 0 || x.dim(3) % static_cast<std::size_t>(os) != 0) {
    throw ConfigError("encode: input " + shape_str(x.shape()) + " not divisible by output_stride " +
                      std::to_string(os));
  }
  const auto halvings = static_cast<std::size_t>(std::lround(std::log2(os)));
  Tensor<T> h = x;
  for (std::size_t i = 0; i < cfg_.encoder.stage_channels.size(); ++i) {
    const std::string p = "encoder.stage" + std::to_string(i);
    h = relu(bn(p + ".bn", conv(p + ".conv", h, i < halvings ? 2 : 1, 1), training));
  }
  return h;
}

template <typename T>
Tensor<T> Model<T>::dense_projector(const std::string& p, const Tensor<T>& x, bool training) {
  Tensor<T> h = relu(bn(p + ".layer0.bn", conv(p + ".layer0.conv", x, 1, 0), training));
  h = relu(bn(p + ".layer1.bn", conv(p + ".layer1.conv", h, 1, 0), training));
  return bn(p + ".layer2.bn", conv(p + ".layer2.conv", h, 1, 0), training);
}

template <typename T>
Tensor<T> Model<T>::dense_predictor(const std::string& p, const Tensor<T>& x, bool training) {
  Tensor<T> h = relu(bn(p + ".layer0.bn", conv(p + ".layer0.conv", x, 1, 0), training));
  return conv(p + ".layer1.conv", h, 1, 0);
}

template <typename T>
Tensor<T> Model<T>::mlp_projector(const std::string& p, const Tensor<T>& x, bool training) {
  Tensor<T> h = relu(bn(p + ".layer0.bn", fc(p + ".layer0.fc", x), training));
  h = relu(bn(p + ".layer1.bn", fc(p + ".layer1.fc", h), training));
  return bn(p + ".layer2.bn", fc(p + ".layer2.fc", h), training);
}

template <typename T>
Tensor<T> Model<T>::mlp_predictor(const std::string& p, const Tensor<T>& x, bool training) {
  Tensor<T> h = relu(bn(p + ".layer0.bn", fc(p + ".layer0.fc", x), training));
  return fc(p + ".layer1.fc", h);
}

template <typename T>
Tensor<T> Model<T>::project(const Tensor<T>& feat, bool training) {
  return dense_projector("projector", feat, training);
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& z, bool training) {
  return dense_predictor("predictor", z, training);
}

template <typename T>
Tensor<T> Model<T>::project_aux(const Tensor<T>& feat, bool training) {
  if (cfg_.aux_classes <= 0) throw UsageError("model has no auxiliary head");
  return dense_projector("aux_projector", feat, training);
}

template <typename T>
Tensor<T> Model<T>::predict_aux(const Tensor<T>& z, bool training) {
  if (cfg_.aux_classes <= 0) throw UsageError("model has no auxiliary head");
  return dense_predictor("aux_predictor", z, training);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Model<T>::region_heads(const Tensor<T>& e, bool training) {
  if (!cfg_.region_heads) throw UsageError("model has no region heads");
  if (e.rank() != 3) throw DimensionError("region_heads: expected [B,N,C], got " + shape_str(e.shape()));
  const std::size_t b = e.dim(0), n = e.dim(1);
  // Every region is one row of a [B*N, C] batch.
  Tensor<T> rows = reshape(e, {b * n, e.dim(2)});
  Tensor<T> v = mlp_projector("region_projector", rows, training);
  Tensor<T> u = mlp_predictor("region_predictor", v, training);
  const auto d = static_cast<std::size_t>(cfg_.region_dim);
  return {reshape(u, {b, n, d}), reshape(v, {b, n, d})};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Model<T>::global_branch(const Tensor<T>& feat, bool training) {
  if (!cfg_.global_branch) throw UsageError("model has no global branch");
  Tensor<T> z = mlp_projector("global_projector", global_avg_pool(feat), training);
  Tensor<T> p = mlp_predictor("global_predictor", z, training);
  return {p, z};
}

template class Model<float>;
template class Model<double>;

std::size_t count_parameters(const ModelConfig& cfg) {
  std::size_t total = 0;
  std::size_t cin = 3;
  for (int c : cfg.encoder.stage_channels) {
    const auto co = static_cast<std::size_t>(c);
    total += 9 * cin * co + 2 * co;
    cin = co;
  }
  const auto w = static_cast<std::size_t>(cfg.head_width);
  total += dense_head_count(cin, w, static_cast<std::size_t>(cfg.num_classes));
  if (cfg.aux_classes > 0) total += dense_head_count(cin, w, static_cast<std::size_t>(cfg.aux_classes));
  // The MLP heads have the same layer pattern with Linear in place of conv1x1.
  if (cfg.region_heads) total += dense_head_count(cin, w, static_cast<std::size_t>(cfg.region_dim));
  if (cfg.global_branch) total += dense_head_count(cin, w, static_cast<std::size_t>(cfg.global_dim));
  return total;
}

void write_parameters(const ModelF& model, dst1::Container& out) {
  for (const auto& p : model.params()) {
    std::vector<std::uint32_t> dims;
    for (auto d : p.tensor.shape()) dims.push_back(static_cast<std::uint32_t>(d));
    out.add(dst1::Entry::floats(p.name, dims, std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())));
  }
}

void read_parameters(ModelF& model, const dst1::Container& in) {
  for (auto& p : model.params()) {
    const auto& e = in.get(p.name);
    std::vector<std::uint32_t> dims;
    for (auto d : p.tensor.shape()) dims.push_back(static_cast<std::uint32_t>(d));
    if (e.dtype != dst1::DType::F32 || e.dims != dims) {
      throw ParseError("checkpoint entry " + p.name + " has the wrong dtype or shape (expected " +
                       shape_str(p.tensor.shape()) + ")");
    }
    auto v = p.tensor.data_mut();
    std::copy(e.f32.begin(), e.f32.end(), v.begin());
  }
}

template <typename To, typename From>
void copy_parameters(Model<To>& dst, const Model<From>& src) {
  if (dst.params().size() != src.params().size()) throw UsageError("copy_parameters: model layouts differ");
  for (std::size_t i = 0; i < dst.params().size(); ++i) {
    auto& d = dst.params()[i];
    const auto& s = src.params()[i];
    if (d.name != s.name || d.tensor.shape() != s.tensor.shape()) {
      throw UsageError("copy_parameters: model layouts differ at " + d.name);
    }
    auto dv = d.tensor.data_mut();
    auto sv = s.tensor.data();
    for (std::size_t k = 0; k < dv.size(); ++k) dv[k] = static_cast<To>(sv[k]);
  }
}

template void copy_parameters<double, float>(Model<double>&, const Model<float>&);
template void copy_parameters<float, double>(Model<float>&, const Model<double>&);
template void copy_parameters<float, float>(Model<float>&, const Model<float>&);

}  // namespace dsiam
