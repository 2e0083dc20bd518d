#include "densesiam/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numbers>
#include <numeric>
#include <thread>

#include "densesiam/errors.hpp"
#include "densesiam/objectives.hpp"
#include "densesiam/ops.hpp"

namespace dsiam {

double effective_lr(double base_lr, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  return base_lr * batch_size / 256.0;
}

double lr_at(double lr0, std::int64_t t, std::int64_t total, Schedule schedule) {
  if (schedule == Schedule::Constant || total <= 0) return lr0;
  const double frac = std::clamp(static_cast<double>(t) / static_cast<double>(total), 0.0, 1.0);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void sgd_update(std::span<float> param, std::span<const float> grad, std::vector<float>& buf, double lr,
                double momentum, double weight_decay) {
  if (!grad.empty() && grad.size() != param.size()) {
    throw UsageError("sgd_update: gradient has " + std::to_string(grad.size()) + " values for a parameter of " +
                     std::to_string(param.size()));
  }
  if (buf.size() != param.size()) buf.assign(param.size(), 0.0f);
  const auto m = static_cast<float>(momentum), wd = static_cast<float>(weight_decay), step = static_cast<float>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    // A parameter the loss never reached has an implicit zero gradient.
    const float g = (grad.empty() ? 0.0f : grad[i]) + wd * param[i];
    buf[i] = m * buf[i] + g;
    param[i] -= step * buf[i];
  }
}

double collapse_metric(const TensorF& z) {
  if (z.rank() != 2) throw DimensionError("collapse_metric: expected [B,D], got " + shape_str(z.shape()));
  const std::size_t b = z.dim(0), d = z.dim(1);
  auto v = z.data();
  std::vector<double> rows(b * d);
  for (std::size_t i = 0; i < b; ++i) {
    double n2 = 0;
    for (std::size_t k = 0; k < d; ++k) n2 += static_cast<double>(v[i * d + k]) * v[i * d + k];
    const double inv = 1.0 / std::max(std::sqrt(n2), 1e-12);
    for (std::size_t k = 0; k < d; ++k) rows[i * d + k] = v[i * d + k] * inv;
  }
  double total = 0;
  for (std::size_t k = 0; k < d; ++k) {
    double mean = 0;
    for (std::size_t i = 0; i < b; ++i) mean += rows[i * d + k];
    mean /= static_cast<double>(b);
    double var = 0;
    for (std::size_t i = 0; i < b; ++i) var += (rows[i * d + k] - mean) * (rows[i * d + k] - mean);
    total += std::sqrt(var / static_cast<double>(b));
  }
  return total / static_cast<double>(d);
}

std::string metrics_row(const StepMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(m.step),
                static_cast<long long>(m.epoch), m.lr, m.l_sim, m.l_dense, m.l_region, m.l_seg, m.l_aux, m.collapse);
  return buf;
}

namespace {

AugmentConfig augment_for(const TrainConfig& cfg) {
  if (!cfg.augment) return AugmentConfig::disabled(cfg.view_size);
  return cfg.mode == Mode::Pretrain ? AugmentConfig::pretrain(cfg.view_size)
                                    : AugmentConfig::segmentation(cfg.view_size);
}

int classes_for(const TrainConfig& cfg, const Dataset& data) {
  return resolved_num_classes(cfg, data.labeled() ? data.num_classes() : 0);
}

// [B,N,...] -> [B*R, N] rows, one per spatial position (values only).
TensorF position_rows(const TensorF& z) {
  const std::size_t b = z.dim(0), n = z.dim(1), r = z.numel() / (b * n);
  auto v = z.data();
  std::vector<float> out(b * r * n);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t k = 0; k < r; ++k) out[(i * r + k) * n + c] = v[(i * n + c) * r + k];
  return TensorF(Shape{b * r, n}, std::move(out));
}

std::int64_t read_i64(const dst1::Container& c, const char* name) {
  const auto& e = c.get(name);
  if (e.dtype != dst1::DType::I64 || e.i64.size() != 1) throw ParseError(std::string("checkpoint: bad entry ") + name);
  return e.i64[0];
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, const Dataset& data)
    : cfg_(std::move(cfg)),
      data_(data),
      num_classes_(classes_for(cfg_, data)),
      model_(model_config(cfg_, num_classes_), cfg_.seed),
      weights_(loss_weights(cfg_, num_classes_)),
      aug_(augment_for(cfg_)),
      replay_(aug_, cfg_.seed) {
  validate(cfg_);
  if (data_.items.empty()) throw InputError("training data is empty");
  if (data_.height() < 16 || data_.width() < 16) throw InputError("training images must be at least 16x16");
  steps_per_epoch_ = static_cast<std::int64_t>(data_.size()) / cfg_.batch_size;
  if (steps_per_epoch_ == 0) {
    throw ConfigError("dataset has " + std::to_string(data_.size()) + " images, fewer than batch_size " +
                      std::to_string(cfg_.batch_size));
  }
  total_steps_ = steps_per_epoch_ * cfg_.epochs;
  if (cfg_.max_steps > 0) total_steps_ = std::min(total_steps_, cfg_.max_steps);
  momentum_.resize(model_.params().size());
}

bool Trainer::finished() const { return step_ >= total_steps_; }

bool Trainer::region_active(std::int64_t epoch) const {
  if (!(weights_.lambda2 > 0.0)) return false;
  const auto epochs = (total_steps_ + steps_per_epoch_ - 1) / steps_per_epoch_;
  return static_cast<double>(epoch) >= cfg_.region_start_fraction * static_cast<double>(epochs);
}

std::vector<std::size_t> Trainer::epoch_order(std::int64_t epoch) const {
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(cfg_.seed, {key(Stream::Shuffle), static_cast<std::uint64_t>(epoch)});
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

void Trainer::begin_epoch_if_needed() {
  if (replay_epoch_ == epoch_) return;
  order_ = epoch_order(epoch_);
  if (cfg_.mode == Mode::Seg) {
    std::vector<std::pair<int, int>> sizes(data_.size(), {data_.width(), data_.height()});
    replay_.begin_epoch(epoch_, sizes);
  }
  replay_epoch_ = epoch_;
}

Trainer::Batch Trainer::make_batch(std::span<const std::size_t> indices) {
  const std::size_t n = indices.size();
  std::vector<TensorF> v1(n), v2(n);
  Batch b;
  b.grids.resize(n);
  b.specs.resize(n);
  auto work = [&](std::size_t slot) {
    const std::size_t idx = indices[slot];
    std::pair<ViewParams, ViewParams> p;
    if (cfg_.mode == Mode::Seg) {
      p = replay_.params(idx);
    } else {
      Rng rng = make_rng(cfg_.seed, {key(Stream::Augment), static_cast<std::uint64_t>(epoch_), idx});
      p = sample_pair_params(data_.width(), data_.height(), rng, aug_);
    }
    const TensorF& img = data_.items[idx].image;
    v1[slot] = render_view(img, p.first);
    v2[slot] = render_view(img, p.second);
    b.grids[slot] = build_correspondence(p.first.spec, p.second.spec, cfg_.K);
    b.specs[slot] = {p.first.spec, p.second.spec};
  };
  const auto workers = static_cast<std::size_t>(std::max(1, cfg_.num_workers));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  b.x1 = stack_images(v1);
  b.x2 = stack_images(v2);
  return b;
}

std::vector<CorrespondenceGrid> Trainer::biased_grids(const Batch& b, const TensorF& z1, const TensorF& p1,
                                                      const TensorF& z2, const TensorF& p2) const {
  const std::size_t bs = b.grids.size();
  const auto kk = static_cast<std::size_t>(cfg_.K) * static_cast<std::size_t>(cfg_.K);
  const std::size_t m = kk * static_cast<std::size_t>(cfg_.grid_k);
  std::vector<std::vector<Point>> orig(bs), c1(bs), c2(bs);
  std::vector<float> coords1, coords2;
  for (std::size_t i = 0; i < bs; ++i) {
    const auto& [s1, s2] = b.specs[i];
    const Box box = *intersect(s1, s2);
    Rng rng = make_rng(cfg_.seed, {key(Stream::GridSampling), static_cast<std::uint64_t>(step_), i, 0});
    for (std::size_t k = 0; k < m; ++k) {
      const Point p{box.x0 + uniform(rng, 0, 1) * box.w, box.y0 + uniform(rng, 0, 1) * box.h};
      const Point q1 = map_to_view(p, s1), q2 = map_to_view(p, s2);
      orig[i].push_back(p);
      c1[i].push_back(q1);
      c2[i].push_back(q2);
      coords1.insert(coords1.end(), {static_cast<float>(q1.x), static_cast<float>(q1.y)});
      coords2.insert(coords2.end(), {static_cast<float>(q2.x), static_cast<float>(q2.y)});
    }
  }
  const TensorF t1(Shape{bs, 1, m, 2}, std::move(coords1)), t2(Shape{bs, 1, m, 2}, std::move(coords2));
  const TensorF sz1 = grid_sample_bilinear(z1, t1), sp1 = grid_sample_bilinear(p1, t1);
  const TensorF sz2 = grid_sample_bilinear(z2, t2), sp2 = grid_sample_bilinear(p2, t2);
  const std::size_t n = z1.dim(1);
  // Per-point cross-entropy similarity between the views, symmetrized.
  auto ce = [n, m](const TensorF& p, const TensorF& z, std::size_t i, std::size_t k) {
    auto pv = p.data(), zv = z.data();
    double pm = -1e300, zm = -1e300;
    for (std::size_t c = 0; c < n; ++c) {
      pm = std::max(pm, static_cast<double>(pv[(i * n + c) * m + k]));
      zm = std::max(zm, static_cast<double>(zv[(i * n + c) * m + k]));
    }
    double ps = 0, zs = 0;
    for (std::size_t c = 0; c < n; ++c) {
      ps += std::exp(pv[(i * n + c) * m + k] - pm);
      zs += std::exp(zv[(i * n + c) * m + k] - zm);
    }
    double d = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const double sp = std::exp(pv[(i * n + c) * m + k] - pm) / ps;
      d -= sp * (zv[(i * n + c) * m + k] - zm - std::log(zs));
    }
    return d;
  };
  std::vector<CorrespondenceGrid> out(bs);
  for (std::size_t i = 0; i < bs; ++i) {
    std::vector<double> dissim(m);
    for (std::size_t k = 0; k < m; ++k) dissim[k] = 0.5 * (ce(sp1, sz2, i, k) + ce(sp2, sz1, i, k));
    Rng rng = make_rng(cfg_.seed, {key(Stream::GridSampling), static_cast<std::uint64_t>(step_), i, 1});
    const auto pick = select_hard_points(dissim, kk, cfg_.grid_beta, rng);
    out[i].k = cfg_.K;
    for (auto k : pick) {
      out[i].points_orig.push_back(orig[i][k]);
      out[i].coords_v1.push_back(c1[i][k]);
      out[i].coords_v2.push_back(c2[i][k]);
    }
  }
  return out;
}

StepMetrics Trainer::train_step() {
  if (finished()) throw UsageError("train_step: the schedule is already complete");
  begin_epoch_if_needed();
  const auto bsz = static_cast<std::size_t>(cfg_.batch_size);
  const std::span<const std::size_t> idx(order_.data() + static_cast<std::size_t>(batch_) * bsz, bsz);
  const Batch b = make_batch(idx);

  StepMetrics m;
  m.step = step_;
  m.epoch = epoch_;
  m.lr = lr_override_ ? *lr_override_ : lr_at(effective_lr(cfg_.base_lr, cfg_.batch_size), step_, total_steps_,
                                              resolved_schedule(cfg_));
  for (auto& p : model_.params()) p.tensor.zero_grad();

  const TensorF f1 = model_.encode(b.x1, true), f2 = model_.encode(b.x2, true);
  const TensorF z1 = model_.project(f1, true), z2 = model_.project(f2, true);
  const TensorF p1 = model_.predict(z1, true), p2 = model_.predict(z2, true);

  const std::vector<CorrespondenceGrid> grids =
      cfg_.grid_strategy == GridStrategy::Biased ? biased_grids(b, z1.detach(), p1.detach(), z2.detach(), p2.detach())
                                                 : b.grids;
  const TensorF c1 = coords_tensor<float>(grids, false), c2 = coords_tensor<float>(grids, true);
  SampledGrids<float> g{grid_sample_bilinear(z1, c1), grid_sample_bilinear(z2, c2), grid_sample_bilinear(p1, c1),
                        grid_sample_bilinear(p2, c2)};
  const TensorF l_dense = pixsim_loss(g, cfg_.dist);

  TensorF l_region;
  if (region_active(epoch_)) {
    const TensorF e1 = region_embeddings(g.z1p, grid_sample_bilinear(f1, c1));
    const TensorF e2 = region_embeddings(g.z2p, grid_sample_bilinear(f2, c2));
    const auto [u1, v1] = model_.region_heads(e1, true);
    const auto [u2, v2] = model_.region_heads(e2, true);
    l_region = region_contrastive_loss(u1, u2, v1, v2, cfg_.tau, cfg_.region_stopgrad);
  }

  TensorF total;
  if (cfg_.mode == Mode::Pretrain) {
    const auto [pg1, zg1] = model_.global_branch(f1, true);
    const auto [pg2, zg2] = model_.global_branch(f2, true);
    const TensorF l_sim = global_loss(pg1, zg1, pg2, zg2);
    m.l_sim = l_sim.item();
    m.collapse = collapse_metric(zg1);
    total = total_pretrain_loss(l_sim, l_dense, l_region, weights_);
  } else {
    const TensorF za1 = model_.project_aux(f1, true), za2 = model_.project_aux(f2, true);
    const TensorF pa1 = model_.predict_aux(za1, true), pa2 = model_.predict_aux(za2, true);
    SampledGrids<float> ga{grid_sample_bilinear(za1, c1), grid_sample_bilinear(za2, c2),
                           grid_sample_bilinear(pa1, c1), grid_sample_bilinear(pa2, c2)};
    const TensorF l_aux = pixsim_loss(ga, cfg_.dist);
    const bool cross = cfg_.seg_cross_view;
    const TensorF l_seg = add(mul_scalar(seg_ce_loss(g.z1p, cross ? g.z2p : g.z1p), 0.5f),
                              mul_scalar(seg_ce_loss(g.z2p, cross ? g.z1p : g.z2p), 0.5f));
    m.l_aux = l_aux.item();
    m.l_seg = l_seg.item();
    m.collapse = collapse_metric(position_rows(g.z1p));
    total = total_seg_loss(l_dense, l_region, l_seg, l_aux, weights_);
  }
  m.l_dense = l_dense.item();
  m.l_region = l_region.defined() ? l_region.item() : 0.0;
  m.total = total.item();

  for (double v : {m.total, m.l_sim, m.l_dense, m.l_region, m.l_seg, m.l_aux}) {
    if (!std::isfinite(v)) {
      char buf[512];
      std::snprintf(buf, sizeof buf,
                    "non-finite loss at step %lld (epoch %lld): total=%g l_sim=%g l_dense=%g l_region=%g l_seg=%g "
                    "l_aux=%g",
                    static_cast<long long>(m.step), static_cast<long long>(m.epoch), m.total, m.l_sim, m.l_dense,
                    m.l_region, m.l_seg, m.l_aux);
      throw NonFiniteLoss(buf);
    }
  }

  total.backward();
  auto& params = model_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable()) continue;
    sgd_update(p.tensor.data_mut(), p.tensor.grad(), momentum_[i], m.lr, cfg_.momentum, cfg_.weight_decay);
  }

  ++step_;
  if (++batch_ == steps_per_epoch_) {
    batch_ = 0;
    ++epoch_;
  }
  if (sink_) sink_(m);
  return m;
}

StepMetrics Trainer::train_epoch() {
  StepMetrics acc;
  acc.epoch = epoch_;
  const auto start = epoch_;
  std::int64_t n = 0;
  while (!finished() && epoch_ == start) {
    const StepMetrics m = train_step();
    acc.step = m.step;
    acc.lr = m.lr;
    acc.l_sim += m.l_sim;
    acc.l_dense += m.l_dense;
    acc.l_region += m.l_region;
    acc.l_seg += m.l_seg;
    acc.l_aux += m.l_aux;
    acc.collapse += m.collapse;
    acc.total += m.total;
    ++n;
  }
  if (n > 0) {
    for (double* v : {&acc.l_sim, &acc.l_dense, &acc.l_region, &acc.l_seg, &acc.l_aux, &acc.collapse, &acc.total}) {
      *v /= static_cast<double>(n);
    }
  }
  return acc;
}

void Trainer::run(std::optional<std::int64_t> until_epoch) {
  while (!finished() && (!until_epoch || epoch_ < *until_epoch)) train_step();
}

dst1::Container Trainer::checkpoint() const {
  dst1::Container c;
  c.add(dst1::Entry::text("meta.config", to_text(cfg_)));
  c.add(dst1::Entry::ints("meta.num_classes", {1}, {num_classes_}));
  write_parameters(model_, c);
  const auto& params = model_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable()) continue;
    std::vector<float> buf = momentum_[i];
    if (buf.empty()) buf.assign(params[i].tensor.numel(), 0.0f);
    std::vector<std::uint32_t> dims;
    for (auto d : params[i].tensor.shape()) dims.push_back(static_cast<std::uint32_t>(d));
    c.add(dst1::Entry::floats("optim.momentum." + params[i].name, dims, std::move(buf)));
  }
  c.add(dst1::Entry::ints("state.step", {1}, {step_}));
  c.add(dst1::Entry::ints("state.epoch", {1}, {epoch_}));
  c.add(dst1::Entry::ints("state.batch", {1}, {batch_}));
  // Root of every random stream; the streams themselves are keyed by the counters above.
  c.add(dst1::Entry::ints("state.rng_seed", {1}, {static_cast<std::int64_t>(cfg_.seed)}));
  return c;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const { checkpoint().save(path); }

TrainConfig checkpoint_config(const dst1::Container& ckpt) {
  const std::string text = ckpt.get("meta.config").as_text();
  // The mode line decides how the rest is interpreted.
  const Mode mode = text.find("mode = seg") != std::string::npos ? Mode::Seg : Mode::Pretrain;
  return parse_config(text, mode);
}

int checkpoint_num_classes(const dst1::Container& ckpt) { return static_cast<int>(read_i64(ckpt, "meta.num_classes")); }

ModelF load_model(const dst1::Container& ckpt) {
  const TrainConfig cfg = checkpoint_config(ckpt);
  ModelF model(model_config(cfg, checkpoint_num_classes(ckpt)), cfg.seed);
  read_parameters(model, ckpt);
  return model;
}

Trainer Trainer::resume(const dst1::Container& ckpt, const Dataset& data) {
  Trainer t(checkpoint_config(ckpt), data);
  if (t.num_classes_ != checkpoint_num_classes(ckpt)) {
    throw ConfigError("checkpoint was trained with " + std::to_string(checkpoint_num_classes(ckpt)) +
                      " classes but the data has " + std::to_string(t.num_classes_));
  }
  if (static_cast<std::uint64_t>(read_i64(ckpt, "state.rng_seed")) != t.cfg_.seed) {
    throw ParseError("checkpoint: state.rng_seed does not match meta.config");
  }
  read_parameters(t.model_, ckpt);
  auto& params = t.model_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable()) continue;
    const auto& e = ckpt.get("optim.momentum." + params[i].name);
    if (e.dtype != dst1::DType::F32 || e.f32.size() != params[i].tensor.numel()) {
      throw ParseError("checkpoint: bad momentum buffer for " + params[i].name);
    }
    t.momentum_[i] = e.f32;
  }
  t.step_ = read_i64(ckpt, "state.step");
  t.epoch_ = read_i64(ckpt, "state.epoch");
  t.batch_ = read_i64(ckpt, "state.batch");
  if (t.step_ < 0 || t.epoch_ < 0 || t.batch_ < 0 || t.batch_ >= t.steps_per_epoch_) {
    throw ParseError("checkpoint: counters out of range for this dataset");
  }
  return t;
}

}  // namespace dsiam
