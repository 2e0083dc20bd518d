#include "densesiam/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "densesiam/errors.hpp"
#include "densesiam/ops.hpp"

namespace dsiam {

template <typename T>
Tensor<T> dist_cosine(const Tensor<T>& p, const Tensor<T>& z, std::size_t axis) {
  Tensor<T> cos = sum_axis(mul(l2_normalize(p, axis), l2_normalize(z, axis)), axis);
  return neg(mean(cos));
}

template <typename T>
Tensor<T> dist_ce(const Tensor<T>& p, const Tensor<T>& z, std::size_t axis) {
  Tensor<T> dot = sum_axis(mul(softmax(p, axis), log_softmax(z, axis)), axis);
  return neg(mean(dot));
}

template <typename T>
Tensor<T> distance(Distance d, const Tensor<T>& p, const Tensor<T>& z, std::size_t axis) {
  return d == Distance::Cosine ? dist_cosine(p, z, axis) : dist_ce(p, z, axis);
}

namespace {

template <typename T>
Tensor<T> target(const Tensor<T>& t, bool stopgrad) {
  return stopgrad ? stop_gradient(t) : t;
}

template <typename T>
Tensor<T> half_sum(const Tensor<T>& a, const Tensor<T>& b) {
  return add(mul_scalar(a, T(0.5)), mul_scalar(b, T(0.5)));
}

}  // namespace

template <typename T>
Tensor<T> pixsim_loss(const SampledGrids<T>& g, Distance d, bool stopgrad) {
  return half_sum(distance(d, g.p1p, target(g.z2p, stopgrad), 1), distance(d, g.p2p, target(g.z1p, stopgrad), 1));
}

template <typename T>
Tensor<T> region_embeddings(const Tensor<T>& zp, const Tensor<T>& enc_grid) {
  if (zp.rank() != 4 || enc_grid.rank() != 4 || zp.dim(0) != enc_grid.dim(0) || zp.dim(2) != enc_grid.dim(2) ||
      zp.dim(3) != enc_grid.dim(3)) {
    throw DimensionError("region_embeddings: expected [B,N,K,K] and [B,C,K,K], got " + shape_str(zp.shape()) +
                         " and " + shape_str(enc_grid.shape()));
  }
  const std::size_t b = zp.dim(0), n = zp.dim(1), c = enc_grid.dim(1), kk = zp.dim(2) * zp.dim(3);
  Tensor<T> masks = reshape(softmax(zp, 1), {b, n, kk});
  Tensor<T> feats = transpose(reshape(enc_grid, {b, c, kk}), 1, 2);
  return bmm(masks, feats);
}

template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& u, const Tensor<T>& v, double tau) {
  if (u.rank() != 3 || u.shape() != v.shape()) {
    throw DimensionError("contrastive_loss: expected matching [B,N,D], got " + shape_str(u.shape()) + " and " +
                         shape_str(v.shape()));
  }
  if (!(tau > 0.0)) throw ConfigError("contrastive_loss: tau must be > 0");
  const std::size_t b = u.dim(0), n = u.dim(1);
  Tensor<T> logits = mul_scalar(bmm(l2_normalize(u, 2), transpose(l2_normalize(v, 2), 1, 2)), static_cast<T>(1.0 / tau));
  Tensor<T> eye(Shape{b, n, n});
  auto e = eye.data_mut();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t s = 0; s < n; ++s) e[(i * n + s) * n + s] = T(1);
  return mul_scalar(sum(mul(log_softmax(logits, 2), eye)), static_cast<T>(-1.0 / static_cast<double>(b)));
}

template <typename T>
Tensor<T> region_contrastive_loss(const Tensor<T>& u1, const Tensor<T>& u2, const Tensor<T>& v1,
                                  const Tensor<T>& v2, double tau, bool stopgrad) {
  if (u1.rank() == 3 && u1.dim(1) == 0) throw UsageError("region_contrastive_loss: N must be >= 1");
  return half_sum(contrastive_loss(u1, target(v2, stopgrad), tau), contrastive_loss(u2, target(v1, stopgrad), tau));
}

template <typename T>
Tensor<T> global_loss(const Tensor<T>& pg1, const Tensor<T>& zg1, const Tensor<T>& pg2, const Tensor<T>& zg2,
                      bool stopgrad) {
  return half_sum(dist_cosine(pg1, target(zg2, stopgrad), 1), dist_cosine(pg2, target(zg1, stopgrad), 1));
}

std::vector<double> class_balance_weights(std::span<const std::int64_t> labels, std::size_t num_classes) {
  std::vector<double> freq(num_classes, 0.0);
  for (auto y : labels) freq[static_cast<std::size_t>(y)] += 1.0;
  std::vector<double> present;
  for (double f : freq)
    if (f > 0) present.push_back(f);
  std::vector<double> w(num_classes, 0.0);
  if (present.empty()) return w;
  std::sort(present.begin(), present.end());
  const std::size_t m = present.size();
  const double median = m % 2 ? present[m / 2] : 0.5 * (present[m / 2 - 1] + present[m / 2]);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (freq[c] > 0) w[c] = std::clamp(median / freq[c], 0.1, 10.0);
  }
  return w;
}

template <typename T>
Tensor<T> seg_ce_loss(const Tensor<T>& z_grid, const Tensor<T>& label_source) {
  if (z_grid.rank() < 2 || z_grid.shape() != label_source.shape()) {
    throw DimensionError("seg_ce_loss: expected matching [B,N,...] tensors, got " + shape_str(z_grid.shape()) +
                         " and " + shape_str(label_source.shape()));
  }
  const std::size_t b = z_grid.dim(0), n = z_grid.dim(1), rest = z_grid.numel() / (b * n);
  const Tensor<T> frozen = stop_gradient(label_source);
  auto src = frozen.data();
  std::vector<std::int64_t> labels(b * rest);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < rest; ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < n; ++c) {
        if (src[(i * n + c) * rest + r] > src[(i * n + best) * rest + r]) best = c;
      }
      labels[i * rest + r] = static_cast<std::int64_t>(best);
    }
  const auto w = class_balance_weights(labels, n);
  double total = 0.0;
  for (auto y : labels) total += w[static_cast<std::size_t>(y)];
  Tensor<T> pick(z_grid.shape());
  auto pv = pick.data_mut();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < rest; ++r) {
      const auto y = static_cast<std::size_t>(labels[i * rest + r]);
      pv[(i * n + y) * rest + r] = static_cast<T>(w[y] / total);
    }
  return neg(sum(mul(log_softmax(z_grid, 1), pick)));
}

void validate(const LossWeights& w) {
  for (double v : {w.lambda_sim, w.lambda1, w.lambda2, w.lambda3, w.lambda4}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
  }
}

std::pair<double, double> seg_lambdas(int n, int n_aux) {
  if (n < 2 || n_aux < 2) throw ConfigError("seg weighting needs N >= 2 and N_aux >= 2");
  const double ln = std::log(static_cast<double>(n)), la = std::log(static_cast<double>(n_aux));
  return {la / (ln + la), ln / (ln + la)};
}

namespace {

template <typename T>
void accumulate(Tensor<T>& acc, const Tensor<T>& term, double weight) {
  if (!term.defined()) return;
  Tensor<T> scaled = mul_scalar(term, static_cast<T>(weight));
  acc = acc.defined() ? add(acc, scaled) : scaled;
}

}  // namespace

template <typename T>
Tensor<T> total_pretrain_loss(const Tensor<T>& l_sim, const Tensor<T>& l_dense, const Tensor<T>& l_region,
                              const LossWeights& w) {
  validate(w);
  Tensor<T> acc;
  accumulate(acc, l_sim, w.lambda_sim);
  accumulate(acc, l_dense, w.lambda1);
  accumulate(acc, l_region, w.lambda2);
  return acc.defined() ? acc : Tensor<T>::scalar(T(0));
}

template <typename T>
Tensor<T> total_seg_loss(const Tensor<T>& l_dense, const Tensor<T>& l_region, const Tensor<T>& l_seg,
                         const Tensor<T>& l_aux, const LossWeights& w) {
  validate(w);
  Tensor<T> acc;
  accumulate(acc, l_dense, w.lambda1);
  accumulate(acc, l_region, w.lambda2);
  accumulate(acc, l_seg, w.lambda3);
  accumulate(acc, l_aux, w.lambda4);
  return acc.defined() ? acc : Tensor<T>::scalar(T(0));
}

std::vector<std::size_t> select_hard_points(std::span<const double> dissimilarity, std::size_t n, double beta,
                                            Rng& rng) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("select_hard_points: beta must lie in [0,1]");
  if (n == 0 || dissimilarity.size() < n) {
    throw UsageError("select_hard_points: need at least n = " + std::to_string(n) + " candidates, got " +
                     std::to_string(dissimilarity.size()));
  }
  std::vector<std::size_t> order(dissimilarity.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dissimilarity[a] > dissimilarity[b]; });
  const auto hard = static_cast<std::size_t>(std::floor(beta * static_cast<double>(n)));
  std::vector<std::size_t> picked(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(hard));
  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(hard), order.end());
  std::sort(rest.begin(), rest.end());
  // Partial Fisher-Yates for the uniform remainder.
  for (std::size_t i = 0; i < n - hard; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(i),
                                                        static_cast<std::int64_t>(rest.size() - 1)));
    std::swap(rest[i], rest[j]);
    picked.push_back(rest[i]);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

template <typename T>
Tensor<T> coords_tensor(std::span<const CorrespondenceGrid> grids, bool second_view) {
  if (grids.empty()) throw UsageError("coords_tensor: no grids");
  const auto k = static_cast<std::size_t>(grids.front().k);
  std::vector<T> v;
  v.reserve(grids.size() * k * k * 2);
  for (const auto& g : grids) {
    if (static_cast<std::size_t>(g.k) != k) throw DimensionError("coords_tensor: grids differ in K");
    for (const auto& p : second_view ? g.coords_v2 : g.coords_v1) {
      v.push_back(static_cast<T>(p.x));
      v.push_back(static_cast<T>(p.y));
    }
  }
  return Tensor<T>(Shape{grids.size(), k, k, 2}, std::move(v));
}

#define DSIAM_INSTANTIATE_OBJECTIVES(T)                                                                      \
  template Tensor<T> dist_cosine<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);                      \
  template Tensor<T> dist_ce<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);                          \
  template Tensor<T> distance<T>(Distance, const Tensor<T>&, const Tensor<T>&, std::size_t);               \
  template Tensor<T> pixsim_loss<T>(const SampledGrids<T>&, Distance, bool);                               \
  template Tensor<T> region_embeddings<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> contrastive_loss<T>(const Tensor<T>&, const Tensor<T>&, double);                      \
  template Tensor<T> region_contrastive_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                                const Tensor<T>&, double, bool);                           \
  template Tensor<T> global_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                    bool);                                                                 \
  template Tensor<T> seg_ce_loss<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> total_pretrain_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                            const LossWeights&);                                           \
  template Tensor<T> total_seg_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                       const Tensor<T>&, const LossWeights&);                              \
  template Tensor<T> coords_tensor<T>(std::span<const CorrespondenceGrid>, bool);

DSIAM_INSTANTIATE_OBJECTIVES(float)
DSIAM_INSTANTIATE_OBJECTIVES(double)

}  // namespace dsiam
