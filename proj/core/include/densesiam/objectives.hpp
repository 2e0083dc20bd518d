#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "densesiam/geometry.hpp"
#include "densesiam/rng.hpp"
#include "densesiam/tensor.hpp"

// Loss functions. Distances reduce the vector axis and average over every
// other position, so a [B,N,K,K] grid with axis 1 gives one sample per
// (batch item, grid point).
namespace dsiam {

enum class Distance { Cosine, CrossEntropy };

// mean of -<p/|p|, z/|z|> along `axis`
template <typename T> Tensor<T> dist_cosine(const Tensor<T>& p, const Tensor<T>& z, std::size_t axis);
// mean of -<softmax(p), log_softmax(z)> along `axis`
template <typename T> Tensor<T> dist_ce(const Tensor<T>& p, const Tensor<T>& z, std::size_t axis);
template <typename T> Tensor<T> distance(Distance d, const Tensor<T>& p, const Tensor<T>& z, std::size_t axis);

template <typename T>
struct SampledGrids {
  Tensor<T> z1p, z2p, p1p, p2p;  // [B,N,K,K]
};

// 1/2 D(p1', sg(z2')) + 1/2 D(p2', sg(z1')). `stopgrad` = false keeps the
// targets attached (only for experiments and tests).
template <typename T>
Tensor<T> pixsim_loss(const SampledGrids<T>& g, Distance d, bool stopgrad = true);

// e[b,n,c] = sum_ij softmax(z')[b,n,i,j] * enc[b,c,i,j]; [B,N,K,K] x [B,C,K,K] -> [B,N,C].
template <typename T> Tensor<T> region_embeddings(const Tensor<T>& zp, const Tensor<T>& enc_grid);

// InfoNCE over the N regions of each image with diagonal positives. Rows of
// u and v are L2-normalized and the logits divided by tau; summed over
// regions, averaged over the batch. u, v: [B,N,D].
template <typename T> Tensor<T> contrastive_loss(const Tensor<T>& u, const Tensor<T>& v, double tau);

// 1/2 L_c(u1, sg(v2)) + 1/2 L_c(u2, sg(v1)).
template <typename T>
Tensor<T> region_contrastive_loss(const Tensor<T>& u1, const Tensor<T>& u2, const Tensor<T>& v1,
                                  const Tensor<T>& v2, double tau, bool stopgrad = true);

// 1/2 D_cos(p_g1, sg(z_g2)) + 1/2 D_cos(p_g2, sg(z_g1)) on [B,D] embeddings.
template <typename T>
Tensor<T> global_loss(const Tensor<T>& pg1, const Tensor<T>& zg1, const Tensor<T>& pg2, const Tensor<T>& zg2,
                      bool stopgrad = true);

/// Class-balanced cross entropy of z_grid [B,N,...] against pseudo-labels
/// argmax(sg(label_source)) (ties to the lowest index). Class c weighs
/// clamp(median(freq) / freq(c), 0.1, 10), the median taken over classes
/// present in the batch; absent classes weigh 0. Normalized by total weight.
template <typename T> Tensor<T> seg_ce_loss(const Tensor<T>& z_grid, const Tensor<T>& label_source);
template <typename T> Tensor<T> seg_ce_loss(const Tensor<T>& z_grid) { return seg_ce_loss(z_grid, z_grid); }

// Pseudo-label class weights as used by seg_ce_loss, indexed by class.
std::vector<double> class_balance_weights(std::span<const std::int64_t> labels, std::size_t num_classes);

struct LossWeights {
  double lambda_sim = 1.0;
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  double lambda3 = 1.0;
  double lambda4 = 0.0;
};

// Throws ConfigError on negative weights.
void validate(const LossWeights& w);

// (lambda1, lambda4) = (log N_aux, log N) / (log N + log N_aux).
std::pair<double, double> seg_lambdas(int n, int n_aux);

// L_sim*lambda_sim + lambda1 L_dense [+ lambda2 L_region]. An undefined
// l_region means RegionSim is inactive and contributes nothing.
template <typename T>
Tensor<T> total_pretrain_loss(const Tensor<T>& l_sim, const Tensor<T>& l_dense, const Tensor<T>& l_region,
                              const LossWeights& w);

// lambda1 L_dense + lambda2 L_region + lambda3 L_seg + lambda4 L_aux; undefined terms are skipped.
template <typename T>
Tensor<T> total_seg_loss(const Tensor<T>& l_dense, const Tensor<T>& l_region, const Tensor<T>& l_seg,
                         const Tensor<T>& l_aux, const LossWeights& w);

/// Biased point selection over kN candidates: the floor(beta*n) most
/// dissimilar candidates (ties to the lower index) plus the remainder drawn
/// uniformly without replacement from the rest. Returns n sorted indices.
std::vector<std::size_t> select_hard_points(std::span<const double> dissimilarity, std::size_t n, double beta,
                                            Rng& rng);

// Packs per-item view coordinates into a [B,K,K,2] sampling grid (x, y order).
template <typename T>
Tensor<T> coords_tensor(std::span<const CorrespondenceGrid> grids, bool second_view);

}  // namespace dsiam
