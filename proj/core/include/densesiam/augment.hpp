#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "densesiam/geometry.hpp"
#include "densesiam/rng.hpp"
#include "densesiam/tensor.hpp"

namespace dsiam {

struct AugmentConfig {
  int out_size = 64;
  double scale_min = 0.2;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  double flip_p = 0.5;
  double jitter_p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
  double gray_p = 0.2;
  double blur_p = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  // Joint resampling budget before falling back to two full-image crops.
  int max_overlap_attempts = 50;

  // Self-supervised pretraining recipe.
  static AugmentConfig pretrain(int out_size);
  // Segmentation recipe: milder jitter, crops covering at least half the image.
  static AugmentConfig segmentation(int out_size);
  // Full-image crop, no flip, no photometric change.
  static AugmentConfig disabled(int out_size);
};

struct PhotometricParams {
  bool jitter = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
  std::array<int, 4> order{0, 1, 2, 3};  // 0 brightness, 1 contrast, 2 saturation, 3 hue
  bool grayscale = false;
  bool blur = false;
  double blur_sigma = 0.0;
  bool operator==(const PhotometricParams&) const = default;
};

struct ViewParams {
  ViewSpec spec;
  PhotometricParams photo;
  bool operator==(const ViewParams&) const = default;
};

struct AugmentedPair {
  TensorF x1, x2;  // [3,S,S], values in [0,1]
  ViewSpec spec1, spec2;
  PhotometricParams photo1, photo2;  // what was sampled for each view
};

// RandomResizedCrop-style crop; the area ratio always lies in [scale_min, scale_max].
Box sample_crop(int image_w, int image_h, Rng& rng, const AugmentConfig& cfg);
PhotometricParams sample_photometric(Rng& rng, const AugmentConfig& cfg);

// Samples two views whose crops overlap (joint resampling, then full-image
// fallback). Photometric parameters are drawn independently per view.
std::pair<ViewParams, ViewParams> sample_pair_params(int image_w, int image_h, Rng& rng,
                                                     const AugmentConfig& cfg);

// Crop + resize (bilinear, pixel-center convention) + optional flip.
TensorF render_geometry(const TensorF& image, const ViewSpec& spec);
void apply_photometric(TensorF& view, const PhotometricParams& photo);
TensorF render_view(const TensorF& image, const ViewParams& params);

AugmentedPair sample_pretrain_pair(const TensorF& image, Rng& rng, const AugmentConfig& cfg);
AugmentedPair sample_seg_pair(const TensorF& image, Rng& rng, const AugmentConfig& cfg);

/// Segmentation-mode augmentation: at the start of every epoch the pair
/// parameters of every image are sampled once, then replayed for any query
/// within that epoch. The table for (seed, epoch) is the same no matter how
/// many workers render from it.
class ReplayAugmenter {
 public:
  ReplayAugmenter(AugmentConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {}

  void begin_epoch(std::int64_t epoch, std::span<const std::pair<int, int>> image_sizes);
  std::int64_t epoch() const { return epoch_; }
  const std::pair<ViewParams, ViewParams>& params(std::size_t index) const;
  AugmentedPair pair(std::size_t index, const TensorF& image) const;

 private:
  AugmentConfig cfg_;
  std::uint64_t seed_;
  std::int64_t epoch_ = -1;
  std::vector<std::pair<ViewParams, ViewParams>> table_;
};

// Stacks equally-shaped [C,H,W] images into [N,C,H,W].
TensorF stack_images(std::span<const TensorF> images);

}  // namespace dsiam
