#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "densesiam/augment.hpp"
#include "densesiam/geometry.hpp"
#include "densesiam/ops.hpp"

namespace test {

// Paints an image with its own pixel-center coordinates, renders both views,
// samples each view at its grid coordinates and returns the largest distance
// (original pixels) between the sampled coordinate and points_orig.
inline double ramp_correspondence_error(const dsiam::ViewSpec& v1, const dsiam::ViewSpec& v2, int k) {
  using namespace dsiam;
  const auto w = static_cast<std::size_t>(v1.image_w), h = static_cast<std::size_t>(v1.image_h);
  std::vector<float> ramp(3 * h * w, 0.0f);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      ramp[i * w + j] = static_cast<float>(j + 0.5);
      ramp[h * w + i * w + j] = static_cast<float>(i + 0.5);
    }
  const TensorF image(Shape{3, h, w}, std::move(ramp));
  const auto grid = build_correspondence(v1, v2, k);
  double worst = 0;
  for (int view = 0; view < 2; ++view) {
    const ViewSpec& spec = view == 0 ? v1 : v2;
    const auto& coords = view == 0 ? grid.coords_v1 : grid.coords_v2;
    const TensorF rendered = render_geometry(image, spec);
    const std::size_t s = static_cast<std::size_t>(spec.out_size);
    std::vector<double> field(rendered.data().begin(), rendered.data().end());
    std::vector<double> c;
    for (const auto& p : coords) {
      c.push_back(p.x);
      c.push_back(p.y);
    }
    const auto kk = static_cast<std::size_t>(k);
    const auto sampled = grid_sample_bilinear(TensorD(Shape{1, 3, s, s}, std::move(field)),
                                              TensorD(Shape{1, kk, kk, 2}, std::move(c)));
    const auto v = sampled.data();
    for (std::size_t n = 0; n < kk * kk; ++n) {
      worst = std::max(worst, std::abs(v[n] - grid.points_orig[n].x));
      worst = std::max(worst, std::abs(v[kk * kk + n] - grid.points_orig[n].y));
    }
  }
  return worst;
}

}  // namespace test
