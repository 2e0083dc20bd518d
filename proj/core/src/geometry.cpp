#include "densesiam/geometry.hpp"

#include <algorithm>
#include <string>

#include "densesiam/errors.hpp"

namespace dsiam {

void validate(const ViewSpec& view) {
  const Box& c = view.crop;
  if (view.image_w < 1 || view.image_h < 1) throw ConfigError("view: image size must be positive");
  if (c.w < 1 || c.h < 1) throw ConfigError("view: crop must be at least 1x1 pixels");
  if (c.x0 < 0 || c.y0 < 0 || c.x0 + c.w > view.image_w || c.y0 + c.h > view.image_h) {
    throw ConfigError("view: crop (" + std::to_string(c.x0) + "," + std::to_string(c.y0) + "," +
                      std::to_string(c.w) + "," + std::to_string(c.h) + ") leaves the " +
                      std::to_string(view.image_w) + "x" + std::to_string(view.image_h) + " image");
  }
  if (view.out_size < 1) throw ConfigError("view: output size must be positive");
}

std::optional<Box> intersect(const Box& a, const Box& b) {
  const double x0 = std::max(a.x0, b.x0);
  const double y0 = std::max(a.y0, b.y0);
  const double x1 = std::min(a.x0 + a.w, b.x0 + b.w);
  const double y1 = std::min(a.y0 + a.h, b.y0 + b.h);
  if (x1 - x0 <= 0 || y1 - y0 <= 0) return std::nullopt;
  return Box{x0, y0, x1 - x0, y1 - y0};
}

std::optional<Box> intersect(const ViewSpec& a, const ViewSpec& b) {
  if (a.image_w != b.image_w || a.image_h != b.image_h) {
    throw UsageError("intersect: views refer to different image sizes");
  }
  return intersect(a.crop, b.crop);
}

std::vector<Point> make_grid(const Box& box, int k) {
  if (k <= 0) throw UsageError("make_grid: K must be >= 1, got " + std::to_string(k));
  if (box.w <= 0 || box.h <= 0) throw UsageError("make_grid: empty box");
  std::vector<Point> pts;
  pts.reserve(static_cast<std::size_t>(k) * k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      pts.push_back({box.x0 + (j + 0.5) * box.w / k, box.y0 + (i + 0.5) * box.h / k});
  return pts;
}

Point map_to_view(const Point& p, const ViewSpec& view) {
  const Box& c = view.crop;
  if (p.x < c.x0 || p.x > c.x0 + c.w || p.y < c.y0 || p.y > c.y0 + c.h) {
    throw UsageError("map_to_view: point (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                     ") lies outside the crop");
  }
  double u = (p.x - c.x0) / c.w;
  const double v = (p.y - c.y0) / c.h;
  if (view.hflip) u = 1.0 - u;
  return {u, v};
}

Point map_from_view(const Point& uv, const ViewSpec& view) {
  const Box& c = view.crop;
  const double u = view.hflip ? 1.0 - uv.x : uv.x;
  return {c.x0 + u * c.w, c.y0 + uv.y * c.h};
}

CorrespondenceGrid build_correspondence(const ViewSpec& v1, const ViewSpec& v2, int k) {
  auto inter = intersect(v1, v2);
  if (!inter) throw EmptyOverlap("build_correspondence: the two crops do not overlap");
  CorrespondenceGrid grid;
  grid.k = k;
  grid.points_orig = make_grid(*inter, k);
  grid.coords_v1.reserve(grid.points_orig.size());
  grid.coords_v2.reserve(grid.points_orig.size());
  for (const Point& p : grid.points_orig) {
    grid.coords_v1.push_back(map_to_view(p, v1));
    grid.coords_v2.push_back(map_to_view(p, v2));
  }
  return grid;
}

}  // namespace dsiam
