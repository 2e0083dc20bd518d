#pragma once

#include <optional>
#include <vector>

// Exact pixel correspondence between two augmented views of one image.
//
// Views are crop+horizontal-flip+resize of an original image. All positions
// here are continuous original-image pixel coordinates (pixel (i, j) covers
// [j, j+1) x [i, i+1)), and view-space sampling coordinates are normalized
// to [0,1]^2 so that they feed grid_sample_bilinear directly.
namespace dsiam {

struct Box {
  double x0 = 0, y0 = 0, w = 0, h = 0;
  bool operator==(const Box&) const = default;
};

struct Point {
  double x = 0, y = 0;
  bool operator==(const Point&) const = default;
};

struct ViewSpec {
  Box crop;
  bool hflip = false;
  int out_size = 0;   // the view is out_size x out_size pixels
  int image_w = 0;    // size of the original image the crop refers to
  int image_h = 0;
  bool operator==(const ViewSpec&) const = default;
};

// Throws ConfigError when the crop leaves the image or is degenerate.
void validate(const ViewSpec& view);

struct CorrespondenceGrid {
  int k = 0;
  std::vector<Point> points_orig;  // k*k, row-major (i over y, j over x)
  std::vector<Point> coords_v1;    // normalized (u, v) in view 1
  std::vector<Point> coords_v2;
};

// Axis-aligned overlap; nullopt when width or height is <= 0.
std::optional<Box> intersect(const ViewSpec& a, const ViewSpec& b);
std::optional<Box> intersect(const Box& a, const Box& b);

// Cell-center lattice: point(i, j) = (x0 + (j + 0.5) w / k, y0 + (i + 0.5) h / k).
std::vector<Point> make_grid(const Box& box, int k);

// Original-image point -> normalized view coordinates. Throws UsageError when
// the point is outside the crop.
Point map_to_view(const Point& p, const ViewSpec& view);
// Inverse of map_to_view.
Point map_from_view(const Point& uv, const ViewSpec& view);

// Throws EmptyOverlap when the crops do not intersect.
CorrespondenceGrid build_correspondence(const ViewSpec& v1, const ViewSpec& v2, int k);

}  // namespace dsiam
