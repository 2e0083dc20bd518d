#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "densesiam/dst1.hpp"
#include "densesiam/tensor.hpp"

namespace dsiam {

enum class ClassKind : std::int64_t { Stuff = 0, Thing = 1 };

struct LabeledImage {
  TensorF image;                    // [3,H,W] in [0,1]
  std::vector<std::int64_t> mask;   // H*W labels, empty when unlabeled
};

struct Dataset {
  std::vector<LabeledImage> items;
  std::vector<ClassKind> class_kinds;  // one per class; empty when unlabeled

  std::size_t size() const { return items.size(); }
  bool labeled() const { return !class_kinds.empty(); }
  int num_classes() const { return static_cast<int>(class_kinds.size()); }
  int height() const;
  int width() const;
};

inline constexpr int kHueSlots = 12;

/// Synthetic labeled shapes. Class 0 is a low-saturation textured background
/// (stuff); classes 1..C-1 are things drawn as 1-4 non-overlapping circles or
/// rectangles, each class with its own base hue. Image i depends only on
/// (seed, i).
Dataset gen_shapes_dataset(int n, int num_classes, int size, std::uint64_t seed);

// DST1 layout: "images" f32 [N,3,H,W], "masks" i64 [N,H,W], "class_kinds" i64 [C].
dst1::Container pack_dataset(const Dataset& data);
Dataset unpack_dataset(const dst1::Container& container);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
// Accepts a DST1 file or a directory of P6 .ppm files (unlabeled, sorted by name).
Dataset load_dataset(const std::filesystem::path& path);

// Pixel count per class over all masks.
std::vector<std::int64_t> class_pixel_counts(const Dataset& data);

}  // namespace dsiam
