#include "densesiam/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "densesiam/errors.hpp"
#include "densesiam/image_io.hpp"
#include "densesiam/rng.hpp"

namespace dsiam {

namespace fs = std::filesystem;

int Dataset::height() const {
  if (items.empty()) throw UsageError("dataset is empty");
  return static_cast<int>(items.front().image.dim(1));
}

int Dataset::width() const {
  if (items.empty()) throw UsageError("dataset is empty");
  return static_cast<int>(items.front().image.dim(2));
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Shape2d {
  bool circle;
  double cx, cy, a, b;  // circle: radius a; rectangle: half-extents a, b

  bool covers(double x, double y) const {
    if (circle) return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= a * a;
    return std::abs(x - cx) <= a && std::abs(y - cy) <= b;
  }
};

LabeledImage make_image(int num_classes, int size, Rng& rng) {
  const auto s = static_cast<std::size_t>(size);
  const std::size_t plane = s * s;
  std::vector<float> pix(3 * plane);
  std::vector<std::int64_t> mask(plane, 0);

  // Background: grey with a faint tint, a random sinusoidal texture and noise.
  const double base = uniform(rng, 0.45, 0.55);
  const double tint_h = uniform(rng, 0.0, 1.0);
  const double fx = uniform(rng, 0.5, 3.0) * 2 * std::numbers::pi / size;
  const double fy = uniform(rng, 0.5, 3.0) * 2 * std::numbers::pi / size;
  const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      const double v = base + 0.08 * std::sin(fx * j + fy * i + phase) + normal(rng, 0.0, 0.03);
      const Rgb c = hsv(tint_h, 0.08, std::clamp(v, 0.0, 1.0));
      pix[i * s + j] = static_cast<float>(c.r);
      pix[plane + i * s + j] = static_cast<float>(c.g);
      pix[2 * plane + i * s + j] = static_cast<float>(c.b);
    }
  }

  const int things = num_classes - 1;
  const auto n_shapes = uniform_int(rng, 1, 4);
  for (std::int64_t k = 0; k < n_shapes; ++k) {
    const auto cls = uniform_int(rng, 1, things);
    Shape2d shape{};
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      shape.circle = bernoulli(rng, 0.5);
      if (shape.circle) {
        shape.a = shape.b = uniform(rng, size / 8.0, size / 4.0);
      } else {
        shape.a = uniform(rng, size / 8.0, size / 4.0);
        shape.b = uniform(rng, size / 8.0, size / 4.0);
      }
      shape.cx = uniform(rng, shape.a, size - shape.a);
      shape.cy = uniform(rng, shape.b, size - shape.b);
      // Grown by one pixel so shapes never touch.
      Shape2d grown = shape;
      grown.a += 1.0;
      grown.b += 1.0;
      ok = true;
      for (std::size_t i = 0; i < s && ok; ++i)
        for (std::size_t j = 0; j < s; ++j) {
          if (mask[i * s + j] != 0 && grown.covers(j + 0.5, i + 0.5)) {
            ok = false;
            break;
          }
        }
    }
    if (!ok) continue;
    // Thing hues are spread evenly over the hue slots.
    const auto slot = (cls - 1) * kHueSlots / things;
    const double hue = slot / static_cast<double>(kHueSlots) + uniform(rng, -0.015, 0.015);
    const double sat = uniform(rng, 0.65, 0.9);
    const double val = uniform(rng, 0.6, 0.95);
    const Rgb c = hsv(hue, sat, val);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        if (!shape.covers(j + 0.5, i + 0.5)) continue;
        mask[i * s + j] = cls;
        pix[i * s + j] = static_cast<float>(std::clamp(c.r + normal(rng, 0.0, 0.03), 0.0, 1.0));
        pix[plane + i * s + j] = static_cast<float>(std::clamp(c.g + normal(rng, 0.0, 0.03), 0.0, 1.0));
        pix[2 * plane + i * s + j] = static_cast<float>(std::clamp(c.b + normal(rng, 0.0, 0.03), 0.0, 1.0));
      }
  }
  return LabeledImage{TensorF(Shape{3, s, s}, std::move(pix)), std::move(mask)};
}

}  // namespace

Dataset gen_shapes_dataset(int n, int num_classes, int size, std::uint64_t seed) {
  if (num_classes < 2) {
    throw ConfigError("gen_shapes_dataset: need at least 2 classes (background + 1 thing), got " +
                      std::to_string(num_classes));
  }
  if (num_classes > kHueSlots) {
    throw ConfigError("gen_shapes_dataset: at most " + std::to_string(kHueSlots) + " classes, got " +
                      std::to_string(num_classes));
  }
  if (n < 1) throw ConfigError("gen_shapes_dataset: need at least one image");
  if (size < 16) throw ConfigError("gen_shapes_dataset: image size must be at least 16");
  Dataset data;
  data.class_kinds.assign(static_cast<std::size_t>(num_classes), ClassKind::Thing);
  data.class_kinds[0] = ClassKind::Stuff;
  data.items.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, {key(Stream::Dataset), static_cast<std::uint64_t>(i)});
    data.items.push_back(make_image(num_classes, size, rng));
  }
  return data;
}

dst1::Container pack_dataset(const Dataset& data) {
  if (data.items.empty()) throw UsageError("pack_dataset: empty dataset");
  const auto h = static_cast<std::uint32_t>(data.height());
  const auto w = static_cast<std::uint32_t>(data.width());
  const auto n = static_cast<std::uint32_t>(data.size());
  std::vector<float> images;
  images.reserve(static_cast<std::size_t>(n) * 3 * h * w);
  std::vector<std::int64_t> masks;
  for (const auto& item : data.items) {
    if (item.image.shape() != Shape{3, h, w}) throw DimensionError("pack_dataset: images differ in size");
    images.insert(images.end(), item.image.data().begin(), item.image.data().end());
    if (data.labeled()) {
      if (item.mask.size() != static_cast<std::size_t>(h) * w) throw DimensionError("pack_dataset: bad mask size");
      masks.insert(masks.end(), item.mask.begin(), item.mask.end());
    }
  }
  dst1::Container c;
  c.add(dst1::Entry::floats("images", {n, 3, h, w}, std::move(images)));
  if (data.labeled()) {
    c.add(dst1::Entry::ints("masks", {n, h, w}, std::move(masks)));
    std::vector<std::int64_t> kinds;
    for (auto k : data.class_kinds) kinds.push_back(static_cast<std::int64_t>(k));
    const auto count = static_cast<std::uint32_t>(kinds.size());
    c.add(dst1::Entry::ints("class_kinds", {count}, std::move(kinds)));
  }
  return c;
}

Dataset unpack_dataset(const dst1::Container& container) {
  const auto& im = container.get("images");
  if (im.dtype != dst1::DType::F32 || im.dims.size() != 4 || im.dims[1] != 3) {
    throw ParseError("dataset: \"images\" must be f32 [N,3,H,W]");
  }
  const std::size_t n = im.dims[0], h = im.dims[2], w = im.dims[3];
  Dataset data;
  const bool labeled = container.contains("masks");
  if (labeled) {
    const auto& kinds = container.get("class_kinds");
    if (kinds.dtype != dst1::DType::I64 || kinds.dims.size() != 1) {
      throw ParseError("dataset: \"class_kinds\" must be i64 [C]");
    }
    for (auto k : kinds.i64) {
      if (k != 0 && k != 1) throw ParseError("dataset: class kind must be 0 (stuff) or 1 (thing)");
      data.class_kinds.push_back(static_cast<ClassKind>(k));
    }
    const auto& m = container.get("masks");
    if (m.dtype != dst1::DType::I64 || m.dims != std::vector<std::uint32_t>{im.dims[0], im.dims[2], im.dims[3]}) {
      throw ParseError("dataset: \"masks\" must be i64 [N,H,W] matching \"images\"");
    }
    for (auto v : m.i64) {
      if (v < 0 || v >= static_cast<std::int64_t>(data.class_kinds.size())) {
        throw ParseError("dataset: mask label " + std::to_string(v) + " out of range");
      }
    }
  }
  const std::size_t plane = h * w;
  data.items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto first = im.f32.begin() + static_cast<std::ptrdiff_t>(i * 3 * plane);
    LabeledImage item{TensorF(Shape{3, h, w}, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(3 * plane))), {}};
    if (labeled) {
      const auto& m = container.get("masks").i64;
      auto mf = m.begin() + static_cast<std::ptrdiff_t>(i * plane);
      item.mask.assign(mf, mf + static_cast<std::ptrdiff_t>(plane));
    }
    data.items.push_back(std::move(item));
  }
  return data;
}

void save_dataset(const Dataset& data, const fs::path& path) { pack_dataset(data).save(path); }

Dataset load_dataset(const fs::path& path) {
  if (fs::is_regular_file(path)) return unpack_dataset(dst1::Container::load(path));
  if (!fs::is_directory(path)) throw InputError("dataset not found: " + path.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
  }
  if (files.empty()) throw InputError("no .ppm images in " + path.string());
  std::sort(files.begin(), files.end());
  Dataset data;
  for (const auto& f : files) {
    TensorF img = load_ppm(f);
    if (!data.items.empty() && img.shape() != data.items.front().image.shape()) {
      throw InputError("images in " + path.string() + " differ in size (" + f.filename().string() + ")");
    }
    data.items.push_back({std::move(img), {}});
  }
  return data;
}

std::vector<std::int64_t> class_pixel_counts(const Dataset& data) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(data.num_classes()), 0);
  for (const auto& item : data.items)
    for (auto v : item.mask) ++counts[static_cast<std::size_t>(v)];
  return counts;
}

}  // namespace dsiam
