#include "densesiam/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "densesiam/errors.hpp"

namespace dsiam {

AugmentConfig AugmentConfig::pretrain(int out_size) {
  AugmentConfig c;
  c.out_size = out_size;
  return c;
}

AugmentConfig AugmentConfig::segmentation(int out_size) {
  AugmentConfig c;
  c.out_size = out_size;
  c.scale_min = 0.5;
  c.brightness = 0.3;
  c.contrast = 0.3;
  c.saturation = 0.3;
  c.hue = 0.1;
  return c;
}

AugmentConfig AugmentConfig::disabled(int out_size) {
  AugmentConfig c;
  c.out_size = out_size;
  c.scale_min = c.scale_max = 1.0;
  c.ratio_min = c.ratio_max = 1.0;
  c.flip_p = 0.0;
  c.jitter_p = 0.0;
  c.gray_p = 0.0;
  c.blur_p = 0.0;
  return c;
}

Box sample_crop(int image_w, int image_h, Rng& rng, const AugmentConfig& cfg) {
  const double area = static_cast<double>(image_w) * image_h;
  const double log_rmin = std::log(cfg.ratio_min), log_rmax = std::log(cfg.ratio_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * (cfg.scale_min == cfg.scale_max ? cfg.scale_min
                                                                  : uniform(rng, cfg.scale_min, cfg.scale_max));
    const double ratio = std::exp(log_rmin == log_rmax ? log_rmin : uniform(rng, log_rmin, log_rmax));
    const long w = std::lround(std::sqrt(target * ratio));
    const long h = std::lround(std::sqrt(target / ratio));
    if (w < 1 || h < 1 || w > image_w || h > image_h) continue;
    const double frac = static_cast<double>(w) * h / area;
    if (frac < cfg.scale_min || frac > cfg.scale_max) continue;
    const auto x0 = uniform_int(rng, 0, image_w - w);
    const auto y0 = uniform_int(rng, 0, image_h - h);
    return Box{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(w), static_cast<double>(h)};
  }
  if (cfg.scale_max >= 1.0) return Box{0, 0, static_cast<double>(image_w), static_cast<double>(image_h)};
  // Centered crop of the largest allowed area with the image's aspect.
  const double s = std::sqrt(cfg.scale_max);
  const double w = std::max(1.0, std::floor(image_w * s));
  const double h = std::max(1.0, std::floor(image_h * s));
  return Box{std::floor((image_w - w) / 2), std::floor((image_h - h) / 2), w, h};
}

PhotometricParams sample_photometric(Rng& rng, const AugmentConfig& cfg) {
  PhotometricParams p;
  p.jitter = bernoulli(rng, cfg.jitter_p);
  if (p.jitter) {
    p.brightness = uniform(rng, std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness);
    p.contrast = uniform(rng, std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast);
    p.saturation = uniform(rng, std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation);
    p.hue = cfg.hue > 0 ? uniform(rng, -cfg.hue, cfg.hue) : 0.0;
    std::iota(p.order.begin(), p.order.end(), 0);
    std::shuffle(p.order.begin(), p.order.end(), rng);
  }
  p.grayscale = bernoulli(rng, cfg.gray_p);
  p.blur = bernoulli(rng, cfg.blur_p);
  if (p.blur) p.blur_sigma = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
  return p;
}

namespace {

ViewSpec make_spec(const Box& crop, bool flip, int image_w, int image_h, int out_size) {
  ViewSpec v;
  v.crop = crop;
  v.hflip = flip;
  v.out_size = out_size;
  v.image_w = image_w;
  v.image_h = image_h;
  return v;
}

}  // namespace

std::pair<ViewParams, ViewParams> sample_pair_params(int image_w, int image_h, Rng& rng,
                                                     const AugmentConfig& cfg) {
  if (image_w < 1 || image_h < 1) throw UsageError("augmentation: empty image");
  Box c1{}, c2{};
  bool found = false;
  for (int attempt = 0; attempt < std::max(1, cfg.max_overlap_attempts); ++attempt) {
    c1 = sample_crop(image_w, image_h, rng, cfg);
    c2 = sample_crop(image_w, image_h, rng, cfg);
    if (intersect(c1, c2)) {
      found = true;
      break;
    }
  }
  if (!found) c1 = c2 = Box{0, 0, static_cast<double>(image_w), static_cast<double>(image_h)};
  ViewParams v1, v2;
  v1.spec = make_spec(c1, bernoulli(rng, cfg.flip_p), image_w, image_h, cfg.out_size);
  v2.spec = make_spec(c2, bernoulli(rng, cfg.flip_p), image_w, image_h, cfg.out_size);
  v1.photo = sample_photometric(rng, cfg);
  v2.photo = sample_photometric(rng, cfg);
  return {v1, v2};
}

TensorF render_geometry(const TensorF& image, const ViewSpec& spec) {
  if (image.rank() != 3) throw DimensionError("render_geometry: expected [C,H,W], got " + shape_str(image.shape()));
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (static_cast<int>(w) != spec.image_w || static_cast<int>(h) != spec.image_h) {
    throw UsageError("render_geometry: view spec refers to a different image size");
  }
  const std::size_t s = static_cast<std::size_t>(spec.out_size);
  const Box& c = spec.crop;
  // Per output column / row: source lattice position (clamped) and weight.
  struct Tap {
    std::size_t i0, i1;
    float a;
  };
  auto taps = [](double start, double extent, std::size_t n_out, std::size_t n_in, bool flip) {
    std::vector<Tap> t(n_out);
    for (std::size_t k = 0; k < n_out; ++k) {
      double u = (static_cast<double>(k) + 0.5) / static_cast<double>(n_out);
      if (flip) u = 1.0 - u;
      double pos = start + u * extent - 0.5;
      pos = std::clamp(pos, 0.0, static_cast<double>(n_in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(pos));
      t[k] = {i0, std::min(i0 + 1, n_in - 1), static_cast<float>(pos - static_cast<double>(i0))};
    }
    return t;
  };
  const auto tx = taps(c.x0, c.w, s, w, spec.hflip);
  const auto ty = taps(c.y0, c.h, s, h, false);
  auto src = image.data();
  std::vector<float> out(ch * s * s);
  for (std::size_t k = 0; k < ch; ++k) {
    const float* plane = src.data() + k * h * w;
    float* dst = out.data() + k * s * s;
    for (std::size_t i = 0; i < s; ++i) {
      const Tap& ry = ty[i];
      const float* r0 = plane + ry.i0 * w;
      const float* r1 = plane + ry.i1 * w;
      for (std::size_t j = 0; j < s; ++j) {
        const Tap& rx = tx[j];
        const float top = (1.0f - rx.a) * r0[rx.i0] + rx.a * r0[rx.i1];
        const float bot = (1.0f - rx.a) * r1[rx.i0] + rx.a * r1[rx.i1];
        dst[i * s + j] = (1.0f - ry.a) * top + ry.a * bot;
      }
    }
  }
  return TensorF(Shape{ch, s, s}, std::move(out));
}

namespace {

inline float gray_of(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

inline float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0.0f ? d / mx : 0.0f;
  if (d <= 0.0f) {
    h = 0.0f;
    return;
  }
  if (mx == r) {
    h = (g - b) / d;
  } else if (mx == g) {
    h = 2.0f + (b - r) / d;
  } else {
    h = 4.0f + (r - g) / d;
  }
  h /= 6.0f;
  if (h < 0.0f) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = (h - std::floor(h)) * 6.0f;
  const int sector = static_cast<int>(hh) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1.0f - s), q = v * (1.0f - s * f), t = v * (1.0f - s * (1.0f - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

void gaussian_blur(std::vector<float>& img, std::size_t ch, std::size_t h, std::size_t w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[i + radius] = static_cast<float>(v);
    total += v;
  }
  for (auto& k : kernel) k = static_cast<float>(k / total);
  std::vector<float> tmp(h * w);
  auto at = [](long i, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(n) - 1)); };
  for (std::size_t c = 0; c < ch; ++c) {
    float* plane = img.data() + c * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * plane[y * w + at(static_cast<long>(x) + k, w)];
        tmp[y * w + x] = acc;
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp[at(static_cast<long>(y) + k, h) * w + x];
        plane[y * w + x] = acc;
      }
  }
}

}  // namespace

void apply_photometric(TensorF& view, const PhotometricParams& photo) {
  if (view.rank() != 3 || view.dim(0) != 3) {
    throw DimensionError("apply_photometric: expected [3,H,W], got " + shape_str(view.shape()));
  }
  const std::size_t h = view.dim(1), w = view.dim(2), n = h * w;
  auto px = view.data_mut();
  float* r = px.data();
  float* g = r + n;
  float* b = g + n;
  if (photo.jitter) {
    for (int op : photo.order) {
      switch (op) {
        case 0: {
          const float f = static_cast<float>(photo.brightness);
          for (std::size_t i = 0; i < 3 * n; ++i) px[i] = clamp01(px[i] * f);
          break;
        }
        case 1: {
          const float f = static_cast<float>(photo.contrast);
          double m = 0.0;
          for (std::size_t i = 0; i < n; ++i) m += gray_of(r[i], g[i], b[i]);
          const float mean = static_cast<float>(m / static_cast<double>(n));
          for (std::size_t i = 0; i < 3 * n; ++i) px[i] = clamp01(f * px[i] + (1.0f - f) * mean);
          break;
        }
        case 2: {
          const float f = static_cast<float>(photo.saturation);
          for (std::size_t i = 0; i < n; ++i) {
            const float gr = gray_of(r[i], g[i], b[i]);
            r[i] = clamp01(f * r[i] + (1.0f - f) * gr);
            g[i] = clamp01(f * g[i] + (1.0f - f) * gr);
            b[i] = clamp01(f * b[i] + (1.0f - f) * gr);
          }
          break;
        }
        default: {
          if (photo.hue == 0.0) break;
          const float shift = static_cast<float>(photo.hue);
          for (std::size_t i = 0; i < n; ++i) {
            float hh, ss, vv;
            rgb_to_hsv(r[i], g[i], b[i], hh, ss, vv);
            hsv_to_rgb(hh + shift, ss, vv, r[i], g[i], b[i]);
            r[i] = clamp01(r[i]);
            g[i] = clamp01(g[i]);
            b[i] = clamp01(b[i]);
          }
          break;
        }
      }
    }
  }
  if (photo.grayscale) {
    for (std::size_t i = 0; i < n; ++i) r[i] = g[i] = b[i] = clamp01(gray_of(r[i], g[i], b[i]));
  }
  if (photo.blur) {
    std::vector<float> buf(px.begin(), px.end());
    gaussian_blur(buf, 3, h, w, photo.blur_sigma);
    for (std::size_t i = 0; i < 3 * n; ++i) px[i] = clamp01(buf[i]);
  }
}

TensorF render_view(const TensorF& image, const ViewParams& params) {
  TensorF v = render_geometry(image, params.spec);
  apply_photometric(v, params.photo);
  return v;
}

namespace {

AugmentedPair render_pair(const TensorF& image, const std::pair<ViewParams, ViewParams>& p) {
  AugmentedPair out;
  out.x1 = render_view(image, p.first);
  out.x2 = render_view(image, p.second);
  out.spec1 = p.first.spec;
  out.spec2 = p.second.spec;
  out.photo1 = p.first.photo;
  out.photo2 = p.second.photo;
  return out;
}

void require_image(const TensorF& image, int min_side) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("augmentation: expected a [3,H,W] image, got " + shape_str(image.shape()));
  }
  if (image.dim(1) < static_cast<std::size_t>(min_side) || image.dim(2) < static_cast<std::size_t>(min_side)) {
    throw UsageError("augmentation: image must be at least " + std::to_string(min_side) + "x" +
                     std::to_string(min_side));
  }
}

}  // namespace

AugmentedPair sample_pretrain_pair(const TensorF& image, Rng& rng, const AugmentConfig& cfg) {
  require_image(image, 16);
  return render_pair(image, sample_pair_params(static_cast<int>(image.dim(2)), static_cast<int>(image.dim(1)), rng, cfg));
}

AugmentedPair sample_seg_pair(const TensorF& image, Rng& rng, const AugmentConfig& cfg) {
  require_image(image, 1);
  return render_pair(image, sample_pair_params(static_cast<int>(image.dim(2)), static_cast<int>(image.dim(1)), rng, cfg));
}

void ReplayAugmenter::begin_epoch(std::int64_t epoch, std::span<const std::pair<int, int>> image_sizes) {
  epoch_ = epoch;
  table_.clear();
  table_.reserve(image_sizes.size());
  for (std::size_t i = 0; i < image_sizes.size(); ++i) {
    Rng rng = make_rng(seed_, {key(Stream::Augment), static_cast<std::uint64_t>(epoch), i});
    table_.push_back(sample_pair_params(image_sizes[i].first, image_sizes[i].second, rng, cfg_));
  }
}

const std::pair<ViewParams, ViewParams>& ReplayAugmenter::params(std::size_t index) const {
  if (index >= table_.size()) throw UsageError("ReplayAugmenter: index out of range (call begin_epoch first)");
  return table_[index];
}

AugmentedPair ReplayAugmenter::pair(std::size_t index, const TensorF& image) const {
  return render_pair(image, params(index));
}

TensorF stack_images(std::span<const TensorF> images) {
  if (images.empty()) throw UsageError("stack_images: no images");
  const Shape inner = images.front().shape();
  Shape shape{images.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<float> values;
  values.reserve(numel_of(shape));
  for (const auto& im : images) {
    if (im.shape() != inner) throw DimensionError("stack_images: mixed shapes");
    values.insert(values.end(), im.data().begin(), im.data().end());
  }
  return TensorF(std::move(shape), std::move(values));
}

}  // namespace dsiam
