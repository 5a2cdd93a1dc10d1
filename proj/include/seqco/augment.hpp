#pragma once

// Two-view construction: a shared geometric base view (flip, resize, crop),
// then per-branch content changes only. View #1 (momentum) is the base plus
// its mask; view #2 (online) adds photometric augmentation plus the
// complementary mask. Boxes map through the shared geometry record.

#include <cmath>
#include <optional>
#include <vector>

#include "seqco/geometry.hpp"
#include "seqco/image.hpp"
#include "seqco/masking.hpp"
#include "seqco/rng.hpp"

namespace seqco {

struct ViewGeometry {
  bool flip = false;
  int src_h = 0, src_w = 0;
  int resized_h = 0, resized_w = 0;
  int crop_y = 0, crop_x = 0, crop_h = 0, crop_w = 0;  // in resized coords
  int out_h = 0, out_w = 0;

  static ViewGeometry identity(int h, int w) {
    ViewGeometry g;
    g.src_h = h;
    g.src_w = w;
    g.resized_h = h;
    g.resized_w = w;
    g.crop_h = h;
    g.crop_w = w;
    g.out_h = h;
    g.out_w = w;
    return g;
  }

  bool is_identity() const {
    return !flip && resized_h == src_h && resized_w == src_w && crop_y == 0 && crop_x == 0 &&
           crop_h == src_h && crop_w == src_w && out_h == src_h && out_w == src_w;
  }
};

enum class MaskMode { kNone, kOnlineOnly, kIndependent, kComplementary };

struct MaskConfig {
  MaskMode mode = MaskMode::kComplementary;
  ProportionSpec online_proportion = ProportionSpec::fixed(0.7);
  ProportionSpec momentum_proportion = ProportionSpec::fixed(0.3);  // ignored for complementary
  int patch = 16;
};

struct PhotoConfig {
  bool enabled = true;
  double jitter_prob = 0.8;
  double jitter_brightness = 0.4, jitter_contrast = 0.4, jitter_saturation = 0.4, jitter_hue = 0.1;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
};

struct AugmentConfig {
  int out_size = 64;
  bool geometric = true;
  int resize_lo = 48, resize_hi = 96;  // shorter-side range for the random resize
  PhotoConfig photo;
  MaskConfig mask;
  double min_visibility = 0.1;  // boxes below this post-crop visible fraction are dropped
};

struct ViewPair {
  Image view1;  // momentum: weak
  Image view2;  // online: strong
  ViewGeometry geometry;
  std::optional<MaskGrid> mask1, mask2;
};

// geometric base view; deterministic per seed
inline std::pair<Image, ViewGeometry> build_base_view(const Image& src, std::uint64_t seed,
                                                      const AugmentConfig& cfg) {
  if (!cfg.geometric) {
    ViewGeometry g = ViewGeometry::identity(src.h, src.w);
    if (src.h == cfg.out_size && src.w == cfg.out_size) return {src, g};
    g.out_h = g.out_w = cfg.out_size;
    return {resize_bilinear(src, cfg.out_size, cfg.out_size), g};
  }
  Rng rng(mix64(seed, 0x67656f6dULL));
  ViewGeometry g;
  g.src_h = src.h;
  g.src_w = src.w;
  g.flip = rng.bernoulli(0.5);
  int shorter = cfg.resize_lo + static_cast<int>(rng.uniform_int(
                    static_cast<std::uint64_t>(cfg.resize_hi - cfg.resize_lo + 1)));
  double scale = static_cast<double>(shorter) / std::min(src.h, src.w);
  g.resized_h = std::max(1, static_cast<int>(std::lround(src.h * scale)));
  g.resized_w = std::max(1, static_cast<int>(std::lround(src.w * scale)));
  int side_max = std::min(g.resized_h, g.resized_w);
  int c = 0;
  for (int attempt = 0; attempt < 10 && c < 1; ++attempt)
    c = static_cast<int>(std::lround(side_max * rng.uniform(0.6, 1.0)));
  if (c < 1) {  // degenerate: fall back to the full frame
    c = side_max;
  }
  g.crop_h = g.crop_w = c;
  g.crop_y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g.resized_h - c + 1)));
  g.crop_x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g.resized_w - c + 1)));
  g.out_h = g.out_w = cfg.out_size;

  Image im = g.flip ? hflip(src) : src;
  im = resize_bilinear(im, g.resized_h, g.resized_w);
  im = crop(im, g.crop_y, g.crop_x, g.crop_h, g.crop_w);
  im = resize_bilinear(im, g.out_h, g.out_w);
  return {im, g};
}

inline Image apply_photometric(const Image& base, std::uint64_t seed, const PhotoConfig& cfg) {
  if (!cfg.enabled) return base;
  Rng rng(mix64(seed, 0x70686f74ULL));
  Image im = base;
  if (rng.bernoulli(cfg.jitter_prob)) {
    // fixed order, random strengths
    adjust_brightness(im, static_cast<float>(1.0 + rng.uniform(-cfg.jitter_brightness, cfg.jitter_brightness)));
    adjust_contrast(im, static_cast<float>(1.0 + rng.uniform(-cfg.jitter_contrast, cfg.jitter_contrast)));
    adjust_saturation(im, static_cast<float>(1.0 + rng.uniform(-cfg.jitter_saturation, cfg.jitter_saturation)));
    adjust_hue(im, static_cast<float>(rng.uniform(-cfg.jitter_hue, cfg.jitter_hue)));
  }
  if (rng.bernoulli(cfg.grayscale_prob)) im = grayscale(im);
  if (rng.bernoulli(cfg.blur_prob))
    im = gaussian_blur(im, static_cast<float>(rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi)));
  return im;
}

// weak view = base + momentum mask; strong view = base + photometrics +
// online mask. Masks land after normalization, as the final view step.
inline ViewPair make_views(const Image& src, std::uint64_t seed, const AugmentConfig& cfg) {
  auto [base, geom] = build_base_view(src, seed, cfg);
  Image strong_raw = apply_photometric(base, mix64(seed, 2), cfg.photo);
  Image weak = normalize(base);
  Image strong = normalize(strong_raw);

  ViewPair vp;
  vp.geometry = geom;
  const std::uint64_t mask_seed = mix64(seed, 3);
  switch (cfg.mask.mode) {
    case MaskMode::kNone:
      break;
    case MaskMode::kOnlineOnly: {
      double p = sample_proportion(cfg.mask.online_proportion, mix64(mask_seed, 1));
      vp.mask2 = random_mask(base.h, base.w, cfg.mask.patch, p, mix64(mask_seed, 2));
      break;
    }
    case MaskMode::kIndependent: {
      double po = sample_proportion(cfg.mask.online_proportion, mix64(mask_seed, 1));
      double pm = sample_proportion(cfg.mask.momentum_proportion, mix64(mask_seed, 3));
      vp.mask2 = random_mask(base.h, base.w, cfg.mask.patch, po, mix64(mask_seed, 2));
      vp.mask1 = random_mask(base.h, base.w, cfg.mask.patch, pm, mix64(mask_seed, 4));
      break;
    }
    case MaskMode::kComplementary: {
      double po = sample_proportion(cfg.mask.online_proportion, mix64(mask_seed, 1));
      vp.mask2 = random_mask(base.h, base.w, cfg.mask.patch, po, mix64(mask_seed, 2));
      vp.mask1 = complement(*vp.mask2);
      break;
    }
  }
  vp.view1 = vp.mask1 ? apply_mask(weak, *vp.mask1) : weak;
  vp.view2 = vp.mask2 ? apply_mask(strong, *vp.mask2) : strong;
  return vp;
}

// Boxes in source normalized coordinates -> view normalized coordinates.
// Boxes whose visible fraction after the crop falls below min_visibility
// are dropped.
inline std::vector<Box> map_boxes(const std::vector<Box>& boxes, const ViewGeometry& g,
                                  double min_visibility = 0.1) {
  std::vector<Box> out;
  for (Box b : boxes) {
    if (g.flip) b.cx = 1.0 - b.cx;
    // normalized coords survive the resize; express corners in resized pixels
    double x1 = (b.cx - b.w / 2) * g.resized_w;
    double x2 = (b.cx + b.w / 2) * g.resized_w;
    double y1 = (b.cy - b.h / 2) * g.resized_h;
    double y2 = (b.cy + b.h / 2) * g.resized_h;
    double orig_area = std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1);
    double cx1 = std::clamp(x1 - g.crop_x, 0.0, static_cast<double>(g.crop_w));
    double cx2 = std::clamp(x2 - g.crop_x, 0.0, static_cast<double>(g.crop_w));
    double cy1 = std::clamp(y1 - g.crop_y, 0.0, static_cast<double>(g.crop_h));
    double cy2 = std::clamp(y2 - g.crop_y, 0.0, static_cast<double>(g.crop_h));
    double vis_area = std::max(0.0, cx2 - cx1) * std::max(0.0, cy2 - cy1);
    if (orig_area <= 0.0 || vis_area / orig_area < min_visibility) continue;
    Box m;
    m.cx = (cx1 + cx2) / 2.0 / g.crop_w;
    m.cy = (cy1 + cy2) / 2.0 / g.crop_h;
    m.w = (cx2 - cx1) / g.crop_w;
    m.h = (cy2 - cy1) / g.crop_h;
    out.push_back(m);
  }
  return out;
}

inline Image denormalize(const Image& im) {
  Image out = im;
  for (auto& x : out.v) x = x * 0.5f + 0.5f;
  return out;
}

}  // namespace seqco
