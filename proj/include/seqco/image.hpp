#pragma once

// 3-channel float images in CHW layout. Raw images live in [0,1]; the model
// consumes normalized images ((x - 0.5) / 0.5). PPM P6 is the on-disk format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqco/masking.hpp"

namespace seqco {

struct Image {
  int h = 0, w = 0;
  std::vector<float> v;  // 3 * h * w, CHW

  static Image filled(int h, int w, float r, float g, float b) {
    Image im;
    im.h = h;
    im.w = w;
    im.v.resize(static_cast<std::size_t>(3) * h * w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        im.at(0, y, x) = r;
        im.at(1, y, x) = g;
        im.at(2, y, x) = b;
      }
    return im;
  }

  float& at(int c, int y, int x) { return v[(static_cast<std::size_t>(c) * h + y) * w + x]; }
  float at(int c, int y, int x) const { return v[(static_cast<std::size_t>(c) * h + y) * w + x]; }
  bool finite() const {
    for (float f : v)
      if (!std::isfinite(f)) return false;
    return true;
  }
};

inline void write_ppm(const Image& im, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P6\n" << im.w << " " << im.h << "\n255\n";
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x)
      for (int c = 0; c < 3; ++c) {
        int b = static_cast<int>(std::lround(std::clamp(im.at(c, y, x), 0.0f, 1.0f) * 255.0f));
        f.put(static_cast<char>(b));
      }
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error(path + ": not a P6 PPM");
  auto skip_ws_comments = [&f]() {
    for (;;) {
      int c = f.peek();
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
  };
  int w, h, maxv;
  skip_ws_comments();
  f >> w;
  skip_ws_comments();
  f >> h;
  skip_ws_comments();
  f >> maxv;
  if (maxv != 255) throw std::runtime_error(path + ": only 8-bit PPM supported");
  f.get();  // single whitespace after header
  Image im;
  im.h = h;
  im.w = w;
  im.v.resize(static_cast<std::size_t>(3) * h * w);
  std::vector<char> buf(static_cast<std::size_t>(3) * h * w);
  f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw std::runtime_error(path + ": truncated pixel data");
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        im.at(c, y, x) = static_cast<float>(static_cast<unsigned char>(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c])) / 255.0f;
  return im;
}

// mask visual aid: 0 = masked, 255 = visible
inline void write_mask_pgm(const MaskGrid& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << m.image_w << " " << m.image_h << "\n255\n";
  for (int y = 0; y < m.image_h; ++y)
    for (int x = 0; x < m.image_w; ++x) f.put(m.masked_pixel(y, x) ? '\0' : static_cast<char>(255));
}

inline Image hflip(const Image& im) {
  Image out = im;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) out.at(c, y, x) = im.at(c, y, im.w - 1 - x);
  return out;
}

inline Image resize_bilinear(const Image& im, int oh, int ow) {
  Image out;
  out.h = oh;
  out.w = ow;
  out.v.resize(static_cast<std::size_t>(3) * oh * ow);
  const float sy = static_cast<float>(im.h) / oh;
  const float sx = static_cast<float>(im.w) / ow;
  for (int y = 0; y < oh; ++y) {
    float fy = (y + 0.5f) * sy - 0.5f;
    int y0 = static_cast<int>(std::floor(fy));
    float wy = fy - y0;
    int y0c = std::clamp(y0, 0, im.h - 1), y1c = std::clamp(y0 + 1, 0, im.h - 1);
    for (int x = 0; x < ow; ++x) {
      float fx = (x + 0.5f) * sx - 0.5f;
      int x0 = static_cast<int>(std::floor(fx));
      float wx = fx - x0;
      int x0c = std::clamp(x0, 0, im.w - 1), x1c = std::clamp(x0 + 1, 0, im.w - 1);
      for (int c = 0; c < 3; ++c) {
        float top = im.at(c, y0c, x0c) * (1 - wx) + im.at(c, y0c, x1c) * wx;
        float bot = im.at(c, y1c, x0c) * (1 - wx) + im.at(c, y1c, x1c) * wx;
        out.at(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

inline Image crop(const Image& im, int y0, int x0, int ch, int cw) {
  if (y0 < 0 || x0 < 0 || y0 + ch > im.h || x0 + cw > im.w)
    throw std::invalid_argument("crop: rectangle out of bounds");
  Image out;
  out.h = ch;
  out.w = cw;
  out.v.resize(static_cast<std::size_t>(3) * ch * cw);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) out.at(c, y, x) = im.at(c, y0 + y, x0 + x);
  return out;
}

inline Image grayscale(const Image& im) {
  Image out = im;
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      float g = 0.299f * im.at(0, y, x) + 0.587f * im.at(1, y, x) + 0.114f * im.at(2, y, x);
      out.at(0, y, x) = out.at(1, y, x) = out.at(2, y, x) = g;
    }
  return out;
}

inline Image gaussian_blur(const Image& im, float sigma) {
  int radius = std::max(1, static_cast<int>(std::ceil(2.0f * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  float s = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5f * i * i / (sigma * sigma));
    s += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= s;
  Image tmp = im, out = im;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] * im.at(c, y, std::clamp(x + i, 0, im.w - 1));
        tmp.at(c, y, x) = acc;
      }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(c, std::clamp(y + i, 0, im.h - 1), x);
        out.at(c, y, x) = acc;
      }
  return out;
}

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  float d = mx - mn;
  s = mx > 0 ? d / mx : 0;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0f);
  else if (mx == g)
    h = (b - r) / d + 2.0f;
  else
    h = (r - g) / d + 4.0f;
  h /= 6.0f;
  if (h < 0) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  float hh = std::fmod(std::max(h, 0.0f), 1.0f) * 6.0f;
  int i = static_cast<int>(hh) % 6;
  float f = hh - std::floor(hh);
  float p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

// in-place photometric primitives on [0,1] images
inline void adjust_brightness(Image& im, float f) {
  for (auto& x : im.v) x = std::clamp(x * f, 0.0f, 1.0f);
}

inline void adjust_contrast(Image& im, float f) {
  double m = 0;
  for (float x : im.v) m += x;
  float mean = static_cast<float>(m / im.v.size());
  for (auto& x : im.v) x = std::clamp(mean + (x - mean) * f, 0.0f, 1.0f);
}

inline void adjust_saturation(Image& im, float f) {
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      float g = 0.299f * im.at(0, y, x) + 0.587f * im.at(1, y, x) + 0.114f * im.at(2, y, x);
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = std::clamp(g + (im.at(c, y, x) - g) * f, 0.0f, 1.0f);
    }
}

inline void adjust_hue(Image& im, float shift) {
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      float h, s, v;
      rgb_to_hsv(im.at(0, y, x), im.at(1, y, x), im.at(2, y, x), h, s, v);
      h = std::fmod(h + shift + 1.0f, 1.0f);
      hsv_to_rgb(h, s, v, im.at(0, y, x), im.at(1, y, x), im.at(2, y, x));
    }
}

inline Image normalize(const Image& im) {
  Image out = im;
  for (auto& x : out.v) x = (x - 0.5f) / 0.5f;
  return out;
}

// Masks are applied in normalized space; fill defaults to 0.
inline Image apply_mask(const Image& im, const MaskGrid& m, float fill = 0.0f) {
  if (m.image_h != im.h || m.image_w != im.w)
    throw std::invalid_argument("apply_mask: mask dims " + std::to_string(m.image_h) + "x" +
                                std::to_string(m.image_w) + " do not match image " + std::to_string(im.h) +
                                "x" + std::to_string(im.w));
  Image out = im;
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x)
      if (m.masked_pixel(y, x))
        for (int c = 0; c < 3; ++c) out.at(c, y, x) = fill;
  return out;
}

}  // namespace seqco
