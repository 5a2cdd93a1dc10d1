#pragma once

// Patch-occupancy masks over the image grid. Edge patches count as full
// cells; the masked-cell count is exactly round(proportion * cells).

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "seqco/rng.hpp"

namespace seqco {

struct MaskGrid {
  int patch = 16;
  int grid_h = 0, grid_w = 0;
  int image_h = 0, image_w = 0;
  std::vector<std::uint8_t> cells;  // true = masked

  bool masked(int gy, int gx) const { return cells[static_cast<std::size_t>(gy) * grid_w + gx] != 0; }
  bool masked_pixel(int y, int x) const { return masked(y / patch, x / patch); }
  int cell_count() const { return grid_h * grid_w; }
  int masked_count() const {
    int n = 0;
    for (auto c : cells) n += c ? 1 : 0;
    return n;
  }

  bool operator==(const MaskGrid& o) const = default;
};

inline MaskGrid random_mask(int h, int w, int patch, double proportion, std::uint64_t seed) {
  if (patch < 1) throw std::invalid_argument("random_mask: patch must be >= 1");
  if (patch > std::min(h, w))
    throw std::invalid_argument("random_mask: patch " + std::to_string(patch) + " exceeds image side " +
                                std::to_string(std::min(h, w)));
  if (proportion < 0.0 || proportion > 1.0) throw std::invalid_argument("random_mask: proportion out of [0,1]");
  MaskGrid m;
  m.patch = patch;
  m.image_h = h;
  m.image_w = w;
  m.grid_h = (h + patch - 1) / patch;
  m.grid_w = (w + patch - 1) / patch;
  const int cells = m.cell_count();
  const int k = static_cast<int>(std::lround(proportion * cells));
  m.cells.assign(static_cast<std::size_t>(cells), 0);
  // partial Fisher-Yates: first k entries are a uniform sample without replacement
  std::vector<int> idx(static_cast<std::size_t>(cells));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix64(seed, 0x6d61736bULL));
  for (int i = 0; i < k; ++i) {
    int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cells - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    m.cells[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  }
  return m;
}

inline MaskGrid complement(const MaskGrid& m) {
  MaskGrid out = m;
  for (auto& c : out.cells) c = c ? 0 : 1;
  return out;
}

// proportion spec: fixed value or uniform range
struct ProportionSpec {
  double lo = 0.0, hi = 0.0;  // fixed when lo == hi

  static ProportionSpec fixed(double p) { return {p, p}; }
  static ProportionSpec range(double lo, double hi) { return {lo, hi}; }
  bool is_fixed() const { return lo == hi; }
};

inline double sample_proportion(const ProportionSpec& spec, std::uint64_t seed) {
  if (spec.lo < 0.0 || spec.hi > 1.0 || spec.lo > spec.hi)
    throw std::invalid_argument("sample_proportion: invalid range [" + std::to_string(spec.lo) + "," +
                                std::to_string(spec.hi) + "]");
  if (spec.is_fixed()) return spec.lo;
  Rng rng(mix64(seed, 0x70726f70ULL));
  return rng.uniform(spec.lo, spec.hi);
}

}  // namespace seqco
