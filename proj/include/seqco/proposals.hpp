#pragma once

// Objectness proposals: Felzenszwalb graph segmentation followed by
// hierarchical region grouping (color + texture + size + fill similarity,
// unit weights, single HSV strategy), plus ground-truth and random-box
// proposal sources. Proposals are cached per image in a JSON sidecar keyed
// by the image bytes' SHA-256.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqco/geometry.hpp"
#include "seqco/image.hpp"
#include "seqco/rng.hpp"
#include "seqco/util.hpp"

namespace seqco {

struct SegmentationParams {
  double sigma = 0.8;
  double k = 200.0;
  int min_size = 50;
};

namespace detail {

class DisjointSet {
 public:
  explicit DisjointSet(int n) : parent_(static_cast<std::size_t>(n)), size_(static_cast<std::size_t>(n), 1) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }
  int find(int a) {
    while (parent_[static_cast<std::size_t>(a)] != a) {
      parent_[static_cast<std::size_t>(a)] = parent_[static_cast<std::size_t>(parent_[static_cast<std::size_t>(a)])];
      a = parent_[static_cast<std::size_t>(a)];
    }
    return a;
  }
  int join(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return a;
    if (size_[static_cast<std::size_t>(a)] < size_[static_cast<std::size_t>(b)]) std::swap(a, b);
    parent_[static_cast<std::size_t>(b)] = a;
    size_[static_cast<std::size_t>(a)] += size_[static_cast<std::size_t>(b)];
    return a;
  }
  int size(int a) { return size_[static_cast<std::size_t>(find(a))]; }

 private:
  std::vector<int> parent_;
  std::vector<int> size_;
};

struct Edge {
  float w;
  int a, b;
};

}  // namespace detail

// Graph-based segmentation; returns a dense label map (labels 0..R-1 in
// first-pixel scan order).
inline std::vector<int> felzenszwalb_segment(const Image& img, const SegmentationParams& p, int* region_count) {
  Image sm = p.sigma > 0 ? gaussian_blur(img, static_cast<float>(p.sigma)) : img;
  const int h = img.h, w = img.w, n = h * w;
  // edge weights use the classic 0..255 intensity scale, matching the
  // conventional calibration of the k threshold
  auto diff = [&sm, w](int a, int b) {
    int ay = a / w, ax = a % w, by = b / w, bx = b % w;
    float d = 0;
    for (int c = 0; c < 3; ++c) {
      float t = 255.0f * (sm.at(c, ay, ax) - sm.at(c, by, bx));
      d += t * t;
    }
    return std::sqrt(d);
  };
  std::vector<detail::Edge> edges;
  edges.reserve(static_cast<std::size_t>(4) * n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int a = y * w + x;
      if (x + 1 < w) edges.push_back({diff(a, a + 1), a, a + 1});
      if (y + 1 < h) edges.push_back({diff(a, a + w), a, a + w});
      if (x + 1 < w && y + 1 < h) edges.push_back({diff(a, a + w + 1), a, a + w + 1});
      if (x > 0 && y + 1 < h) edges.push_back({diff(a, a + w - 1), a, a + w - 1});
    }
  std::stable_sort(edges.begin(), edges.end(), [](const detail::Edge& x, const detail::Edge& y) { return x.w < y.w; });
  detail::DisjointSet ds(n);
  std::vector<float> threshold(static_cast<std::size_t>(n), static_cast<float>(p.k));
  for (const auto& e : edges) {
    int a = ds.find(e.a), b = ds.find(e.b);
    if (a == b) continue;
    if (e.w <= threshold[static_cast<std::size_t>(a)] && e.w <= threshold[static_cast<std::size_t>(b)]) {
      int r = ds.join(a, b);
      threshold[static_cast<std::size_t>(r)] = e.w + static_cast<float>(p.k) / ds.size(r);
    }
  }
  // absorb small components
  for (const auto& e : edges) {
    int a = ds.find(e.a), b = ds.find(e.b);
    if (a != b && (ds.size(a) < p.min_size || ds.size(b) < p.min_size)) ds.join(a, b);
  }
  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  std::map<int, int> remap;
  for (int i = 0; i < n; ++i) {
    int r = ds.find(i);
    auto it = remap.find(r);
    if (it == remap.end()) it = remap.emplace(r, static_cast<int>(remap.size())).first;
    labels[static_cast<std::size_t>(i)] = it->second;
  }
  if (region_count) *region_count = static_cast<int>(remap.size());
  return labels;
}

struct Region {
  // run-length encoded pixel set: (y, x_start, length)
  std::vector<std::array<int, 3>> runs;
  int size = 0;
  int min_x = 0, min_y = 0, max_x = 0, max_y = 0;  // inclusive pixel bbox
  std::vector<double> color_hist;    // 3 x 25, L1-normalized
  std::vector<double> texture_hist;  // 8 orientations x 10 magnitude bins, L1-normalized

  Box box(int img_h, int img_w) const {
    Box b;
    double x1 = static_cast<double>(min_x) / img_w;
    double x2 = static_cast<double>(max_x + 1) / img_w;
    double y1 = static_cast<double>(min_y) / img_h;
    double y2 = static_cast<double>(max_y + 1) / img_h;
    b.cx = (x1 + x2) / 2;
    b.cy = (y1 + y2) / 2;
    b.w = x2 - x1;
    b.h = y2 - y1;
    return b;
  }
};

inline std::vector<Region> extract_regions(const Image& img, const std::vector<int>& labels, int region_count,
                                           std::set<std::pair<int, int>>* adjacency) {
  const int h = img.h, w = img.w;
  constexpr int kColorBins = 25, kOri = 8, kMag = 10;
  std::vector<Region> regs(static_cast<std::size_t>(region_count));
  for (auto& r : regs) {
    r.color_hist.assign(3 * kColorBins, 0.0);
    r.texture_hist.assign(kOri * kMag, 0.0);
    r.min_x = w;
    r.min_y = h;
    r.max_x = -1;
    r.max_y = -1;
  }
  // grayscale gradients for the texture histogram
  std::vector<float> gray(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      gray[static_cast<std::size_t>(y) * w + x] =
          0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
  for (int y = 0; y < h; ++y) {
    int run_start = -1, run_label = -1;
    for (int x = 0; x <= w; ++x) {
      int lbl = x < w ? labels[static_cast<std::size_t>(y) * w + x] : -1;
      if (lbl != run_label) {
        if (run_label >= 0)
          regs[static_cast<std::size_t>(run_label)].runs.push_back({y, run_start, x - run_start});
        run_label = lbl;
        run_start = x;
      }
      if (x == w) break;
      Region& r = regs[static_cast<std::size_t>(lbl)];
      ++r.size;
      r.min_x = std::min(r.min_x, x);
      r.max_x = std::max(r.max_x, x);
      r.min_y = std::min(r.min_y, y);
      r.max_y = std::max(r.max_y, y);
      float hh, ss, vv;
      rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x), hh, ss, vv);
      const float hsv[3] = {hh, ss, vv};
      for (int c = 0; c < 3; ++c) {
        int bin = std::min(kColorBins - 1, static_cast<int>(hsv[c] * kColorBins));
        r.color_hist[static_cast<std::size_t>(c * kColorBins + bin)] += 1.0;
      }
      float gx = gray[static_cast<std::size_t>(y) * w + std::min(x + 1, w - 1)] -
                 gray[static_cast<std::size_t>(y) * w + std::max(x - 1, 0)];
      float gy = gray[static_cast<std::size_t>(std::min(y + 1, h - 1)) * w + x] -
                 gray[static_cast<std::size_t>(std::max(y - 1, 0)) * w + x];
      float mag = std::sqrt(gx * gx + gy * gy);
      float ang = std::atan2(gy, gx);  // [-pi, pi]
      int ob = std::min(kOri - 1, static_cast<int>((ang + 3.14159265f) / (2 * 3.14159265f) * kOri));
      int mb = std::min(kMag - 1, static_cast<int>(mag / 1.5f * kMag));
      r.texture_hist[static_cast<std::size_t>(ob * kMag + mb)] += 1.0;
      if (adjacency) {
        if (x + 1 < w) {
          int o = labels[static_cast<std::size_t>(y) * w + x + 1];
          if (o != lbl) adjacency->emplace(std::min(lbl, o), std::max(lbl, o));
        }
        if (y + 1 < h) {
          int o = labels[static_cast<std::size_t>(y + 1) * w + x];
          if (o != lbl) adjacency->emplace(std::min(lbl, o), std::max(lbl, o));
        }
      }
    }
  }
  for (auto& r : regs) {
    for (auto& v : r.color_hist) v /= r.size;
    for (auto& v : r.texture_hist) v /= r.size;
  }
  return regs;
}

inline double histogram_intersection(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
  return s;
}

// color + texture + size + fill, each weight 1
inline double region_similarity(const Region& a, const Region& b, int img_h, int img_w) {
  const double im_size = static_cast<double>(img_h) * img_w;
  double s_color = histogram_intersection(a.color_hist, b.color_hist);
  double s_texture = histogram_intersection(a.texture_hist, b.texture_hist);
  double s_size = 1.0 - (a.size + b.size) / im_size;
  double bb_w = std::max(a.max_x, b.max_x) - std::min(a.min_x, b.min_x) + 1;
  double bb_h = std::max(a.max_y, b.max_y) - std::min(a.min_y, b.min_y) + 1;
  double s_fill = 1.0 - (bb_w * bb_h - a.size - b.size) / im_size;
  return s_color + s_texture + s_size + s_fill;
}

struct RegionProposal {
  Box box;
  double rank = 0.0;
};

struct GroupingResult {
  std::vector<RegionProposal> proposals;  // deduplicated, discovery order
  int initial_regions = 0;
  int merges = 0;
};

// Greedy agglomeration: repeatedly merge the most similar adjacent pair
// until one region remains. Initial regions carry level 1; the i-th merge
// level 1+i; rank = level * uniform(0,1].
inline GroupingResult hierarchical_group(std::vector<Region> regions, std::set<std::pair<int, int>> adjacency,
                                         int img_h, int img_w, std::uint64_t seed) {
  if (regions.empty()) throw std::invalid_argument("hierarchical_group: no regions");
  Rng rng(mix64(seed, 0x72616e6bULL));
  GroupingResult out;
  out.initial_regions = static_cast<int>(regions.size());

  std::vector<char> alive(regions.size(), 1);
  std::map<std::pair<int, int>, double> sims;
  std::map<int, std::set<int>> nbrs;
  for (auto [a, b] : adjacency) {
    sims[{a, b}] = region_similarity(regions[static_cast<std::size_t>(a)], regions[static_cast<std::size_t>(b)],
                                     img_h, img_w);
    nbrs[a].insert(b);
    nbrs[b].insert(a);
  }

  std::map<std::array<double, 4>, std::pair<int, double>> dedup;  // box -> (discovery idx, best rank)
  auto emit = [&](const Box& b, double rank) {
    std::array<double, 4> key{b.cx, b.cy, b.w, b.h};
    auto it = dedup.find(key);
    if (it == dedup.end())
      dedup.emplace(key, std::make_pair(static_cast<int>(dedup.size()), rank));
    else
      it->second.second = std::max(it->second.second, rank);
  };
  for (const auto& r : regions) emit(r.box(img_h, img_w), 1.0 * rng.uniform_pos());

  int level = 1;
  while (!sims.empty()) {
    // highest similarity; ties resolved by the smallest index pair
    auto best = sims.begin();
    for (auto it = std::next(sims.begin()); it != sims.end(); ++it)
      if (it->second > best->second) best = it;
    auto [a, b] = best->first;

    Region& ra = regions[static_cast<std::size_t>(a)];
    Region& rb = regions[static_cast<std::size_t>(b)];
    Region merged;
    merged.size = ra.size + rb.size;
    merged.min_x = std::min(ra.min_x, rb.min_x);
    merged.max_x = std::max(ra.max_x, rb.max_x);
    merged.min_y = std::min(ra.min_y, rb.min_y);
    merged.max_y = std::max(ra.max_y, rb.max_y);
    merged.runs = ra.runs;
    merged.runs.insert(merged.runs.end(), rb.runs.begin(), rb.runs.end());
    merged.color_hist.resize(ra.color_hist.size());
    merged.texture_hist.resize(ra.texture_hist.size());
    for (std::size_t i = 0; i < merged.color_hist.size(); ++i)
      merged.color_hist[i] = (ra.color_hist[i] * ra.size + rb.color_hist[i] * rb.size) / merged.size;
    for (std::size_t i = 0; i < merged.texture_hist.size(); ++i)
      merged.texture_hist[i] = (ra.texture_hist[i] * ra.size + rb.texture_hist[i] * rb.size) / merged.size;

    int id = static_cast<int>(regions.size());
    regions.push_back(std::move(merged));
    alive.push_back(1);
    alive[static_cast<std::size_t>(a)] = alive[static_cast<std::size_t>(b)] = 0;
    ++out.merges;
    ++level;
    emit(regions.back().box(img_h, img_w), static_cast<double>(level) * rng.uniform_pos());

    std::set<int> new_nbrs;
    for (int other : nbrs[a])
      if (other != b && alive[static_cast<std::size_t>(other)]) new_nbrs.insert(other);
    for (int other : nbrs[b])
      if (other != a && alive[static_cast<std::size_t>(other)]) new_nbrs.insert(other);
    for (int other : nbrs[a]) {
      sims.erase({std::min(a, other), std::max(a, other)});
      nbrs[other].erase(a);
    }
    for (int other : nbrs[b]) {
      sims.erase({std::min(b, other), std::max(b, other)});
      nbrs[other].erase(b);
    }
    nbrs.erase(a);
    nbrs.erase(b);
    for (int other : new_nbrs) {
      sims[{other, id}] = region_similarity(regions[static_cast<std::size_t>(other)],
                                            regions[static_cast<std::size_t>(id)], img_h, img_w);
      nbrs[other].insert(id);
      nbrs[id].insert(other);
    }
  }

  out.proposals.resize(dedup.size());
  for (const auto& [key, val] : dedup) {
    Box b{key[0], key[1], key[2], key[3]};
    out.proposals[static_cast<std::size_t>(val.first)] = RegionProposal{b, val.second};
  }
  return out;
}

inline std::vector<RegionProposal> top_k(std::vector<RegionProposal> proposals, int k = 30) {
  // stable: equal ranks keep discovery order
  std::stable_sort(proposals.begin(), proposals.end(),
                   [](const RegionProposal& a, const RegionProposal& b) { return a.rank > b.rank; });
  if (static_cast<int>(proposals.size()) > k) proposals.resize(static_cast<std::size_t>(k));
  return proposals;
}

enum class ProposalMode { kSelectiveSearch, kGroundTruth, kRandom };

inline const char* proposal_mode_name(ProposalMode m) {
  switch (m) {
    case ProposalMode::kSelectiveSearch: return "selective_search";
    case ProposalMode::kGroundTruth: return "ground_truth";
    case ProposalMode::kRandom: return "random";
  }
  return "?";
}

inline ProposalMode parse_proposal_mode(const std::string& s) {
  if (s == "selective_search" || s == "ss") return ProposalMode::kSelectiveSearch;
  if (s == "ground_truth" || s == "gt") return ProposalMode::kGroundTruth;
  if (s == "random") return ProposalMode::kRandom;
  throw std::invalid_argument("unknown proposal mode: " + s);
}

inline GroupingResult selective_search(const Image& img, const SegmentationParams& params, std::uint64_t seed) {
  int region_count = 0;
  auto labels = felzenszwalb_segment(img, params, &region_count);
  std::set<std::pair<int, int>> adjacency;
  auto regions = extract_regions(img, labels, region_count, &adjacency);
  return hierarchical_group(std::move(regions), std::move(adjacency), img.h, img.w, seed);
}

// Unified proposal source. ground_truth requires annotations; random draws
// boxes with area in [2%, 50%] of the image.
inline std::vector<RegionProposal> proposal_source(ProposalMode mode, const Image& img,
                                                   const std::vector<Box>* annotations, int k,
                                                   std::uint64_t seed,
                                                   const SegmentationParams& params = {}) {
  switch (mode) {
    case ProposalMode::kSelectiveSearch:
      return top_k(selective_search(img, params, seed).proposals, k);
    case ProposalMode::kGroundTruth: {
      if (!annotations) throw std::invalid_argument("proposal_source: ground_truth mode requires annotations");
      std::vector<RegionProposal> out;
      for (const auto& b : *annotations) out.push_back({b, 1.0});
      return out;
    }
    case ProposalMode::kRandom: {
      Rng rng(mix64(seed, 0x726e64ULL));
      std::vector<RegionProposal> out;
      for (int i = 0; i < k; ++i) {
        double area = rng.uniform(0.02, 0.5);
        double ratio = rng.uniform(0.5, 2.0);
        double w = std::min(1.0, std::sqrt(area * ratio));
        double h = std::min(1.0, area / w);
        Box b;
        b.w = w;
        b.h = h;
        b.cx = rng.uniform(w / 2, 1.0 - w / 2);
        b.cy = rng.uniform(h / 2, 1.0 - h / 2);
        out.push_back({b, 1.0});
      }
      return out;
    }
  }
  throw std::logic_error("unreachable");
}

// --- sidecar cache: <image>.props.json ---

inline std::string image_sha256(const Image& img) {
  Sha256 s;
  s.update(&img.h, sizeof(img.h));
  s.update(&img.w, sizeof(img.w));
  s.update(img.v.data(), img.v.size() * sizeof(float));
  return s.hex_digest();
}

inline void write_proposal_sidecar(const std::string& path, const std::string& sha, ProposalMode mode,
                                   const std::vector<RegionProposal>& props) {
  nlohmann::json j;
  j["image_sha256"] = sha;
  j["mode"] = proposal_mode_name(mode);
  auto arr = nlohmann::json::array();
  for (const auto& p : props) arr.push_back({p.box.cx, p.box.cy, p.box.w, p.box.h});
  j["proposals"] = arr;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

inline bool read_proposal_sidecar(const std::string& path, const std::string& expect_sha,
                                  std::vector<Box>* out) {
  std::ifstream f(path);
  if (!f) return false;
  nlohmann::json j;
  f >> j;
  if (j.value("image_sha256", "") != expect_sha) return false;
  out->clear();
  for (const auto& a : j.at("proposals")) out->push_back({a[0], a[1], a[2], a[3]});
  return true;
}

}  // namespace seqco
