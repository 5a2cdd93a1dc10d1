#pragma once

// Full pre-training loop: dataset loading, view construction, dual forward
// passes, both matchings, loss, clipped Adam step, EMA step, NDJSON metrics,
// and bit-exact checkpoint/resume. Also the synthetic multi-object scene
// generator that stands in for unlabeled natural images.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqco/augment.hpp"
#include "seqco/image.hpp"
#include "seqco/model.hpp"
#include "seqco/objective.hpp"
#include "seqco/proposals.hpp"
#include "seqco/rng.hpp"
#include "seqco/util.hpp"

namespace seqco {

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.1;
};

struct PretrainConfig {
  ModelConfig model;
  LossWeights weights;
  EmaConfig ema;
  AugmentConfig augment;  // holds the mask strategy as well
  ProposalMode proposal_mode = ProposalMode::kSelectiveSearch;
  SimilarityKind similarity = SimilarityKind::kL2;
  OptimizerConfig optimizer;
  int steps = 300;
  int batch_size = 8;
  std::uint64_t seed = 1;
  std::string dataset;
  std::string checkpoint_path = "checkpoint.bin";
  std::string metrics_path = "metrics.ndjson";
};

// --- config JSON (unknown keys rejected) ---

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw std::invalid_argument("config: unknown key \"" + it.key() + "\" in " + where);
  }
}

inline ProportionSpec parse_proportion(const nlohmann::json& j, const std::string& where) {
  if (j.is_number()) return ProportionSpec::fixed(j.get<double>());
  if (j.is_array() && j.size() == 2) return ProportionSpec::range(j[0].get<double>(), j[1].get<double>());
  throw std::invalid_argument("config: " + where + " must be a number or [lo, hi]");
}

}  // namespace detail

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "none") return MaskMode::kNone;
  if (s == "online_only") return MaskMode::kOnlineOnly;
  if (s == "independent") return MaskMode::kIndependent;
  if (s == "complementary") return MaskMode::kComplementary;
  throw std::invalid_argument("unknown mask mode: " + s);
}

inline PretrainConfig parse_pretrain_config(const nlohmann::json& j) {
  PretrainConfig c;
  detail::reject_unknown(j, {"model", "weights", "ema", "mask", "augment", "proposal_mode", "similarity",
                             "optimizer", "steps", "batch_size", "seed", "dataset", "checkpoint", "metrics"},
                         "top level");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, {"image_size", "d_model", "heads", "enc_layers", "dec_layers", "queries",
                               "proj_dim", "ffn_hidden", "head_hidden"},
                           "model");
    c.model.image_size = m.value("image_size", c.model.image_size);
    c.model.d_model = m.value("d_model", c.model.d_model);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.enc_layers = m.value("enc_layers", c.model.enc_layers);
    c.model.dec_layers = m.value("dec_layers", c.model.dec_layers);
    c.model.queries = m.value("queries", c.model.queries);
    c.model.proj_dim = m.value("proj_dim", c.model.proj_dim);
    c.model.ffn_hidden = m.value("ffn_hidden", c.model.ffn_hidden);
    c.model.head_hidden = m.value("head_hidden", c.model.head_hidden);
  }
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    detail::reject_unknown(w, {"lambda_f", "lambda_b", "lambda_e", "lambda_cm", "lambda_bm", "focal_alpha",
                               "focal_gamma", "giou_sub_weight"},
                           "weights");
    c.weights.lambda_f = w.value("lambda_f", c.weights.lambda_f);
    c.weights.lambda_b = w.value("lambda_b", c.weights.lambda_b);
    c.weights.lambda_e = w.value("lambda_e", c.weights.lambda_e);
    c.weights.lambda_cm = w.value("lambda_cm", c.weights.lambda_cm);
    c.weights.lambda_bm = w.value("lambda_bm", c.weights.lambda_bm);
    c.weights.focal_alpha = w.value("focal_alpha", c.weights.focal_alpha);
    c.weights.focal_gamma = w.value("focal_gamma", c.weights.focal_gamma);
    c.weights.giou_sub_weight = w.value("giou_sub_weight", c.weights.giou_sub_weight);
  }
  if (j.contains("ema")) {
    detail::reject_unknown(j.at("ema"), {"beta"}, "ema");
    c.ema.beta = j.at("ema").value("beta", c.ema.beta);
  }
  if (j.contains("mask")) {
    const auto& m = j.at("mask");
    detail::reject_unknown(m, {"mode", "patch", "online_proportion", "momentum_proportion"}, "mask");
    if (m.contains("mode")) c.augment.mask.mode = parse_mask_mode(m.at("mode").get<std::string>());
    c.augment.mask.patch = m.value("patch", c.augment.mask.patch);
    if (m.contains("online_proportion"))
      c.augment.mask.online_proportion = detail::parse_proportion(m.at("online_proportion"), "mask.online_proportion");
    if (m.contains("momentum_proportion"))
      c.augment.mask.momentum_proportion =
          detail::parse_proportion(m.at("momentum_proportion"), "mask.momentum_proportion");
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    detail::reject_unknown(a, {"geometric", "photometric", "resize_lo", "resize_hi", "min_visibility"},
                           "augment");
    c.augment.geometric = a.value("geometric", c.augment.geometric);
    c.augment.photo.enabled = a.value("photometric", c.augment.photo.enabled);
    c.augment.resize_lo = a.value("resize_lo", c.augment.resize_lo);
    c.augment.resize_hi = a.value("resize_hi", c.augment.resize_hi);
    c.augment.min_visibility = a.value("min_visibility", c.augment.min_visibility);
  }
  if (j.contains("proposal_mode")) c.proposal_mode = parse_proposal_mode(j.at("proposal_mode").get<std::string>());
  if (j.contains("similarity")) c.similarity = parse_similarity(j.at("similarity").get<std::string>());
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::reject_unknown(o, {"lr", "beta1", "beta2", "eps", "clip_norm"}, "optimizer");
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    c.optimizer.clip_norm = o.value("clip_norm", c.optimizer.clip_norm);
  }
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.dataset = j.value("dataset", c.dataset);
  c.checkpoint_path = j.value("checkpoint", c.checkpoint_path);
  c.metrics_path = j.value("metrics", c.metrics_path);
  if (c.steps < 1) throw std::invalid_argument("config: steps must be >= 1");
  if (c.batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  c.augment.out_size = c.model.image_size;
  return c;
}

inline PretrainConfig load_pretrain_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  f >> j;
  return parse_pretrain_config(j);
}

// --- synthetic scenes ---

struct SyntheticScene {
  Image image;
  std::vector<Box> gt_boxes;
};

inline SyntheticScene make_synthetic_scene(std::uint64_t seed, int size = 64) {
  Rng rng(mix64(seed, 0x7363656eULL));
  SyntheticScene scene;
  // smooth two-tone background with mild noise
  float r0 = static_cast<float>(rng.uniform(0.1, 0.9)), g0 = static_cast<float>(rng.uniform(0.1, 0.9)),
        b0 = static_cast<float>(rng.uniform(0.1, 0.9));
  float r1 = static_cast<float>(rng.uniform(0.1, 0.9)), g1 = static_cast<float>(rng.uniform(0.1, 0.9)),
        b1 = static_cast<float>(rng.uniform(0.1, 0.9));
  scene.image = Image::filled(size, size, 0, 0, 0);
  for (int y = 0; y < size; ++y) {
    float t = static_cast<float>(y) / (size - 1);
    for (int x = 0; x < size; ++x) {
      float n = static_cast<float>(rng.uniform(-0.01, 0.01));
      scene.image.at(0, y, x) = std::clamp(r0 * (1 - t) + r1 * t + n, 0.0f, 1.0f);
      scene.image.at(1, y, x) = std::clamp(g0 * (1 - t) + g1 * t + n, 0.0f, 1.0f);
      scene.image.at(2, y, x) = std::clamp(b0 * (1 - t) + b1 * t + n, 0.0f, 1.0f);
    }
  }
  int n_obj = 1 + static_cast<int>(rng.uniform_int(3));
  for (int o = 0; o < n_obj; ++o) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      int bw = 10 + static_cast<int>(rng.uniform_int(9));  // 10..18 px
      int bh = 10 + static_cast<int>(rng.uniform_int(9));
      int x0 = 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(size - bw - 4) + 1));
      int y0 = 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(size - bh - 4) + 1));
      Box b{(x0 + bw / 2.0) / size, (y0 + bh / 2.0) / size, static_cast<double>(bw) / size,
            static_cast<double>(bh) / size};
      bool ok = true;
      for (const auto& other : scene.gt_boxes)
        if (iou(b, other) > 0.3) ok = false;
      if (!ok) continue;
      // saturated object color, well separated from the background tones
      float h = static_cast<float>(rng.uniform(0.0, 1.0));
      float cr, cg, cb;
      hsv_to_rgb(h, static_cast<float>(rng.uniform(0.7, 1.0)), static_cast<float>(rng.uniform(0.6, 1.0)), cr,
                 cg, cb);
      bool ellipse = rng.bernoulli(0.5);
      double ex = x0 + bw / 2.0, ey = y0 + bh / 2.0, ea = bw / 2.0, eb = bh / 2.0;
      for (int y = y0; y < y0 + bh; ++y)
        for (int x = x0; x < x0 + bw; ++x) {
          if (ellipse) {
            double dx = (x + 0.5 - ex) / ea, dy = (y + 0.5 - ey) / eb;
            if (dx * dx + dy * dy > 1.0) continue;
          }
          scene.image.at(0, y, x) = cr;
          scene.image.at(1, y, x) = cg;
          scene.image.at(2, y, x) = cb;
        }
      scene.gt_boxes.push_back(b);
      break;
    }
  }
  return scene;
}

inline void write_gt_json(const std::string& path, const std::vector<Box>& boxes) {
  nlohmann::json j;
  auto arr = nlohmann::json::array();
  for (const auto& b : boxes) arr.push_back({b.cx, b.cy, b.w, b.h});
  j["boxes"] = arr;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

inline std::vector<Box> read_gt_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  f >> j;
  std::vector<Box> out;
  for (const auto& a : j.at("boxes")) out.push_back({a[0], a[1], a[2], a[3]});
  return out;
}

inline void generate_synthetic(int count, std::uint64_t seed, const std::string& out_dir, int size = 64) {
  std::filesystem::create_directories(out_dir);
  for (int i = 0; i < count; ++i) {
    auto scene = make_synthetic_scene(mix64(seed, static_cast<std::uint64_t>(i)), size);
    char name[64];
    std::snprintf(name, sizeof(name), "scene_%05d", i);
    std::string base = (std::filesystem::path(out_dir) / name).string();
    write_ppm(scene.image, base + ".ppm");
    write_gt_json(base + ".ppm.gt.json", scene.gt_boxes);
  }
}

// --- dataset ---

struct DatasetItem {
  std::string path;
  Image image;
  std::vector<Box> gt;         // may be empty
  std::vector<Box> proposals;  // in source-image coordinates
};

inline std::vector<DatasetItem> load_dataset(const std::string& dir, ProposalMode mode, int top,
                                             std::uint64_t seed, bool use_cache = true) {
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".ppm") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("dataset: no .ppm images in " + dir);
  std::vector<DatasetItem> items;
  items.reserve(files.size());
  for (const auto& f : files) {
    DatasetItem it;
    it.path = f;
    it.image = read_ppm(f);
    std::string gt_path = f + ".gt.json";
    if (std::filesystem::exists(gt_path)) it.gt = read_gt_json(gt_path);
    std::uint64_t prop_seed = mix64(seed, fnv1a64(f));
    if (mode == ProposalMode::kSelectiveSearch && use_cache) {
      std::string sidecar = f + ".props.json";
      std::string sha = image_sha256(it.image);
      if (!read_proposal_sidecar(sidecar, sha, &it.proposals)) {
        auto props = proposal_source(mode, it.image, it.gt.empty() ? nullptr : &it.gt, top, prop_seed);
        write_proposal_sidecar(sidecar, sha, mode, props);
        for (const auto& p : props) it.proposals.push_back(p.box);
      }
    } else {
      auto props = proposal_source(mode, it.image, it.gt.empty() ? nullptr : &it.gt, top, prop_seed);
      for (const auto& p : props) it.proposals.push_back(p.box);
    }
    items.push_back(std::move(it));
  }
  return items;
}

// --- optimizer ---

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // aligned with the param store's order
  long long t = 0;

  void init(const ParamStore<T>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
      m.emplace_back(p.data().size(), T(0));
      v.emplace_back(p.data().size(), T(0));
    }
    t = 0;
  }
};

// global-norm gradient clip followed by a standard Adam update
template <class T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, const OptimizerConfig& cfg) {
  double sq = 0;
  for (auto& [name, p] : params) {
    auto g = p.grad_or_zero();
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  double norm = std::sqrt(sq);
  T scale = T(1);
  if (cfg.clip_norm > 0 && norm > cfg.clip_norm) scale = static_cast<T>(cfg.clip_norm / norm);

  ++state.t;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T bc1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(state.t)));
  const T bc2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(state.t)));
  const T lr = static_cast<T>(cfg.lr);
  const T eps = static_cast<T>(cfg.eps);
  std::size_t pi = 0;
  for (auto& [name, p] : params) {
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    auto& data = p.data();
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      T g = has ? p.grad(static_cast<std::int64_t>(i)) * scale : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      T mh = m[i] / bc1;
      T vh = v[i] / bc2;
      data[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    ++pi;
  }
}

// --- checkpoint (magic "SEQC1", little-endian float32 tensor records) ---

namespace detail {

inline void write_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4)
    throw std::runtime_error(path + ": truncated checkpoint at offset " + std::to_string(f.tellg()));
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_record(std::ofstream& f, const std::string& name, const Shape& shape,
                         const std::vector<float>& data) {
  write_u32(f, static_cast<std::uint32_t>(name.size()));
  f.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(f, static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) write_u32(f, static_cast<std::uint32_t>(d));
  for (float v : data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(f, bits);
  }
}

struct RawRecord {
  Shape shape;
  std::vector<float> data;
};

inline std::map<std::string, RawRecord> read_all_records(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[5];
  f.read(magic, 5);
  if (f.gcount() != 5 || std::string(magic, 5) != "SEQC1")
    throw std::runtime_error(path + ": bad magic at offset 0 (expected SEQC1)");
  std::uint32_t count = read_u32(f, path);
  std::map<std::string, RawRecord> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = read_u32(f, path);
    if (name_len > 4096)
      throw std::runtime_error(path + ": implausible name length at offset " + std::to_string(f.tellg()));
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (f.gcount() != static_cast<std::streamsize>(name_len))
      throw std::runtime_error(path + ": truncated name at offset " + std::to_string(f.tellg()));
    std::uint32_t rank = read_u32(f, path);
    RawRecord rec;
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      rec.shape.push_back(static_cast<int>(read_u32(f, path)));
      n *= rec.shape.back();
    }
    rec.data.resize(static_cast<std::size_t>(n));
    for (auto& v : rec.data) {
      std::uint32_t bits = read_u32(f, path);
      std::memcpy(&v, &bits, 4);
    }
    out.emplace(std::move(name), std::move(rec));
  }
  return out;
}

}  // namespace detail

template <class T>
struct TrainState {
  ParamStore<T> online;
  ParamStore<T> momentum;
  AdamState<T> adam;
  long long step = 0;  // completed steps
};

template <class T>
TrainState<T> init_train_state(const ModelConfig& cfg, std::uint64_t seed) {
  TrainState<T> s;
  s.online = init_params<T>(cfg, seed);
  s.momentum = s.online.clone(/*requires_grad=*/false);
  s.adam.init(s.online);
  return s;
}

template <class T>
void checkpoint_save(const TrainState<T>& state, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  f.write("SEQC1", 5);
  auto as_floats = [](const std::vector<T>& v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
    return out;
  };
  std::uint32_t count = static_cast<std::uint32_t>(state.online.count() * 4 + 1);
  detail::write_u32(f, count);
  std::size_t pi = 0;
  for (const auto& [name, p] : state.online) {
    detail::write_record(f, "online." + name, p.shape(), as_floats(p.data()));
    detail::write_record(f, "momentum." + name, state.momentum.get(name).shape(),
                         as_floats(state.momentum.get(name).data()));
    detail::write_record(f, "adam.m." + name, p.shape(), as_floats(state.adam.m[pi]));
    detail::write_record(f, "adam.v." + name, p.shape(), as_floats(state.adam.v[pi]));
    ++pi;
  }
  detail::write_record(f, "meta", {2},
                       {static_cast<float>(state.step), static_cast<float>(state.adam.t)});
  if (!f) throw std::runtime_error("write failure on checkpoint: " + path);
}

template <class T>
void checkpoint_load(TrainState<T>& state, const ModelConfig& cfg, std::uint64_t seed, const std::string& path) {
  auto records = detail::read_all_records(path);
  state = init_train_state<T>(cfg, seed);  // establishes names/shapes
  auto fetch = [&records, &path](const std::string& name) -> detail::RawRecord& {
    auto it = records.find(name);
    if (it == records.end()) throw std::runtime_error(path + ": missing record " + name);
    return it->second;
  };
  std::size_t pi = 0;
  for (auto& [name, p] : state.online) {
    auto load_into = [&](const std::string& rec_name, std::vector<T>& dst, const Shape& expect) {
      auto& rec = fetch(rec_name);
      if (rec.shape != expect)
        throw std::runtime_error(path + ": shape mismatch for " + rec_name + " (" + shape_str(rec.shape) +
                                 " vs " + shape_str(expect) + ")");
      dst.resize(rec.data.size());
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(rec.data[i]);
    };
    load_into("online." + name, p.data(), p.shape());
    load_into("momentum." + name, state.momentum.get(name).data(), p.shape());
    load_into("adam.m." + name, state.adam.m[pi], p.shape());
    load_into("adam.v." + name, state.adam.v[pi], p.shape());
    ++pi;
  }
  auto& meta = fetch("meta");
  state.step = static_cast<long long>(meta.data.at(0));
  state.adam.t = static_cast<long long>(meta.data.at(1));
}

// --- metrics ---

struct MetricsRecord {
  long long step = 0;
  bool ok = true;
  double loss_total = 0, loss_focal = 0, loss_box = 0, loss_ssl = 0, loss_rps = 0;
  double n_matched = 0;
  double proj_var = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["step"] = step;
    if (!ok) {
      j["error"] = "non_finite_loss";
      return j;
    }
    j["loss_total"] = loss_total;
    j["loss_focal"] = loss_focal;
    j["loss_box"] = loss_box;
    j["loss_ssl"] = loss_ssl;
    j["loss_rps"] = loss_rps;
    j["n_matched"] = n_matched;
    j["proj_var"] = proj_var;
    return j;
  }
};

// --- training step ---

template <class T>
MetricsRecord train_step(TrainState<T>& state, const PretrainConfig& cfg,
                         const std::vector<DatasetItem>& dataset, long long step_index) {
  MetricsRecord rec;
  rec.step = step_index;
  const int B = cfg.batch_size;
  Tensor<T> loss_sum = Tensor<T>::scalar(T(0));
  double focal = 0, box = 0, ssl = 0, matched = 0, proj_var = 0;

  for (int slot = 0; slot < B; ++slot) {
    std::size_t idx = static_cast<std::size_t>(
        mix64(cfg.seed, static_cast<std::uint64_t>(step_index), 0xb000 + static_cast<std::uint64_t>(slot)) %
        dataset.size());
    const DatasetItem& item = dataset[idx];
    std::uint64_t view_seed = mix64(cfg.seed, static_cast<std::uint64_t>(step_index), fnv1a64(item.path));
    ViewPair views = make_views(item.image, view_seed, cfg.augment);

    std::vector<Box> proposals = map_boxes(item.proposals, views.geometry, cfg.augment.min_visibility);
    if (static_cast<int>(proposals.size()) > cfg.model.queries)
      proposals.resize(static_cast<std::size_t>(cfg.model.queries));

    SequencePrediction<T> momentum_pred;
    {
      NoGrad guard;
      momentum_pred = model_forward(state.momentum, cfg.model, views.view1);
    }
    SequencePrediction<T> online_pred = model_forward(state.online, cfg.model, views.view2);

    auto loss = total_loss(online_pred, momentum_pred, proposals, cfg.weights, cfg.similarity);
    loss_sum = add(loss_sum, loss.total);
    focal += loss.focal;
    box += loss.box;
    ssl += loss.similarity;
    matched += loss.n_matched;
    // projection variance across queries, collapse monitor
    {
      const auto& z = online_pred.projections.data();
      const int n = online_pred.projections.dim(0), d = online_pred.projections.dim(1);
      double var = 0;
      for (int c = 0; c < d; ++c) {
        double mu = 0;
        for (int r = 0; r < n; ++r) mu += z[static_cast<std::size_t>(r * d + c)];
        mu /= n;
        double acc = 0;
        for (int r = 0; r < n; ++r) {
          double t = z[static_cast<std::size_t>(r * d + c)] - mu;
          acc += t * t;
        }
        var += acc / n;
      }
      proj_var += var / d;
    }
  }

  auto batch_loss = mul_scalar(loss_sum, T(1) / static_cast<T>(B));
  double loss_value = static_cast<double>(batch_loss.value());
  if (!std::isfinite(loss_value)) {
    rec.ok = false;
    return rec;  // state untouched
  }

  state.online.zero_grad();
  backward(batch_loss);
  adam_step(state.online, state.adam, cfg.optimizer);
  ema_update(state.momentum, state.online, cfg.ema.beta);
  state.step = step_index;

  rec.loss_total = loss_value;
  rec.loss_focal = focal / B;
  rec.loss_box = box / B;
  rec.loss_ssl = ssl / B;
  rec.loss_rps = cfg.weights.lambda_f * rec.loss_focal + cfg.weights.lambda_b * rec.loss_box;
  rec.n_matched = matched / B;
  rec.proj_var = proj_var / B;
  return rec;
}

// run steps [state.step + 1, cfg.steps]; append metrics NDJSON
template <class T>
std::vector<MetricsRecord> run_pretraining(TrainState<T>& state, const PretrainConfig& cfg,
                                           const std::vector<DatasetItem>& dataset, std::ostream* metrics_out,
                                           long long checkpoint_at = -1,
                                           const std::string& mid_checkpoint_path = "") {
  std::vector<MetricsRecord> records;
  for (long long s = state.step + 1; s <= cfg.steps; ++s) {
    MetricsRecord rec = train_step(state, cfg, dataset, s);
    if (metrics_out) *metrics_out << rec.to_json().dump() << "\n";
    records.push_back(rec);
    if (checkpoint_at == s && !mid_checkpoint_path.empty()) checkpoint_save(state, mid_checkpoint_path);
    if (s % 50 == 0)
      log_info("step %lld/%d loss=%.4f rps=%.4f ssl=%.4f", s, cfg.steps, rec.loss_total, rec.loss_rps,
               rec.loss_ssl);
  }
  return records;
}

// --- matching evaluation report ---

template <class T>
nlohmann::json evaluate_matching(const TrainState<T>& state, const PretrainConfig& cfg,
                                 const std::vector<DatasetItem>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("evaluate_matching: empty dataset");
  NoGrad guard;
  double gt_total = 0, gt_matched = 0, pair_l2 = 0, fg_prob = 0;
  int fg_count = 0, scenes = 0;
  for (const auto& item : dataset) {
    Image im = item.image;
    if (im.h != cfg.model.image_size || im.w != cfg.model.image_size)
      im = resize_bilinear(im, cfg.model.image_size, cfg.model.image_size);
    Image norm = normalize(im);
    auto online_pred = model_forward(state.online, cfg.model, norm);
    auto momentum_pred = model_forward(state.momentum, cfg.model, norm);
    auto ov = online_pred.values();
    auto mv = momentum_pred.values();

    if (!item.gt.empty() && static_cast<int>(item.gt.size()) <= cfg.model.queries) {
      auto assign = hungarian(build_rps_cost(ov, item.gt));
      for (int j = 0; j < assign.size(); ++j) {
        ++gt_total;
        int q = assign.query_for(j);
        if (iou(ov.boxes[static_cast<std::size_t>(q)], item.gt[static_cast<std::size_t>(j)]) >= 0.5)
          ++gt_matched;
        fg_prob += ov.fg_prob(q);
        ++fg_count;
      }
    }
    auto branch_assign = hungarian(build_branch_cost(ov, mv));
    double acc = 0;
    for (int j = 0; j < branch_assign.size(); ++j) {
      int q = branch_assign.query_for(j);
      for (std::size_t d = 0; d < mv.proj[static_cast<std::size_t>(j)].size(); ++d) {
        double t = mv.proj[static_cast<std::size_t>(j)][d] - ov.proj[static_cast<std::size_t>(q)][d];
        acc += t * t;
      }
    }
    pair_l2 += acc / branch_assign.size();
    ++scenes;
  }
  nlohmann::json j;
  j["scenes"] = scenes;
  j["gt_boxes"] = gt_total;
  j["matched_iou_fraction"] = gt_total > 0 ? gt_matched / gt_total : 0.0;
  j["mean_pair_l2"] = pair_l2 / scenes;
  j["mean_matched_fg_prob"] = fg_count > 0 ? fg_prob / fg_count : 0.0;
  return j;
}

}  // namespace seqco
