#pragma once

// Toy detection network: convolutional stem (total stride 8), sine
// positional encoding, standard transformer encoder-decoder over learned
// object queries, and three 2-hidden-layer FFN heads (class logit, sigmoid
// box, raw projection).

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "seqco/image.hpp"
#include "seqco/matching.hpp"
#include "seqco/rng.hpp"
#include "seqco/tensor.hpp"

namespace seqco {

struct ModelConfig {
  int image_size = 64;
  int stem_stride = 8;  // fixed by the stem architecture: conv s2, conv s2, pool s2
  int d_model = 32;
  int heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int queries = 16;
  int proj_dim = 32;
  int ffn_hidden = 64;
  int head_hidden = 32;  // hidden width of the three prediction FFNs

  void validate() const {
    if (d_model % heads != 0) throw std::invalid_argument("model config: d_model not divisible by heads");
    if (stem_stride != 8) throw std::invalid_argument("model config: stem stride is fixed at 8");
    if (image_size % 8 != 0) throw std::invalid_argument("model config: image_size must be a multiple of 8");
  }

  int tokens() const { return (image_size / stem_stride) * (image_size / stem_stride); }
  int grid() const { return image_size / stem_stride; }
};

template <class T>
struct SequencePrediction {
  Tensor<T> class_logits;  // [N]
  Tensor<T> boxes;         // [N, 4], sigmoid outputs
  Tensor<T> projections;   // [N, proj_dim]

  int count() const { return class_logits.dim(0); }

  SeqValues values() const {
    SeqValues v;
    const int n = count();
    v.fg_logits.resize(static_cast<std::size_t>(n));
    v.boxes.resize(static_cast<std::size_t>(n));
    v.proj.resize(static_cast<std::size_t>(n));
    const int d = projections.dim(1);
    for (int i = 0; i < n; ++i) {
      v.fg_logits[static_cast<std::size_t>(i)] = static_cast<double>(class_logits.value(i));
      v.boxes[static_cast<std::size_t>(i)] = Box{static_cast<double>(boxes.value(i * 4 + 0)),
                                                 static_cast<double>(boxes.value(i * 4 + 1)),
                                                 static_cast<double>(boxes.value(i * 4 + 2)),
                                                 static_cast<double>(boxes.value(i * 4 + 3))};
      v.proj[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j)
        v.proj[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
            static_cast<double>(projections.value(i * d + j));
    }
    return v;
  }
};

template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return items_[it->second].second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return items_[it->second].second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t count() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  ParamStore clone(bool requires_grad) const {
    ParamStore out;
    for (const auto& [name, t] : items_) {
      auto copy = Tensor<T>::from(t.shape(), t.data(), false);
      copy.node()->requires_grad = requires_grad;
      out.add(name, copy);
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

template <class T>
void add_linear(ParamStore<T>& s, Rng& rng, const std::string& prefix, int in, int out) {
  T limit = static_cast<T>(std::sqrt(6.0 / (in + out)));
  std::vector<T> w(static_cast<std::size_t>(in) * out);
  for (auto& x : w) x = static_cast<T>(rng.uniform(-limit, limit));
  s.add(prefix + ".w", Tensor<T>::from({in, out}, std::move(w), true));
  s.add(prefix + ".b", Tensor<T>::zeros({out}, true));
}

template <class T>
void add_conv(ParamStore<T>& s, Rng& rng, const std::string& prefix, int cin, int cout, int k) {
  int fan_in = cin * k * k, fan_out = cout * k * k;
  T limit = static_cast<T>(std::sqrt(6.0 / (fan_in + fan_out)));
  std::vector<T> w(static_cast<std::size_t>(cout) * cin * k * k);
  for (auto& x : w) x = static_cast<T>(rng.uniform(-limit, limit));
  s.add(prefix + ".w", Tensor<T>::from({cout, cin, k, k}, std::move(w), true));
  s.add(prefix + ".b", Tensor<T>::zeros({cout}, true));
}

template <class T>
void add_layernorm(ParamStore<T>& s, const std::string& prefix, int d) {
  s.add(prefix + ".g", Tensor<T>::filled({d}, T(1), true));
  s.add(prefix + ".b", Tensor<T>::zeros({d}, true));
}

template <class T>
void add_attention(ParamStore<T>& s, Rng& rng, const std::string& prefix, int d) {
  add_linear(s, rng, prefix + ".q", d, d);
  add_linear(s, rng, prefix + ".k", d, d);
  add_linear(s, rng, prefix + ".v", d, d);
  add_linear(s, rng, prefix + ".o", d, d);
}

template <class T>
void add_mlp3(ParamStore<T>& s, Rng& rng, const std::string& prefix, int in, int hidden, int out) {
  add_linear(s, rng, prefix + ".l0", in, hidden);
  add_linear(s, rng, prefix + ".l1", hidden, hidden);
  add_linear(s, rng, prefix + ".l2", hidden, out);
}

}  // namespace detail

template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix64(seed, 0x696e6974ULL));
  ParamStore<T> s;
  const int d = cfg.d_model;
  detail::add_conv(s, rng, "stem.conv1", 3, d / 2, 3);
  detail::add_conv(s, rng, "stem.conv2", d / 2, d, 3);
  for (int l = 0; l < cfg.enc_layers; ++l) {
    std::string p = "enc." + std::to_string(l);
    detail::add_attention(s, rng, p + ".self", d);
    detail::add_layernorm(s, p + ".ln1", d);
    detail::add_linear(s, rng, p + ".ffn0", d, cfg.ffn_hidden);
    detail::add_linear(s, rng, p + ".ffn1", cfg.ffn_hidden, d);
    detail::add_layernorm(s, p + ".ln2", d);
  }
  for (int l = 0; l < cfg.dec_layers; ++l) {
    std::string p = "dec." + std::to_string(l);
    detail::add_attention(s, rng, p + ".self", d);
    detail::add_layernorm(s, p + ".ln1", d);
    detail::add_attention(s, rng, p + ".cross", d);
    detail::add_layernorm(s, p + ".ln2", d);
    detail::add_linear(s, rng, p + ".ffn0", d, cfg.ffn_hidden);
    detail::add_linear(s, rng, p + ".ffn1", cfg.ffn_hidden, d);
    detail::add_layernorm(s, p + ".ln3", d);
  }
  {
    std::vector<T> q(static_cast<std::size_t>(cfg.queries) * d);
    for (auto& x : q) x = static_cast<T>(rng.normal(0.0, 1.0));
    s.add("queries", Tensor<T>::from({cfg.queries, d}, std::move(q), true));
  }
  detail::add_mlp3(s, rng, "head.cls", d, cfg.head_hidden, 1);
  detail::add_mlp3(s, rng, "head.box", d, cfg.head_hidden, 4);
  detail::add_mlp3(s, rng, "head.prj", d, cfg.head_hidden, cfg.proj_dim);
  return s;
}

namespace detail {

template <class T>
Tensor<T> linear(const ParamStore<T>& s, const std::string& prefix, const Tensor<T>& x) {
  return add(matmul(x, s.get(prefix + ".w")), s.get(prefix + ".b"));
}

template <class T>
Tensor<T> layernorm_affine(const ParamStore<T>& s, const std::string& prefix, const Tensor<T>& x) {
  return add(mul(layernorm(x), s.get(prefix + ".g")), s.get(prefix + ".b"));
}

// standard multi-head attention; pos offsets are added to q/k inputs only
template <class T>
Tensor<T> attention(const ParamStore<T>& s, const std::string& prefix, int heads, const Tensor<T>& q_in,
                    const Tensor<T>& k_in, const Tensor<T>& v_in) {
  const int d = q_in.dim(1);
  const int dh = d / heads;
  const int sq = q_in.dim(0), sk = k_in.dim(0);
  auto split = [&](const Tensor<T>& x, int sl) {
    return permute(reshape(x, {sl, heads, dh}), {1, 0, 2});  // [h, s, dh]
  };
  auto q = split(linear(s, prefix + ".q", q_in), sq);
  auto k = split(linear(s, prefix + ".k", k_in), sk);
  auto v = split(linear(s, prefix + ".v", v_in), sk);
  auto att = softmax(mul_scalar(matmul(q, permute(k, {0, 2, 1})), static_cast<T>(1.0 / std::sqrt(dh))));
  auto out = reshape(permute(matmul(att, v), {1, 0, 2}), {sq, d});  // merge heads
  return linear(s, prefix + ".o", out);
}

template <class T>
Tensor<T> mlp3(const ParamStore<T>& s, const std::string& prefix, const Tensor<T>& x) {
  auto h = relu(linear(s, prefix + ".l0", x));
  h = relu(linear(s, prefix + ".l1", h));
  return linear(s, prefix + ".l2", h);
}

// 2-d sine positional encoding over the token grid, DETR-style: half the
// channels encode y, half encode x.
template <class T>
Tensor<T> sine_positions(int grid, int d_model) {
  const int half = d_model / 2;
  std::vector<T> data(static_cast<std::size_t>(grid) * grid * d_model);
  const double temperature = 10000.0;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) {
      T* row = data.data() + (static_cast<std::size_t>(y) * grid + x) * d_model;
      for (int i = 0; i < half; ++i) {
        double freq = std::pow(temperature, 2.0 * (i / 2) / half);
        double py = y / freq, px = x / freq;
        row[i] = static_cast<T>((i % 2 == 0) ? std::sin(py) : std::cos(py));
        row[half + i] = static_cast<T>((i % 2 == 0) ? std::sin(px) : std::cos(px));
      }
    }
  return Tensor<T>::from({grid * grid, d_model}, std::move(data));
}

}  // namespace detail

template <class T>
Tensor<T> image_to_tensor(const Image& im) {
  std::vector<T> data(im.v.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(im.v[i]);
  return Tensor<T>::from({3, im.h, im.w}, std::move(data));
}

template <class T>
SequencePrediction<T> model_forward(const ParamStore<T>& params, const ModelConfig& cfg, const Tensor<T>& img) {
  cfg.validate();
  if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != cfg.image_size || img.dim(2) != cfg.image_size)
    throw std::invalid_argument("model_forward: expected [3," + std::to_string(cfg.image_size) + "," +
                                std::to_string(cfg.image_size) + "] image, got " + shape_str(img.shape()));
  const int d = cfg.d_model;

  // stem: conv s2 -> conv s2 -> avgpool s2
  auto x = relu(conv2d(img, params.get("stem.conv1.w"), params.get("stem.conv1.b"), 2, 1));
  x = relu(conv2d(x, params.get("stem.conv2.w"), params.get("stem.conv2.b"), 2, 1));
  x = avgpool2d(x, 2, 2);
  const int g = cfg.grid();
  auto tokens = permute(reshape(x, {d, g * g}), {1, 0});  // [S, d]

  auto pos = detail::sine_positions<T>(g, d);
  for (int l = 0; l < cfg.enc_layers; ++l) {
    std::string p = "enc." + std::to_string(l);
    auto qk = add(tokens, pos);
    auto att = detail::attention(params, p + ".self", cfg.heads, qk, qk, tokens);
    tokens = detail::layernorm_affine(params, p + ".ln1", add(tokens, att));
    auto ff = matmul(relu(detail::linear(params, p + ".ffn0", tokens)), params.get(p + ".ffn1.w"));
    ff = add(ff, params.get(p + ".ffn1.b"));
    tokens = detail::layernorm_affine(params, p + ".ln2", add(tokens, ff));
  }

  auto seq = params.get("queries");
  for (int l = 0; l < cfg.dec_layers; ++l) {
    std::string p = "dec." + std::to_string(l);
    auto att = detail::attention(params, p + ".self", cfg.heads, seq, seq, seq);
    seq = detail::layernorm_affine(params, p + ".ln1", add(seq, att));
    auto mem_qk = add(tokens, pos);
    auto cross = detail::attention(params, p + ".cross", cfg.heads, seq, mem_qk, tokens);
    seq = detail::layernorm_affine(params, p + ".ln2", add(seq, cross));
    auto ff = matmul(relu(detail::linear(params, p + ".ffn0", seq)), params.get(p + ".ffn1.w"));
    ff = add(ff, params.get(p + ".ffn1.b"));
    seq = detail::layernorm_affine(params, p + ".ln3", add(seq, ff));
  }

  SequencePrediction<T> pred;
  pred.class_logits = reshape(detail::mlp3(params, "head.cls", seq), {cfg.queries});
  pred.boxes = sigmoid(detail::mlp3(params, "head.box", seq));
  pred.projections = detail::mlp3(params, "head.prj", seq);
  return pred;
}

template <class T>
SequencePrediction<T> model_forward(const ParamStore<T>& params, const ModelConfig& cfg, const Image& img) {
  return model_forward(params, cfg, image_to_tensor<T>(img));
}

}  // namespace seqco
