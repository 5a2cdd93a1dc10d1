#pragma once

// Dense tensors with a dynamically built reverse-mode tape. Templated on the
// scalar type: float for training, double for finite-difference checks.
// Broadcasting is limited to scalar broadcast and trailing-dimension
// expansion (the smaller shape must be a suffix of the larger one).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace seqco {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

// Scope guard: ops created while alive record no backward rules.
class NoGrad {
 public:
  NoGrad() { ++detail::no_grad_depth(); }
  ~NoGrad() { --detail::no_grad_depth(); }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;  // accumulates into parents' grad

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    n->data.assign(static_cast<std::size_t>(numel(shape)), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad && grad_enabled();
    return Tensor(n);
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
      throw std::invalid_argument("tensor init: shape " + shape_str(shape) + " does not match data length " +
                                  std::to_string(data.size()));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad && grad_enabled();
    return Tensor(n);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }
  T value(std::int64_t i = 0) const { return node_->data[static_cast<std::size_t>(i)]; }

  // Gradient entry; zero when no gradient reached this tensor.
  T grad(std::int64_t i = 0) const {
    return node_->grad.empty() ? T(0) : node_->grad[static_cast<std::size_t>(i)];
  }
  std::vector<T> grad_or_zero() const {
    if (node_->grad.empty()) return std::vector<T>(node_->data.size(), T(0));
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Same values, detached from the tape.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->requires_grad = false;
    return Tensor(n);
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs)
      if (t.requires_grad()) needs = true;
  }
  n->requires_grad = needs;
  if (needs) {
    for (const auto& t : inputs) n->parents.push_back(t.node());
  }
  return Tensor<T>(n);
}

// suffix broadcast: returns true if small is a suffix of big (or scalar)
inline bool suffix_of(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

}  // namespace detail

// ------------------------------------------------------------------
// elementwise binary ops with suffix broadcasting
// ------------------------------------------------------------------

template <class T, class FwdFn, class BwdFn>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, FwdFn fwd, BwdFn bwd) {
  const Shape *big = &a.shape(), *small = &b.shape();
  bool a_is_big = true;
  if (numel(*big) < numel(*small)) {
    std::swap(big, small);
    a_is_big = false;
  }
  if (!detail::suffix_of(*small, *big))
    throw std::invalid_argument(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const std::int64_t n = numel(*big);
  const std::int64_t m = std::max<std::int64_t>(1, numel(*small));
  std::vector<T> out(static_cast<std::size_t>(n));
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::int64_t i = 0; i < n; ++i) {
    T x = a_is_big ? ad[static_cast<std::size_t>(i)] : ad[static_cast<std::size_t>(i % m)];
    T y = a_is_big ? bd[static_cast<std::size_t>(i % m)] : bd[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = fwd(x, y);
  }
  auto r = detail::make_result<T>(*big, std::move(out), {a, b});
  if (r.requires_grad()) {
    auto an = a.node(), bn = b.node();
    auto* rn = r.node().get();
    bool a_big = a_is_big;
    rn->backward_fn = [an, bn, rn, a_big, m, bwd]() {
      const std::int64_t n2 = static_cast<std::int64_t>(rn->data.size());
      bool need_a = an->requires_grad, need_b = bn->requires_grad;
      if (need_a) an->ensure_grad();
      if (need_b) bn->ensure_grad();
      for (std::int64_t i = 0; i < n2; ++i) {
        std::size_t ia = a_big ? static_cast<std::size_t>(i) : static_cast<std::size_t>(i % m);
        std::size_t ib = a_big ? static_cast<std::size_t>(i % m) : static_cast<std::size_t>(i);
        T x = an->data[ia], y = bn->data[ib];
        T g = rn->grad[static_cast<std::size_t>(i)];
        T gx, gy;
        bwd(x, y, g, gx, gy);
        if (need_a) an->grad[ia] += gx;
        if (need_b) bn->grad[ib] += gy;
      }
    };
  }
  return r;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "add", [](T x, T y) { return x + y; },
                   [](T, T, T g, T& gx, T& gy) { gx = g; gy = g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "sub", [](T x, T y) { return x - y; },
                   [](T, T, T g, T& gx, T& gy) { gx = g; gy = -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "mul", [](T x, T y) { return x * y; },
                   [](T x, T y, T g, T& gx, T& gy) { gx = g * y; gy = g * x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "div", [](T x, T y) { return x / y; },
                   [](T x, T y, T g, T& gx, T& gy) { gx = g / y; gy = -g * x / (y * y); });
}

template <class T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "minimum", [](T x, T y) { return x < y ? x : y; },
                   [](T x, T y, T g, T& gx, T& gy) { gx = x <= y ? g : T(0); gy = x <= y ? T(0) : g; });
}

template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "maximum", [](T x, T y) { return x > y ? x : y; },
                   [](T x, T y, T g, T& gx, T& gy) { gx = x >= y ? g : T(0); gy = x >= y ? T(0) : g; });
}

// ------------------------------------------------------------------
// elementwise unary ops
// ------------------------------------------------------------------

template <class T, class FwdFn, class BwdFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn fwd, BwdFn bwd) {
  std::vector<T> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  auto r = detail::make_result<T>(a.shape(), std::move(out), {a});
  if (r.requires_grad()) {
    auto an = a.node();
    auto* rn = r.node().get();
    rn->backward_fn = [an, rn, bwd]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < rn->data.size(); ++i)
        an->grad[i] += bwd(an->data[i], rn->data[i]) * rn->grad[i];
    };
  }
  return r;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                  [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::fabs(x); },
                  [](T x, T) { return x >= T(0) ? T(1) : T(-1); });
}

// elementwise x^p for constant exponent p
template <class T>
Tensor<T> power(const Tensor<T>& a, T p) {
  return unary_op(a, [p](T x) { return std::pow(x, p); },
                  [p](T x, T) { return p * std::pow(x, p - T(1)); });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary_op(a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

// clamp with pass-through gradient strictly inside [lo, hi]
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return unary_op(a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
                  [lo, hi](T x, T) { return (x < lo || x > hi) ? T(0) : T(1); });
}

// ------------------------------------------------------------------
// shape ops
// ------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  // a single -1 entry is inferred
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[static_cast<std::size_t>(infer)] = static_cast<int>(a.size() / known);
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  auto r = detail::make_result<T>(std::move(shape), a.data(), {a});
  if (r.requires_grad()) {
    auto an = a.node();
    auto* rn = r.node().get();
    rn->backward_fn = [an, rn]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < rn->data.size(); ++i) an->grad[i] += rn->grad[i];
    };
  }
  return r;
}

namespace detail {
inline std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= s[static_cast<std::size_t>(i)];
  }
  return st;
}
}  // namespace detail

// general axis permutation
template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("permute: rank mismatch");
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = a.dim(perm[static_cast<std::size_t>(i)]);
  auto in_strides = detail::strides_of(a.shape());
  auto out_strides = detail::strides_of(out_shape);
  const std::int64_t n = a.size();
  std::vector<std::size_t> src_index(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      std::int64_t c = rem / out_strides[static_cast<std::size_t>(i)];
      rem %= out_strides[static_cast<std::size_t>(i)];
      src += c * in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    src_index[static_cast<std::size_t>(o)] = static_cast<std::size_t>(src);
  }
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < n; ++o) out[static_cast<std::size_t>(o)] = a.data()[src_index[static_cast<std::size_t>(o)]];
  auto res = detail::make_result<T>(std::move(out_shape), std::move(out), {a});
  if (res.requires_grad()) {
    auto an = a.node();
    auto* rn = res.node().get();
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(src_index));
    rn->backward_fn = [an, rn, idx]() {
      an->ensure_grad();
      for (std::size_t o = 0; o < rn->data.size(); ++o) an->grad[(*idx)[o]] += rn->grad[o];
    };
  }
  return res;
}

// swap the last two axes
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw std::invalid_argument("transpose: rank < 2");
  std::vector<int> perm(static_cast<std::size_t>(a.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
  const int r = a.rank();
  if (axis < 0 || axis >= r) throw std::invalid_argument("slice: bad axis");
  if (start < 0 || len < 0 || start + len > a.dim(axis))
    throw std::invalid_argument("slice: out of range on axis " + std::to_string(axis));
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  auto in_strides = detail::strides_of(a.shape());
  std::int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  std::int64_t inner = in_strides[static_cast<std::size_t>(axis)];
  std::int64_t axis_dim = a.dim(axis);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::size_t o = 0;
  for (std::int64_t u = 0; u < outer; ++u)
    for (std::int64_t k = start; k < start + len; ++k)
      for (std::int64_t v = 0; v < inner; ++v)
        out[o++] = a.data()[static_cast<std::size_t>((u * axis_dim + k) * inner + v)];
  auto res = detail::make_result<T>(std::move(out_shape), std::move(out), {a});
  if (res.requires_grad()) {
    auto an = a.node();
    auto* rn = res.node().get();
    rn->backward_fn = [an, rn, outer, inner, axis_dim, start, len]() {
      an->ensure_grad();
      std::size_t o2 = 0;
      for (std::int64_t u = 0; u < outer; ++u)
        for (std::int64_t k = start; k < start + len; ++k)
          for (std::int64_t v = 0; v < inner; ++v)
            an->grad[static_cast<std::size_t>((u * axis_dim + k) * inner + v)] += rn->grad[o2++];
    };
  }
  return res;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: bad axis");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != out_shape[static_cast<std::size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                    shape_str(out_shape));
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  std::int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  std::int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::int64_t k = p.dim(axis);
    for (std::int64_t u = 0; u < outer; ++u)
      for (std::int64_t j = 0; j < k * inner; ++j)
        out[static_cast<std::size_t>((u * total + off) * inner + j)] =
            p.data()[static_cast<std::size_t>(u * k * inner + j)];
    off += k;
  }
  auto res = detail::make_result<T>(std::move(out_shape), std::move(out), parts);
  if (res.requires_grad()) {
    auto* rn = res.node().get();
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    std::vector<std::int64_t> widths;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      widths.push_back(p.dim(axis));
    }
    rn->backward_fn = [rn, nodes, widths, outer, inner, total]() {
      std::int64_t off2 = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        auto& nd = nodes[pi];
        std::int64_t k = widths[pi];
        if (nd->requires_grad) {
          nd->ensure_grad();
          for (std::int64_t u = 0; u < outer; ++u)
            for (std::int64_t j = 0; j < k * inner; ++j)
              nd->grad[static_cast<std::size_t>(u * k * inner + j)] +=
                  rn->grad[static_cast<std::size_t>((u * total + off2) * inner + j)];
        }
        off2 += k;
      }
    };
  }
  return res;
}

// gather along the first axis; backward scatter-adds
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int>& idx) {
  if (a.rank() < 1) throw std::invalid_argument("gather_rows: rank 0");
  std::int64_t row = a.size() / a.dim(0);
  for (int i : idx)
    if (i < 0 || i >= a.dim(0)) throw std::invalid_argument("gather_rows: index out of range");
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<int>(idx.size());
  std::vector<T> out(static_cast<std::size_t>(row * static_cast<std::int64_t>(idx.size())));
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::int64_t j = 0; j < row; ++j)
      out[r * static_cast<std::size_t>(row) + static_cast<std::size_t>(j)] =
          a.data()[static_cast<std::size_t>(idx[r] * row + j)];
  auto res = detail::make_result<T>(std::move(out_shape), std::move(out), {a});
  if (res.requires_grad()) {
    auto an = a.node();
    auto* rn = res.node().get();
    auto ids = std::make_shared<std::vector<int>>(idx);
    rn->backward_fn = [an, rn, ids, row]() {
      an->ensure_grad();
      for (std::size_t r = 0; r < ids->size(); ++r)
        for (std::int64_t j = 0; j < row; ++j)
          an->grad[static_cast<std::size_t>((*ids)[r] * row + j)] +=
              rn->grad[r * static_cast<std::size_t>(row) + static_cast<std::size_t>(j)];
    };
  }
  return res;
}

// ------------------------------------------------------------------
// reductions
// ------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto r = detail::make_result<T>({}, {acc}, {a});
  if (r.requires_grad()) {
    auto an = a.node();
    auto* rn = r.node().get();
    rn->backward_fn = [an, rn]() {
      an->ensure_grad();
      for (auto& g : an->grad) g += rn->grad[0];
    };
  }
  return r;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.size()));
}

// ------------------------------------------------------------------
// matmul: a is [*, m, k]; b is [k, n] (shared) or [*, k, n] (batched)
// ------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw std::invalid_argument("matmul: need rank >= 2, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const int kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb)
    throw std::invalid_argument("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const std::int64_t batch = a.size() / (static_cast<std::int64_t>(m) * k);
  bool b_batched = b.rank() > 2;
  if (b_batched && b.size() / (static_cast<std::int64_t>(k) * n) != batch)
    throw std::invalid_argument("matmul: batch dims disagree, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  if (!b_batched && b.rank() != 2)
    throw std::invalid_argument("matmul: rhs must be 2-d or batch-match lhs");

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n), T(0));
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const T* A = ad.data() + bi * m * k;
    const T* B = bd.data() + (b_batched ? bi * k * n : 0);
    T* C = out.data() + bi * m * n;
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        T av = A[i * k + p];
        if (av == T(0)) continue;
        const T* Brow = B + p * n;
        T* Crow = C + i * n;
        for (int j = 0; j < n; ++j) Crow[j] += av * Brow[j];
      }
  }
  auto r = detail::make_result<T>(std::move(out_shape), std::move(out), {a, b});
  if (r.requires_grad()) {
    auto an = a.node(), bn = b.node();
    auto* rn = r.node().get();
    rn->backward_fn = [an, bn, rn, batch, m, k, n, b_batched]() {
      bool need_a = an->requires_grad, need_b = bn->requires_grad;
      if (need_a) an->ensure_grad();
      if (need_b) bn->ensure_grad();
      for (std::int64_t bi = 0; bi < batch; ++bi) {
        const T* A = an->data.data() + bi * m * k;
        const T* B = bn->data.data() + (b_batched ? bi * k * n : 0);
        const T* G = rn->grad.data() + bi * m * n;
        T* dA = need_a ? an->grad.data() + bi * m * k : nullptr;
        T* dB = need_b ? bn->grad.data() + (b_batched ? bi * k * n : 0) : nullptr;
        if (need_a) {
          // dA = G * B^T
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              T acc = 0;
              for (int j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
              dA[i * k + p] += acc;
            }
        }
        if (need_b) {
          // dB += A^T * G
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              T av = A[i * k + p];
              if (av == T(0)) continue;
              for (int j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
            }
        }
      }
    };
  }
  return r;
}

// ------------------------------------------------------------------
// softmax / layernorm over the last dimension
// ------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() < 1) throw std::invalid_argument("softmax: rank 0");
  const std::int64_t d = a.dim(a.rank() - 1);
  const std::int64_t rows = a.size() / d;
  std::vector<T> out(a.data().size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * d;
    T* y = out.data() + r * d;
    T mx = x[0];
    for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    T s = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      s += y[i];
    }
    for (std::int64_t i = 0; i < d; ++i) y[i] /= s;
  }
  auto res = detail::make_result<T>(a.shape(), std::move(out), {a});
  if (res.requires_grad()) {
    auto an = a.node();
    auto* rn = res.node().get();
    rn->backward_fn = [an, rn, rows, d]() {
      an->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = rn->data.data() + r * d;
        const T* g = rn->grad.data() + r * d;
        T dot = 0;
        for (std::int64_t i = 0; i < d; ++i) dot += y[i] * g[i];
        T* dx = an->grad.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) dx[i] += y[i] * (g[i] - dot);
      }
    };
  }
  return res;
}

// pure normalization (x - mean) / sqrt(var + eps); affine scale/shift is
// applied by the caller with mul/add so the parameters live on the tape.
template <class T>
Tensor<T> layernorm(const Tensor<T>& a, T eps = T(1e-5)) {
  if (a.rank() < 1) throw std::invalid_argument("layernorm: rank 0");
  const std::int64_t d = a.dim(a.rank() - 1);
  const std::int64_t rows = a.size() / d;
  std::vector<T> out(a.data().size());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * d;
    T mu = 0;
    for (std::int64_t i = 0; i < d; ++i) mu += x[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<T>(d);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    T* y = out.data() + r * d;
    for (std::int64_t i = 0; i < d; ++i) y[i] = (x[i] - mu) * is;
  }
  auto res = detail::make_result<T>(a.shape(), std::move(out), {a});
  if (res.requires_grad()) {
    auto an = a.node();
    auto* rn = res.node().get();
    auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
    rn->backward_fn = [an, rn, istd, rows, d]() {
      an->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = rn->data.data() + r * d;
        const T* g = rn->grad.data() + r * d;
        T is = (*istd)[static_cast<std::size_t>(r)];
        T g_mean = 0, gy_mean = 0;
        for (std::int64_t i = 0; i < d; ++i) {
          g_mean += g[i];
          gy_mean += g[i] * y[i];
        }
        g_mean /= static_cast<T>(d);
        gy_mean /= static_cast<T>(d);
        T* dx = an->grad.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) dx[i] += is * (g[i] - g_mean - y[i] * gy_mean);
      }
    };
  }
  return res;
}

// ------------------------------------------------------------------
// conv2d / avgpool2d on a single [C, H, W] image
// ------------------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4)
    throw std::invalid_argument("conv2d: need [C,H,W] x [F,C,kh,kw], got " + shape_str(x.shape()) + " and " +
                                shape_str(w.shape()));
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int F = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (C != Cw) throw std::invalid_argument("conv2d: channel mismatch");
  if (bias.size() != F) throw std::invalid_argument("conv2d: bias size mismatch");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(F) * Ho * Wo);
  const auto& xd = x.data();
  const auto& wd = w.data();
  for (int f = 0; f < F; ++f)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T acc = bias.data()[static_cast<std::size_t>(f)];
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              acc += xd[static_cast<std::size_t>((c * H + iy) * W + ix)] *
                     wd[static_cast<std::size_t>(((f * C + c) * kh + ky) * kw + kx)];
            }
          }
        out[static_cast<std::size_t>((f * Ho + oy) * Wo + ox)] = acc;
      }
  auto r = detail::make_result<T>({F, Ho, Wo}, std::move(out), {x, w, bias});
  if (r.requires_grad()) {
    auto xn = x.node(), wn = w.node(), bn = bias.node();
    auto* rn = r.node().get();
    rn->backward_fn = [xn, wn, bn, rn, C, H, W, F, kh, kw, Ho, Wo, stride, pad]() {
      bool nx = xn->requires_grad, nw = wn->requires_grad, nb = bn->requires_grad;
      if (nx) xn->ensure_grad();
      if (nw) wn->ensure_grad();
      if (nb) bn->ensure_grad();
      for (int f = 0; f < F; ++f)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            T g = rn->grad[static_cast<std::size_t>((f * Ho + oy) * Wo + ox)];
            if (g == T(0)) continue;
            if (nb) bn->grad[static_cast<std::size_t>(f)] += g;
            for (int c = 0; c < C; ++c)
              for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  std::size_t xi = static_cast<std::size_t>((c * H + iy) * W + ix);
                  std::size_t wi = static_cast<std::size_t>(((f * C + c) * kh + ky) * kw + kx);
                  if (nx) xn->grad[xi] += g * wn->data[wi];
                  if (nw) wn->grad[wi] += g * xn->data[xi];
                }
              }
          }
    };
  }
  return r;
}

template <class T>
Tensor<T> avgpool2d(const Tensor<T>& x, int k, int stride) {
  if (x.rank() != 3) throw std::invalid_argument("avgpool2d: need [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> out(static_cast<std::size_t>(C) * Ho * Wo);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T acc = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            acc += x.data()[static_cast<std::size_t>((c * H + oy * stride + ky) * W + ox * stride + kx)];
        out[static_cast<std::size_t>((c * Ho + oy) * Wo + ox)] = acc * inv;
      }
  auto r = detail::make_result<T>({C, Ho, Wo}, std::move(out), {x});
  if (r.requires_grad()) {
    auto xn = x.node();
    auto* rn = r.node().get();
    rn->backward_fn = [xn, rn, C, H, W, Ho, Wo, k, stride, inv]() {
      xn->ensure_grad();
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            T g = rn->grad[static_cast<std::size_t>((c * Ho + oy) * Wo + ox)] * inv;
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx)
                xn->grad[static_cast<std::size_t>((c * H + oy * stride + ky) * W + ox * stride + kx)] += g;
          }
    };
  }
  return r;
}

// ------------------------------------------------------------------
// backward driver
// ------------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  // reverse topological order via iterative post-order DFS
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      TensorNode<T>* p = node->parents[child++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn && !(*it)->grad.empty()) (*it)->backward_fn();
  }
}

}  // namespace seqco
