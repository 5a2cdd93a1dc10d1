// Autodiff tensor core: forward values against hand/loop oracles, reverse-mode
// gradients against double-precision central differences, broadcasting rules,
// and the no-grad scope.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "seqco/rng.hpp"
#include "seqco/tensor.hpp"

using namespace seqco;

namespace {

// central-difference gradient of a scalar-valued function of one tensor
std::vector<double> fd_grad(Tensor<double>& x, const std::function<double()>& f, double h = 1e-6) {
  std::vector<double> g(x.data().size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    double saved = x.data()[i];
    x.data()[i] = saved + h;
    double fp = f();
    x.data()[i] = saved - h;
    double fm = f();
    x.data()[i] = saved;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("matmul matches the triple-loop oracle") {
  auto a = random_tensor({3, 4}, 1);
  auto b = random_tensor({4, 5}, 2);
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 5});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.value(i * 4 + k) * b.value(k * 5 + j);
      REQUIRE_THAT(c.value(i * 5 + j), Catch::Matchers::WithinAbs(acc, 1e-12));
    }
}

TEST_CASE("batched matmul with a shared right operand") {
  auto a = random_tensor({2, 3, 4}, 3);
  auto b = random_tensor({4, 5}, 4);
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += a.value((n * 3 + i) * 4 + k) * b.value(k * 5 + j);
        REQUIRE_THAT(c.value((n * 3 + i) * 5 + j), Catch::Matchers::WithinAbs(acc, 1e-12));
      }
}

TEST_CASE("suffix broadcasting: bias add over rows") {
  auto a = random_tensor({2, 3}, 5);
  auto b = random_tensor({3}, 6);
  auto c = add(a, b);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      REQUIRE(c.value(i * 3 + j) == a.value(i * 3 + j) + b.value(j));
  // scalar broadcast also works
  auto s = Tensor<double>::scalar(2.5);
  auto d = mul(a, s);
  REQUIRE(d.value(4) == a.value(4) * 2.5);
}

TEST_CASE("incompatible shapes are rejected") {
  auto a = random_tensor({2, 3}, 7);
  auto b = random_tensor({2}, 8);  // {2} is not a suffix of {2,3}
  REQUIRE_THROWS_AS(add(a, b), std::invalid_argument);
  REQUIRE_THROWS_AS(matmul(a, random_tensor({4, 2}, 9)), std::invalid_argument);
  REQUIRE_THROWS_AS(reshape(a, {4, 2}), std::invalid_argument);
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  auto x = random_tensor({2, 3}, 10, false);
  auto w1 = random_tensor({3, 4}, 11);
  auto b1 = random_tensor({4}, 12);
  auto w2 = random_tensor({4, 1}, 13);
  auto b2 = random_tensor({1}, 14);

  auto run = [&]() { return sum(sigmoid(add(matmul(relu(add(matmul(x, w1), b1)), w2), b2))); };
  auto loss = run();
  backward(loss);

  for (Tensor<double>* p : {&w1, &b1, &w2, &b2}) {
    auto numeric = fd_grad(*p, [&]() {
      NoGrad guard;
      return run().value();
    });
    for (std::size_t i = 0; i < numeric.size(); ++i)
      REQUIRE_THAT(p->grad(static_cast<std::int64_t>(i)), Catch::Matchers::WithinAbs(numeric[i], 1e-8));
  }
}

TEST_CASE("softmax, layernorm, and reductions differentiate correctly") {
  auto x = random_tensor({3, 5}, 20);
  auto run = [&]() { return mean(mul(softmax(x), layernorm(x))); };
  backward(run());
  auto numeric = fd_grad(x, [&]() {
    NoGrad guard;
    return run().value();
  });
  for (std::size_t i = 0; i < numeric.size(); ++i)
    REQUIRE_THAT(x.grad(static_cast<std::int64_t>(i)), Catch::Matchers::WithinAbs(numeric[i], 1e-7));
}

TEST_CASE("conv2d and avgpool2d differentiate correctly") {
  auto img = random_tensor({2, 6, 6}, 30);
  auto w = random_tensor({3, 2, 3, 3}, 31);
  auto b = random_tensor({3}, 32);
  auto run = [&]() { return sum(avgpool2d(relu(conv2d(img, w, b, 2, 1)), 2, 2)); };
  backward(run());
  for (Tensor<double>* p : {&img, &w, &b}) {
    auto numeric = fd_grad(*p, [&]() {
      NoGrad guard;
      return run().value();
    });
    for (std::size_t i = 0; i < numeric.size(); ++i)
      REQUIRE_THAT(p->grad(static_cast<std::int64_t>(i)), Catch::Matchers::WithinAbs(numeric[i], 1e-7));
  }
}

TEST_CASE("permute, slice, concat, gather_rows round-trip values and grads") {
  auto x = random_tensor({4, 3}, 40);
  auto run = [&]() {
    auto p = permute(x, {1, 0});                    // [3,4]
    auto s = slice(p, 1, 1, 2);                     // [3,2]
    auto c = concat(std::vector<Tensor<double>>{s, s}, 0);  // [6,2]
    auto g = gather_rows(c, {0, 0, 5});             // [3,2]
    return sum(mul(g, g));
  };
  backward(run());
  auto numeric = fd_grad(x, [&]() {
    NoGrad guard;
    return run().value();
  });
  for (std::size_t i = 0; i < numeric.size(); ++i)
    REQUIRE_THAT(x.grad(static_cast<std::int64_t>(i)), Catch::Matchers::WithinAbs(numeric[i], 1e-7));
}

TEST_CASE("clamp passes gradient strictly inside the interval only") {
  auto x = Tensor<double>::from({3}, {-2.0, 0.25, 3.0}, true);
  backward(sum(clamp(x, 0.0, 1.0)));
  REQUIRE(x.grad(0) == 0.0);
  REQUIRE(x.grad(1) == 1.0);
  REQUIRE(x.grad(2) == 0.0);
}

TEST_CASE("gradients accumulate across shared subexpressions") {
  auto x = Tensor<double>::scalar(3.0, true);
  auto y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1
  backward(y);
  REQUIRE_THAT(x.grad(), Catch::Matchers::WithinAbs(7.0, 1e-12));
}

TEST_CASE("no-grad scope suppresses graph construction and nests") {
  auto x = Tensor<double>::scalar(2.0, true);
  {
    NoGrad a;
    {
      NoGrad b;
      REQUIRE_FALSE(grad_enabled());
    }
    REQUIRE_FALSE(grad_enabled());
    auto y = mul(x, x);
    REQUIRE_FALSE(y.requires_grad());
  }
  REQUIRE(grad_enabled());
  auto y = mul(x, x);
  REQUIRE(y.requires_grad());
  // detached tensors receive no gradient
  auto d = x.detach();
  auto z = mul(d, x);
  backward(z);
  REQUIRE(x.grad() == 2.0);
  REQUIRE_FALSE(d.has_grad());
}

TEST_CASE("backward requires a scalar loss") {
  auto x = random_tensor({2, 2}, 50);
  REQUIRE_THROWS_AS(backward(x), std::invalid_argument);
}

TEST_CASE("identical seeds give identical tensors") {
  auto a = random_tensor({16}, 99);
  auto b = random_tensor({16}, 99);
  REQUIRE(a.data() == b.data());
}
