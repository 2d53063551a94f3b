#include "metaseg/tensor.hpp"

#include "primitive_cases.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

using namespace metaseg;
using metaseg::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return t.to_vector(); }

}  // namespace

TEST_CASE("add and softmax basics") {
  const Tensor a = Tensor::from({2}, {1, 2});
  const Tensor b = Tensor::from({2}, {3, 4});
  CHECK(values(add(a, b)) == std::vector<double>{4, 6});

  const Tensor s = softmax(Tensor::zeros({3}), 0);
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("conv2d of ones is a box sum") {
  const Tensor img = Tensor::full({1, 5, 5}, 1.0);
  const Tensor kernel = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor out = conv2d(img, kernel, Tensor{}, {1, 0});
  CHECK(out.shape() == Shape{1, 3, 3});
  for (double v : out.data()) CHECK(v == 9.0);
}

TEST_CASE("conv2d matches direct summation") {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor(rng, {2, 6, 5});
  const Tensor w = random_tensor(rng, {3, 2, 3, 3});
  const Tensor b = random_tensor(rng, {3});
  const Tensor y = conv2d(x, w, b, {2, 1});
  REQUIRE(y.shape() == Shape{3, 3, 3});
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t oy = 0; oy < 3; ++oy) {
      for (std::size_t ox = 0; ox < 3; ++ox) {
        double acc = b.at(o);
        for (std::size_t c = 0; c < 2; ++c) {
          for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long iy = long(oy * 2 + ky) - 1, ix = long(ox * 2 + kx) - 1;
              if (iy < 0 || iy >= 6 || ix < 0 || ix >= 5) continue;
              acc += w.at(((o * 2 + c) * 3 + ky) * 3 + kx) * x.at((c * 6 + iy) * 5 + ix);
            }
          }
        }
        CHECK(y.at((o * 3 + oy) * 3 + ox) == doctest::Approx(acc).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("shape mismatch names the primitive and both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4});
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("first and second derivatives") {
  const Tensor x = Tensor::leaf({}, {3.0});
  const Tensor y = mul(x, x);
  const Tensor wrt[] = {x};
  CHECK(backward(y, wrt).grads[0].item() == 6.0);

  const Tensor z = Tensor::leaf({}, {2.0});
  const Tensor cube = mul(mul(z, z), z);
  const Tensor zw[] = {z};
  const auto first = backward(cube, zw, true);
  CHECK(first.grads[0].tracked());
  CHECK(first.grads[0].item() == doctest::Approx(12.0));
  const auto second = backward(first.grads[0], zw);
  CHECK(second.grads[0].item() == doctest::Approx(12.0).epsilon(1e-14));
}

TEST_CASE("x sin x second derivative") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-5, 5);
  for (int i = 0; i < 100; ++i) {
    const double v = dist(rng);
    const Tensor x = Tensor::leaf({}, {v});
    const Tensor f = mul(x, sin(x));
    const Tensor wrt[] = {x};
    const auto g1 = backward(f, wrt, true);
    const auto g2 = backward(g1.grads[0], wrt);
    CHECK(std::abs(g2.grads[0].item() - (2 * std::cos(v) - v * std::sin(v))) < 1e-8);
  }
}

TEST_CASE("every primitive matches finite differences") {
  std::mt19937_64 rng(5);
  for (const auto& c : metaseg::testing::primitive_cases()) {
    CAPTURE(c.name);
    for (int i = 0; i < 5; ++i) {
      const auto inputs = c.make_inputs(rng);
      const auto f = metaseg::testing::contracted(c, inputs, rng);
      CHECK(metaseg::testing::gradient_error(f, inputs) < 1e-6);
    }
  }
}

TEST_CASE("two-layer network gradients per component") {
  std::mt19937_64 rng(17);
  const std::vector<Tensor> params{random_tensor(rng, {6, 4}), random_tensor(rng, {6, 1}),
                                   random_tensor(rng, {2, 6}), random_tensor(rng, {2, 1})};
  const Tensor input = random_tensor(rng, {4, 3});
  auto f = [input](const std::vector<Tensor>& p) {
    const Tensor h = tanh(add(matmul(p[0], input), p[1]));
    return sum(square(add(matmul(p[2], h), p[3])));
  };
  const auto analytic = metaseg::testing::analytic_gradient(f, params);
  const auto numeric = metaseg::testing::finite_difference(f, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < analytic[i].size(); ++j) {
      const double denom = std::max({std::abs(analytic[i][j]), std::abs(numeric[i][j]), 1e-3});
      CHECK(std::abs(analytic[i][j] - numeric[i][j]) / denom < 1e-6);
    }
  }
}

TEST_CASE("linearity of backward") {
  std::mt19937_64 rng(23);
  const Tensor x = random_tensor(rng, {3, 3}).as_leaf();
  const Tensor l1 = sum(exp(x));
  const Tensor l2 = sum(mul(x, sin(x)));
  const Tensor wrt[] = {x};
  const double a = 0.7, b = -2.3;
  const auto combined = backward(add(scale(l1, a), scale(l2, b)), wrt).grads[0];
  const auto g1 = backward(l1, wrt).grads[0];
  const auto g2 = backward(l2, wrt).grads[0];
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(std::abs(combined.at(i) - (a * g1.at(i) + b * g2.at(i))) < 1e-12);
  }
}

TEST_CASE("detach stops gradients and preserves bits") {
  const Tensor x = Tensor::leaf({2}, {1, 2});
  const Tensor d = x.detach();
  CHECK_FALSE(d.tracked());
  CHECK(values(d) == std::vector<double>{1, 2});

  std::mt19937_64 rng(1);
  const Tensor r = random_tensor(rng, {7}).as_leaf();
  const Tensor rd = r.detach();
  CHECK(std::memcmp(r.data().data(), rd.data().data(), 7 * sizeof(double)) == 0);

  const Tensor y = Tensor::leaf({2}, {3, 4});
  const Tensor loss = sum(add(mul(x.detach(), x.detach()), y));
  const Tensor wrt[] = {x};
  const auto res = backward(loss, wrt);
  CHECK_FALSE(res.reached[0]);
  CHECK(values(res.grads[0]) == std::vector<double>{0, 0});
}

TEST_CASE("backward preconditions") {
  const Tensor x = Tensor::leaf({2}, {1, 2});
  const Tensor wrt[] = {x};
  CHECK_THROWS_AS((void)backward(mul(x, x), wrt), ShapeError);
  CHECK_THROWS((void)backward(Tensor::scalar(1.0), wrt));
}

TEST_CASE("replay is bitwise deterministic") {
  auto run = [] {
    std::mt19937_64 rng(99);
    const Tensor x = random_tensor(rng, {3, 8, 8}).as_leaf();
    const Tensor w = random_tensor(rng, {4, 3, 3, 3}).as_leaf();
    const Tensor loss = mean(softplus(instance_norm(conv2d(x, w, Tensor{}, {1, 1}))));
    const Tensor wrt[] = {w};
    auto g = backward(loss, wrt).grads[0].to_vector();
    g.push_back(loss.item());
    return g;
  };
  const auto a = run();
  const auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("no-grad mode records nothing") {
  const Tensor x = Tensor::leaf({2}, {1, 2});
  NoGradGuard guard;
  CHECK_FALSE(mul(x, x).tracked());
}
