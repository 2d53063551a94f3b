#include "metaseg/losses.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace metaseg;
using metaseg::testing::random_tensor;

namespace {

LabelMap random_labels(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t k) {
  LabelMap l{h, w, std::vector<std::uint8_t>(h * w)};
  std::uniform_int_distribution<int> d(0, static_cast<int>(k) - 1);
  for (auto& v : l.labels) v = static_cast<std::uint8_t>(d(rng));
  return l;
}

// Critic k on one feature vector, written with plain loops.
double critic_scalar(const ParameterSet& p, std::size_t k, const std::vector<double>& f) {
  const std::string prefix = "C." + std::to_string(k);
  const auto w1 = p.get(prefix + ".fc1.weight").data();
  const auto b1 = p.get(prefix + ".fc1.bias").data();
  const auto w2 = p.get(prefix + ".fc2.weight").data();
  const double b2 = p.get(prefix + ".fc2.bias").data()[0];
  const std::size_t hidden = b1.size(), c = f.size();
  double out = b2;
  for (std::size_t j = 0; j < hidden; ++j) {
    double h = b1[j];
    for (std::size_t i = 0; i < c; ++i) h += w1[j * c + i] * f[i];
    out += w2[j] * std::max(h, 0.0);
  }
  return std::log1p(std::exp(out));
}

}  // namespace

TEST_CASE("aggregate loss with the default weights") {
  const LossWeights w;
  const Tensor l = agg_loss(Tensor::scalar(1), Tensor::scalar(2), Tensor::scalar(3), w);
  CHECK(l.item() == 15.0);
}

TEST_CASE("weights validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.critic = -0.1;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  w = LossWeights{};
  w.meta = NAN;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}

TEST_CASE("segmentation loss") {
  SUBCASE("uniform logits give ln K") {
    std::mt19937_64 rng(0);
    const LabelMap y = random_labels(rng, 6, 7, 5);
    // log carries a 1e-12 guard, so the match is to that level
    CHECK(std::abs(seg_loss(Tensor::zeros({5, 6, 7}), y).item() - std::log(5.0)) < 1e-12);
  }
  SUBCASE("matches a per-pixel log-sum-exp oracle") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor logits = random_tensor(rng, {4, 5, 3}, -4, 4);
      const LabelMap y = random_labels(rng, 5, 3, 4);
      const auto v = logits.data();
      double oracle = 0;
      for (std::size_t i = 0; i < 15; ++i) {
        double m = -INFINITY;
        for (std::size_t k = 0; k < 4; ++k) m = std::max(m, v[k * 15 + i]);
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += std::exp(v[k * 15 + i] - m);
        oracle += m + std::log(s) - v[y.labels[i] * 15 + i];
      }
      CHECK(std::abs(seg_loss(logits, y).item() - oracle / 15) < 1e-12);
    }
  }
  SUBCASE("label range and shape are checked") {
    LabelMap y{2, 2, {0, 1, 5, 0}};
    CHECK_THROWS_AS((void)seg_loss(Tensor::zeros({5, 2, 2}), y), std::invalid_argument);
    y.labels[2] = 0;
    CHECK_THROWS_AS((void)seg_loss(Tensor::zeros({5, 3, 2}), y), ShapeError);
  }
}

TEST_CASE("reconstruction loss is the mean absolute error") {
  const Tensor a = Tensor::from({1, 2, 2}, {0.1, 0.5, 0.9, 0.0});
  const Tensor b = Tensor::from({1, 2, 2}, {0.2, 0.5, 0.6, 0.4});
  CHECK(recon_loss(a, b).item() == doctest::Approx((0.1 + 0 + 0.3 + 0.4) / 4).epsilon(1e-15));
  CHECK_THROWS_AS((void)recon_loss(a, Tensor::zeros({1, 2, 3})), ShapeError);
}

TEST_CASE("Gram matrix") {
  const Tensor f = Tensor::from({2, 1, 2}, {1, 2, 3, 4});
  CHECK(gram_matrix(f).to_vector() == std::vector<double>{2.5, 5.5, 5.5, 12.5});
}

TEST_CASE("perceptual loss on a hand-computed one-level extractor") {
  // Level 0 keeps the red channel; it is both the style and the content level.
  PerceptualExtractor ex({{Tensor::from({1, 3, 1, 1}, {1, 0, 0}), Tensor::zeros({1})}}, {0},
                         {0});
  auto image = [](std::vector<double> red) {
    std::vector<double> v(red);
    v.resize(12, 0.7);
    return Tensor::from({3, 2, 2}, v);
  };
  const Tensor t = image({0.2, 0.4, 0.6, 0.8});
  const Tensor c = image({0.1, 0.4, 0.5, 1.0});
  const Tensor s = image({0.3, 0.3, 0.3, 0.3});
  // content: mean((t - c)^2) = 0.015; style: (0.3 - 0.09)^2 = 0.0441
  CHECK(perceptual_loss(t, c, s, ex).item() == doctest::Approx(0.0591).epsilon(1e-13));
}

TEST_CASE("default extractor is frozen and seeded") {
  const PerceptualExtractor a(1234), b(1234);
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor(rng, {3, 16, 16}, 0, 1);
  const auto fa = a.features(x), fb = b.features(x);
  REQUIRE(fa.size() == 3);
  CHECK(fa[0].shape() == Shape{8, 16, 16});
  CHECK(fa[2].shape() == Shape{32, 4, 4});
  CHECK(fa[2].to_vector() == fb[2].to_vector());
  CHECK(perceptual_loss(x, x, x, a).item() == 0.0);
}

TEST_CASE("critic loss matches a brute-force indicator sum") {
  TaskSpec task;
  task.classes = 3;
  task.class_names = {"a", "b", "c"};
  task.height = task.width = 16;
  ArchConfig arch;
  arch.feature_channels = 4;
  arch.critic_hidden = 5;
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto params = init_models(task, arch, trial);
    const Tensor features = random_tensor(rng, {4, 8, 8}, -1, 1);
    LabelMap y = random_labels(rng, 8, 8, 3);
    if (trial % 4 == 0) {
      for (auto& v : y.labels) v = v == 2 ? 0 : v;  // class 2 absent
    }
    const auto fv = features.data();
    double total = 0;
    int present = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      double s = 0;
      int n = 0;
      for (std::size_t i = 0; i < 64; ++i) {
        if (y.labels[i] != k) continue;
        std::vector<double> f(4);
        for (std::size_t c = 0; c < 4; ++c) f[c] = fv[c * 64 + i];
        s += critic_scalar(params, k, f);
        ++n;
      }
      const auto l = critic_class_loss(features, y, k, params);
      CHECK(l.has_value() == (n > 0));
      if (n == 0) continue;
      CHECK(std::abs(l->item() - s / n) < 1e-12);
      total += s / n;
      ++present;
    }
    CHECK(std::abs(critic_loss(features, y, params).item() - total / present) < 1e-12);
  }
  const auto params = init_models(task, arch, 0);
  CHECK_THROWS_AS((void)critic_loss(Tensor::zeros({4, 0, 0}), LabelMap{}, params),
                  std::invalid_argument);
}

TEST_CASE("meta objective") {
  const LossWeights w;
  CHECK(meta_objective(Tensor::scalar(0.8), Tensor::scalar(0.8), w).item() == 0.0);
  const double v = meta_objective(Tensor::scalar(1.2), Tensor::scalar(0.7), w).item();
  CHECK(v == doctest::Approx(-5e4 * std::tanh(0.5)).epsilon(1e-14));
  CHECK(v == doctest::Approx(-23105.86).epsilon(1e-6));
}
