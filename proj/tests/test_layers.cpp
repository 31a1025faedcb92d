#include "hetfed/layers.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace hetfed;
using namespace hetfed::testing;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-3;

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("shape and grad invariants") {
    TensorF t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(t.values().size() == shape_size(t.shape()));
    CHECK_FALSE(t.has_grad());
    CHECK(t.grad().size() == t.size());
    CHECK(t.has_grad());
    t.zero_grad();
    CHECK(t.grad().isZero());
    CHECK_THROWS_AS(TensorF({2, 2}, TensorF::Vector::Zero(3)), ShapeError);
    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
    CHECK(t.reshaped({6, 4}).shape() == Shape{6, 4});
  }

  TEST_CASE("at indexes row-major") {
    TensorD t({2, 3});
    for (Index i = 0; i < 6; ++i) t[i] = static_cast<double>(i);
    CHECK(t.at(1, 2) == 5.0);
    CHECK(t.at(0, 1) == 1.0);
  }

  TEST_CASE("conv2d zero weight gives zero output") {
    Rng rng(1);
    const TensorD x = random_tensor({2, 3, 5, 5}, rng);
    const TensorD w = TensorD::zeros({4, 3, 3, 3});
    CHECK(conv2d(x, w).values().isZero());
  }

  TEST_CASE("conv2d ones on ones") {
    const TensorD x = TensorD::constant({1, 1, 3, 3}, 1.0);
    const TensorD w = TensorD::constant({1, 1, 3, 3}, 1.0);
    const TensorD y = conv2d(x, w);
    const std::vector<double> expected = {4, 6, 4, 6, 9, 6, 4, 6, 4};
    REQUIRE(y.shape() == Shape{1, 1, 3, 3});
    for (Index i = 0; i < 9; ++i) CHECK(y[i] == expected[static_cast<std::size_t>(i)]);
  }

  TEST_CASE("conv2d rejects channel mismatch") {
    CHECK_THROWS_AS(conv2d(TensorD({1, 2, 4, 4}), TensorD({3, 1, 3, 3})), ShapeError);
    CHECK_THROWS_AS(conv2d(TensorD({1, 1, 4, 4}), TensorD({3, 1, 5, 5})), ShapeError);
  }

  TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < kInstances; ++trial) {
      TensorD x = random_tensor({2, 2, 5, 5}, rng);
      TensorD w = random_tensor({3, 2, 3, 3}, rng);
      const TensorD r = random_tensor({2, 3, 5, 5}, rng);
      const auto g = conv2d_backward(x, w, r);
      auto loss = [&] { return project(conv2d(x, w), r); };
      CHECK(rel_error(numeric_grad(x, loss), g.input.values()) <= kTol);
      CHECK(rel_error(numeric_grad(w, loss), g.weight.values()) <= kTol);
    }
  }

  TEST_CASE("conv2d is linear in the input") {
    Rng rng(12);
    const TensorD x = random_tensor({2, 3, 6, 6}, rng);
    const TensorD y = random_tensor({2, 3, 6, 6}, rng);
    const TensorD w = random_tensor({4, 3, 3, 3}, rng);
    TensorD sum = x;
    sum.values() += y.values();
    TensorD scaled = x;
    scaled.values() *= 2.5;
    const auto lhs = conv2d(sum, w).values();
    const auto rhs = (conv2d(x, w).values() + conv2d(y, w).values()).eval();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((conv2d(scaled, w).values() - 2.5 * conv2d(x, w).values()).cwiseAbs().maxCoeff() <
          1e-12);
  }

  TEST_CASE("batchnorm constant input normalizes to zero") {
    BatchNormState<double> bn(2);
    const TensorD x = TensorD::constant({3, 2, 4, 4}, 3.0);
    CHECK(batchnorm2d(x, bn, true).values().cwiseAbs().maxCoeff() < 1e-6);
  }

  TEST_CASE("batchnorm of standardized input is the identity") {
    BatchNormState<double> bn(2);
    bn.epsilon = 1e-12;
    TensorD x({2, 2, 2, 2});
    for (Index i = 0; i < x.size(); ++i) x[i] = (i % 2 == 0) ? 1.0 : -1.0;
    const TensorD y = batchnorm2d(x, bn, true);
    CHECK((y.values() - x.values()).cwiseAbs().maxCoeff() < 1e-9);
  }

  TEST_CASE("batchnorm running statistics follow the moving average") {
    Rng rng(13);
    const Index n = 4, c = 3, hw = 5;
    const TensorD x = random_tensor({n, c, 1, hw}, rng, -2.0, 3.0);
    BatchNormState<double> bn(c);
    batchnorm2d(x, bn, true);
    for (Index ch = 0; ch < c; ++ch) {
      double mean = 0.0;
      for (Index i = 0; i < n; ++i)
        for (Index k = 0; k < hw; ++k) mean += x.at(i, ch, 0, k);
      mean /= static_cast<double>(n * hw);
      double ss = 0.0;
      for (Index i = 0; i < n; ++i)
        for (Index k = 0; k < hw; ++k) ss += (x.at(i, ch, 0, k) - mean) * (x.at(i, ch, 0, k) - mean);
      const double unbiased = ss / static_cast<double>(n * hw - 1);
      CHECK(bn.running_mean[ch] == doctest::Approx(0.1 * mean).epsilon(1e-12));
      CHECK(bn.running_var[ch] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-12));
    }
  }

  TEST_CASE("batchnorm eval mode uses running statistics and leaves them alone") {
    Rng rng(14);
    BatchNormState<double> bn(2);
    bn.running_mean = TensorD({2}, {0.5, -1.0});
    bn.running_var = TensorD({2}, {4.0, 0.25});
    bn.gamma = TensorD({2}, {2.0, 1.0});
    bn.beta = TensorD({2}, {0.0, 3.0});
    const TensorD x = random_tensor({3, 2, 2, 2}, rng);
    const BatchNormState<double> before = bn;
    const TensorD y = batchnorm2d(x, bn, false);
    for (Index i = 0; i < 3; ++i)
      for (Index ch = 0; ch < 2; ++ch)
        for (Index k = 0; k < 4; ++k) {
          const double expect = bn.gamma[ch] * (x.at(i, ch, k / 2, k % 2) - bn.running_mean[ch]) /
                                    std::sqrt(bn.running_var[ch] + bn.epsilon) +
                                bn.beta[ch];
          CHECK(y.at(i, ch, k / 2, k % 2) == doctest::Approx(expect).epsilon(1e-12));
        }
    CHECK(bn.running_mean == before.running_mean);
    CHECK(bn.running_var == before.running_var);
  }

  TEST_CASE("batchnorm rejects channel mismatch") {
    BatchNormState<double> bn(3);
    CHECK_THROWS_AS(batchnorm2d(TensorD({2, 2, 2, 2}), bn, true), ShapeError);
  }

  TEST_CASE("batchnorm gradients match finite differences") {
    Rng rng(15);
    for (int trial = 0; trial < kInstances; ++trial) {
      TensorD x = random_tensor({3, 2, 3, 3}, rng, -2.0, 2.0);
      BatchNormState<double> bn(2);
      bn.gamma = random_tensor({2}, rng, 0.5, 1.5);
      bn.beta = random_tensor({2}, rng);
      const TensorD r = random_tensor({3, 2, 3, 3}, rng);
      BatchNormCache<double> cache;
      BatchNormState<double> scratch = bn;
      batchnorm2d(x, scratch, true, &cache);
      const auto g = batchnorm2d_backward(cache, bn.gamma, r);
      auto loss = [&] {
        BatchNormState<double> s = bn;
        return project(batchnorm2d(x, s, true), r);
      };
      CHECK(rel_error(numeric_grad(x, loss), g.input.values()) <= kTol);
      CHECK(rel_error(numeric_grad(bn.gamma, loss), g.gamma.values()) <= kTol);
      CHECK(rel_error(numeric_grad(bn.beta, loss), g.beta.values()) <= kTol);
    }
  }

  TEST_CASE("maxpool picks the window maximum and routes its gradient") {
    const TensorD x({1, 1, 2, 2}, {1, 2, 3, 4});
    MaxPoolCache cache;
    const TensorD y = maxpool2d(x, &cache);
    REQUIRE(y.size() == 1);
    CHECK(y[0] == 4.0);
    const TensorD g = maxpool2d_backward(cache, TensorD({1, 1, 1, 1}, {1.0}));
    CHECK(g == TensorD({1, 1, 2, 2}, {0, 0, 0, 1}));
  }

  TEST_CASE("maxpool ties go to the first element in row-major order") {
    const TensorD x({1, 1, 2, 2}, {7, 7, 7, 7});
    MaxPoolCache cache;
    maxpool2d(x, &cache);
    const TensorD g = maxpool2d_backward(cache, TensorD({1, 1, 1, 1}, {1.0}));
    CHECK(g == TensorD({1, 1, 2, 2}, {1, 0, 0, 0}));
  }

  TEST_CASE("maxpool rejects odd spatial size") {
    CHECK_THROWS_AS(maxpool2d(TensorD({1, 1, 3, 4})), ShapeError);
    CHECK_THROWS_AS(maxpool2d(TensorD({1, 1, 4, 5})), ShapeError);
  }

  TEST_CASE("maxpool gradients match finite differences and conserve mass") {
    Rng rng(16);
    for (int trial = 0; trial < kInstances; ++trial) {
      TensorD x = untied_tensor({2, 2, 4, 4}, rng);
      const TensorD r = random_tensor({2, 2, 2, 2}, rng);
      MaxPoolCache cache;
      maxpool2d(x, &cache);
      const TensorD g = maxpool2d_backward(cache, r);
      auto loss = [&] { return project(maxpool2d(x), r); };
      CHECK(rel_error(numeric_grad(x, loss), g.values()) <= kTol);
      CHECK(g.values().sum() == doctest::Approx(r.values().sum()).epsilon(1e-12));
    }
  }

  TEST_CASE("linear identity and hand product") {
    const TensorD x({1, 2}, {1, 1});
    CHECK(linear(x, TensorD({2, 2}, {1, 0, 0, 1})) == x);
    CHECK(linear(x, TensorD({2, 2}, {1, 2, 3, 4})) == TensorD({1, 2}, {3, 7}));
    CHECK_THROWS_AS(linear(x, TensorD({2, 3})), ShapeError);
  }

  TEST_CASE("linear gradients match finite differences") {
    Rng rng(17);
    for (int trial = 0; trial < kInstances; ++trial) {
      TensorD x = random_tensor({3, 6}, rng);
      TensorD w = random_tensor({4, 6}, rng);
      const TensorD r = random_tensor({3, 4}, rng);
      const auto g = linear_backward(x, w, r);
      auto loss = [&] { return project(linear(x, w), r); };
      CHECK(rel_error(numeric_grad(x, loss), g.input.values()) <= kTol);
      CHECK(rel_error(numeric_grad(w, loss), g.weight.values()) <= kTol);
    }
  }

  TEST_CASE("sigmoid values and saturation") {
    const TensorD y = sigmoid(TensorD({3}, {0.0, 100.0, -100.0}));
    CHECK(y[0] == 0.5);
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(y[2] >= 0.0);
    CHECK(y.all_finite());
  }

  TEST_CASE("sigmoid gradient matches finite differences") {
    Rng rng(18);
    for (int trial = 0; trial < kInstances; ++trial) {
      TensorD x = random_tensor({4, 5}, rng, -4.0, 4.0);
      const TensorD r = random_tensor({4, 5}, rng);
      const TensorD g = sigmoid_backward(sigmoid(x), r);
      auto loss = [&] { return project(sigmoid(x), r); };
      CHECK(rel_error(numeric_grad(x, loss), g.values()) <= kTol);
    }
  }

  TEST_CASE("mse loss values") {
    const TensorD a({1, 2}, {1, 0});
    CHECK(mse_loss(a, a) == 0.0);
    CHECK(mse_loss(a, TensorD({1, 2}, {0, 0})) == 0.5);
    CHECK_THROWS_AS(mse_loss(a, TensorD({2, 1})), ShapeError);
  }

  TEST_CASE("mse gradient matches finite differences") {
    Rng rng(19);
    for (int trial = 0; trial < kInstances; ++trial) {
      TensorD p = random_tensor({3, 4}, rng);
      const TensorD t = random_tensor({3, 4}, rng);
      const TensorD g = mse_loss_backward(p, t);
      auto loss = [&] { return mse_loss(p, t); };
      CHECK(rel_error(numeric_grad(p, loss), g.values()) <= kTol);
    }
  }

  TEST_CASE("sgd step") {
    CHECK(sgd_step(TensorD({1}, {1.0}), TensorD({1}, {0.5}), 0.1)[0] == doctest::Approx(0.95));
    const TensorD p({2}, {1, 2});
    CHECK(sgd_step(p, TensorD::zeros({2}), 0.3) == p);
    CHECK(sgd_step(p, TensorD({2}, {1, -1}), 0.5) == TensorD({2}, {0.5, 2.5}));
    CHECK_THROWS_AS(sgd_step(p, TensorD({3}), 0.1), ShapeError);
    CHECK_THROWS(sgd_step(p, p, -0.1));
  }

  TEST_CASE("forward passes are deterministic") {
    Rng rng(20);
    const TensorF x = random_tensor({2, 3, 8, 8}, rng).cast<float>();
    const TensorF w = random_tensor({4, 3, 3, 3}, rng).cast<float>();
    CHECK(conv2d(x, w) == conv2d(x, w));
    BatchNormState<float> a(3), b(3);
    CHECK(batchnorm2d(x, a, true) == batchnorm2d(x, b, true));
    CHECK(maxpool2d(x) == maxpool2d(x));
  }

  TEST_CASE("outputs stay finite on finite inputs") {
    Rng rng(21);
    const TensorD x = random_tensor({2, 3, 8, 8}, rng, -50.0, 50.0);
    BatchNormState<double> bn(3);
    const TensorD y = sigmoid(batchnorm2d(conv2d(x, random_tensor({3, 3, 3, 3}, rng)), bn, true));
    CHECK(y.all_finite());
    CHECK(maxpool2d(y).all_finite());
  }
}
