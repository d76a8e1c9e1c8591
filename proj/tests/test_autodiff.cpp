#include <doctest.h>

#include <cmath>

#include "advpnml/autodiff.hpp"
#include "oracles.hpp"

using namespace advpnml;
using advpnml::testing::max_rel_err;
using advpnml::testing::random_tensor;

namespace {

Tensor<double> mat(Shape shape, std::vector<double> v) { return Tensor<double>(std::move(shape), std::move(v)); }

}  // namespace

TEST_CASE("matmul values") {
  Tape<double> tape;
  const Var eye = tape.constant(mat({2, 2}, {1, 0, 0, 1}));
  const Var m = tape.constant(mat({2, 2}, {1, 2, 3, 4}));
  CHECK(tape.value(matmul(tape, eye, m)) == mat({2, 2}, {1, 2, 3, 4}));
  const Var a = tape.constant(mat({1, 2}, {1, 2}));
  const Var b = tape.constant(mat({2, 1}, {3, 4}));
  CHECK(tape.value(matmul(tape, a, b)).item() == 11.0);
  CHECK_THROWS_AS(matmul(tape, a, a), DimensionError);
}

TEST_CASE("conv2d values") {
  Tape<double> tape;
  CounterRng rng(3);
  const Tensor<double> x = random_tensor({1, 4, 4}, rng);
  const Var doubled = conv2d(tape, tape.constant(x), tape.constant(mat({1, 1, 1, 1}, {2})),
                             tape.constant(mat({1}, {0})), 0);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(tape.value(doubled)[i] == 2.0 * x[i]);

  const Var nine = conv2d(tape, tape.constant(Tensor<double>({1, 3, 3}, 1.0)),
                          tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0)), tape.constant(mat({1}, {0})), 0);
  CHECK(tape.value(nine).shape() == Shape{1, 1, 1});
  CHECK(tape.value(nine).item() == 9.0);

  CHECK_THROWS_AS(conv2d(tape, tape.constant(Tensor<double>({1, 2, 2}, 1.0)),
                         tape.constant(Tensor<double>({1, 1, 5, 5}, 1.0)), tape.constant(mat({1}, {0})), 1),
                  DimensionError);
}

TEST_CASE("conv2d padding keeps the extent") {
  Tape<double> tape;
  const Var y = conv2d(tape, tape.constant(Tensor<double>({1, 28, 28}, 1.0)),
                       tape.constant(Tensor<double>({32, 1, 5, 5}, 1.0)), tape.constant(Tensor<double>({32})), 2);
  CHECK(tape.value(y).shape() == Shape{32, 28, 28});
  // Corner sees a 3x3 patch of ones, the centre all 25.
  CHECK(tape.value(y)[0] == 9.0);
  CHECK(tape.value(y)[14 * 28 + 14] == 25.0);
}

TEST_CASE("maxpool2d values and tie rule") {
  Tape<double> tape;
  CHECK(tape.value(maxpool2d(tape, tape.constant(mat({1, 2, 2}, {1, 2, 3, 4})))).item() == 4.0);
  CHECK_THROWS_AS(maxpool2d(tape, tape.constant(Tensor<double>({1, 3, 4}))), DimensionError);

  const Var x = tape.leaf(Tensor<double>({1, 4, 4}, 7.0), "x");
  const Var y = maxpool2d(tape, x);
  CHECK(tape.value(y) == Tensor<double>({1, 2, 2}, 7.0));
  const auto g = tape.backward(sum(tape, y))[x];
  const std::vector<double> expect{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
  CHECK(g == mat({1, 4, 4}, expect));
}

TEST_CASE("relu values and gradient") {
  Tape<double> tape;
  const Var x = tape.leaf(mat({3}, {-1, 0, 2}), "x");
  const Var y = relu(tape, x);
  CHECK(tape.value(y) == mat({3}, {0, 0, 2}));
  CHECK(tape.backward(sum(tape, y))[x] == mat({3}, {0, 0, 1}));

  Tape<double> neg;
  const Var z = neg.leaf(Tensor<double>({4}, -3.0), "z");
  const Var r = relu(neg, z);
  CHECK(neg.value(r) == Tensor<double>({4}, 0.0));
  CHECK(neg.backward(sum(neg, r))[z] == Tensor<double>({4}, 0.0));
}

TEST_CASE("softmax cross entropy") {
  Tape<double> tape;
  const std::vector<int> zero{0};
  CHECK(tape.value(softmax_cross_entropy(tape, tape.constant(Tensor<double>({10}, 0.3)), zero)).item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));
  const double big = tape.value(softmax_cross_entropy(tape, tape.constant(mat({2}, {1000, 0})), zero)).item();
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(0.0));
  CHECK_THROWS_AS(softmax_cross_entropy(tape, tape.constant(mat({2}, {0, 0})), std::vector<int>{2}), IndexError);

  SUBCASE("gradient is softmax minus one-hot") {
    CounterRng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      Tape<double> t;
      const auto logits = random_tensor({6}, rng, -4.0, 4.0);
      const std::vector<int> label{static_cast<int>(rng.below(6))};
      const Var l = t.leaf(logits, "logits");
      const auto g = t.backward(softmax_cross_entropy(t, l, label))[l];
      // Independent softmax.
      double m = logits[0];
      for (double v : logits.data()) m = std::max(m, v);
      double s = 0.0;
      for (double v : logits.data()) s += std::exp(v - m);
      for (std::size_t i = 0; i < 6; ++i) {
        const double expect = std::exp(logits[i] - m) / s - (static_cast<int>(i) == label[0] ? 1.0 : 0.0);
        CHECK(std::abs(g[i] - expect) <= 1e-10);
      }
    }
  }
}

TEST_CASE("softmax rows sum to one") {
  CounterRng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = softmax(random_tensor({3, 7}, rng, -50.0, 50.0));
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += p[r * 7 + c];
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("backward contract") {
  Tape<double> tape;
  const Var x = tape.leaf(mat({2, 2}, {1, 2, 3, 4}), "x");
  CHECK(tape.backward(sum(tape, x))[x] == Tensor<double>({2, 2}, 1.0));
  CHECK_THROWS_AS(tape.backward(x), ContractError);

  SUBCASE("unreached leaves get zero gradients") {
    Tape<double> t;
    const Var a = t.leaf(mat({2}, {1, 2}), "a");
    const Var b = t.leaf(mat({3}, {1, 2, 3}), "b");
    const auto g = t.backward(sum(t, a));
    CHECK(g.size() == 2);
    CHECK(g[b] == Tensor<double>({3}, 0.0));
  }
}

TEST_CASE("gradients are deterministic across tapes") {
  auto run = [] {
    CounterRng rng(42);
    Tape<float> t;
    const Var w = t.leaf(random_tensor({4, 6}, rng).cast<float>(), "w");
    const Var x = t.leaf(random_tensor({3, 6}, rng).cast<float>(), "x");
    const Var b = t.leaf(random_tensor({4}, rng).cast<float>(), "b");
    const Var z = relu(t, linear(t, x, w, b));
    const auto g = t.backward(softmax_cross_entropy(t, z, std::vector<int>{0, 3, 1}));
    return std::pair{g[w], g[x]};
  };
  CHECK(run() == run());
}

TEST_CASE("finite-difference checks of every op") {
  for (const auto& r : testing::run_gradient_checks(1234, 3)) {
    INFO(r.name << " max rel err " << r.max_rel_err);
    CHECK(r.passed());
  }
}

TEST_CASE("sign of analytic gradient matches sign of the finite-difference gradient") {
  CounterRng rng(77);
  const auto w = random_tensor({3, 5}, rng);
  const auto b = random_tensor({3}, rng);
  const auto x = random_tensor({2, 5}, rng);
  const std::vector<int> labels{2, 0};
  auto f = [&](const Tensor<double>& xi) {
    Tape<double> t;
    return t.value(softmax_cross_entropy(t, linear(t, t.constant(xi), t.constant(w), t.constant(b)), labels)).item();
  };
  Tape<double> t;
  const Var xv = t.leaf(x, "x");
  const auto g = t.backward(softmax_cross_entropy(t, linear(t, xv, t.constant(w), t.constant(b)), labels))[xv];
  const auto fd = testing::fd_gradient(f, x, 1e-5);
  const auto sg = sign(g), sfd = sign(fd);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (std::abs(g[i]) > 1e-8) CHECK(sg[i] == sfd[i]);
  }
  CHECK(max_rel_err(g, fd) <= 1e-6);
}

TEST_CASE("straight_through forwards the given value and passes gradients unchanged") {
  Tape<double> tape;
  const Var x = tape.leaf(mat({2}, {1, 2}), "x");
  const Var s = straight_through(tape, x, mat({2}, {5, -5}));
  CHECK(tape.value(s) == mat({2}, {5, -5}));
  const Var y = matmul(tape, reshape(tape, s, Shape{1, 2}), tape.constant(mat({2, 1}, {3, 4})));
  CHECK(tape.backward(sum(tape, y))[x] == mat({2}, {3, 4}));
}
