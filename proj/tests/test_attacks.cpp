#include <doctest.h>

#include <cmath>

#include "advpnml/attacks.hpp"
#include "oracles.hpp"

using namespace advpnml;

namespace {

// p(y = 1 | x) = sigmoid(w x) as a two-logit model [0, w x].
ModelParams<double> logistic(double w) {
  auto p = init_params<double>(ModelSpec::mlp({1, 2}), 0);
  p.at("fc1.weight") = Tensor<double>({2, 1}, std::vector<double>{0.0, w});
  p.at("fc1.bias") = Tensor<double>({2});
  return p;
}

ModelParams<double> random_linear(std::size_t d, std::uint64_t seed) {
  auto p = init_params<double>(ModelSpec::mlp({d, 2}), seed);
  CounterRng rng(seed);
  p.at("fc1.bias") = testing::random_tensor({2}, rng);
  return p;
}

}  // namespace

TEST_CASE("fgsm") {
  const auto model = logistic(1.5);
  const Tensor<double> x({1, 1}, std::vector<double>{0.2});
  const std::vector<int> one{1};

  CHECK(fgsm(model, x, one, 0.0, Direction::kAscend).adversarial == x);

  // dL/dx = -(1 - sigmoid(w x)) w < 0 for label 1 and w > 0.
  const auto up = fgsm(model, x, one, 0.25, Direction::kAscend);
  CHECK(up.adversarial[0] == doctest::Approx(0.2 - 0.25));
  const auto down = fgsm(model, x, one, 0.25, Direction::kDescend);
  CHECK(down.adversarial[0] == doctest::Approx(0.2 + 0.25));
  const double expect_loss = std::log1p(std::exp(-1.5 * (0.2 - 0.25)));
  CHECK(up.loss[0] == doctest::Approx(expect_loss).epsilon(1e-12));

  const auto clamped = fgsm(model, x, one, 0.25, Direction::kAscend, ValueRange::unit());
  CHECK(clamped.adversarial[0] == 0.0);
  CHECK_THROWS_AS(fgsm(model, Tensor<double>({1, 2}), one, 0.1, Direction::kAscend), DimensionError);
}

TEST_CASE("pgd degenerates to fgsm") {
  const auto model = init_params<double>(ModelSpec::mlp({4, 8, 3}), 3);
  CounterRng rng(1);
  const auto x = testing::random_tensor({5, 4}, rng, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 0, 1};
  AttackConfig cfg;
  cfg.epsilon = 0.1;
  cfg.step_size = 0.1;
  cfg.iterations = 1;
  cfg.restarts = 1;
  cfg.random_start = false;
  cfg.clamp = ValueRange::unit();
  CHECK(pgd(model, x, y, cfg).adversarial == fgsm(model, x, y, 0.1, Direction::kAscend, ValueRange::unit()).adversarial);
}

TEST_CASE("pgd constraints, reproducibility and restarts") {
  const auto model = init_params<float>(ModelSpec::mlp({6, 16, 4}), 8);
  CounterRng rng(2);
  const auto x = testing::random_tensor({20, 6}, rng, 0.0, 1.0).cast<float>();
  std::vector<int> y(20);
  for (int& v : y) v = static_cast<int>(rng.below(4));
  AttackConfig cfg;
  cfg.epsilon = 0.2;
  cfg.step_size = 0.05;
  cfg.iterations = 7;
  cfg.restarts = 2;
  cfg.clamp = ValueRange::unit();
  cfg.seed = 33;
  const auto a = pgd(model, x, y, cfg);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(std::abs(a.adversarial[i] - x[i]) <= cfg.epsilon + 1e-6);
    CHECK(a.adversarial[i] >= 0.0f);
    CHECK(a.adversarial[i] <= 1.0f);
  }
  CHECK(clamp_project(a.adversarial, x, cfg.epsilon, cfg.clamp) == a.adversarial);
  CHECK(pgd(model, x, y, cfg).adversarial == a.adversarial);

  std::vector<double> previous;
  for (int r = 1; r <= 4; ++r) {
    cfg.restarts = r;
    const auto res = pgd(model, x, y, cfg);
    if (!previous.empty()) {
      for (std::size_t i = 0; i < previous.size(); ++i) CHECK(res.loss[i] >= previous[i]);
    }
    previous = res.loss;
  }
}

TEST_CASE("targeted pgd lowers the target loss") {
  const auto model = init_params<double>(ModelSpec::mlp({3, 16, 3}), 4);
  CounterRng rng(4);
  const auto x = testing::random_tensor({10, 3}, rng);
  const std::vector<int> target(10, 2);
  AttackConfig cfg;
  cfg.epsilon = 0.5;
  cfg.step_size = 0.05;
  cfg.iterations = 20;
  cfg.mode = AttackMode::kTargeted;
  const auto res = pgd(model, x, target, cfg);
  const auto before = ModelSurface<double>(model).evaluate(x, target);
  for (std::size_t i = 0; i < 10; ++i) CHECK(res.loss[i] < before.loss[i]);
}

TEST_CASE("hsja on a linear model recovers the boundary distance") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const std::size_t d = 10;
    const auto model = random_linear(d, seed);
    CounterRng rng(seed + 100);
    const auto x = testing::random_tensor({d}, rng);
    const int y = predict_labels(model, x.reshaped({1, d})).front();
    const auto& w = model.at("fc1.weight");
    const auto& b = model.at("fc1.bias");
    double dot = b[1] - b[0], norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = w[d + i] - w[i];
      dot += diff * x[i];
      norm += diff * diff;
    }
    const double analytic = std::abs(dot) / std::sqrt(norm);

    const DecisionOracle<double> oracle = [&](const Tensor<double>& batch) { return predict_labels(model, batch); };
    HsjaConfig cfg;
    cfg.query_budget = 5000;
    cfg.seed = seed;
    const auto res = hsja(oracle, x, y, cfg);
    REQUIRE(res.success.front());
    CHECK(res.queries <= cfg.query_budget);
    CHECK(predict_labels(model, res.adversarial.reshaped({1, d})).front() != y);
    CHECK(std::abs(l2_distance(res.adversarial, x) - res.loss.front()) <= 1e-9);
    INFO("analytic " << analytic << " found " << res.loss.front());
    CHECK(std::abs(res.loss.front() - analytic) <= 0.05 * analytic);
  }
}

TEST_CASE("hsja budget and monotonicity") {
  const auto model = random_linear(8, 7);
  CounterRng rng(70);
  const auto x = testing::random_tensor({8}, rng);
  const int y = predict_labels(model, x.reshaped({1, 8})).front();
  std::size_t calls = 0;
  const DecisionOracle<double> oracle = [&](const Tensor<double>& batch) {
    calls += batch.dim(0);
    return predict_labels(model, batch);
  };
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t budget : {60u, 200u, 800u, 3000u}) {
    calls = 0;
    HsjaConfig cfg;
    cfg.query_budget = budget;
    cfg.seed = 5;
    const auto res = hsja(oracle, x, y, cfg);
    CHECK(res.queries <= budget);
    CHECK(calls == res.queries);
    if (res.success.front()) {
      CHECK(res.loss.front() <= previous);
      previous = res.loss.front();
    }
  }

  const DecisionOracle<double> constant = [&](const Tensor<double>& batch) {
    return std::vector<int>(batch.dim(0), y);
  };
  HsjaConfig cfg;
  cfg.query_budget = 50;
  const auto fail = hsja(constant, x, y, cfg);
  CHECK_FALSE(fail.success.front());
  CHECK(fail.queries <= 50);
}
