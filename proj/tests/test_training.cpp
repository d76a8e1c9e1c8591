#include <doctest.h>

#include <sstream>

#include "advpnml/training.hpp"
#include "oracles.hpp"

using namespace advpnml;

namespace {

ModelParams<double> scalar_model(double w) {
  auto p = init_params<double>(ModelSpec::mlp({1, 1}), 0);
  p.at("fc1.weight")[0] = w;
  p.at("fc1.bias")[0] = 0.0;
  return p;
}

GradientMap<double> grads_of(const ModelParams<double>& p, double gw, double gb) {
  GradientMap<double> g;
  g.insert(Var{0}, "fc1.weight", Tensor<double>(p.at("fc1.weight").shape(), gw));
  g.insert(Var{1}, "fc1.bias", Tensor<double>(p.at("fc1.bias").shape(), gb));
  return g;
}

LabeledSet toy(std::size_t n, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_per_class = n;
  spec.seed = seed;
  return gen_synthetic(spec);
}

}  // namespace

TEST_CASE("sgd_update") {
  SUBCASE("plain gradient descent") {
    auto p = scalar_model(1.0);
    SgdState<double> s;
    sgd_update(p, grads_of(p, 0.5, -2.0), 0.1, 0.0, 0.0, s);
    CHECK(p.at("fc1.weight")[0] == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(p.at("fc1.bias")[0] == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("zero gradient and decay leave params unchanged") {
    auto p = scalar_model(1.0);
    const auto before = p;
    SgdState<double> s;
    sgd_update(p, grads_of(p, 0.0, 0.0), 0.1, 0.9, 0.0, s);
    CHECK(p == before);
  }
  SUBCASE("two steps on f(w) = w^2 / 2 follow the velocity recursion") {
    const double lr = 0.1, m = 0.9, wd = 0.01;
    auto p = scalar_model(2.0);
    SgdState<double> s;
    // Step 1: v = g + wd w = 2 + 0.02 = 2.02; w = 2 - 0.202 = 1.798.
    sgd_update(p, grads_of(p, p.at("fc1.weight")[0], 0.0), lr, m, wd, s);
    CHECK(p.at("fc1.weight")[0] == 2.0 - lr * (2.0 + wd * 2.0));
    // Step 2: v = 0.9 * 2.02 + 1.798 + 0.01798; w = 1.798 - 0.1 v.
    const double w1 = p.at("fc1.weight")[0];
    const double v2 = m * (2.0 + wd * 2.0) + w1 + wd * w1;
    sgd_update(p, grads_of(p, w1, 0.0), lr, m, wd, s);
    CHECK(p.at("fc1.weight")[0] == w1 - lr * v2);
  }
  SUBCASE("missing gradient") {
    auto p = scalar_model(1.0);
    GradientMap<double> g;
    g.insert(Var{0}, "fc1.weight", Tensor<double>({1, 1}));
    SgdState<double> s;
    CHECK_THROWS_AS(sgd_update(p, g, 0.1, 0.0, 0.0, s), ContractError);
  }
}

TEST_CASE("learning rate schedule") {
  LrSchedule s{{{0, 0.1}, {5, 0.01}, {8, 0.001}}};
  s.validate();
  CHECK(s.at(0) == 0.1);
  CHECK(s.at(4) == 0.1);
  CHECK(s.at(5) == 0.01);
  CHECK(s.at(100) == 0.001);
  CHECK_THROWS_AS((LrSchedule{{{1, 0.1}}}).validate(), ConfigError);
}

TEST_CASE("zero epochs return the initialization") {
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 3;
  const auto spec = ModelSpec::mlp({2, 8, 2});
  const auto [params, log] = train(spec, toy(20, 1), cfg);
  CHECK(params == init_params<float>(spec, derive_seed(cfg.seed, kInitStream)));
  CHECK(log.epochs.empty());
}

TEST_CASE("training is reproducible and learns the toy task") {
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 21;
  cfg.adversary.kind = AdversaryKind::kPgd;
  cfg.adversary.attack.epsilon = 0.5;
  cfg.adversary.attack.step_size = 0.25;
  cfg.adversary.attack.iterations = 4;
  const auto data = toy(300, 2);
  const auto spec = ModelSpec::mlp({2, 32, 32, 2});
  const auto a = train(spec, data, cfg);
  const std::vector<std::vector<char>> heap_noise(7, std::vector<char>(24));
  const auto b = train(spec, data, cfg);
  CHECK(a.first == b.first);
  REQUIRE(a.second.epochs.size() == 4);
  CHECK(a.second.epochs.back().adversarial_acc.has_value());
  CHECK(evaluate(a.first, toy(200, 9), {}).natural_acc >= 0.95);

  std::ostringstream out;
  write_csv(out, a.second);
  CHECK(out.str().rfind("epoch,train_loss,natural_acc,adversarial_acc,wall_time\n", 0) == 0);
}

TEST_CASE("divergence is reported with the epoch") {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = LrSchedule::constant(1e30);
  cfg.momentum = 0.0;
  try {
    train(ModelSpec::mlp({2, 8, 2}), toy(50, 1), cfg);
    FAIL("expected a training error");
  } catch (const TrainingError& e) {
    CHECK(e.epoch() >= 1);
  }
}

TEST_CASE("invalid training configs") {
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.epsilon_warmup_epochs = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.adaptive_switch_epoch = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.adversary.kind = AdversaryKind::kPgd;
  cfg.epochs = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("evaluate") {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 1;
  const auto params = train(ModelSpec::mlp({2, 32, 32, 2}), toy(300, 3), cfg).first;
  const auto test = toy(100, 4);

  CHECK(evaluate(params, test, {}).natural_acc >= 0.95);

  std::vector<EvalAttack> attacks(2);
  attacks[0].name = "fgsm";
  attacks[0].kind = AttackKind::kFgsm;
  attacks[0].config.epsilon = 0.8;
  attacks[1].name = "pgd";
  attacks[1].kind = AttackKind::kPgd;
  attacks[1].config.epsilon = 0.8;
  attacks[1].config.step_size = 0.1;
  attacks[1].config.iterations = 10;

  EvalOptions plain;
  EvalOptions zero;
  zero.defense = RefineConfig{};
  zero.defense->strength = 0.0;
  const auto a = evaluate(params, test, attacks, plain);
  const auto b = evaluate(params, test, attacks, zero);
  CHECK(a.natural_acc == b.natural_acc);
  for (std::size_t i = 0; i < 2; ++i) CHECK(a.attacks[i].accuracy == b.attacks[i].accuracy);
  CHECK(a.best_attack_acc == std::min(a.attacks[0].accuracy, a.attacks[1].accuracy));

  SUBCASE("results do not depend on the worker count or sample order") {
    EvalOptions threaded = plain;
    threaded.jobs = 3;
    threaded.chunk = 30;
    EvalOptions serial = plain;
    serial.chunk = 30;
    const auto s = evaluate(params, test, attacks, serial);
    const auto t = evaluate(params, test, attacks, threaded);
    CHECK(s.attacks[1].predicted == t.attacks[1].predicted);

    std::vector<std::size_t> reversed(test.size());
    for (std::size_t i = 0; i < reversed.size(); ++i) reversed[i] = reversed.size() - 1 - i;
    CHECK(evaluate(params, test.subset(reversed), {}).natural_acc == a.natural_acc);
  }
}
