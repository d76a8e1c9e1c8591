#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "advpnml/checkpoint.hpp"
#include "advpnml/datasets.hpp"
#include "advpnml/models.hpp"
#include "advpnml/training.hpp"
#include "oracles.hpp"

using namespace advpnml;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "advpnml_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const std::filesystem::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("model specs") {
  const ModelSpec conv = ModelSpec::mnist_convnet();
  CHECK(conv.parameter_count() == 32 * 1 * 25 + 32 + 64 * 32 * 25 + 64 + 3136 * 1024 + 1024 + 1024 * 10 + 10);
  CHECK(conv.input_shape() == Shape{1, 28, 28});
  CHECK(conv.n_classes() == 10);
  const ModelSpec mlp = ModelSpec::parse("mlp:2-64-64-64-2");
  CHECK(mlp.descriptor() == "mlp:2-64-64-64-2");
  CHECK(mlp.parameter_layout().size() == 8);
  CHECK(ModelSpec::parse(conv.descriptor()) == conv);
  CHECK_THROWS(ModelSpec::parse("mlp:3"));
  CHECK_THROWS(ModelSpec::parse("resnet"));
}

TEST_CASE("forward shapes") {
  const auto params = init_params<float>(ModelSpec::mnist_convnet(), 1);
  params.validate();
  CHECK(forward_logits(params, Tensor<float>({1, 28, 28}, 0.5f)).shape() == Shape{10});
  CHECK(forward_logits(params, Tensor<float>({1, 1, 28, 28}, 0.5f)).shape() == Shape{1, 10});
  CHECK(forward_logits(params, Tensor<float>({3, 1, 28, 28}, 0.5f)).shape() == Shape{3, 10});
}

TEST_CASE("uniform logits give ln C") {
  auto params = init_params<double>(ModelSpec::mnist_convnet(), 2);
  for (auto& [name, t] : params.tensors) t = Tensor<double>(t.shape());
  Tape<double> tape;
  const auto bound = bind_params(tape, params, false);
  const Var x = tape.constant(Tensor<double>({1, 28, 28}, 0.3));
  CHECK(tape.value(loss(tape, params, bound, x, std::vector<int>{4})).item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("a small gradient step lowers the loss") {
  const auto spec = ModelSpec::mlp({2, 16, 16, 2});
  auto params = init_params<double>(spec, 4);
  const Tensor<double> x({1, 2}, std::vector<double>{0.3, -0.7});
  const std::vector<int> y{1};
  auto value = [&](const ModelParams<double>& p) {
    Tape<double> t;
    const auto b = bind_params(t, p, false);
    return t.value(loss(t, p, b, t.constant(x), y)).item();
  };
  Tape<double> tape;
  const auto bound = bind_params(tape, params, true);
  const auto grads = tape.backward(loss(tape, params, bound, tape.constant(x), y));
  const double before = value(params);
  SgdState<double> state;
  sgd_update(params, grads, 1e-3, 0.0, 0.0, state);
  CHECK(value(params) < before);
}

TEST_CASE("predict") {
  auto params = init_params<double>(ModelSpec::mlp({2, 2}), 0);
  for (auto& [name, t] : params.tensors) t = Tensor<double>(t.shape());
  const auto pred = predict(params, Tensor<double>({1, 2}, std::vector<double>{1.0, 2.0}));
  CHECK(pred.front().label == 0);
  CHECK(argmax(std::span<const double>(std::vector<double>{0.0, 0.0})) == 0);

  SUBCASE("agrees with an independent softmax and argmax") {
    CounterRng rng(6);
    const auto p = init_params<double>(ModelSpec::mlp({2, 32, 5}), 9);
    const auto x = testing::random_tensor({200, 2}, rng, -3, 3);
    const auto z = forward_logits(p, x);
    const auto preds = predict(p, x);
    for (std::size_t i = 0; i < 200; ++i) {
      double m = -1e300, s = 0.0;
      int best = 0;
      for (int c = 0; c < 5; ++c) {
        const double v = z[i * 5 + static_cast<std::size_t>(c)];
        if (v > m) {
          m = v;
          best = c;
        }
      }
      for (int c = 0; c < 5; ++c) s += std::exp(z[i * 5 + static_cast<std::size_t>(c)] - m);
      CHECK(preds[i].label == best);
      double total = 0.0;
      for (int c = 0; c < 5; ++c) {
        const double expect = std::exp(z[i * 5 + static_cast<std::size_t>(c)] - m) / s;
        CHECK(std::abs(preds[i].probabilities[static_cast<std::size_t>(c)] - expect) <= 1e-12);
        total += preds[i].probabilities[static_cast<std::size_t>(c)];
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("forward is a pure function of params and input") {
  const auto params = init_params<float>(ModelSpec::mnist_convnet(), 5);
  const Tensor<float> x({2, 1, 28, 28}, 0.25f);
  CHECK(forward_logits(params, x) == forward_logits(params, x));
}

TEST_CASE("checkpoint round trip and load errors") {
  const auto params = init_params<float>(ModelSpec::mlp({2, 8, 3}), 12);
  const auto path = temp_path("rt.ckpt");
  save_checkpoint(params, path, TrainingMetadata{3, 99});
  const Checkpoint back = load_checkpoint(path, params.spec);
  CHECK(back.params == params);
  CHECK(back.meta == TrainingMetadata{3, 99});

  const auto bytes = slurp(path);
  SUBCASE("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    dump(temp_path("magic.ckpt"), b);
    CHECK_THROWS_AS(load_checkpoint(temp_path("magic.ckpt")), FormatError);
  }
  SUBCASE("version") {
    auto b = bytes;
    b[8] = 7;
    dump(temp_path("version.ckpt"), b);
    CHECK_THROWS_AS(load_checkpoint(temp_path("version.ckpt")), CheckpointVersionError);
  }
  SUBCASE("truncated") {
    auto b = bytes;
    b.resize(b.size() - 5);
    dump(temp_path("trunc.ckpt"), b);
    CHECK_THROWS_AS(load_checkpoint(temp_path("trunc.ckpt")), IoError);
  }
  SUBCASE("spec mismatch") {
    CHECK_THROWS_AS(load_checkpoint(path, ModelSpec::mlp({2, 8, 4})), CheckpointSpecError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(temp_path("absent.ckpt")), IoError); }
}

TEST_CASE("trained toy model reloads to the same accuracy") {
  SyntheticSpec spec;
  spec.n_per_class = 200;
  spec.seed = 1;
  const LabeledSet data = gen_synthetic(spec);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 5;
  const auto [params, log] = train(ModelSpec::mlp({2, 16, 16, 2}), data, cfg);
  const auto path = temp_path("toy.ckpt");
  save_checkpoint(params, path);
  const auto reloaded = load_checkpoint(path).params;
  CHECK(evaluate(reloaded, data, {}).natural_acc == evaluate(params, data, {}).natural_acc);
  CHECK(predict_labels(reloaded, data.inputs) == predict_labels(params, data.inputs));
}
