#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "advpnml/checkpoint.hpp"
#include "advpnml/experiment.hpp"

using namespace advpnml;
using nlohmann::json;

namespace {

json toy_doc(const std::filesystem::path& out) {
  json doc = json::parse(R"({
    "experiment_id": "unit",
    "seed": 5,
    "dataset": {"kind": "synthetic", "n_per_class": 150, "test_per_class": 50},
    "model": "mlp:2-16-16-2",
    "train": {"epochs": 2, "batch_size": 25,
              "adversary": {"kind": "pgd", "epsilon": 0.5, "step_size": 0.25, "iterations": 4}},
    "attacks": [{"name": "fgsm", "kind": "fgsm", "epsilon": 0.5},
                {"name": "pgd", "kind": "pgd", "epsilon": 0.5, "step_size": 0.1, "iterations": 5}],
    "defense": {},
    "eval": {"samples": 60, "chunk": 20},
    "sweep": {"axis": "hypotheses", "values": [1, 2]}
  })");
  doc["output_dir"] = out.string();
  return doc;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "advpnml_unit" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = parse_config(toy_doc("out"));
  CHECK(cfg.experiment_id == "unit");
  REQUIRE(cfg.defense.has_value());
  CHECK(cfg.defense->strength == 0.6);
  CHECK(cfg.attacks.size() == 2);
  CHECK(cfg.attacks[0].config.seed != cfg.attacks[1].config.seed);
  CHECK(!cfg.attacks[0].config.clamp.bounded());

  auto unknown = toy_doc("out");
  unknown["colour"] = "blue";
  CHECK_THROWS_AS(parse_config(unknown), ConfigError);
  auto nested = toy_doc("out");
  nested["train"]["adversary"]["steps"] = 3;
  CHECK_THROWS_AS(parse_config(nested), ConfigError);
  auto attack = toy_doc("out");
  attack["attacks"][0]["eps"] = 0.1;
  CHECK_THROWS_AS(parse_config(attack), ConfigError);
  auto unsorted = toy_doc("out");
  unsorted["sweep"]["values"] = json::array({2, 1});
  CHECK_THROWS_AS(parse_config(unsorted), ConfigError);
  auto kind = toy_doc("out");
  kind["dataset"]["kind"] = "cifar10";
  CHECK_THROWS_AS(parse_config(kind), ConfigError);

  auto reseeded = cfg;
  apply_seed(reseeded, 6);
  CHECK(reseeded.train.seed != cfg.train.seed);

  const auto mnist = parse_config(json::parse(R"({"dataset": {"kind": "mnist", "train_images": "a",
      "train_labels": "b", "test_images": "c", "test_labels": "d"}, "defense": {}})"),
                                  "/data");
  CHECK(mnist.defense->strength == 0.1);
  CHECK(mnist.defense->clamp == ValueRange::unit());
  CHECK(mnist.model == ModelSpec::mnist_convnet());
  CHECK(mnist.train_images == std::filesystem::path("/data/a"));
}

TEST_CASE("gen-data is deterministic and balanced") {
  const auto a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  cmd_gen_data(parse_config(toy_doc(a)), {});
  cmd_gen_data(parse_config(toy_doc(b)), {});
  CHECK(slurp(a / "train.csv") == slurp(b / "train.csv"));
  std::istringstream in(slurp(a / "train.csv"));
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0, ones = 0;
  while (std::getline(in, line)) {
    ++rows;
    ones += line.back() == '1';
  }
  CHECK(rows == 300);
  CHECK(ones == 150);

  CommandOptions bad;
  bad.out = "/proc/advpnml_cannot_write";
  CHECK_THROWS_AS(cmd_gen_data(parse_config(toy_doc(a)), bad), IoError);
}

TEST_CASE("train, eval and sweep") {
  const auto dir = fresh_dir("pipeline");
  const auto cfg = parse_config(toy_doc(dir));
  CHECK_THROWS_AS(cmd_eval(cfg, {}), ConfigError);

  const auto params = cmd_train(cfg, {});
  CHECK(load_checkpoint(dir / "model.ckpt").params == params);
  CHECK(std::filesystem::exists(dir / "train_log.csv"));

  const auto rows = cmd_eval(cfg, {});
  REQUIRE(rows.size() == 6);
  const std::string first = slurp(dir / "results.csv");
  CHECK(first.rfind("schema_version,experiment_id,defense,attack,epsilon,lambda,hypotheses,natural_acc,adv_acc,"
                    "regret_mean,best_attack_acc\n",
                    0) == 0);
  for (const auto& r : rows) {
    const double best = r.defense == "none" ? std::min(rows[1].adv_acc, rows[2].adv_acc)
                                            : std::min(rows[4].adv_acc, rows[5].adv_acc);
    CHECK(r.best_attack_acc == best);
  }
  CommandOptions threaded;
  threaded.jobs = 2;
  cmd_eval(cfg, threaded);
  CHECK(slurp(dir / "results.csv") == first);

  const auto sweep = cmd_sweep(cfg, {});
  REQUIRE(sweep.size() == 6);
  const auto eval_pnml = std::vector<ResultRow>(rows.begin() + 3, rows.end());
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(sweep[3 + i].adv_acc == eval_pnml[i].adv_acc);
    CHECK(sweep[3 + i].regret_mean == eval_pnml[i].regret_mean);
  }

  SUBCASE("lambda zero row equals the undefended row") {
    auto doc = toy_doc(dir);
    doc["defense"]["lambda"] = 0.0;
    const auto zero = cmd_eval(parse_config(doc), {});
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(zero[i].adv_acc == zero[3 + i].adv_acc);
      CHECK(zero[i].natural_acc == zero[3 + i].natural_acc);
    }
  }
  SUBCASE("epsilon zero leaves natural accuracy") {
    auto doc = toy_doc(dir);
    doc["sweep"] = json{{"axis", "epsilon"}, {"values", {0.0}}};
    for (const auto& r : cmd_sweep(parse_config(doc), {})) CHECK(r.adv_acc == r.natural_acc);
  }
}
