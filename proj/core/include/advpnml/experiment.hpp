#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advpnml/datasets.hpp"
#include "advpnml/training.hpp"

namespace advpnml {

/// Declarative experiment description, parsed from one JSON document.
///
/// Sub-seeds come from the global seed: derive_seed(seed, kDataStream) for
/// data generation, kTrainStream for training, kAttackStream + i for the
/// i-th evaluation attack.
struct ExperimentConfig {
  std::string experiment_id = "experiment";
  std::uint64_t seed = 0;

  enum class DatasetKind { kSynthetic, kMnist };
  DatasetKind dataset = DatasetKind::kSynthetic;
  SyntheticSpec synthetic;              // train set; seed is overwritten
  std::size_t synthetic_test_per_class = 500;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  /// Training samples used from the front of the training files; all when unset.
  std::optional<std::size_t> train_size;

  ModelSpec model = ModelSpec::mlp({2, 64, 64, 64, 2});
  TrainConfig train;
  std::vector<EvalAttack> attacks;
  /// Unset: no defense rows are produced.
  std::optional<RefineConfig> defense;
  std::size_t eval_samples = 1000;
  std::size_t eval_chunk = 100;

  std::string sweep_axis;  // "epsilon", "lambda" or "hypotheses"
  std::vector<double> sweep_values;

  std::filesystem::path output_dir = "out";
  /// Defaults to output_dir / "model.ckpt".
  std::optional<std::filesystem::path> checkpoint;

  std::filesystem::path checkpoint_path() const { return checkpoint.value_or(output_dir / "model.ckpt"); }
  ValueRange input_range() const {
    return dataset == DatasetKind::kMnist ? ValueRange::unit() : ValueRange::unbounded();
  }
};

inline constexpr std::uint64_t kDataStream = 1;
inline constexpr std::uint64_t kTrainStream = 2;
inline constexpr std::uint64_t kAttackStream = 100;

/// Validates the document and rejects unknown keys (ConfigError). Relative
/// paths are resolved against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
/// Reseeds every derived seed from `seed`.
void apply_seed(ExperimentConfig& cfg, std::uint64_t seed);

struct Datasets {
  LabeledSet train;
  LabeledSet test;
};

Datasets load_datasets(const ExperimentConfig& cfg);
/// Whole file contents, gunzipped when the data is gzip-compressed.
std::vector<std::uint8_t> read_file_maybe_gzip(const std::filesystem::path& path);

inline constexpr int kResultSchemaVersion = 1;

struct ResultRow {
  std::string experiment_id;
  std::string defense;  // "none" or "pnml"
  std::string attack;   // "natural" or an attack name
  double epsilon = 0.0;
  double lambda = 0.0;
  std::size_t hypotheses = 0;
  double natural_acc = 0.0;
  double adv_acc = 0.0;
  double regret_mean = 0.0;
  double best_attack_acc = 0.0;
  /// Kept out of results.csv so that file is reproducible bit for bit.
  double wall_time = 0.0;
};

/// schema_version, experiment_id, defense, attack, epsilon, lambda,
/// hypotheses, natural_acc, adv_acc, regret_mean, best_attack_acc
void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows);
/// experiment_id, defense, attack, epsilon, lambda, hypotheses, wall_time
void write_timings_csv(std::ostream& out, const std::vector<ResultRow>& rows);

/// One row per attack (plus a "natural" row) for the given defense.
std::vector<ResultRow> evaluation_rows(const ExperimentConfig& cfg, const ModelParams<float>& params,
                                       const LabeledSet& test, const std::optional<RefineConfig>& defense, int jobs);

struct CommandOptions {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::ostream* log = nullptr;  // progress output, may be null
};

/// Writes train.csv, test.csv and dataset.json.
void cmd_gen_data(ExperimentConfig cfg, const CommandOptions& opts);
/// Writes the checkpoint and train_log.csv.
ModelParams<float> cmd_train(ExperimentConfig cfg, const CommandOptions& opts);
/// Writes results.csv and timings.csv: rows for no defense and, when
/// configured, for the pNML defense.
std::vector<ResultRow> cmd_eval(ExperimentConfig cfg, const CommandOptions& opts);
/// One evaluation per value of cfg.sweep_axis; writes sweep.csv.
std::vector<ResultRow> cmd_sweep(ExperimentConfig cfg, const CommandOptions& opts);

}  // namespace advpnml
