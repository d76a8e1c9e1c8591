#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "advpnml/attacks.hpp"
#include "advpnml/datasets.hpp"
#include "advpnml/models.hpp"
#include "advpnml/pnml.hpp"

namespace advpnml {

/// Piecewise-constant learning rate: (first epoch, rate) pairs, sorted, the
/// first starting at epoch 0.
struct LrSchedule {
  std::vector<std::pair<int, double>> steps{{0, 0.01}};

  static LrSchedule constant(double rate) { return LrSchedule{{{0, rate}}}; }
  double at(int epoch) const;
  void validate() const;
};

enum class AdversaryKind { kNone, kPgd, kAdaptive };

struct Adversary {
  AdversaryKind kind = AdversaryKind::kNone;
  AttackConfig attack;
  /// Defense wrapped around the current model by the adaptive adversary.
  RefineConfig refine;
};

struct EpochRecord;

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 50;
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Adversary adversary;
  /// With a pgd adversary: epochs from this one on use the adaptive attack.
  std::optional<int> adaptive_switch_epoch;
  /// Adversary epsilon and step grow linearly per batch from zero to their
  /// configured values over this many epochs.
  int epsilon_warmup_epochs = 0;
  std::uint64_t seed = 0;
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double natural_acc = 0.0;
  /// Accuracy on the attacked batches; empty without an adversary.
  std::optional<double> adversarial_acc;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

/// Columns epoch, train_loss, natural_acc, adversarial_acc, wall_time.
void write_csv(std::ostream& out, const TrainLog& log);

template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;
};

/// v <- momentum * v + g + weight_decay * p; p <- p - lr * v.
/// Throws ContractError when a parameter has no gradient.
template <typename T>
void sgd_update(ModelParams<T>& params, const GradientMap<T>& grads, double lr, double momentum,
                double weight_decay, SgdState<T>& state);

/// Initializes from the seed and trains. Deterministic under cfg.seed.
std::pair<ModelParams<float>, TrainLog> train(const ModelSpec& spec, const LabeledSet& data, const TrainConfig& cfg);
/// Continues from `init`.
std::pair<ModelParams<float>, TrainLog> train(ModelParams<float> init, const LabeledSet& data, const TrainConfig& cfg);

/// Stream of derive_seed(cfg.seed, .) used for initialization by train().
inline constexpr std::uint64_t kInitStream = 0;

enum class AttackKind { kFgsm, kPgd, kAdaptive, kHsja };

struct EvalAttack {
  std::string name;
  AttackKind kind = AttackKind::kPgd;
  /// epsilon also bounds HSJA: its point counts only if within epsilon in L-inf.
  AttackConfig config;
  HsjaConfig hsja;
};

struct EvalOptions {
  std::optional<RefineConfig> defense;
  /// Samples per work unit; attack seeds derive from the unit index, so
  /// results do not depend on `jobs`.
  std::size_t chunk = 100;
  int jobs = 1;
  /// Keep adversarial inputs in the record.
  bool keep_adversarial = false;
};

struct AttackOutcome {
  std::string name;
  double accuracy = 0.0;
  /// Mean defended regret over the attacked inputs; NaN without a defense.
  double regret_mean = 0.0;
  /// HSJA only: per-sample L2 distance of the returned point (inf on failure).
  std::vector<double> l2;
  std::vector<int> predicted;
  std::optional<Tensor<float>> adversarial;
};

struct EvalRecord {
  std::size_t samples = 0;
  double natural_acc = 0.0;
  double natural_regret_mean = 0.0;
  std::vector<int> natural_predicted;
  std::vector<AttackOutcome> attacks;
  /// Minimum accuracy over the attacks; natural accuracy when there are none.
  double best_attack_acc = 0.0;
};

/// Accuracy of the final (defended, when a defense is given) prediction.
/// FGSM and PGD are computed against the base model, the adaptive attack
/// against the end-to-end defended model, HSJA against the defended argmax.
EvalRecord evaluate(const ModelParams<float>& params, const LabeledSet& data, std::span<const EvalAttack> attacks,
                    const EvalOptions& options = {});

}  // namespace advpnml
