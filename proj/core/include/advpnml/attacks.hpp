#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "advpnml/models.hpp"
#include "advpnml/tensor.hpp"

namespace advpnml {

/// Per-sample losses together with the gradient of their sum w.r.t. the input.
template <typename T>
struct LossGradient {
  std::vector<double> loss;
  Tensor<T> grad;
};

template <typename T>
struct Evaluation {
  std::vector<double> loss;
  std::vector<int> predicted;
};

/// Anything a white-box attack can differentiate: the base model, or the
/// defended end-to-end model with its BPDA backward.
///
/// Inputs are batches [N, sample...] or a single sample; each sample has
/// its own label.
template <typename T>
class AttackSurface {
 public:
  virtual ~AttackSurface() = default;
  virtual LossGradient<T> loss_gradient(const Tensor<T>& x, std::span<const int> labels) const = 0;
  virtual Evaluation<T> evaluate(const Tensor<T>& x, std::span<const int> labels) const = 0;
};

/// Cross-entropy of the undefended model.
template <typename T>
class ModelSurface final : public AttackSurface<T> {
 public:
  /// `params` must outlive the surface.
  explicit ModelSurface(const ModelParams<T>& params) : params_(params) {}
  LossGradient<T> loss_gradient(const Tensor<T>& x, std::span<const int> labels) const override;
  Evaluation<T> evaluate(const Tensor<T>& x, std::span<const int> labels) const override;

 private:
  const ModelParams<T>& params_;
};

enum class AttackMode { kUntargeted, kTargeted };
enum class Direction { kAscend, kDescend };

struct AttackConfig {
  double epsilon = 0.3;
  double step_size = 0.01;
  int iterations = 1;
  int restarts = 1;
  /// kTargeted: the labels passed to the attack are the targets.
  AttackMode mode = AttackMode::kUntargeted;
  ValueRange clamp = ValueRange::unbounded();
  /// When false, restarts begin at x itself instead of x + U[-eps, eps].
  bool random_start = true;
  std::uint64_t seed = 0;
};

template <typename T>
struct AttackResult {
  Tensor<T> adversarial;
  std::vector<double> loss;
  /// Untargeted: prediction differs from the label. Targeted: prediction equals it.
  std::vector<bool> success;
  std::size_t queries = 0;
};

/// One signed-gradient step of size epsilon: ascend is the untargeted
/// x + eps * sign(grad), descend the targeted x - eps * sign(grad).
template <typename T>
AttackResult<T> fgsm(const AttackSurface<T>& surface, const Tensor<T>& x, std::span<const int> labels,
                     double epsilon, Direction direction, ValueRange clamp = ValueRange::unbounded());

/// Projected signed-gradient iterations with random restarts. Each restart
/// runs cfg.iterations steps projected onto the eps-ball and clamp range after
/// every step; per sample, the final iterate with the highest loss (lowest
/// for targeted) across restarts is returned.
template <typename T>
AttackResult<T> pgd(const AttackSurface<T>& surface, const Tensor<T>& x, std::span<const int> labels,
                    const AttackConfig& cfg);

template <typename T>
AttackResult<T> fgsm(const ModelParams<T>& params, const Tensor<T>& x, std::span<const int> labels, double epsilon,
                     Direction direction, ValueRange clamp = ValueRange::unbounded()) {
  return fgsm(ModelSurface<T>(params), x, labels, epsilon, direction, clamp);
}

template <typename T>
AttackResult<T> pgd(const ModelParams<T>& params, const Tensor<T>& x, std::span<const int> labels,
                    const AttackConfig& cfg) {
  return pgd(ModelSurface<T>(params), x, labels, cfg);
}

/// Label-only access to a classifier. Every sample in a batch is one query.
template <typename T>
using DecisionOracle = std::function<std::vector<int>(const Tensor<T>& batch)>;

struct HsjaConfig {
  std::size_t query_budget = 5000;
  std::size_t init_evals = 100;
  std::size_t max_evals = 10000;
  /// Binary searches stop once the bracketing points are this close in L-inf.
  double binary_threshold = 1e-3;
  std::size_t max_init_trials = 100;
  ValueRange clamp = ValueRange::unbounded();
  std::uint64_t seed = 0;
};

/// Decision-based untargeted attack on one sample (shape: input_shape()).
/// Returns the misclassified point with smallest L2 distance found;
/// success=false when no misclassified starting point was found.
template <typename T>
AttackResult<T> hsja(const DecisionOracle<T>& oracle, const Tensor<T>& x, int y_true, const HsjaConfig& cfg);

}  // namespace advpnml
