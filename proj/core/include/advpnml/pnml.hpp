#pragma once

#include <optional>
#include <span>
#include <vector>

#include "advpnml/attacks.hpp"
#include "advpnml/models.hpp"

namespace advpnml {

/// Refinement settings for the adversarial pNML defense.
struct RefineConfig {
  /// L-inf budget lambda of each refinement. Zero disables the defense.
  double strength = 0.1;
  /// 1 is a single signed-gradient step of size `strength`; more iterations
  /// take `step` sized steps projected back into the lambda-ball.
  int iterations = 1;
  std::optional<double> step;
  ValueRange clamp = ValueRange::unbounded();
  /// Evaluate only the k most probable labels of the unrefined input.
  std::optional<std::size_t> top_k;

  double step_size() const { return step.value_or(strength); }
  /// Throws DomainError on a negative strength or an iteration budget that
  /// cannot cover the strength.
  void validate() const;
};

/// pNML normalization of hypothesis probabilities.
struct Assignment {
  std::vector<double> q;
  /// log sum_j p_j
  double regret = 0.0;
};

/// q_i = p_i / sum_j p_j, regret = log sum_j p_j. Requires every p_i > 0.
Assignment pnml_assign(std::span<const double> p);
/// Same, from log p_i; stays finite when p_i underflows.
Assignment pnml_assign_log(std::span<const double> log_p);

template <typename T>
struct PnmlPrediction {
  /// Hypothesis labels that were evaluated, ascending.
  std::vector<int> candidates;
  /// Indexed by label; zero outside the candidate set.
  std::vector<double> p;
  std::vector<double> q;
  double regret = 0.0;
  int label = 0;
  /// One refined input per candidate, when requested.
  std::vector<Tensor<T>> refined;
};

/// Targeted refinement of each sample of x toward its label:
/// x - lambda * sign(grad_x L(w, x, y)) for one step, else projected
/// descent steps inside the lambda-ball. Clamped to cfg.clamp.
template <typename T>
Tensor<T> refine(const ModelParams<T>& params, const Tensor<T>& x, std::span<const int> labels,
                 const RefineConfig& cfg);

/// Top-k labels by logit (ties: lower label first), returned ascending.
std::vector<int> candidate_labels(std::span<const double> logits, std::optional<std::size_t> top_k);

/// p_i = softmax(f(refine(x, i)))[i] for every candidate i of every sample.
/// Rows are indexed by label and hold zero for non-candidates.
template <typename T>
std::vector<std::vector<double>> hypothesis_probs(const ModelParams<T>& params, const Tensor<T>& x,
                                                  const RefineConfig& cfg);

template <typename T>
std::vector<PnmlPrediction<T>> pnml_predict(const ModelParams<T>& params, const Tensor<T>& x,
                                            const RefineConfig& cfg, bool keep_refined = false);

/// Defended classifier as a single differentiable graph: every hypothesis is
/// refined, forwarded and normalized on one tape. On the backward pass the
/// refinement is treated as the identity (BPDA); the forward pass is exact.
/// The attack loss is the hypothesis log-loss -log q[label].
template <typename T>
class EndToEndModel final : public AttackSurface<T> {
 public:
  /// `params` must outlive the model.
  EndToEndModel(const ModelParams<T>& params, RefineConfig cfg);

  /// Hypothesis graph for x on `tape`. Candidates are chosen from the
  /// unrefined forward pass, so every sample has the same count k.
  struct Graph {
    std::vector<std::vector<int>> candidates;
    Var log_p;  // [N x k] log p_i of each candidate
    Var log_q;  // [N x k] normalized
    /// [N x n_classes] q, zero outside the candidates.
    Tensor<T> assignment;
    /// Summed -log q[label] over samples whose label is a candidate.
    std::optional<Var> loss;
    /// -log q[label] per sample; +inf when the label is not a candidate.
    std::vector<double> sample_loss;
  };
  Graph build(Tape<T>& tape, Var x, std::span<const int> labels) const;

  LossGradient<T> loss_gradient(const Tensor<T>& x, std::span<const int> labels) const override;
  Evaluation<T> evaluate(const Tensor<T>& x, std::span<const int> labels) const override;

  const RefineConfig& config() const { return cfg_; }

 private:
  const ModelParams<T>& params_;
  RefineConfig cfg_;
};

/// PGD against the end-to-end model: BPDA gradients, exact forward,
/// restart/selection identical to pgd().
template <typename T>
AttackResult<T> adaptive_bpda_pgd(const EndToEndModel<T>& defended, const Tensor<T>& x, std::span<const int> labels,
                                  const AttackConfig& cfg) {
  return pgd(defended, x, labels, cfg);
}

}  // namespace advpnml
