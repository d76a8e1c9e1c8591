#include "advpnml/attacks.hpp"

#include <limits>

#include "advpnml/rng.hpp"

namespace advpnml {
namespace {

template <typename T>
std::vector<bool> success_flags(const Evaluation<T>& ev, std::span<const int> labels, AttackMode mode) {
  std::vector<bool> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i] = mode == AttackMode::kTargeted ? ev.predicted[i] == labels[i] : ev.predicted[i] != labels[i];
  }
  return out;
}

// x + scale * sign(grad)
template <typename T>
Tensor<T> signed_step(const Tensor<T>& x, const Tensor<T>& grad, double scale) {
  Tensor<T> out = x;
  auto o = out.data();
  auto g = grad.data();
  const T s = static_cast<T>(scale);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += s * static_cast<T>((g[i] > T{0}) - (g[i] < T{0}));
  return out;
}

}  // namespace

template <typename T>
LossGradient<T> ModelSurface<T>::loss_gradient(const Tensor<T>& x, std::span<const int> labels) const {
  Tape<T> tape;
  const auto bound = bind_params(tape, params_, false);
  const Var input = tape.leaf(x, "input");
  const Var logits = forward_logits(tape, params_, bound, input);
  LossGradient<T> out;
  out.loss = cross_entropy_per_row(tape.value(logits), labels);
  out.grad = tape.backward(softmax_cross_entropy(tape, logits, labels))[input];
  return out;
}

template <typename T>
Evaluation<T> ModelSurface<T>::evaluate(const Tensor<T>& x, std::span<const int> labels) const {
  const Tensor<T> logits = forward_logits(params_, x.reshaped(batched_shape(params_.spec, x.shape())));
  Evaluation<T> out;
  out.loss = cross_entropy_per_row(logits, labels);
  const std::size_t classes = params_.spec.n_classes();
  out.predicted.resize(logits.dim(0));
  for (std::size_t i = 0; i < out.predicted.size(); ++i) {
    out.predicted[i] = argmax(logits.data().subspan(i * classes, classes));
  }
  return out;
}

template <typename T>
AttackResult<T> fgsm(const AttackSurface<T>& surface, const Tensor<T>& x, std::span<const int> labels,
                     double epsilon, Direction direction, ValueRange clamp) {
  if (epsilon < 0.0) throw DomainError("fgsm: negative epsilon");
  const LossGradient<T> lg = surface.loss_gradient(x, labels);
  if (lg.grad.shape() != x.shape()) throw DimensionError("fgsm: gradient shape differs from input");
  const double scale = direction == Direction::kAscend ? epsilon : -epsilon;
  AttackResult<T> result;
  result.adversarial = clamp_project(signed_step(x, lg.grad, scale), x, epsilon, clamp);
  const Evaluation<T> ev = surface.evaluate(result.adversarial, labels);
  result.loss = ev.loss;
  result.success =
      success_flags(ev, labels, direction == Direction::kAscend ? AttackMode::kUntargeted : AttackMode::kTargeted);
  return result;
}

template <typename T>
AttackResult<T> pgd(const AttackSurface<T>& surface, const Tensor<T>& x, std::span<const int> labels,
                    const AttackConfig& cfg) {
  if (cfg.epsilon < 0.0) throw DomainError("pgd: negative epsilon");
  if (cfg.iterations < 1 || cfg.restarts < 1) throw DomainError("pgd: iterations and restarts must be positive");
  if (!(cfg.step_size > 0.0)) throw DomainError("pgd: step size must be positive");
  const bool targeted = cfg.mode == AttackMode::kTargeted;
  const double step = targeted ? -cfg.step_size : cfg.step_size;
  const std::size_t n = labels.size();
  if (n == 0 || x.size() % n != 0) throw DimensionError("pgd: label count does not divide the input");
  const std::size_t row = x.size() / n;

  AttackResult<T> best;
  best.adversarial = x;
  best.loss.assign(n, 0.0);
  best.success.assign(n, false);

  for (int r = 0; r < cfg.restarts; ++r) {
    Tensor<T> current = x;
    if (cfg.random_start && cfg.epsilon > 0.0) {
      CounterRng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(r)));
      for (T& v : current.data()) v += static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon));
      current = clamp_project(current, x, cfg.epsilon, cfg.clamp);
    }
    for (int t = 0; t < cfg.iterations; ++t) {
      const LossGradient<T> lg = surface.loss_gradient(current, labels);
      current = clamp_project(signed_step(current, lg.grad, step), x, cfg.epsilon, cfg.clamp);
    }
    const Evaluation<T> ev = surface.evaluate(current, labels);
    const std::vector<bool> ok = success_flags(ev, labels, cfg.mode);
    for (std::size_t i = 0; i < n; ++i) {
      const bool better = r == 0 || (targeted ? ev.loss[i] < best.loss[i] : ev.loss[i] > best.loss[i]);
      if (!better) continue;
      best.loss[i] = ev.loss[i];
      best.success[i] = ok[i];
      std::copy_n(current.data().begin() + static_cast<std::ptrdiff_t>(i * row), row,
                  best.adversarial.data().begin() + static_cast<std::ptrdiff_t>(i * row));
    }
  }
  return best;
}

#define ADVPNML_INSTANTIATE(T)                                                                                \
  template class ModelSurface<T>;                                                                             \
  template AttackResult<T> fgsm<T>(const AttackSurface<T>&, const Tensor<T>&, std::span<const int>, double,   \
                                   Direction, ValueRange);                                                    \
  template AttackResult<T> pgd<T>(const AttackSurface<T>&, const Tensor<T>&, std::span<const int>,            \
                                  const AttackConfig&);

ADVPNML_INSTANTIATE(float)
ADVPNML_INSTANTIATE(double)

#undef ADVPNML_INSTANTIATE

}  // namespace advpnml
