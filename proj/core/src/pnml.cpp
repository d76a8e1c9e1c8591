#include "advpnml/pnml.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace advpnml {
namespace {

template <typename T>
std::size_t batch_rows(const ModelSpec& spec, const Tensor<T>& x) {
  return batched_shape(spec, x.shape())[0];
}

// Candidate lists from the unrefined logits of a batch.
template <typename T>
std::vector<std::vector<int>> select_candidates(const ModelParams<T>& params, const Tensor<T>& xb,
                                                std::optional<std::size_t> top_k) {
  const std::size_t classes = params.spec.n_classes();
  if (!top_k || *top_k >= classes) {
    std::vector<int> all(classes);
    std::iota(all.begin(), all.end(), 0);
    return std::vector<std::vector<int>>(xb.dim(0), all);
  }
  const Tensor<T> logits = forward_logits(params, xb);
  std::vector<std::vector<int>> out(xb.dim(0));
  for (std::size_t n = 0; n < out.size(); ++n) {
    auto row = logits.data().subspan(n * classes, classes);
    out[n] = candidate_labels(std::vector<double>(row.begin(), row.end()), top_k);
  }
  return out;
}

struct Replicated {
  std::vector<std::size_t> source_rows;
  std::vector<int> labels;
};

Replicated replicate(const std::vector<std::vector<int>>& candidates) {
  Replicated r;
  for (std::size_t n = 0; n < candidates.size(); ++n) {
    for (int label : candidates[n]) {
      r.source_rows.push_back(n);
      r.labels.push_back(label);
    }
  }
  return r;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t width = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<T> data(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                data.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

double log_softmax_at(std::span<const double> row, int label) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return row[static_cast<std::size_t>(label)] - m - std::log(s);
}

}  // namespace

void RefineConfig::validate() const {
  if (!(strength >= 0.0)) throw DomainError("refinement strength must be nonnegative");
  if (iterations < 1) throw DomainError("refinement iterations must be positive");
  if (step && !(*step > 0.0)) throw DomainError("refinement step must be positive");
  if (iterations > 1 && static_cast<double>(iterations) * step_size() < strength * (1.0 - 1e-12)) {
    throw DomainError("refinement iterations * step must cover the strength");
  }
  if (top_k && *top_k == 0) throw DomainError("top_k must be positive");
}

Assignment pnml_assign(std::span<const double> p) {
  if (p.empty()) throw DomainError("pnml_assign: no hypotheses");
  std::vector<double> log_p(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0)) throw DomainError("pnml_assign: hypothesis probability must be positive");
    log_p[i] = std::log(p[i]);
  }
  Assignment a;
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  a.q.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) a.q[i] = p[i] / total;
  a.regret = std::log(total);
  return a;
}

Assignment pnml_assign_log(std::span<const double> log_p) {
  if (log_p.empty()) throw DomainError("pnml_assign: no hypotheses");
  const double m = *std::max_element(log_p.begin(), log_p.end());
  double s = 0.0;
  for (double v : log_p) s += std::exp(v - m);
  Assignment a;
  a.regret = m + std::log(s);
  a.q.resize(log_p.size());
  for (std::size_t i = 0; i < log_p.size(); ++i) a.q[i] = std::exp(log_p[i] - a.regret);
  return a;
}

std::vector<int> candidate_labels(std::span<const double> logits, std::optional<std::size_t> top_k) {
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = std::min(top_k.value_or(logits.size()), logits.size());
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
Tensor<T> refine(const ModelParams<T>& params, const Tensor<T>& x, std::span<const int> labels,
                 const RefineConfig& cfg) {
  cfg.validate();
  if (cfg.strength == 0.0) return clamp_project(x, x, 0.0, cfg.clamp);
  const ModelSurface<T> surface(params);
  if (cfg.iterations == 1) {
    const LossGradient<T> lg = surface.loss_gradient(x, labels);
    Tensor<T> out = x;
    const T lambda = static_cast<T>(cfg.strength);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T g = lg.grad[i];
      out[i] -= lambda * static_cast<T>((g > T{0}) - (g < T{0}));
    }
    return clamp_project(out, x, cfg.strength, cfg.clamp);
  }
  Tensor<T> current = x;
  const T step = static_cast<T>(cfg.step_size());
  for (int it = 0; it < cfg.iterations; ++it) {
    const LossGradient<T> lg = surface.loss_gradient(current, labels);
    for (std::size_t i = 0; i < current.size(); ++i) {
      const T g = lg.grad[i];
      current[i] -= step * static_cast<T>((g > T{0}) - (g < T{0}));
    }
    current = clamp_project(current, x, cfg.strength, cfg.clamp);
  }
  return current;
}

template <typename T>
std::vector<PnmlPrediction<T>> pnml_predict(const ModelParams<T>& params, const Tensor<T>& x,
                                            const RefineConfig& cfg, bool keep_refined) {
  cfg.validate();
  const std::size_t classes = params.spec.n_classes();
  const Tensor<T> xb = x.reshaped(batched_shape(params.spec, x.shape()));
  const auto candidates = select_candidates(params, xb, cfg.top_k);
  const Replicated rep = replicate(candidates);
  const Tensor<T> refined = refine(params, gather(xb, rep.source_rows), rep.labels, cfg);
  const Tensor<T> logits = forward_logits(params, refined);

  std::vector<PnmlPrediction<T>> out(xb.dim(0));
  std::size_t r = 0;
  for (std::size_t n = 0; n < out.size(); ++n) {
    PnmlPrediction<T>& pred = out[n];
    pred.candidates = candidates[n];
    std::vector<double> log_p;
    for (int label : pred.candidates) {
      auto row = logits.data().subspan(r * classes, classes);
      log_p.push_back(log_softmax_at(std::vector<double>(row.begin(), row.end()), label));
      if (keep_refined) pred.refined.push_back(refined.row(r));
      ++r;
    }
    const Assignment a = pnml_assign_log(log_p);
    pred.p.assign(classes, 0.0);
    pred.q.assign(classes, 0.0);
    for (std::size_t i = 0; i < pred.candidates.size(); ++i) {
      const auto label = static_cast<std::size_t>(pred.candidates[i]);
      pred.p[label] = std::exp(log_p[i]);
      pred.q[label] = a.q[i];
    }
    pred.regret = a.regret;
    pred.label = argmax(std::span<const double>(pred.q));
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> hypothesis_probs(const ModelParams<T>& params, const Tensor<T>& x,
                                                  const RefineConfig& cfg) {
  std::vector<std::vector<double>> out;
  for (auto& pred : pnml_predict(params, x, cfg)) out.push_back(std::move(pred.p));
  return out;
}

template <typename T>
EndToEndModel<T>::EndToEndModel(const ModelParams<T>& params, RefineConfig cfg) : params_(params), cfg_(cfg) {
  cfg_.validate();
}

template <typename T>
typename EndToEndModel<T>::Graph EndToEndModel<T>::build(Tape<T>& tape, Var x, std::span<const int> labels) const {
  const std::size_t classes = params_.spec.n_classes();
  const Shape shape = batched_shape(params_.spec, tape.value(x).shape());
  const std::size_t n = shape[0];
  if (labels.size() != n) throw DimensionError("end-to-end model: one label per sample required");
  const Var xb = tape.value(x).shape() == shape ? x : reshape(tape, x, shape);

  Graph g;
  g.candidates = select_candidates(params_, tape.value(xb), cfg_.top_k);
  const std::size_t k = g.candidates.front().size();
  const Replicated rep = replicate(g.candidates);

  const Var replicated = gather_rows(tape, xb, rep.source_rows);
  Tensor<T> refined = refine(params_, tape.value(replicated), rep.labels, cfg_);
  const Var hypotheses = straight_through(tape, replicated, std::move(refined));
  const auto bound = bind_params(tape, params_, false);
  const Var logits = forward_logits(tape, params_, bound, hypotheses);
  g.log_p = reshape(tape, pick(tape, log_softmax(tape, logits), rep.labels), Shape{n, k});
  g.log_q = log_softmax(tape, g.log_p);

  const Tensor<T>& log_q = tape.value(g.log_q);
  g.assignment = Tensor<T>({n, classes});
  g.sample_loss.assign(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> active;
  std::vector<int> positions;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < k; ++i) {
      const int label = g.candidates[s][i];
      g.assignment[s * classes + static_cast<std::size_t>(label)] = static_cast<T>(std::exp(log_q[s * k + i]));
      if (label == labels[s]) {
        active.push_back(s);
        positions.push_back(static_cast<int>(i));
        g.sample_loss[s] = -static_cast<double>(log_q[s * k + i]);
      }
    }
  }
  if (!active.empty()) {
    g.loss = softmax_cross_entropy(tape, gather_rows(tape, g.log_p, active), positions);
  }
  return g;
}

template <typename T>
LossGradient<T> EndToEndModel<T>::loss_gradient(const Tensor<T>& x, std::span<const int> labels) const {
  Tape<T> tape;
  const Var input = tape.leaf(x, "input");
  Graph g = build(tape, input, labels);
  LossGradient<T> out;
  out.loss = std::move(g.sample_loss);
  out.grad = g.loss ? tape.backward(*g.loss)[input] : Tensor<T>(x.shape());
  return out;
}

template <typename T>
Evaluation<T> EndToEndModel<T>::evaluate(const Tensor<T>& x, std::span<const int> labels) const {
  const auto preds = pnml_predict(params_, x, cfg_);
  if (labels.size() != preds.size()) throw DimensionError("end-to-end model: one label per sample required");
  Evaluation<T> ev;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double q = preds[i].q.at(static_cast<std::size_t>(labels[i]));
    ev.loss.push_back(q > 0.0 ? -std::log(q) : std::numeric_limits<double>::infinity());
    ev.predicted.push_back(preds[i].label);
  }
  return ev;
}

#define ADVPNML_INSTANTIATE(T)                                                                                 \
  template Tensor<T> refine<T>(const ModelParams<T>&, const Tensor<T>&, std::span<const int>, const RefineConfig&); \
  template std::vector<std::vector<double>> hypothesis_probs<T>(const ModelParams<T>&, const Tensor<T>&,      \
                                                                const RefineConfig&);                          \
  template std::vector<PnmlPrediction<T>> pnml_predict<T>(const ModelParams<T>&, const Tensor<T>&,            \
                                                          const RefineConfig&, bool);                          \
  template class EndToEndModel<T>;

ADVPNML_INSTANTIATE(float)
ADVPNML_INSTANTIATE(double)

#undef ADVPNML_INSTANTIATE

}  // namespace advpnml
