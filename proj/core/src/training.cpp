#include "advpnml/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <ostream>
#include <thread>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "advpnml/rng.hpp"

namespace advpnml {

double LrSchedule::at(int epoch) const {
  double rate = steps.front().second;
  for (const auto& [start, r] : steps) {
    if (epoch >= start) rate = r;
  }
  return rate;
}

void LrSchedule::validate() const {
  if (steps.empty() || steps.front().first != 0) throw ConfigError("learning rate schedule must start at epoch 0");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (!(steps[i].second > 0.0)) throw ConfigError("learning rates must be positive");
    if (i > 0 && steps[i].first <= steps[i - 1].first) throw ConfigError("learning rate epochs must increase");
  }
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  lr.validate();
  if (momentum < 0.0 || weight_decay < 0.0) throw ConfigError("momentum and weight_decay must be nonnegative");
  if (adaptive_switch_epoch && (*adaptive_switch_epoch < 0 || *adaptive_switch_epoch > epochs)) {
    throw ConfigError("adaptive_switch_epoch must lie in [0, epochs]");
  }
  if (epsilon_warmup_epochs < 0) throw ConfigError("epsilon_warmup_epochs must be nonnegative");
  if (adaptive_switch_epoch && adversary.kind == AdversaryKind::kNone) {
    throw ConfigError("adaptive_switch_epoch needs an adversary");
  }
  if (adversary.kind != AdversaryKind::kNone) {
    if (adversary.attack.iterations < 1 || adversary.attack.restarts < 1 || !(adversary.attack.step_size > 0.0) ||
        adversary.attack.epsilon < 0.0) {
      throw ConfigError("invalid training attack");
    }
    adversary.refine.validate();
  }
}

void write_csv(std::ostream& out, const TrainLog& log) {
  out << "epoch,train_loss,natural_acc,adversarial_acc,wall_time\n";
  for (const EpochRecord& r : log.epochs) {
    fmt::print(out, "{},{},{},{},{:.3f}\n", r.epoch, r.train_loss, r.natural_acc,
               r.adversarial_acc ? fmt::format("{}", *r.adversarial_acc) : std::string(), r.wall_seconds);
  }
}

template <typename T>
void sgd_update(ModelParams<T>& params, const GradientMap<T>& grads, double lr, double momentum,
                double weight_decay, SgdState<T>& state) {
  if (state.velocity.empty()) {
    for (const auto& [name, p] : params.tensors) state.velocity.emplace_back(p.shape());
  }
  if (state.velocity.size() != params.tensors.size()) throw ContractError("sgd state does not match the parameters");
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), rate = static_cast<T>(lr);
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    auto& [name, p] = params.tensors[k];
    if (!grads.contains(name)) throw ContractError("no gradient for parameter '" + name + "'");
    const Tensor<T>& g = grads[name];
    if (g.shape() != p.shape()) throw DimensionError("gradient shape differs for parameter '" + name + "'");
    Tensor<T>& v = state.velocity[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = m * v[i] + g[i] + wd * p[i];
      p[i] -= rate * v[i];
    }
  }
}

template void sgd_update<float>(ModelParams<float>&, const GradientMap<float>&, double, double, double,
                                SgdState<float>&);
template void sgd_update<double>(ModelParams<double>&, const GradientMap<double>&, double, double, double,
                                 SgdState<double>&);

std::pair<ModelParams<float>, TrainLog> train(const ModelSpec& spec, const LabeledSet& data, const TrainConfig& cfg) {
  return train(init_params<float>(spec, derive_seed(cfg.seed, kInitStream)), data, cfg);
}

std::pair<ModelParams<float>, TrainLog> train(ModelParams<float> params, const LabeledSet& data,
                                              const TrainConfig& cfg) {
  cfg.validate();
  params.validate();
  TrainLog log;
  SgdState<float> state;
  const std::size_t classes = params.spec.n_classes();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = batch_indices(data.size(), cfg.batch_size, derive_seed(cfg.seed, 1 + 2 * epoch));
    const std::uint64_t attack_seed = derive_seed(cfg.seed, 2 + 2 * epoch);
    const bool adaptive = cfg.adversary.kind == AdversaryKind::kAdaptive ||
                          (cfg.adaptive_switch_epoch && epoch >= *cfg.adaptive_switch_epoch);
    const double lr = cfg.lr.at(epoch);

    double loss_total = 0.0;
    std::size_t natural_correct = 0, adversarial_correct = 0;
    for (std::size_t b = 0; b < order.size(); ++b) {
      const LabeledSet batch = data.subset(order[b]);
      const std::span<const int> labels(batch.labels);
      const std::vector<int> clean = predict_labels(params, batch.inputs);
      for (std::size_t i = 0; i < clean.size(); ++i) natural_correct += clean[i] == labels[i];

      Tensor<float> x = batch.inputs;
      if (cfg.adversary.kind != AdversaryKind::kNone) {
        AttackConfig attack = cfg.adversary.attack;
        attack.seed = derive_seed(attack_seed, b);
        if (epoch < cfg.epsilon_warmup_epochs) {
          const double scale = static_cast<double>(epoch * order.size() + b + 1) /
                               static_cast<double>(cfg.epsilon_warmup_epochs * order.size());
          attack.epsilon *= scale;
          attack.step_size *= scale;
        }
        if (adaptive) {
          const EndToEndModel<float> defended(params, cfg.adversary.refine);
          x = pgd(defended, x, labels, attack).adversarial;
        } else {
          x = pgd(params, x, labels, attack).adversarial;
        }
      }

      Tape<float> tape;
      const auto bound = bind_params(tape, params, true);
      const Var input = tape.constant(std::move(x));
      const Var logits = forward_logits(tape, params, bound, input);
      const Var loss = softmax_cross_entropy(tape, logits, labels, Reduction::kMean);
      const double value = tape.value(loss).item();
      if (!std::isfinite(value)) throw TrainingError(epoch + 1, fmt::format("non-finite loss in batch {}", b));
      loss_total += value * static_cast<double>(labels.size());
      if (cfg.adversary.kind != AdversaryKind::kNone) {
        const auto z = tape.value(logits).data();
        for (std::size_t i = 0; i < labels.size(); ++i) {
          adversarial_correct += argmax(z.subspan(i * classes, classes)) == labels[i];
        }
      }
      const GradientMap<float> grads = tape.backward(loss);
      sgd_update(params, grads, lr, cfg.momentum, cfg.weight_decay, state);
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    const double n = static_cast<double>(data.size());
    rec.train_loss = loss_total / n;
    rec.natural_acc = static_cast<double>(natural_correct) / n;
    if (cfg.adversary.kind != AdversaryKind::kNone) rec.adversarial_acc = static_cast<double>(adversarial_correct) / n;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(rec);
    if (cfg.on_epoch) cfg.on_epoch(rec);
  }
  return {std::move(params), std::move(log)};
}

namespace {

struct Final {
  std::vector<int> label;
  std::vector<double> regret;
};

Final final_predictions(const ModelParams<float>& params, const Tensor<float>& x,
                        const std::optional<RefineConfig>& defense) {
  Final out;
  if (!defense) {
    out.label = predict_labels(params, x);
    out.regret.assign(out.label.size(), std::numeric_limits<double>::quiet_NaN());
    return out;
  }
  for (const auto& pred : pnml_predict(params, x, *defense)) {
    out.label.push_back(pred.label);
    out.regret.push_back(pred.regret);
  }
  return out;
}

struct ChunkResult {
  Final natural;
  std::vector<Final> attacked;
  std::vector<std::vector<double>> l2;
  std::vector<Tensor<float>> adversarial;
};

ChunkResult run_chunk(const ModelParams<float>& params, const LabeledSet& chunk, std::size_t chunk_index,
                      std::span<const EvalAttack> attacks, const EvalOptions& options) {
  ChunkResult res;
  const std::span<const int> labels(chunk.labels);
  res.natural = final_predictions(params, chunk.inputs, options.defense);
  for (const EvalAttack& attack : attacks) {
    AttackConfig cfg = attack.config;
    cfg.seed = derive_seed(attack.config.seed, chunk_index);
    Tensor<float> adv;
    std::vector<double> l2;
    switch (attack.kind) {
      case AttackKind::kFgsm:
        adv = fgsm(params, chunk.inputs, labels, cfg.epsilon, Direction::kAscend, cfg.clamp).adversarial;
        break;
      case AttackKind::kPgd:
        adv = pgd(params, chunk.inputs, labels, cfg).adversarial;
        break;
      case AttackKind::kAdaptive:
        if (options.defense) {
          const EndToEndModel<float> defended(params, *options.defense);
          adv = adaptive_bpda_pgd(defended, chunk.inputs, labels, cfg).adversarial;
        } else {
          adv = pgd(params, chunk.inputs, labels, cfg).adversarial;
        }
        break;
      case AttackKind::kHsja: {
        const DecisionOracle<float> oracle = [&](const Tensor<float>& batch) {
          return final_predictions(params, batch, options.defense).label;
        };
        adv = chunk.inputs;
        const std::size_t row = chunk.inputs.size() / chunk.size();
        for (std::size_t i = 0; i < chunk.size(); ++i) {
          HsjaConfig h = attack.hsja;
          h.seed = derive_seed(derive_seed(attack.hsja.seed, chunk_index), i);
          const Tensor<float> x = chunk.inputs.row(i);
          const AttackResult<float> r = hsja(oracle, x, labels[i], h);
          const bool counts = r.success.front() && linf_distance(r.adversarial, x) <= cfg.epsilon + 1e-6;
          l2.push_back(r.success.front() ? r.loss.front() : std::numeric_limits<double>::infinity());
          if (counts) {
            std::copy(r.adversarial.data().begin(), r.adversarial.data().end(),
                      adv.data().begin() + static_cast<std::ptrdiff_t>(i * row));
          }
        }
        break;
      }
    }
    res.attacked.push_back(final_predictions(params, adv, options.defense));
    res.l2.push_back(std::move(l2));
    if (options.keep_adversarial) res.adversarial.push_back(std::move(adv));
  }
  return res;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) ok += predicted[i] == labels[i];
  return labels.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(labels.size());
}

}  // namespace

EvalRecord evaluate(const ModelParams<float>& params, const LabeledSet& data, std::span<const EvalAttack> attacks,
                    const EvalOptions& options) {
  if (options.chunk == 0) throw ConfigError("evaluation chunk must be positive");
  if (options.defense) options.defense->validate();
  const std::size_t n = data.size();
  const std::size_t n_chunks = (n + options.chunk - 1) / options.chunk;
  std::vector<ChunkResult> results(n_chunks);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t c = next++; c < n_chunks; c = next++) {
      try {
        std::vector<std::size_t> idx;
        for (std::size_t i = c * options.chunk; i < std::min(n, (c + 1) * options.chunk); ++i) idx.push_back(i);
        results[c] = run_chunk(params, data.subset(idx), c, attacks, options);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n_chunks;
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(n_chunks)));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  EvalRecord rec;
  rec.samples = n;
  std::vector<double> regret;
  for (const ChunkResult& r : results) {
    rec.natural_predicted.insert(rec.natural_predicted.end(), r.natural.label.begin(), r.natural.label.end());
    regret.insert(regret.end(), r.natural.regret.begin(), r.natural.regret.end());
  }
  rec.natural_acc = accuracy(rec.natural_predicted, data.labels);
  rec.natural_regret_mean = mean(regret);
  rec.best_attack_acc = rec.natural_acc;
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    AttackOutcome out;
    out.name = attacks[a].name;
    std::vector<double> attack_regret;
    std::vector<Tensor<float>> parts;
    for (ChunkResult& r : results) {
      out.predicted.insert(out.predicted.end(), r.attacked[a].label.begin(), r.attacked[a].label.end());
      attack_regret.insert(attack_regret.end(), r.attacked[a].regret.begin(), r.attacked[a].regret.end());
      out.l2.insert(out.l2.end(), r.l2[a].begin(), r.l2[a].end());
      if (options.keep_adversarial) parts.push_back(std::move(r.adversarial[a]));
    }
    out.accuracy = accuracy(out.predicted, data.labels);
    out.regret_mean = mean(attack_regret);
    if (options.keep_adversarial && !parts.empty()) out.adversarial = concat_rows(std::span<const Tensor<float>>(parts));
    rec.best_attack_acc = a == 0 ? out.accuracy : std::min(rec.best_attack_acc, out.accuracy);
    rec.attacks.push_back(std::move(out));
  }
  return rec;
}

}  // namespace advpnml
