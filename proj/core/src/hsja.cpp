// Decision-based attack following HopSkipJump (untargeted, L2): alternate a
// boundary binary search, a Monte-Carlo estimate of the boundary normal from
// label queries, and a geometric step-size search along that estimate.

#include <algorithm>
#include <cmath>
#include <limits>

#include "advpnml/attacks.hpp"
#include "advpnml/rng.hpp"

namespace advpnml {
namespace {

struct BudgetExhausted {};

template <typename T>
class QueryCounter {
 public:
  QueryCounter(const DecisionOracle<T>& oracle, int y_true, Shape sample_shape, std::size_t budget)
      : oracle_(oracle), y_true_(y_true), sample_shape_(std::move(sample_shape)), budget_(budget) {}

  std::size_t used() const { return used_; }
  std::size_t remaining() const { return budget_ - used_; }

  /// Adversarial flags for the points (each of sample size); truncates to the
  /// remaining budget and throws once nothing is left.
  std::vector<bool> adversarial(const std::vector<std::vector<double>>& points) {
    if (remaining() == 0) throw BudgetExhausted{};
    const std::size_t n = std::min(points.size(), remaining());
    const std::size_t row = shape_size(sample_shape_);
    std::vector<T> data;
    data.reserve(n * row);
    for (std::size_t i = 0; i < n; ++i) {
      for (double v : points[i]) data.push_back(static_cast<T>(v));
    }
    Shape shape = sample_shape_;
    shape.insert(shape.begin(), n);
    const std::vector<int> labels = oracle_(Tensor<T>(std::move(shape), std::move(data)));
    used_ += n;
    std::vector<bool> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = labels.at(i) != y_true_;
    return out;
  }

  bool adversarial(const std::vector<double>& point) { return adversarial(std::vector<std::vector<double>>{point}).front(); }

 private:
  const DecisionOracle<T>& oracle_;
  int y_true_;
  Shape sample_shape_;
  std::size_t budget_;
  std::size_t used_ = 0;
};

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double linf(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a[i] - b[i]));
  return s;
}

void clip(std::vector<double>& v, ValueRange range) {
  for (double& e : v) e = std::clamp(e, range.lo, range.hi);
}

std::vector<double> blend(const std::vector<double>& x, const std::vector<double>& adv, double alpha) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (1.0 - alpha) * x[i] + alpha * adv[i];
  return out;
}

template <typename T>
std::vector<double> binary_search(QueryCounter<T>& q, const std::vector<double>& x, const std::vector<double>& adv,
                                  double threshold) {
  const double span = linf(x, adv);
  double low = 0.0, high = 1.0;
  while ((high - low) * span > threshold) {
    const double mid = 0.5 * (low + high);
    if (q.adversarial(blend(x, adv, mid))) {
      high = mid;
    } else {
      low = mid;
    }
  }
  return blend(x, adv, high);
}

}  // namespace

template <typename T>
AttackResult<T> hsja(const DecisionOracle<T>& oracle, const Tensor<T>& x, int y_true, const HsjaConfig& cfg) {
  if (cfg.query_budget == 0) throw DomainError("hsja: query budget must be positive");
  QueryCounter<T> q(oracle, y_true, x.shape(), cfg.query_budget);
  const std::vector<double> origin(x.data().begin(), x.data().end());
  const std::size_t d = origin.size();
  CounterRng rng(cfg.seed);

  std::vector<double> best;
  double best_dist = std::numeric_limits<double>::infinity();
  auto consider = [&](const std::vector<double>& candidate) {
    const double dist = l2(candidate, origin);
    if (dist < best_dist) {
      best_dist = dist;
      best = candidate;
    }
  };

  try {
    if (q.adversarial(origin)) {
      consider(origin);
    } else {
      // Random initialisation: uniform noise in a bounded range, otherwise
      // Gaussian noise of growing scale around x.
      std::vector<double> init;
      double scale = 0.1 * std::max(1.0, linf(origin, std::vector<double>(d, 0.0)));
      for (std::size_t trial = 0; trial < cfg.max_init_trials && init.empty(); ++trial) {
        std::vector<double> candidate(d);
        for (std::size_t i = 0; i < d; ++i) {
          candidate[i] = cfg.clamp.bounded() ? rng.uniform(cfg.clamp.lo, cfg.clamp.hi) : origin[i] + scale * rng.normal();
        }
        if (q.adversarial(candidate)) init = std::move(candidate);
        scale *= 1.5;
      }
      if (init.empty()) {
        return AttackResult<T>{x, {std::numeric_limits<double>::infinity()}, {false}, q.used()};
      }
      consider(init);
      std::vector<double> boundary = binary_search(q, origin, init, cfg.binary_threshold);
      consider(boundary);

      for (std::size_t t = 1;; ++t) {
        const double dist = l2(boundary, origin);
        if (dist == 0.0) break;
        double delta = t == 1 ? 0.1 * (cfg.clamp.bounded() && std::isfinite(cfg.clamp.hi - cfg.clamp.lo)
                                           ? cfg.clamp.hi - cfg.clamp.lo
                                           : dist)
                              : dist / static_cast<double>(d);
        delta = std::max(delta, 1e-12);

        // Gradient-direction estimate at the boundary point.
        const std::size_t evals = std::min<std::size_t>(
            cfg.max_evals, static_cast<std::size_t>(static_cast<double>(cfg.init_evals) * std::sqrt(static_cast<double>(t))));
        std::vector<std::vector<double>> dirs(evals, std::vector<double>(d));
        std::vector<std::vector<double>> probes(evals);
        for (std::size_t k = 0; k < evals; ++k) {
          double norm = 0.0;
          for (double& v : dirs[k]) {
            v = rng.normal();
            norm += v * v;
          }
          norm = std::sqrt(norm);
          probes[k].resize(d);
          for (std::size_t i = 0; i < d; ++i) probes[k][i] = boundary[i] + delta * dirs[k][i] / norm;
          clip(probes[k], cfg.clamp);
          for (std::size_t i = 0; i < d; ++i) dirs[k][i] = (probes[k][i] - boundary[i]) / delta;
        }
        const std::vector<bool> flags = q.adversarial(probes);
        const std::size_t m = flags.size();
        double mean = 0.0;
        for (bool f : flags) mean += f ? 1.0 : -1.0;
        mean /= static_cast<double>(m);
        std::vector<double> grad(d, 0.0);
        for (std::size_t k = 0; k < m; ++k) {
          const double phi = (flags[k] ? 1.0 : -1.0) - (std::abs(mean) == 1.0 ? 0.0 : mean);
          for (std::size_t i = 0; i < d; ++i) grad[i] += phi * dirs[k][i];
        }
        double gnorm = 0.0;
        for (double g : grad) gnorm += g * g;
        gnorm = std::sqrt(gnorm);
        if (gnorm == 0.0) continue;
        for (double& g : grad) g /= gnorm;

        // Geometric step-size search.
        double step = dist / std::sqrt(static_cast<double>(t));
        std::vector<double> next;
        while (step > 1e-12) {
          std::vector<double> candidate(d);
          for (std::size_t i = 0; i < d; ++i) candidate[i] = boundary[i] + step * grad[i];
          clip(candidate, cfg.clamp);
          if (q.adversarial(candidate)) {
            next = std::move(candidate);
            break;
          }
          step *= 0.5;
        }
        if (next.empty()) continue;
        consider(next);
        boundary = binary_search(q, origin, next, cfg.binary_threshold);
        consider(boundary);
      }
    }
  } catch (const BudgetExhausted&) {
  }

  if (best.empty()) return AttackResult<T>{x, {std::numeric_limits<double>::infinity()}, {false}, q.used()};
  std::vector<T> data(best.begin(), best.end());
  // loss carries the L2 perturbation of the returned point.
  return AttackResult<T>{Tensor<T>(x.shape(), std::move(data)), {best_dist}, {true}, q.used()};
}

template AttackResult<float> hsja<float>(const DecisionOracle<float>&, const Tensor<float>&, int, const HsjaConfig&);
template AttackResult<double> hsja<double>(const DecisionOracle<double>&, const Tensor<double>&, int,
                                           const HsjaConfig&);

}  // namespace advpnml
