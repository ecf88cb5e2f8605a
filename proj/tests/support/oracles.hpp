#pragma once

// Reference computations written independently of the library's own
// forward and backward passes, for use as test oracles.

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "exdebug/er_trainer.hpp"
#include "exdebug/model.hpp"
#include "test_support.hpp"

namespace testing {

inline Matrix gather(const TextClassifier& m, const Example& e) {
  Matrix x(e.token_ids.size(), m.config().embed_dim);
  for (std::size_t i = 0; i < e.token_ids.size(); ++i) x.row(i) = m.params().embeddings.row(e.token_ids[i]);
  return x;
}

/// Logit c from explicit per-position input embeddings.
inline double logit_from_inputs(const TextClassifier& m, const Matrix& x, int c) {
  const auto& p = m.params();
  const Vector pooled = x.colwise().mean().transpose();
  const Vector pre = p.hidden_weights.transpose() * pooled + p.hidden_bias;
  Vector hidden = pre;
  if (m.config().nonlinearity == Nonlinearity::tanh) hidden = pre.array().tanh();
  return p.output_weights.col(c).dot(hidden) + p.output_bias(c);
}

/// Input-times-gradient scores in closed form.
inline std::vector<double> oracle_scores(const TextClassifier& m, const Example& e, int c) {
  const auto& p = m.params();
  const Matrix x = gather(m, e);
  const double n = static_cast<double>(e.token_ids.size());
  const Vector pre = p.hidden_weights.transpose() * x.colwise().mean().transpose() + p.hidden_bias;
  Vector slope = Vector::Ones(pre.size());
  if (m.config().nonlinearity == Nonlinearity::tanh) slope = 1.0 - pre.array().tanh().square();
  const Vector g = p.hidden_weights * slope.cwiseProduct(p.output_weights.col(c)) / n;
  std::vector<double> s;
  for (Eigen::Index i = 0; i < x.rows(); ++i) s.push_back(x.row(i).dot(g));
  return s;
}

inline double max_abs(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// ER loss with the class fixed to `c`. A positive `frozen_max` replaces the
/// abs_max normalizer by that constant.
inline double oracle_er_loss(const TextClassifier& m, const Example& e, int c,
                             const std::vector<std::pair<std::size_t, double>>& targets, ErLoss kind,
                             double frozen_max = 0.0) {
  const auto s = oracle_scores(m, e, c);
  const double norm = frozen_max > 0 ? frozen_max : max_abs(s);
  double acc = 0;
  for (const auto& [i, t] : targets) {
    const double phi = norm > 0 ? std::abs(s[i]) / norm : 0.0;
    acc += kind == ErLoss::mse ? (phi - t) * (phi - t) : std::abs(phi - t);
  }
  return targets.empty() ? 0.0 : acc / static_cast<double>(targets.size());
}

/// Sum over targets of w_i * |s_i| / max_{j != i} |s_j|, the ratio whose gradient
/// the straight-through normalizer follows; w_i is the loss slope at the base point.
inline double oracle_ratio_surrogate(const TextClassifier& m, const Example& e, int c,
                                     const std::vector<std::pair<std::size_t, double>>& targets,
                                     const std::vector<double>& weights) {
  const auto s = oracle_scores(m, e, c);
  double acc = 0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto i = targets[k].first;
    double other = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (j != i) other = std::max(other, std::abs(s[j]));
    if (other > 0) acc += weights[k] * std::abs(s[i]) / other;
  }
  return acc;
}

struct FdReport {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst = 0.0;  // largest |a - b| / max(|a|, |b|) over nonzero pairs
  void add(double analytic, double numeric, double rel = 1e-4, double floor = 1e-9) {
    ++checked;
    if (!rel_close(analytic, numeric, rel, floor)) ++failed;
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale > floor) worst = std::max(worst, std::abs(analytic - numeric) / scale);
  }
};

/// Input gradient of logit c against central differences on every input coordinate.
inline void check_input_gradient(const TextClassifier& m, const Example& e, int c, FdReport& out,
                                 double h = 1e-6) {
  const auto grad = input_gradient(m, e, c);
  Matrix x = gather(m, e);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
      const double orig = x(i, k);
      x(i, k) = orig + h;
      const double up = logit_from_inputs(m, x, c);
      x(i, k) = orig - h;
      const double down = logit_from_inputs(m, x, c);
      x(i, k) = orig;
      out.add(grad(i, k), (up - down) / (2 * h));
    }
  }
}

/// Parameter gradient of the per-example ER loss (double backprop) against
/// central differences of the oracle loss on `coords` random coordinates.
inline void check_er_gradient(TextClassifier& m, const Example& e,
                              const std::vector<std::pair<std::size_t, double>>& targets, ErLoss kind,
                              NormalizerGradient normalizer, std::size_t coords, std::mt19937_64& gen,
                              FdReport& out) {
  const auto acts = run_forward(m, e.token_ids);
  const int c = argmax(acts.logits);
  auto grad = Parameters::zeros(m.config());
  example_er_loss(m, e, acts, targets, kind, 1.0, &grad, normalizer);
  const auto base = oracle_scores(m, e, c);
  const double frozen = normalizer == NormalizerGradient::frozen ? max_abs(base) : 0.0;
  // Loss slope per target at the base point, for the straight-through surrogate.
  std::vector<double> weights;
  for (const auto& [i, t] : targets) {
    const double phi = std::abs(base[i]) / max_abs(base);
    const double diff = phi - t;
    const double slope = kind == ErLoss::mse ? 2.0 * diff : (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0));
    weights.push_back(slope / static_cast<double>(targets.size()));
  }
  const auto f = [&](const TextClassifier& mm) {
    if (normalizer == NormalizerGradient::straight_through) {
      return oracle_ratio_surrogate(mm, e, c, targets, weights);
    }
    return oracle_er_loss(mm, e, c, targets, kind, frozen);
  };
  for (const auto& [g, idx] : sample_coordinates(m, e.token_ids, coords, gen)) {
    out.add(grad.group(g)[idx], fd_param(m, g, idx, f));
  }
}

}  // namespace testing
