#include "exdebug/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace exdebug {

std::string_view to_string(AttributionMethod m) {
  return m == AttributionMethod::input_x_gradient ? "input_x_gradient" : "integrated_gradients";
}

AttributionMethod parse_attribution_method(std::string_view s) {
  if (s == "input_x_gradient") return AttributionMethod::input_x_gradient;
  if (s == "integrated_gradients") return AttributionMethod::integrated_gradients;
  throw std::invalid_argument("unknown attribution method '" + std::string(s) + "'");
}

std::string_view to_string(NormalizationMode m) {
  return m == NormalizationMode::abs_max ? "abs_max" : "clamp01";
}

NormalizationMode parse_normalization(std::string_view s) {
  if (s == "abs_max") return NormalizationMode::abs_max;
  if (s == "clamp01") return NormalizationMode::clamp01;
  throw std::invalid_argument("unknown normalization '" + std::string(s) + "'");
}

namespace {

void check_class(const TextClassifier& model, int c) {
  if (c < 0 || c >= model.config().num_classes) {
    throw std::invalid_argument("class " + std::to_string(c) + " outside [0, " +
                                std::to_string(model.config().num_classes) + ")");
  }
}

Vector mean_embedding(const TextClassifier& model, const Example& example) {
  return run_forward(model, example.token_ids).pooled;
}

}  // namespace

Vector logit_gradient_at(const TextClassifier& model, const Vector& pooled, int c) {
  const auto& p = model.params();
  const Vector pre = p.hidden_weights.transpose() * pooled + p.hidden_bias;
  const Vector q = (activate_d1(model.config().nonlinearity, pre).array() *
                    p.output_weights.col(c).array()).matrix();
  return p.hidden_weights * q;
}

Matrix input_gradient(const TextClassifier& model, const Example& example, int c) {
  check_class(model, c);
  const auto n = static_cast<Eigen::Index>(example.token_ids.size());
  const Vector g = logit_gradient_at(model, mean_embedding(model, example), c) /
                   static_cast<double>(n);
  Matrix out(n, g.size());
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) = g.transpose();
  return out;
}

Attribution input_times_gradient(const TextClassifier& model, const Example& example, int c) {
  const Matrix grad = input_gradient(model, example, c);
  const auto& E = model.params().embeddings;
  Attribution a{example.id, c, {}, AttributionMethod::input_x_gradient, 0};
  a.scores.reserve(example.token_ids.size());
  for (std::size_t i = 0; i < example.token_ids.size(); ++i) {
    a.scores.push_back(E.row(example.token_ids[i]).dot(grad.row(static_cast<Eigen::Index>(i))));
  }
  return a;
}

Attribution integrated_gradients(const TextClassifier& model, const Example& example, int c,
                                 int steps) {
  if (steps < 1) throw std::invalid_argument("integrated gradients needs at least one step");
  check_class(model, c);
  const Vector pooled = mean_embedding(model, example);
  const double n = static_cast<double>(example.token_ids.size());

  // Scaling every embedding by alpha scales the mean by alpha.
  Vector avg = Vector::Zero(pooled.size());
  for (int k = 0; k < steps; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(steps);
    avg += logit_gradient_at(model, alpha * pooled, c);
  }
  avg /= static_cast<double>(steps) * n;

  const auto& E = model.params().embeddings;
  Attribution a{example.id, c, {}, AttributionMethod::integrated_gradients, steps};
  a.scores.reserve(example.token_ids.size());
  for (TokenId t : example.token_ids) a.scores.push_back(E.row(t).dot(avg));
  return a;
}

Attribution attribute(const TextClassifier& model, const Example& example, int c,
                      AttributionMethod method, int steps) {
  return method == AttributionMethod::input_x_gradient
             ? input_times_gradient(model, example, c)
             : integrated_gradients(model, example, c, steps);
}

std::vector<double> normalize_scores(std::span<const double> scores, NormalizationMode mode) {
  std::vector<double> out(scores.size(), 0.0);
  if (scores.empty()) return out;
  if (mode == NormalizationMode::abs_max) {
    double mx = 0.0;
    for (double s : scores) mx = std::max(mx, std::abs(s));
    if (mx == 0.0) return out;
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = std::abs(scores[i]) / mx;
    return out;
  }
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  if (*hi == *lo) return std::vector<double>(scores.size(), 0.5);
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - *lo) / (*hi - *lo);
  return out;
}

NormalizedAttribution normalize(const Attribution& attr, NormalizationMode mode) {
  return {attr.example_id, attr.target_class, normalize_scores(attr.scores, mode), attr.method,
          attr.steps, mode};
}

std::vector<double> abs_max_backward(std::span<const double> scores,
                                     std::span<const double> normalized_adjoint,
                                     bool through_max) {
  std::vector<double> out(scores.size(), 0.0);
  std::size_t arg = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (std::abs(scores[i]) > std::abs(scores[arg])) arg = i;
  }
  if (scores.empty() || scores[arg] == 0.0) return out;

  const double mx = std::abs(scores[arg]);
  auto sign = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
  double dmax = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double adj = normalized_adjoint[i];
    if (adj == 0.0) continue;
    out[i] += adj * sign(scores[i]) / mx;
    dmax -= adj * std::abs(scores[i]) / (mx * mx);
  }
  if (through_max) out[arg] += dmax * sign(scores[arg]);
  return out;
}

void backprop_input_times_gradient(const TextClassifier& model, const Example& example,
                                   const Activations& acts, int c,
                                   std::span<const double> score_adjoint, double scale,
                                   Parameters& grad) {
  const auto& p = model.params();
  const auto nonlin = model.config().nonlinearity;
  const double n = static_cast<double>(acts.length);

  const Vector slope = activate_d1(nonlin, acts.pre);
  const Vector curvature = activate_d2(nonlin, acts.pre);
  const Vector v = p.output_weights.col(c);
  const Vector q = (slope.array() * v.array()).matrix();
  const Vector g = p.hidden_weights * q / n;

  // score_i = e_i^T W_h q / n, with q depending on the mean embedding through the slope.
  Vector ebar = Vector::Zero(p.embeddings.cols());
  for (std::size_t i = 0; i < example.token_ids.size(); ++i) {
    ebar += (scale * score_adjoint[i]) * p.embeddings.row(example.token_ids[i]).transpose();
  }
  ebar /= n;

  grad.hidden_weights.noalias() += ebar * q.transpose();
  const Vector qbar = p.hidden_weights.transpose() * ebar;
  grad.output_weights.col(c) += (qbar.array() * slope.array()).matrix();
  const Vector zbar = (qbar.array() * v.array() * curvature.array()).matrix();
  grad.hidden_bias += zbar;
  grad.hidden_weights.noalias() += acts.pooled * zbar.transpose();
  const Vector ubar = p.hidden_weights * zbar / n;

  for (std::size_t i = 0; i < example.token_ids.size(); ++i) {
    grad.embeddings.row(example.token_ids[i]) +=
        ((scale * score_adjoint[i]) * g + ubar).transpose();
  }
}

NormalizedAttribution explain(const TextClassifier& model, const Example& example,
                              const ExplanationOptions& options) {
  const int predicted = forward(model, example).predicted;
  return normalize(attribute(model, example, predicted, options.method, options.steps),
                   options.normalization);
}

TaskExplanation aggregate_task_explanation(const Dataset& data,
                                           std::span<const NormalizedAttribution> attributions,
                                           std::size_t top_k) {
  if (attributions.size() != data.size()) {
    throw std::invalid_argument("attributions do not align with the dataset");
  }
  struct Acc {
    double sum = 0.0;
    std::size_t count = 0;
    std::vector<std::string> support;
  };
  std::map<std::string, Acc> words;
  for (std::size_t e = 0; e < data.size(); ++e) {
    const auto& ex = data.examples[e];
    const auto& scores = attributions[e].scores;
    for (std::size_t i = 0; i < ex.raw_tokens.size(); ++i) {
      auto& acc = words[ex.raw_tokens[i]];
      acc.sum += scores[i];
      ++acc.count;
      if (acc.support.empty() || acc.support.back() != ex.id) acc.support.push_back(ex.id);
    }
  }

  TaskExplanation out;
  out.entries.reserve(words.size());
  for (auto& [word, acc] : words) {
    out.entries.push_back({word, acc.sum / static_cast<double>(acc.count), std::move(acc.support)});
  }
  std::stable_sort(out.entries.begin(), out.entries.end(), [](const auto& a, const auto& b) {
    return a.mean_importance > b.mean_importance;
  });
  if (out.entries.size() > top_k) out.entries.resize(top_k);
  return out;
}

TaskExplanation build_task_explanation(const TextClassifier& model, const Dataset& data,
                                       const ExplanationOptions& options, std::size_t top_k) {
  if (data.empty()) throw std::invalid_argument("task explanation needs a nonempty dataset");
  std::vector<NormalizedAttribution> attrs;
  attrs.reserve(data.size());
  for (const auto& ex : data.examples) attrs.push_back(explain(model, ex, options));
  return aggregate_task_explanation(data, attrs, top_k);
}

nlohmann::json to_json(const Attribution& a) {
  return {{"example_id", a.example_id},
          {"class", a.target_class},
          {"method", to_string(a.method)},
          {"scores", a.scores}};
}

nlohmann::json to_json(const NormalizedAttribution& a) {
  return {{"example_id", a.example_id},
          {"class", a.target_class},
          {"method", to_string(a.method)},
          {"normalization", to_string(a.mode)},
          {"scores", a.scores}};
}

nlohmann::json to_json(const TaskExplanation& t) {
  auto entries = nlohmann::json::array();
  for (const auto& e : t.entries) {
    entries.push_back(
        {{"word", e.word}, {"mean_importance", e.mean_importance}, {"support", e.support}});
  }
  return {{"entries", entries}};
}

}  // namespace exdebug
