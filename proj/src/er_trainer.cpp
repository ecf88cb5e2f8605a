#include "exdebug/er_trainer.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "exdebug/errors.hpp"

namespace exdebug {

using nlohmann::json;

std::string_view to_string(ErLoss l) { return l == ErLoss::mse ? "mse" : "mae"; }

ErLoss parse_er_loss(std::string_view s) {
  if (s == "mse") return ErLoss::mse;
  if (s == "mae") return ErLoss::mae;
  throw std::invalid_argument("unknown ER loss '" + std::string(s) + "'");
}

std::string_view to_string(NormalizerGradient g) {
  switch (g) {
    case NormalizerGradient::frozen: return "frozen";
    case NormalizerGradient::exact: return "exact";
    case NormalizerGradient::straight_through: return "straight_through";
  }
  return "?";
}

NormalizerGradient parse_normalizer_gradient(std::string_view s) {
  if (s == "frozen") return NormalizerGradient::frozen;
  if (s == "exact") return NormalizerGradient::exact;
  if (s == "straight_through") return NormalizerGradient::straight_through;
  throw std::invalid_argument("unknown normalizer gradient '" + std::string(s) + "'");
}

json to_json(const ERConfig& c) {
  return {{"loss", to_string(c.loss)},        {"lambda", c.lambda},
          {"epochs", c.epochs},               {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},       {"seed", c.seed},
          {"rebuild_every", c.rebuild_every}, {"display_method", to_string(c.display_method)},
          {"normalizer_gradient", to_string(c.normalizer_gradient)}};
}

ERConfig er_config_from_json(const json& j, ERConfig c) {
  if (j.contains("loss")) c.loss = parse_er_loss(j["loss"].get<std::string>());
  if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("rebuild_every")) c.rebuild_every = j["rebuild_every"].get<int>();
  if (j.contains("display_method")) {
    c.display_method = parse_attribution_method(j["display_method"].get<std::string>());
  }
  if (j.contains("normalizer_gradient")) {
    c.normalizer_gradient = parse_normalizer_gradient(j["normalizer_gradient"].get<std::string>());
  }
  if (!(c.lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
  if (c.epochs < 0) throw std::invalid_argument("epochs must be nonnegative");
  if (!(c.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (c.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (c.rebuild_every < 1) throw std::invalid_argument("rebuild_every must be at least 1");
  return c;
}

namespace {

void check_positions(std::size_t n, std::span<const std::pair<std::size_t, double>> targets) {
  for (const auto& [pos, t] : targets) {
    if (pos >= n) {
      throw ConsistencyError("target position " + std::to_string(pos) +
                             " outside sequence of length " + std::to_string(n));
    }
  }
}

}  // namespace

double er_loss(std::span<const double> normalized,
               std::span<const std::pair<std::size_t, double>> targets, ErLoss kind) {
  check_positions(normalized.size(), targets);
  if (targets.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [pos, t] : targets) {
    const double diff = normalized[pos] - t;
    sum += kind == ErLoss::mse ? diff * diff : std::abs(diff);
  }
  return sum / static_cast<double>(targets.size());
}

std::vector<double> er_loss_gradient(std::span<const double> normalized,
                                     std::span<const std::pair<std::size_t, double>> targets,
                                     ErLoss kind) {
  check_positions(normalized.size(), targets);
  std::vector<double> out(normalized.size(), 0.0);
  if (targets.empty()) return out;
  const double inv = 1.0 / static_cast<double>(targets.size());
  for (const auto& [pos, t] : targets) {
    const double diff = normalized[pos] - t;
    if (kind == ErLoss::mse) {
      out[pos] += 2.0 * diff * inv;
    } else {
      out[pos] += (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) * inv;
    }
  }
  return out;
}

namespace {

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

std::vector<double> ratio_backward(std::span<const double> scores, std::span<const double> adjoint) {
  const std::size_t n = scores.size();
  std::vector<double> out(n, 0.0);
  // Largest and runner-up |s|, so each position can find the max over the others.
  std::size_t first = 0;
  std::size_t second = n;
  for (std::size_t j = 1; j < n; ++j) {
    if (std::abs(scores[j]) > std::abs(scores[first])) {
      second = first;
      first = j;
    } else if (second == n || std::abs(scores[j]) > std::abs(scores[second])) {
      second = j;
    }
  }
  if (n < 2) return out;
  for (std::size_t i = 0; i < n; ++i) {
    if (adjoint[i] == 0.0) continue;
    const std::size_t k = i == first ? second : first;
    const double m = std::abs(scores[k]);
    if (m == 0.0) continue;
    const double r = std::abs(scores[i]) / m;
    out[i] += adjoint[i] * sign(scores[i]) / m;
    out[k] -= adjoint[i] * r * sign(scores[k]) / m;
  }
  return out;
}

double example_er_loss(const TextClassifier& model, const Example& example, const Activations& acts,
                       std::span<const std::pair<std::size_t, double>> targets, ErLoss kind,
                       double scale, Parameters* grad, NormalizerGradient normalizer) {
  if (targets.empty()) return 0.0;
  const auto& p = model.params();
  const int c = argmax(acts.logits);
  const Vector q = (activate_d1(model.config().nonlinearity, acts.pre).array() *
                    p.output_weights.col(c).array()).matrix();
  const Vector g = p.hidden_weights * q / static_cast<double>(acts.length);

  std::vector<double> scores;
  scores.reserve(example.token_ids.size());
  for (TokenId t : example.token_ids) scores.push_back(p.embeddings.row(t).dot(g));
  const auto phi = normalize_scores(scores, NormalizationMode::abs_max);
  const double loss = er_loss(phi, targets, kind);

  if (grad != nullptr) {
    const auto dphi = er_loss_gradient(phi, targets, kind);
    const auto dscore = normalizer == NormalizerGradient::straight_through
                            ? ratio_backward(scores, dphi)
                            : abs_max_backward(scores, dphi, normalizer == NormalizerGradient::exact);
    backprop_input_times_gradient(model, example, acts, c, dscore, scale, *grad);
  }
  return loss;
}

double mean_target_attribution(const TextClassifier& model, const Dataset& data,
                               const TargetMap& targets) {
  if (targets.empty()) return 0.0;
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.size(); ++i) index.emplace(data.examples[i].id, i);

  double sum = 0.0;
  std::string current;
  std::vector<double> phi;
  for (const auto& [key, entry] : targets.entries()) {
    if (key.example_id != current) {
      const auto it = index.find(key.example_id);
      if (it == index.end()) throw ConsistencyError("target for unknown example " + key.example_id);
      phi = explain(model, data.examples[it->second]).scores;
      current = key.example_id;
    }
    sum += phi.at(key.position);
  }
  return sum / static_cast<double>(targets.size());
}

json to_json(const DebugReport& r) {
  return {{"epochs_run", r.epochs_run},
          {"lambda", r.lambda},
          {"loss", to_string(r.loss)},
          {"policy", to_string(r.policy)},
          {"display_method", to_string(r.display_method)},
          {"training_method", to_string(r.training_method)},
          {"final_task_loss", r.final_task_loss},
          {"final_er_loss", r.final_er_loss},
          {"task_loss_history", r.task_loss_history},
          {"er_loss_history", r.er_loss_history},
          {"initial_targets", r.initial_targets},
          {"pre_id_accuracy", r.pre_id_accuracy},
          {"post_id_accuracy", r.post_id_accuracy},
          {"pre_ood_accuracy", r.pre_ood_accuracy},
          {"post_ood_accuracy", r.post_ood_accuracy},
          {"pre_target_attribution", r.pre_target_attribution},
          {"post_target_attribution", r.post_target_attribution}};
}

DebugResult debug_retrain(const TextClassifier& model, const Dataset& train,
                          std::span<const FeedbackOp> log, RegularizationPolicy policy,
                          const ERConfig& config, const EvalSets& eval) {
  if (!(config.lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
  if (config.rebuild_every < 1) throw std::invalid_argument("rebuild_every must be at least 1");

  const FeedbackState state = apply_feedback(log);
  const TargetMap initial = build_targets(state, predict_all(model, train), train, policy);

  DebugReport report;
  report.lambda = config.lambda;
  report.loss = config.loss;
  report.policy = policy;
  report.display_method = config.display_method;
  report.initial_targets = initial.size();
  report.pre_target_attribution = mean_target_attribution(model, train, initial);
  if (eval.id_eval) report.pre_id_accuracy = evaluate(model, *eval.id_eval);
  for (const auto* d : eval.ood_eval) report.pre_ood_accuracy.push_back(evaluate(model, *d));

  // Per-example targets, indexed like train.examples.
  std::vector<PositionTargets> targets(train.size());
  auto rebuild = [&](const TargetMap& map) {
    for (auto& t : targets) t.clear();
    for (std::size_t i = 0; i < train.size(); ++i) {
      targets[i] = map.for_example(train.examples[i].id);
    }
  };

  TrainHooks hooks;
  hooks.extra_weight = state.empty() ? 0.0 : config.lambda;
  hooks.on_epoch_start = [&](int epoch, const TextClassifier& current) {
    if (epoch == 0) {
      rebuild(initial);
    } else if (epoch % config.rebuild_every == 0) {
      rebuild(build_targets(state, predict_all(current, train), train, policy));
    }
  };
  hooks.extra_loss = [&](const TextClassifier& current, std::size_t idx, const Activations& acts,
                         double scale, Parameters* grad) {
    return example_er_loss(current, train.examples[idx], acts, targets[idx], config.loss, scale,
                           grad, config.normalizer_gradient);
  };

  TextClassifier updated = model;
  const auto history = run_training(updated, train, config.train_config(), hooks);

  report.epochs_run = config.epochs;
  report.task_loss_history = history.task_loss;
  report.er_loss_history = history.extra_loss;
  report.final_task_loss =
      history.task_loss.empty() ? history.initial_task_loss : history.task_loss.back();
  report.final_er_loss =
      history.extra_loss.empty() ? history.initial_extra_loss : history.extra_loss.back();
  report.post_target_attribution = mean_target_attribution(updated, train, initial);
  if (eval.id_eval) report.post_id_accuracy = evaluate(updated, *eval.id_eval);
  for (const auto* d : eval.ood_eval) report.post_ood_accuracy.push_back(evaluate(updated, *d));
  return {std::move(updated), std::move(report)};
}

}  // namespace exdebug
