#include "exdebug/training.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "exdebug/errors.hpp"
#include "exdebug/rng.hpp"

namespace exdebug {

namespace {

struct Objective {
  double task = 0.0;
  double extra = 0.0;
};

Objective full_objective(const TextClassifier& model, const Dataset& data, const TrainHooks& hooks) {
  Objective o;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data.examples[i];
    const auto acts = run_forward(model, ex.token_ids);
    o.task += cross_entropy(acts.logits, ex.label);
    if (hooks.extra_loss) {
      o.extra += hooks.extra_loss(model, i, acts, 0.0, nullptr);
    }
  }
  o.task /= static_cast<double>(data.size());
  o.extra /= static_cast<double>(data.size());
  return o;
}

}  // namespace

TrainHistory run_training(TextClassifier& model, const Dataset& train, const TrainConfig& config,
                          const TrainHooks& hooks) {
  if (train.empty()) throw std::invalid_argument("training set is empty");
  if (config.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!train.encoded()) throw std::invalid_argument("training set is not encoded");

  const bool use_extra = hooks.extra_loss && hooks.extra_weight != 0.0;
  TrainHistory history;
  if (hooks.on_epoch_start) hooks.on_epoch_start(0, model);
  {
    const auto o = full_objective(model, train, hooks);
    history.initial_task_loss = o.task;
    history.initial_extra_loss = o.extra;
  }

  Rng rng(config.seed);
  std::vector<std::size_t> order(train.size());
  Parameters grad = Parameters::zeros(model.config());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (hooks.on_epoch_start && epoch > 0) hooks.on_epoch_start(epoch, model);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      grad.set_zero();
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        const auto& ex = train.examples[idx];
        const auto acts = run_forward(model, ex.token_ids);
        batch_loss += accumulate_task_gradient(model, ex, acts, scale, grad);
        if (use_extra) {
          batch_loss += hooks.extra_weight *
                        hooks.extra_loss(model, idx, acts, scale * hooks.extra_weight, &grad);
        }
      }
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch + 1));
      }
      model.params().axpy(-config.learning_rate, grad);
      if (!model.params().all_finite()) {
        throw DivergenceError("non-finite parameters in epoch " + std::to_string(epoch + 1));
      }
    }

    const auto o = full_objective(model, train, hooks);
    if (!std::isfinite(o.task) || !std::isfinite(o.extra)) {
      throw DivergenceError("non-finite loss after epoch " + std::to_string(epoch + 1));
    }
    history.task_loss.push_back(o.task);
    history.extra_loss.push_back(o.extra);
  }
  return history;
}

TextClassifier train_baseline(TextClassifier model, const Dataset& train, const TrainConfig& config,
                              TrainHistory* history) {
  auto h = run_training(model, train, config);
  if (history) *history = std::move(h);
  return model;
}

double mean_task_loss(const TextClassifier& model, const Dataset& data) {
  return full_objective(model, data, {}).task;
}

double evaluate(const TextClassifier& model, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("evaluation set is empty");
  std::size_t correct = 0;
  for (const auto& ex : data.examples) correct += forward(model, ex).correct ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace exdebug
