#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "exdebug/dataset.hpp"
#include "exdebug/model.hpp"

namespace exdebug {

struct TrainConfig {
  int epochs = 20;
  double learning_rate = 0.1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

// Extra differentiable term added to the per-example cross-entropy. When grad
// is null only the value is wanted. The returned value is unscaled; `scale`
// applies to the gradient only.
using ExtraLoss = std::function<double(const TextClassifier& model, std::size_t example_index,
                                       const Activations& acts, double scale, Parameters* grad)>;

struct TrainHooks {
  std::function<void(int epoch, const TextClassifier& model)> on_epoch_start;
  ExtraLoss extra_loss;
  double extra_weight = 0.0;
};

struct TrainHistory {
  double initial_task_loss = 0.0;
  double initial_extra_loss = 0.0;
  // Full-data means measured after each epoch.
  std::vector<double> task_loss;
  std::vector<double> extra_loss;
};

/// Mini-batch gradient descent on mean-batch [cross-entropy + w * extra].
/// Throws DivergenceError on a non-finite loss or parameter; `model` is then
/// left in an unspecified state, so callers that need the original should copy.
TrainHistory run_training(TextClassifier& model, const Dataset& train, const TrainConfig& config,
                          const TrainHooks& hooks = {});

TextClassifier train_baseline(TextClassifier model, const Dataset& train, const TrainConfig& config,
                              TrainHistory* history = nullptr);

double mean_task_loss(const TextClassifier& model, const Dataset& data);

/// Fraction of correctly predicted examples. Throws std::invalid_argument on empty data.
double evaluate(const TextClassifier& model, const Dataset& data);

}  // namespace exdebug
