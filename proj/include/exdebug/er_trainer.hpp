#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "exdebug/attribution.hpp"
#include "exdebug/feedback.hpp"
#include "exdebug/model.hpp"
#include "exdebug/training.hpp"

namespace exdebug {

enum class ErLoss { mse, mae };

// How the abs_max normalizer enters the ER gradient. `exact` differentiates
// max_j |s_j| as well, which gives a zero gradient whenever the only targeted
// token is also the top-scoring one; `frozen` treats it as a constant.
// `straight_through` writes phi_i = min(1, |s_i| / max_{j != i} |s_j|) and
// differentiates the ratio, passing the gradient through the clip at 1.
enum class NormalizerGradient { frozen, exact, straight_through };

std::string_view to_string(ErLoss l);
ErLoss parse_er_loss(std::string_view s);
std::string_view to_string(NormalizerGradient g);
NormalizerGradient parse_normalizer_gradient(std::string_view s);

struct ERConfig {
  ErLoss loss = ErLoss::mse;
  double lambda = 1.0;
  int epochs = 20;
  double learning_rate = 0.1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Targets are rebuilt from fresh predictions every this many epochs.
  int rebuild_every = 1;
  NormalizerGradient normalizer_gradient = NormalizerGradient::straight_through;
  // Method shown to the user; training always regularizes input x gradient.
  AttributionMethod display_method = AttributionMethod::input_x_gradient;

  TrainConfig train_config() const { return {epochs, learning_rate, batch_size, seed}; }
};

nlohmann::json to_json(const ERConfig& c);
/// Missing fields keep their defaults.
ERConfig er_config_from_json(const nlohmann::json& j, ERConfig base = {});

using PositionTargets = std::vector<std::pair<std::size_t, double>>;

/// Mean over targeted positions of (phi - t)^2 or |phi - t|; 0 with no targets.
/// Throws ConsistencyError for a position outside the sequence.
double er_loss(std::span<const double> normalized, std::span<const std::pair<std::size_t, double>> targets,
               ErLoss kind);

/// d er_loss / d normalized.
std::vector<double> er_loss_gradient(std::span<const double> normalized,
                                     std::span<const std::pair<std::size_t, double>> targets,
                                     ErLoss kind);

/// ER loss of one example against its targets (input x gradient toward the
/// predicted class, abs_max-normalized). With a non-null grad, adds
/// scale * d(loss)/d(params), differentiating through the attribution.
/// Pulls an adjoint on phi back onto raw scores through
/// |s_i| / max_{j != i} |s_j| (max at the lowest index among ties).
std::vector<double> ratio_backward(std::span<const double> scores, std::span<const double> adjoint);

double example_er_loss(const TextClassifier& model, const Example& example, const Activations& acts,
                       std::span<const std::pair<std::size_t, double>> targets, ErLoss kind,
                       double scale = 0.0, Parameters* grad = nullptr,
                       NormalizerGradient normalizer = NormalizerGradient::straight_through);

struct EvalSets {
  const Dataset* id_eval = nullptr;
  std::vector<const Dataset*> ood_eval;
};

struct DebugReport {
  int epochs_run = 0;
  double lambda = 0.0;
  ErLoss loss = ErLoss::mse;
  RegularizationPolicy policy = RegularizationPolicy::all;
  AttributionMethod display_method = AttributionMethod::input_x_gradient;
  AttributionMethod training_method = AttributionMethod::input_x_gradient;
  double final_task_loss = 0.0;
  double final_er_loss = 0.0;
  std::vector<double> task_loss_history;
  std::vector<double> er_loss_history;
  std::size_t initial_targets = 0;
  double pre_id_accuracy = 0.0;
  double post_id_accuracy = 0.0;
  std::vector<double> pre_ood_accuracy;
  std::vector<double> post_ood_accuracy;
  // Mean normalized attribution over the positions targeted before retraining.
  double pre_target_attribution = 0.0;
  double post_target_attribution = 0.0;
};

nlohmann::json to_json(const DebugReport& r);

struct DebugResult {
  TextClassifier model;
  DebugReport report;
};

/// Warm-started retraining on cross-entropy + lambda * ER. Targets come from
/// the feedback log replayed against fresh predictions. Throws DivergenceError;
/// the input model is never modified.
DebugResult debug_retrain(const TextClassifier& model, const Dataset& train,
                          std::span<const FeedbackOp> log, RegularizationPolicy policy,
                          const ERConfig& config, const EvalSets& eval = {});

/// Mean abs_max-normalized input-x-gradient score at every targeted position.
double mean_target_attribution(const TextClassifier& model, const Dataset& data,
                               const TargetMap& targets);

}  // namespace exdebug
