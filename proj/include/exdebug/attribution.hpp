#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "exdebug/dataset.hpp"
#include "exdebug/model.hpp"

namespace exdebug {

enum class AttributionMethod { input_x_gradient, integrated_gradients };
enum class NormalizationMode { abs_max, clamp01 };

std::string_view to_string(AttributionMethod m);
AttributionMethod parse_attribution_method(std::string_view s);
std::string_view to_string(NormalizationMode m);
NormalizationMode parse_normalization(std::string_view s);

inline constexpr int kDefaultIgSteps = 64;

struct Attribution {
  std::string example_id;
  int target_class = 0;
  std::vector<double> scores;  // one per token
  AttributionMethod method = AttributionMethod::input_x_gradient;
  int steps = 0;  // integrated gradients only
};

struct NormalizedAttribution {
  std::string example_id;
  int target_class = 0;
  std::vector<double> scores;  // each in [0, 1]
  AttributionMethod method = AttributionMethod::input_x_gradient;
  int steps = 0;
  NormalizationMode mode = NormalizationMode::abs_max;
};

/// d logit_c / d pooled at the given pooled embedding.
Vector logit_gradient_at(const TextClassifier& model, const Vector& pooled, int c);

/// d logit_c / d e_i for every token position (n x d). Rows coincide under mean pooling.
Matrix input_gradient(const TextClassifier& model, const Example& example, int c);

/// score_i = e_i . d logit_c / d e_i
Attribution input_times_gradient(const TextClassifier& model, const Example& example, int c);

/// Left Riemann sum of the path integral from the zero-embedding baseline.
/// Throws std::invalid_argument when steps < 1.
Attribution integrated_gradients(const TextClassifier& model, const Example& example, int c,
                                 int steps = kDefaultIgSteps);

Attribution attribute(const TextClassifier& model, const Example& example, int c,
                      AttributionMethod method, int steps = kDefaultIgSteps);

std::vector<double> normalize_scores(std::span<const double> scores, NormalizationMode mode);
NormalizedAttribution normalize(const Attribution& attr,
                                NormalizationMode mode = NormalizationMode::abs_max);

/// Pulls an adjoint on abs_max-normalized scores back onto the raw scores.
/// With `through_max` the dependence of the normalizer on the scores is
/// included (maximum at the lowest index among ties); otherwise the
/// normalizer is held constant. An all-zero vector has zero adjoint.
std::vector<double> abs_max_backward(std::span<const double> scores,
                                     std::span<const double> normalized_adjoint,
                                     bool through_max = true);

/// Adds scale * d(sum_i adjoint_i * score_i)/d(params) into grad, where score_i
/// is the input-times-gradient score toward class c. This differentiates
/// through the input gradient itself (second order in the parameters).
void backprop_input_times_gradient(const TextClassifier& model, const Example& example,
                                   const Activations& acts, int c,
                                   std::span<const double> score_adjoint, double scale,
                                   Parameters& grad);

struct ExplanationOptions {
  AttributionMethod method = AttributionMethod::input_x_gradient;
  int steps = kDefaultIgSteps;
  NormalizationMode normalization = NormalizationMode::abs_max;
};

/// Normalized attribution toward the predicted class.
NormalizedAttribution explain(const TextClassifier& model, const Example& example,
                              const ExplanationOptions& options = {});

struct TaskExplanationEntry {
  std::string word;
  double mean_importance = 0.0;
  std::vector<std::string> support;  // ids of examples containing the word, data order
};

struct TaskExplanation {
  std::vector<TaskExplanationEntry> entries;
};

/// Per-word mean of normalized predicted-class scores, one contribution per
/// occurrence. Sorted by descending mean, then by word.
TaskExplanation build_task_explanation(const TextClassifier& model, const Dataset& data,
                                       const ExplanationOptions& options, std::size_t top_k);

/// Same aggregation from precomputed per-example normalized scores (aligned with data).
TaskExplanation aggregate_task_explanation(const Dataset& data,
                                           std::span<const NormalizedAttribution> attributions,
                                           std::size_t top_k);

nlohmann::json to_json(const Attribution& a);
nlohmann::json to_json(const NormalizedAttribution& a);
nlohmann::json to_json(const TaskExplanation& t);

}  // namespace exdebug
