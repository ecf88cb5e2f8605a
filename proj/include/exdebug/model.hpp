#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "exdebug/dataset.hpp"
#include "exdebug/jet.hpp"

namespace exdebug {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Nonlinearity { tanh, identity };

std::string_view to_string(Nonlinearity n);
Nonlinearity parse_nonlinearity(std::string_view s);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  int num_classes = 2;
  Nonlinearity nonlinearity = Nonlinearity::tanh;
};

enum class ParameterGroup { embeddings, hidden_weights, hidden_bias, output_weights, output_bias };

inline constexpr ParameterGroup kAllGroups[] = {
    ParameterGroup::embeddings, ParameterGroup::hidden_weights, ParameterGroup::hidden_bias,
    ParameterGroup::output_weights, ParameterGroup::output_bias};

std::string_view to_string(ParameterGroup g);

// Shapes: embeddings |V| x d, hidden_weights d x h, hidden_bias h,
// output_weights h x C, output_bias C. Also used to hold gradients.
struct Parameters {
  Matrix embeddings;
  Matrix hidden_weights;
  Vector hidden_bias;
  Matrix output_weights;
  Vector output_bias;

  static Parameters zeros(const ModelConfig& config);

  std::span<double> group(ParameterGroup g);
  std::span<const double> group(ParameterGroup g) const;

  void set_zero();
  /// this += alpha * other
  void axpy(double alpha, const Parameters& other);
  bool all_finite() const;
  std::size_t size() const;

  /// Bitwise comparison of every parameter.
  bool identical(const Parameters& other) const;
};

class TextClassifier {
 public:
  explicit TextClassifier(const ModelConfig& config);
  TextClassifier(const ModelConfig& config, Parameters params);

  /// Small Gaussian initialization; deterministic in seed.
  static TextClassifier random(const ModelConfig& config, std::uint64_t seed, double scale = 0.1);

  const ModelConfig& config() const { return config_; }
  Parameters& params() { return params_; }
  const Parameters& params() const { return params_; }

 private:
  ModelConfig config_;
  Parameters params_;
};

// Nonlinearity and its first two derivatives, elementwise.
Vector activate(Nonlinearity n, const Vector& z);
Vector activate_d1(Nonlinearity n, const Vector& z);
Vector activate_d2(Nonlinearity n, const Vector& z);

/// Intermediate values of one forward pass.
struct Activations {
  std::size_t length = 0;
  Vector pooled;  // mean token embedding, d
  Vector pre;     // hidden pre-activation, h
  Vector hidden;  // h
  Vector logits;  // C
};

/// Throws std::out_of_range for token ids outside the vocabulary or an empty sequence.
Activations run_forward(const TextClassifier& model, std::span<const TokenId> tokens);

struct Prediction {
  std::string example_id;
  Vector logits;
  int predicted = 0;
  bool correct = false;
};

/// Lowest index wins ties.
int argmax(const Vector& v);

Prediction forward(const TextClassifier& model, const Example& example);
std::vector<Prediction> predict_all(const TextClassifier& model, const Dataset& data);

double cross_entropy(const Vector& logits, int label);

/// Adds scale * d(cross_entropy)/d(params) into grad and returns the loss.
double accumulate_task_gradient(const TextClassifier& model, const Example& example,
                                const Activations& acts, double scale, Parameters& grad);

/// Logit vector carried through second-order jets, with every parameter
/// perturbed along `direction`.
std::vector<Jet2> logits_along(const TextClassifier& model, const Example& example,
                               const Parameters& direction);

}  // namespace exdebug
