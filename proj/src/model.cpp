#include "exdebug/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "exdebug/rng.hpp"

namespace exdebug {

std::string_view to_string(Nonlinearity n) {
  return n == Nonlinearity::tanh ? "tanh" : "identity";
}

Nonlinearity parse_nonlinearity(std::string_view s) {
  if (s == "tanh") return Nonlinearity::tanh;
  if (s == "identity") return Nonlinearity::identity;
  throw std::invalid_argument("unknown nonlinearity '" + std::string(s) + "'");
}

std::string_view to_string(ParameterGroup g) {
  switch (g) {
    case ParameterGroup::embeddings: return "embeddings";
    case ParameterGroup::hidden_weights: return "hidden_weights";
    case ParameterGroup::hidden_bias: return "hidden_bias";
    case ParameterGroup::output_weights: return "output_weights";
    case ParameterGroup::output_bias: return "output_bias";
  }
  return "?";
}

Parameters Parameters::zeros(const ModelConfig& c) {
  const auto V = static_cast<Eigen::Index>(c.vocab_size);
  const auto d = static_cast<Eigen::Index>(c.embed_dim);
  const auto h = static_cast<Eigen::Index>(c.hidden_dim);
  const auto C = static_cast<Eigen::Index>(c.num_classes);
  return Parameters{Matrix::Zero(V, d), Matrix::Zero(d, h), Vector::Zero(h), Matrix::Zero(h, C),
                    Vector::Zero(C)};
}

std::span<double> Parameters::group(ParameterGroup g) {
  const auto& self = *this;
  const auto s = self.group(g);
  return {const_cast<double*>(s.data()), s.size()};
}

std::span<const double> Parameters::group(ParameterGroup g) const {
  auto view = [](const auto& m) {
    return std::span<const double>(m.data(), static_cast<std::size_t>(m.size()));
  };
  switch (g) {
    case ParameterGroup::embeddings: return view(embeddings);
    case ParameterGroup::hidden_weights: return view(hidden_weights);
    case ParameterGroup::hidden_bias: return view(hidden_bias);
    case ParameterGroup::output_weights: return view(output_weights);
    case ParameterGroup::output_bias: return view(output_bias);
  }
  return {};
}

void Parameters::set_zero() {
  embeddings.setZero();
  hidden_weights.setZero();
  hidden_bias.setZero();
  output_weights.setZero();
  output_bias.setZero();
}

void Parameters::axpy(double alpha, const Parameters& o) {
  embeddings.noalias() += alpha * o.embeddings;
  hidden_weights.noalias() += alpha * o.hidden_weights;
  hidden_bias.noalias() += alpha * o.hidden_bias;
  output_weights.noalias() += alpha * o.output_weights;
  output_bias.noalias() += alpha * o.output_bias;
}

bool Parameters::all_finite() const {
  return embeddings.allFinite() && hidden_weights.allFinite() && hidden_bias.allFinite() &&
         output_weights.allFinite() && output_bias.allFinite();
}

std::size_t Parameters::size() const {
  std::size_t n = 0;
  for (auto g : kAllGroups) n += group(g).size();
  return n;
}

bool Parameters::identical(const Parameters& o) const {
  for (auto g : kAllGroups) {
    const auto a = group(g);
    const auto b = o.group(g);
    if (a.size() != b.size()) return false;
    if (std::memcmp(a.data(), b.data(), a.size_bytes()) != 0) return false;
  }
  return true;
}

TextClassifier::TextClassifier(const ModelConfig& config)
    : config_(config), params_(Parameters::zeros(config)) {}

TextClassifier::TextClassifier(const ModelConfig& config, Parameters params)
    : config_(config), params_(std::move(params)) {
  const auto expect = Parameters::zeros(config);
  for (auto g : kAllGroups) {
    if (params_.group(g).size() != expect.group(g).size()) {
      throw std::invalid_argument("parameter group " + std::string(to_string(g)) +
                                  " does not match the model configuration");
    }
  }
}

TextClassifier TextClassifier::random(const ModelConfig& config, std::uint64_t seed, double scale) {
  TextClassifier m(config);
  Rng rng(seed);
  for (auto g : kAllGroups) {
    if (g == ParameterGroup::hidden_bias || g == ParameterGroup::output_bias) continue;
    for (double& x : m.params_.group(g)) x = scale * rng.normal();
  }
  return m;
}

Vector activate(Nonlinearity n, const Vector& z) {
  if (n == Nonlinearity::identity) return z;
  return z.array().tanh().matrix();
}

Vector activate_d1(Nonlinearity n, const Vector& z) {
  if (n == Nonlinearity::identity) return Vector::Ones(z.size());
  const Eigen::ArrayXd t = z.array().tanh();
  return (1.0 - t * t).matrix();
}

Vector activate_d2(Nonlinearity n, const Vector& z) {
  if (n == Nonlinearity::identity) return Vector::Zero(z.size());
  const Eigen::ArrayXd t = z.array().tanh();
  return (-2.0 * t * (1.0 - t * t)).matrix();
}

Activations run_forward(const TextClassifier& model, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw std::out_of_range("cannot run the model on an empty sequence");
  const auto& p = model.params();
  const auto V = p.embeddings.rows();
  Activations a;
  a.length = tokens.size();
  a.pooled = Vector::Zero(p.embeddings.cols());
  // Summing in id order makes the pooled vector bitwise independent of token order.
  std::vector<TokenId> sorted(tokens.begin(), tokens.end());
  std::sort(sorted.begin(), sorted.end());
  for (TokenId t : sorted) {
    if (t < 0 || t >= V) {
      throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary of size " +
                              std::to_string(V));
    }
    a.pooled += p.embeddings.row(t).transpose();
  }
  a.pooled /= static_cast<double>(tokens.size());
  a.pre = p.hidden_weights.transpose() * a.pooled + p.hidden_bias;
  a.hidden = activate(model.config().nonlinearity, a.pre);
  a.logits = p.output_weights.transpose() * a.hidden + p.output_bias;
  return a;
}

int argmax(const Vector& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

Prediction forward(const TextClassifier& model, const Example& example) {
  const auto acts = run_forward(model, example.token_ids);
  Prediction p;
  p.example_id = example.id;
  p.logits = acts.logits;
  p.predicted = argmax(acts.logits);
  p.correct = p.predicted == example.label;
  return p;
}

std::vector<Prediction> predict_all(const TextClassifier& model, const Dataset& data) {
  std::vector<Prediction> out;
  out.reserve(data.size());
  for (const auto& e : data.examples) out.push_back(forward(model, e));
  return out;
}

namespace {

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

}  // namespace

double cross_entropy(const Vector& logits, int label) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits[label];
}

double accumulate_task_gradient(const TextClassifier& model, const Example& example,
                                const Activations& acts, double scale, Parameters& grad) {
  const auto& p = model.params();
  Vector dlogits = softmax(acts.logits);
  dlogits[example.label] -= 1.0;
  dlogits *= scale;

  grad.output_weights.noalias() += acts.hidden * dlogits.transpose();
  grad.output_bias += dlogits;
  const Vector dpre =
      ((p.output_weights * dlogits).array() *
       activate_d1(model.config().nonlinearity, acts.pre).array()).matrix();
  grad.hidden_weights.noalias() += acts.pooled * dpre.transpose();
  grad.hidden_bias += dpre;
  const Vector dpooled = (p.hidden_weights * dpre) / static_cast<double>(acts.length);
  for (TokenId t : example.token_ids) grad.embeddings.row(t) += dpooled.transpose();
  return cross_entropy(acts.logits, example.label);
}

std::vector<Jet2> logits_along(const TextClassifier& model, const Example& example,
                               const Parameters& direction) {
  const auto& p = model.params();
  const auto& q = direction;
  const auto d = p.embeddings.cols();
  const auto h = p.hidden_weights.cols();
  const auto C = p.output_weights.cols();
  const auto n = static_cast<double>(example.token_ids.size());
  auto jet = [](double v, double dv) { return Jet2{v, dv, 0.0}; };

  std::vector<Jet2> pooled(static_cast<std::size_t>(d));
  for (TokenId t : example.token_ids) {
    for (Eigen::Index k = 0; k < d; ++k) {
      pooled[k] += jet(p.embeddings(t, k), q.embeddings(t, k));
    }
  }
  for (auto& x : pooled) x = (1.0 / n) * x;

  std::vector<Jet2> hidden(static_cast<std::size_t>(h));
  for (Eigen::Index j = 0; j < h; ++j) {
    Jet2 z = jet(p.hidden_bias[j], q.hidden_bias[j]);
    for (Eigen::Index k = 0; k < d; ++k) {
      z += pooled[k] * jet(p.hidden_weights(k, j), q.hidden_weights(k, j));
    }
    hidden[j] = model.config().nonlinearity == Nonlinearity::tanh ? tanh(z) : z;
  }

  std::vector<Jet2> logits(static_cast<std::size_t>(C));
  for (Eigen::Index c = 0; c < C; ++c) {
    Jet2 y = jet(p.output_bias[c], q.output_bias[c]);
    for (Eigen::Index j = 0; j < h; ++j) {
      y += hidden[j] * jet(p.output_weights(j, c), q.output_weights(j, c));
    }
    logits[c] = y;
  }
  return logits;
}

}  // namespace exdebug
