#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "exdebug/dataset.hpp"
#include "exdebug/model.hpp"

namespace testing {

using namespace exdebug;

inline bool rel_close(double a, double b, double rel = 1e-4, double floor = 1e-9) {
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + floor;
}

inline ModelConfig small_config(std::size_t vocab, std::size_t d = 6, std::size_t h = 5, int classes = 3,
                                Nonlinearity nl = Nonlinearity::tanh) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = d;
  c.hidden_dim = h;
  c.num_classes = classes;
  c.nonlinearity = nl;
  return c;
}

// Random model with nonzero biases so no term vanishes by accident.
inline TextClassifier random_model(const ModelConfig& c, std::uint64_t seed, double scale = 0.5) {
  auto m = TextClassifier::random(c, seed, scale);
  std::mt19937_64 gen(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& b : m.params().group(ParameterGroup::hidden_bias)) b = n(gen);
  for (auto& b : m.params().group(ParameterGroup::output_bias)) b = n(gen);
  return m;
}

inline Example make_example(std::string id, std::vector<TokenId> ids, int label = 0) {
  Example e;
  e.id = std::move(id);
  for (auto t : ids) e.raw_tokens.push_back("w" + std::to_string(t));
  e.token_ids = std::move(ids);
  e.label = label;
  return e;
}

inline Example random_example(std::string id, std::size_t vocab, std::size_t n, std::mt19937_64& gen,
                              int label = 0) {
  std::uniform_int_distribution<TokenId> pick(2, static_cast<TokenId>(vocab) - 1);
  std::vector<TokenId> ids(n);
  for (auto& t : ids) t = pick(gen);
  return make_example(std::move(id), std::move(ids), label);
}

/// Central difference of f with respect to one flat parameter coordinate.
inline double fd_param(TextClassifier& model, ParameterGroup g, std::size_t idx,
                       const std::function<double(const TextClassifier&)>& f, double h = 1e-5) {
  auto p = model.params().group(g);
  const double orig = p[idx];
  p[idx] = orig + h;
  const double up = f(model);
  p[idx] = orig - h;
  const double down = f(model);
  p[idx] = orig;
  return (up - down) / (2.0 * h);
}

struct Coordinate {
  ParameterGroup group;
  std::size_t index;
};

/// `count` coordinates spread over every group; embedding rows are drawn from `rows`.
inline std::vector<Coordinate> sample_coordinates(const TextClassifier& model,
                                                  const std::vector<TokenId>& rows, std::size_t count,
                                                  std::mt19937_64& gen) {
  const auto& c = model.config();
  std::vector<Coordinate> out;
  for (std::size_t k = 0; k < count; ++k) {
    const auto g = kAllGroups[k % 5];
    const auto size = model.params().group(g).size();
    std::size_t idx = std::uniform_int_distribution<std::size_t>(0, size - 1)(gen);
    if (g == ParameterGroup::embeddings) {
      const auto row = rows[std::uniform_int_distribution<std::size_t>(0, rows.size() - 1)(gen)];
      idx = static_cast<std::size_t>(row) * c.embed_dim + idx % c.embed_dim;
    }
    out.push_back({g, idx});
  }
  return out;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("exdebug-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
