#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "exdebug/attribution.hpp"
#include "exdebug/dataset.hpp"
#include "exdebug/er_trainer.hpp"
#include "exdebug/feedback.hpp"
#include "exdebug/model.hpp"
#include "exdebug/training.hpp"

namespace exdebug {

struct RationaleAnnotation {
  std::string example_id;
  std::vector<int> mask;  // 1 marks a human-important token
};

std::vector<RationaleAnnotation> load_rationales(const std::filesystem::path& path);
void save_rationales(std::span<const RationaleAnnotation> rationales,
                     const std::filesystem::path& path);

/// Two-class benchmark with one spurious "decoy" word. rho is P(label 1 | decoy
/// present); the decoy appears in class-1 examples with probability rho and in
/// class-0 examples with probability 1 - rho. Every example carries exactly one
/// signal word from its class's signal set.
struct SyntheticSpec {
  std::size_t filler_words = 200;
  std::size_t train_size = 1000;
  std::size_t id_size = 500;
  std::size_t ood_size = 500;
  std::string decoy = "decoy";
  double rho_train = 0.95;
  double rho_ood = 0.05;
  std::size_t signal_words_per_class = 10;
  std::size_t min_length = 6;
  std::size_t max_length = 12;
  std::uint64_t seed = 7;
};

nlohmann::json to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec base = {});

struct SyntheticData {
  Dataset train;
  Dataset id_eval;
  Dataset ood_eval;
  std::vector<RationaleAnnotation> rationales;  // train split, signal positions marked
  std::vector<std::string> signal_words[2];
  Manifest manifest;
};

/// Throws std::invalid_argument for an invalid spec. Deterministic in spec.seed.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// Instance-scope feedback from rationales, in rationale order, over at most
/// `budget_instances` correctly predicted training examples. Per distinct word:
/// add if any of its positions is marked, otherwise remove if its normalized
/// attribution exceeds `salience_threshold` somewhere.
std::vector<FeedbackOp> simulate_instance_feedback(const TextClassifier& model, const Dataset& train,
                                                   std::span<const RationaleAnnotation> rationales,
                                                   std::size_t budget_instances,
                                                   double salience_threshold = 0.5,
                                                   std::uint64_t first_timestamp = 1);

struct TaskFeedbackSimulation {
  std::vector<FeedbackOp> log;
  std::vector<std::string> skipped;  // lexicon words missing from the vocabulary
};

/// One task-scope remove per lexicon word present in the vocabulary.
TaskFeedbackSimulation simulate_task_feedback(std::span<const std::string> lexicon,
                                              const Vocabulary& vocab,
                                              std::uint64_t first_timestamp = 1);

struct SweepRow {
  std::string policy;  // "none" for the baseline row
  std::string loss;
  bool ok = true;
  std::string error;
  double id_accuracy = 0.0;
  std::vector<double> ood_accuracy;
  DebugReport report;
};

struct SweepTable {
  std::vector<SweepRow> rows;  // baseline first, then policy-major order
};

/// One debug_retrain per (policy, loss) cell, each from its own copy of the
/// baseline. A failing cell is recorded and the others still run.
SweepTable run_policy_sweep(const TextClassifier& baseline, const Dataset& train,
                            const EvalSets& eval, std::span<const FeedbackOp> log,
                            std::span<const ErLoss> losses,
                            std::span<const RegularizationPolicy> policies, const ERConfig& config,
                            bool parallel = true);

/// Columns: policy, loss, id_acc, ood_acc_1..k
std::string to_csv(const SweepTable& table);

struct AnnotationCost {
  std::string method;
  double seconds_per_instance = 60.0;
};

inline const std::vector<AnnotationCost> kDefaultAnnotationCosts = {{"tool", 60.0},
                                                                    {"traditional", 110.0}};

struct BudgetPoint {
  std::string method;
  double budget_s = 0.0;            // wall-clock budget
  double effective_budget_s = 0.0;  // budget_s * annotators
  std::size_t instances = 0;        // floor(effective budget / cost)
  double accuracy = 0.0;
};

/// Downstream accuracy after feedback on `instances` instances.
using BudgetHook = std::function<double(const std::string& method, std::size_t instances)>;

/// Parallel annotators pool their time: the effective budget is budget * annotators.
std::vector<BudgetPoint> simulate_budget(std::span<const AnnotationCost> costs,
                                         std::span<const double> budgets, const BudgetHook& hook,
                                         double annotators = 1.0);

/// Columns: method, budget_s, instances, accuracy
std::string to_csv(std::span<const BudgetPoint> points);

/// A generated benchmark with its vocabulary, encoded splits and a trained baseline.
struct Benchmark {
  SyntheticData data;
  Vocabulary vocab;
  TextClassifier baseline;
  TrainHistory baseline_history;
};

struct ExperimentSpec {
  SyntheticSpec synthetic;
  ModelConfig model;  // vocab_size and num_classes are filled in from the data
  std::uint64_t init_seed = 1;
  int min_count = 1;
  TrainConfig baseline;
  ERConfig er;
  std::vector<std::string> lexicon{"decoy"};
  std::vector<ErLoss> losses{ErLoss::mse, ErLoss::mae};
  std::vector<RegularizationPolicy> policies{RegularizationPolicy::correct_only,
                                             RegularizationPolicy::incorrect_only,
                                             RegularizationPolicy::all};
};

/// Reference settings for the decoy benchmark.
ExperimentSpec default_experiment();

nlohmann::json to_json(const ExperimentSpec& s);
ExperimentSpec experiment_from_json(const nlohmann::json& j);

Benchmark prepare_benchmark(const ExperimentSpec& spec);

/// Budget hook that retrains the benchmark baseline on simulated instance
/// feedback and reports out-of-distribution accuracy.
BudgetHook instance_feedback_hook(const Benchmark& bench, const ERConfig& config,
                                  double salience_threshold = 0.5);

}  // namespace exdebug
