#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "exdebug/dataset.hpp"
#include "exdebug/model.hpp"

namespace exdebug {

enum class FeedbackScope { instance, task };
enum class FeedbackKind { add, remove, reset };
enum class RegularizationPolicy { correct_only, incorrect_only, all };

std::string_view to_string(FeedbackScope s);
std::string_view to_string(FeedbackKind k);
std::string_view to_string(RegularizationPolicy p);
FeedbackScope parse_scope(std::string_view s);
FeedbackKind parse_kind(std::string_view s);
RegularizationPolicy parse_policy(std::string_view s);

struct FeedbackOp {
  FeedbackScope scope = FeedbackScope::instance;
  FeedbackKind kind = FeedbackKind::remove;
  std::string word;
  std::string example_id;  // empty for task scope
  std::uint64_t timestamp = 0;

  bool operator==(const FeedbackOp&) const = default;
};

struct FeedbackKey {
  FeedbackScope scope;
  std::string word;
  std::string example_id;

  auto operator<=>(const FeedbackKey&) const = default;
};

FeedbackKey key_of(const FeedbackOp& op);

/// Live (non-reset) op per key.
using FeedbackState = std::map<FeedbackKey, FeedbackOp>;

/// Last write wins per key; reset removes the key. Throws std::invalid_argument
/// if timestamps decrease.
FeedbackState apply_feedback(std::span<const FeedbackOp> log);

/// Structural checks against the data: scope/example_id pairing, and for
/// instance scope that the example exists and contains the word. Throws ValidationError.
void validate_op(const FeedbackOp& op, const Dataset& data);

struct TargetKey {
  std::string example_id;
  std::size_t position = 0;

  auto operator<=>(const TargetKey&) const = default;
};

struct TargetEntry {
  double value = 0.0;  // exactly 0.0 (remove) or 1.0 (add)
  FeedbackOp origin;
};

/// Sparse regularization targets per (example, token position).
class TargetMap {
 public:
  /// Throws ConsistencyError for a value other than 0 or 1.
  void set(TargetKey key, TargetEntry entry);

  const std::map<TargetKey, TargetEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool operator==(const TargetMap& o) const;

  /// (position, value) pairs for one example, ordered by position.
  std::vector<std::pair<std::size_t, double>> for_example(std::string_view example_id) const;

 private:
  std::map<TargetKey, TargetEntry> entries_;
};

/// Instance-scope ops only, always restricted to correctly predicted examples.
/// Predictions are looked up by example id; a missing one throws ConsistencyError.
TargetMap build_targets_instance(const FeedbackState& state, std::span<const Prediction> predictions,
                                 const Dataset& data);

/// Task-scope ops: remove targets every occurrence in policy-selected examples;
/// add targets occurrences in correctly predicted examples intersected with the policy.
TargetMap build_targets_task(const FeedbackState& state, std::span<const Prediction> predictions,
                             const Dataset& data, RegularizationPolicy policy);

/// Union; conflicting keys resolve to the later-timestamped origin, and on
/// equal timestamps to the later map in the list.
TargetMap merge_target_maps(std::span<const TargetMap> maps);

/// Instance and task targets merged.
TargetMap build_targets(const FeedbackState& state, std::span<const Prediction> predictions,
                        const Dataset& data, RegularizationPolicy policy);

nlohmann::json to_json(const FeedbackOp& op);
FeedbackOp feedback_op_from_json(const nlohmann::json& j);

std::vector<FeedbackOp> load_feedback_log(const std::filesystem::path& path);
void save_feedback_log(std::span<const FeedbackOp> log, const std::filesystem::path& path);
void append_feedback(const FeedbackOp& op, const std::filesystem::path& path);

/// One lowercase word per line; blank lines ignored.
std::vector<std::string> load_lexicon(const std::filesystem::path& path);

}  // namespace exdebug
