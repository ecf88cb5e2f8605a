#include "exdebug/feedback.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "exdebug/errors.hpp"

namespace exdebug {

using nlohmann::json;

std::string_view to_string(FeedbackScope s) {
  return s == FeedbackScope::instance ? "instance" : "task";
}

std::string_view to_string(FeedbackKind k) {
  switch (k) {
    case FeedbackKind::add: return "add";
    case FeedbackKind::remove: return "remove";
    case FeedbackKind::reset: return "reset";
  }
  return "?";
}

std::string_view to_string(RegularizationPolicy p) {
  switch (p) {
    case RegularizationPolicy::correct_only: return "correct_only";
    case RegularizationPolicy::incorrect_only: return "incorrect_only";
    case RegularizationPolicy::all: return "all";
  }
  return "?";
}

FeedbackScope parse_scope(std::string_view s) {
  if (s == "instance") return FeedbackScope::instance;
  if (s == "task") return FeedbackScope::task;
  throw std::invalid_argument("unknown feedback scope '" + std::string(s) + "'");
}

FeedbackKind parse_kind(std::string_view s) {
  if (s == "add") return FeedbackKind::add;
  if (s == "remove") return FeedbackKind::remove;
  if (s == "reset") return FeedbackKind::reset;
  throw std::invalid_argument("unknown feedback op '" + std::string(s) + "'");
}

RegularizationPolicy parse_policy(std::string_view s) {
  if (s == "correct_only" || s == "correct") return RegularizationPolicy::correct_only;
  if (s == "incorrect_only" || s == "incorrect") return RegularizationPolicy::incorrect_only;
  if (s == "all") return RegularizationPolicy::all;
  throw std::invalid_argument("unknown regularization policy '" + std::string(s) + "'");
}

FeedbackKey key_of(const FeedbackOp& op) { return {op.scope, op.word, op.example_id}; }

FeedbackState apply_feedback(std::span<const FeedbackOp> log) {
  FeedbackState state;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& op = log[i];
    if (i > 0 && op.timestamp < log[i - 1].timestamp) {
      throw std::invalid_argument("feedback log is not ordered by timestamp at entry " +
                                  std::to_string(i));
    }
    if (op.kind == FeedbackKind::reset) {
      state.erase(key_of(op));
    } else {
      state.insert_or_assign(key_of(op), op);
    }
  }
  return state;
}

void validate_op(const FeedbackOp& op, const Dataset& data) {
  if (op.word.empty()) throw ValidationError("feedback op has an empty word");
  if (op.scope == FeedbackScope::task) {
    if (!op.example_id.empty()) throw ValidationError("task-scope op must not name an example");
    return;
  }
  if (op.example_id.empty()) throw ValidationError("instance-scope op requires an example_id");
  const auto idx = data.find(op.example_id);
  if (!idx) throw ValidationError("unknown example '" + op.example_id + "'");
  const auto& toks = data.examples[*idx].raw_tokens;
  if (std::find(toks.begin(), toks.end(), op.word) == toks.end()) {
    throw ValidationError("example '" + op.example_id + "' does not contain '" + op.word + "'");
  }
}

void TargetMap::set(TargetKey key, TargetEntry entry) {
  if (entry.value != 0.0 && entry.value != 1.0) {
    throw ConsistencyError("regularization target must be 0 or 1");
  }
  entries_.insert_or_assign(std::move(key), std::move(entry));
}

bool TargetMap::operator==(const TargetMap& o) const {
  if (entries_.size() != o.entries_.size()) return false;
  auto it = o.entries_.begin();
  for (const auto& [k, v] : entries_) {
    if (!(k == it->first) || v.value != it->second.value || !(v.origin == it->second.origin)) {
      return false;
    }
    ++it;
  }
  return true;
}

std::vector<std::pair<std::size_t, double>> TargetMap::for_example(
    std::string_view example_id) const {
  std::vector<std::pair<std::size_t, double>> out;
  const std::string id(example_id);
  for (auto it = entries_.lower_bound(TargetKey{id, 0});
       it != entries_.end() && it->first.example_id == id; ++it) {
    out.emplace_back(it->first.position, it->second.value);
  }
  return out;
}

namespace {

using PredictionIndex = std::unordered_map<std::string, const Prediction*>;

PredictionIndex index_predictions(std::span<const Prediction> predictions) {
  PredictionIndex idx;
  for (const auto& p : predictions) idx.emplace(p.example_id, &p);
  return idx;
}

const Prediction& lookup(const PredictionIndex& idx, const std::string& example_id) {
  const auto it = idx.find(example_id);
  if (it == idx.end()) {
    throw ConsistencyError("no prediction for example '" + example_id + "'");
  }
  return *it->second;
}

void target_word(TargetMap& map, const Example& ex, const FeedbackOp& op) {
  const double value = op.kind == FeedbackKind::add ? 1.0 : 0.0;
  for (std::size_t i = 0; i < ex.raw_tokens.size(); ++i) {
    if (ex.raw_tokens[i] == op.word) map.set({ex.id, i}, {value, op});
  }
}

bool selected(RegularizationPolicy policy, bool correct) {
  switch (policy) {
    case RegularizationPolicy::correct_only: return correct;
    case RegularizationPolicy::incorrect_only: return !correct;
    case RegularizationPolicy::all: return true;
  }
  return false;
}

}  // namespace

TargetMap build_targets_instance(const FeedbackState& state, std::span<const Prediction> predictions,
                                 const Dataset& data) {
  const auto preds = index_predictions(predictions);
  std::unordered_map<std::string, std::size_t> examples;
  for (std::size_t i = 0; i < data.size(); ++i) examples.emplace(data.examples[i].id, i);

  TargetMap map;
  for (const auto& [key, op] : state) {
    if (op.scope != FeedbackScope::instance) continue;
    const auto ex = examples.find(op.example_id);
    if (ex == examples.end()) {
      throw ConsistencyError("feedback references unknown example '" + op.example_id + "'");
    }
    if (!lookup(preds, op.example_id).correct) continue;
    target_word(map, data.examples[ex->second], op);
  }
  return map;
}

TargetMap build_targets_task(const FeedbackState& state, std::span<const Prediction> predictions,
                             const Dataset& data, RegularizationPolicy policy) {
  const auto preds = index_predictions(predictions);
  TargetMap map;
  for (const auto& [key, op] : state) {
    if (op.scope != FeedbackScope::task) continue;
    for (const auto& ex : data.examples) {
      if (std::find(ex.raw_tokens.begin(), ex.raw_tokens.end(), op.word) == ex.raw_tokens.end()) {
        continue;
      }
      const bool correct = lookup(preds, ex.id).correct;
      if (!selected(policy, correct)) continue;
      if (op.kind == FeedbackKind::add && !correct) continue;
      target_word(map, ex, op);
    }
  }
  return map;
}

TargetMap merge_target_maps(std::span<const TargetMap> maps) {
  TargetMap out;
  for (const auto& m : maps) {
    for (const auto& [key, entry] : m.entries()) {
      const auto& existing = out.entries();
      const auto it = existing.find(key);
      if (it != existing.end() && it->second.origin.timestamp > entry.origin.timestamp) continue;
      out.set(key, entry);
    }
  }
  return out;
}

TargetMap build_targets(const FeedbackState& state, std::span<const Prediction> predictions,
                        const Dataset& data, RegularizationPolicy policy) {
  const TargetMap parts[] = {build_targets_instance(state, predictions, data),
                             build_targets_task(state, predictions, data, policy)};
  return merge_target_maps(parts);
}

json to_json(const FeedbackOp& op) {
  json j{{"scope", to_string(op.scope)},
         {"op", to_string(op.kind)},
         {"word", op.word},
         {"timestamp", op.timestamp}};
  if (!op.example_id.empty()) j["example_id"] = op.example_id;
  return j;
}

FeedbackOp feedback_op_from_json(const json& j) {
  FeedbackOp op;
  try {
    op.scope = parse_scope(j.at("scope").get<std::string>());
    op.kind = parse_kind(j.at("op").get<std::string>());
    op.word = to_lower(j.at("word").get<std::string>());
    if (j.contains("example_id") && !j["example_id"].is_null()) {
      op.example_id = j["example_id"].get<std::string>();
    }
    if (j.contains("timestamp")) op.timestamp = j["timestamp"].get<std::uint64_t>();
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("malformed feedback op: ") + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw ValidationError(ex.what());
  }
  return op;
}

std::vector<FeedbackOp> load_feedback_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open feedback log " + path.string());
  std::vector<FeedbackOp> log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      log.push_back(feedback_op_from_json(json::parse(line)));
    } catch (const std::exception& ex) {
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return log;
}

void save_feedback_log(std::span<const FeedbackOp> log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& op : log) out << to_json(op).dump() << '\n';
}

void append_feedback(const FeedbackOp& op, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << to_json(op).dump() << '\n';
  out.flush();
}

std::vector<std::string> load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open lexicon " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    const auto toks = tokenize(line);
    if (!toks.empty()) words.push_back(toks.front());
  }
  return words;
}

}  // namespace exdebug
