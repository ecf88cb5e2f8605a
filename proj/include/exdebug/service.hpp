#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

namespace httplib {
class Server;
}

namespace exdebug {

// Status code plus either a JSON body or raw bytes.
struct Response {
  int status = 200;
  nlohmann::json body;
  std::string bytes;
  std::string content_type = "application/json";

  bool is_binary() const { return content_type != "application/json"; }
};

class Session;

// Sessions live under <data_dir>/sessions/<id>/ as flat files:
//   session.json             committed round, policy, ER and display settings
//   dataset.jsonl            copy of the training data (+ .manifest.json)
//   model_round_<r>.bin      model archive per committed round
//   feedback.jsonl           append-only feedback log
//   report_round_<r>.json    debug report that produced round r
// A round counts as committed once session.json names it, so an interrupted
// retrain leaves the previous round in force.
class DebugService {
 public:
  /// Reloads every persisted session found under data_dir.
  explicit DebugService(std::filesystem::path data_dir);
  ~DebugService();

  DebugService(const DebugService&) = delete;
  DebugService& operator=(const DebugService&) = delete;

  Response create_session(const nlohmann::json& request);
  Response instances(const std::string& session_id, std::size_t page);
  Response task_explanation(const std::string& session_id, std::size_t top_k);
  Response post_feedback(const std::string& session_id, const nlohmann::json& request);
  Response start_retrain(const std::string& session_id, const nlohmann::json& request);
  Response status(const std::string& session_id);
  Response export_model(const std::string& session_id);

  /// Blocks until the session has no running retrain job.
  void wait_idle(const std::string& session_id);
  std::vector<std::string> session_ids() const;
  const std::filesystem::path& data_dir() const { return data_dir_; }

 private:
  std::shared_ptr<Session> find(const std::string& id) const;

  std::filesystem::path data_dir_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::size_t next_id_ = 1;
};

/// Registers the HTTP routes on `server`.
void bind_routes(httplib::Server& server, DebugService& service);

/// Data directory from EXDEBUG_DATA_DIR, else `fallback`.
std::filesystem::path resolve_data_dir(const std::filesystem::path& fallback);

}  // namespace exdebug
