#include "exdebug/service.hpp"

#include <cstdlib>
#include <fstream>
#include <thread>

#include "exdebug/attribution.hpp"
#include "exdebug/dataset.hpp"
#include "exdebug/er_trainer.hpp"
#include "exdebug/errors.hpp"
#include "exdebug/feedback.hpp"
#include "exdebug/model.hpp"
#include "exdebug/model_io.hpp"
#include "exdebug/training.hpp"

// After Eigen: httplib pulls in system headers that define macros clashing with it.
#include <httplib.h>

namespace exdebug {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Response error(int status, const std::string& message) {
  return {status, json{{"error", message}}};
}

// One committed model and everything derived from it. Derived data is
// computed once, on first use.
struct Snapshot {
  Snapshot(TextClassifier m, std::size_t r) : model(std::move(m)), round(r) {}

  TextClassifier model;
  std::size_t round;
  std::once_flag once;
  std::vector<Prediction> predictions;
  std::vector<NormalizedAttribution> attributions;
};

fs::path model_file(const fs::path& dir, std::size_t round) {
  return dir / ("model_round_" + std::to_string(round) + ".bin");
}

}  // namespace

enum class SessionStatus { idle, retraining };

class Session {
 public:
  std::string id;
  fs::path dir;
  Dataset data;
  Manifest manifest;
  Vocabulary vocab;
  ExplanationOptions display;
  RegularizationPolicy policy = RegularizationPolicy::all;
  ERConfig er;
  std::size_t page_size = 20;

  std::mutex mu;
  SessionStatus status = SessionStatus::idle;
  std::shared_ptr<Snapshot> snapshot;
  std::vector<FeedbackOp> log;
  FeedbackState live;
  json last_report;
  std::string last_error;
  std::thread job;

  const Snapshot& ready(const std::shared_ptr<Snapshot>& s) const {
    std::call_once(s->once, [&] {
      s->predictions = predict_all(s->model, data);
      s->attributions.reserve(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& ex = data.examples[i];
        s->attributions.push_back(normalize(
            attribute(s->model, ex, s->predictions[i].predicted, display.method, display.steps),
            display.normalization));
      }
    });
    return *s;
  }

  json settings_json(std::size_t round) const {
    return {{"id", id},
            {"round", round},
            {"policy", to_string(policy)},
            {"er", to_json(er)},
            {"display", {{"method", to_string(display.method)}, {"steps", display.steps}}},
            {"page_size", page_size},
            {"labels", manifest.labels}};
  }

  void persist_settings(std::size_t round) const {
    write_file_atomic(dir / "session.json", settings_json(round).dump(2) + "\n");
  }

  void apply_settings(const json& j) {
    if (j.contains("policy")) policy = parse_policy(j["policy"].get<std::string>());
    if (j.contains("er")) er = er_config_from_json(j["er"], er);
    if (j.contains("display")) {
      const auto& d = j["display"];
      if (d.contains("method")) display.method = parse_attribution_method(d["method"].get<std::string>());
      if (d.contains("steps")) display.steps = d["steps"].get<int>();
      if (display.steps < 1) throw std::invalid_argument("display steps must be at least 1");
    }
    if (j.contains("page_size")) page_size = j["page_size"].get<std::size_t>();
    if (page_size == 0) throw std::invalid_argument("page size must be positive");
  }

  static std::shared_ptr<Session> load(const fs::path& dir) {
    auto s = std::make_shared<Session>();
    const auto settings = json::parse(read_file(dir / "session.json"));
    s->id = settings.at("id").get<std::string>();
    s->dir = dir;
    s->apply_settings(settings);
    const auto round = settings.at("round").get<std::size_t>();

    s->manifest = load_manifest(dir / "dataset.jsonl.manifest.json");
    s->data = load_dataset(dir / "dataset.jsonl", s->manifest);
    auto archive = load_model(model_file(dir, round));
    s->vocab = std::move(archive.vocab);
    encode(s->data, s->vocab);
    s->snapshot = std::make_shared<Snapshot>(std::move(archive.model), round);
    if (fs::exists(dir / "feedback.jsonl")) s->log = load_feedback_log(dir / "feedback.jsonl");
    s->live = apply_feedback(s->log);
    const auto report = dir / ("report_round_" + std::to_string(round) + ".json");
    if (fs::exists(report)) s->last_report = json::parse(read_file(report));
    return s;
  }
};

DebugService::DebugService(fs::path data_dir) : data_dir_(std::move(data_dir)) {
  fs::create_directories(data_dir_ / "sessions");
  for (const auto& entry : fs::directory_iterator(data_dir_ / "sessions")) {
    if (!entry.is_directory() || !fs::exists(entry.path() / "session.json")) continue;
    auto s = Session::load(entry.path());
    const auto& name = s->id;
    if (name.rfind("s", 0) == 0) {
      try {
        next_id_ = std::max(next_id_, std::stoul(name.substr(1)) + 1);
      } catch (const std::exception&) {
      }
    }
    sessions_.emplace(s->id, std::move(s));
  }
}

DebugService::~DebugService() {
  for (auto& [id, s] : sessions_) {
    if (s->job.joinable()) s->job.join();
  }
}

std::shared_ptr<Session> DebugService::find(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

std::vector<std::string> DebugService::session_ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [id, s] : sessions_) out.push_back(id);
  return out;
}

Response DebugService::create_session(const json& request) {
  auto s = std::make_shared<Session>();
  std::string model_bytes;
  try {
    if (!request.is_object() || !request.contains("dataset_path")) {
      return error(400, "request must name dataset_path");
    }
    const fs::path dataset_path = request["dataset_path"].get<std::string>();
    const fs::path manifest_path = request.contains("manifest_path")
                                       ? fs::path(request["manifest_path"].get<std::string>())
                                       : find_manifest(dataset_path);
    s->manifest = load_manifest(manifest_path);
    s->data = load_dataset(dataset_path, s->manifest);
    s->apply_settings(request);

    TextClassifier model{ModelConfig{}};
    if (request.contains("model_path")) {
      model_bytes = read_file(request["model_path"].get<std::string>());
      auto archive = deserialize_model(model_bytes);
      if (archive.model.config().num_classes != s->manifest.num_classes) {
        return error(422, "model has " + std::to_string(archive.model.config().num_classes) +
                              " classes, manifest declares " +
                              std::to_string(s->manifest.num_classes));
      }
      s->vocab = std::move(archive.vocab);
      model = std::move(archive.model);
    } else if (request.contains("train")) {
      const auto& t = request["train"];
      s->vocab = build_vocabulary(s->data.token_stream(), t.value("min_count", 1));
      ModelConfig mc;
      mc.vocab_size = s->vocab.size();
      mc.num_classes = s->manifest.num_classes;
      mc.embed_dim = t.value("d", std::size_t{32});
      mc.hidden_dim = t.value("h", std::size_t{32});
      mc.nonlinearity = parse_nonlinearity(t.value("nonlinearity", std::string("tanh")));
      TrainConfig tc;
      tc.epochs = t.value("epochs", tc.epochs);
      tc.learning_rate = t.value("learning_rate", tc.learning_rate);
      tc.batch_size = t.value("batch_size", tc.batch_size);
      tc.seed = t.value("seed", tc.seed);
      encode(s->data, s->vocab);
      model = train_baseline(TextClassifier::random(mc, t.value("init_seed", std::uint64_t{1})),
                             s->data, tc);
      model_bytes = serialize_model(model, s->vocab, s->manifest.labels);
    } else {
      return error(400, "request must supply model_path or a train configuration");
    }
    encode(s->data, s->vocab);
    s->snapshot = std::make_shared<Snapshot>(std::move(model), 0);
  } catch (const ValidationError& ex) {
    return error(422, ex.what());
  } catch (const DivergenceError& ex) {
    return error(422, ex.what());
  } catch (const std::exception& ex) {
    return error(400, ex.what());
  }

  {
    std::lock_guard lock(mutex_);
    s->id = "s" + std::to_string(next_id_++);
  }
  s->dir = data_dir_ / "sessions" / s->id;
  fs::create_directories(s->dir);
  save_dataset(s->data, s->dir / "dataset.jsonl");
  save_manifest(s->manifest, s->dir / "dataset.jsonl.manifest.json");
  write_file_atomic(model_file(s->dir, 0), model_bytes);
  std::ofstream(s->dir / "feedback.jsonl", std::ios::trunc).close();
  s->persist_settings(0);

  const auto id = s->id;
  const auto n = s->data.size();
  {
    std::lock_guard lock(mutex_);
    sessions_.emplace(id, std::move(s));
  }
  return {201, json{{"id", id}, {"round", 0}, {"examples", n}}};
}

namespace {

std::string live_state(const FeedbackState& live, FeedbackScope scope, const std::string& word,
                       const std::string& example_id) {
  const auto it = live.find(FeedbackKey{scope, word, example_id});
  return it == live.end() ? "none" : std::string(to_string(it->second.kind));
}

}  // namespace

Response DebugService::instances(const std::string& session_id, std::size_t page) {
  auto s = find(session_id);
  if (!s) return error(404, "no session " + session_id);
  std::shared_ptr<Snapshot> snap;
  FeedbackState live;
  {
    std::lock_guard lock(s->mu);
    if (s->status == SessionStatus::retraining) return error(409, "session is retraining");
    snap = s->snapshot;
    live = s->live;
  }
  const auto& ready = s->ready(snap);

  std::vector<std::size_t> shown;
  for (std::size_t i = 0; i < s->data.size(); ++i) {
    if (ready.predictions[i].correct) shown.push_back(i);
  }
  auto items = json::array();
  const std::size_t begin = page * s->page_size;
  for (std::size_t k = begin; k < shown.size() && k < begin + s->page_size; ++k) {
    const auto i = shown[k];
    const auto& ex = s->data.examples[i];
    json marks = json::object();
    for (const auto& w : ex.raw_tokens) {
      const auto state = live_state(live, FeedbackScope::instance, w, ex.id);
      if (state != "none") marks[w] = state;
    }
    items.push_back({{"example_id", ex.id},
                     {"tokens", ex.raw_tokens},
                     {"gold_label", ex.label},
                     {"predicted_label", ready.predictions[i].predicted},
                     {"scores", ready.attributions[i].scores},
                     {"marks", marks}});
  }
  return {200, json{{"round", ready.round},
                    {"page", page},
                    {"page_size", s->page_size},
                    {"total", shown.size()},
                    {"method", to_string(s->display.method)},
                    {"items", items}}};
}

Response DebugService::task_explanation(const std::string& session_id, std::size_t top_k) {
  auto s = find(session_id);
  if (!s) return error(404, "no session " + session_id);
  std::shared_ptr<Snapshot> snap;
  FeedbackState live;
  {
    std::lock_guard lock(s->mu);
    if (s->status == SessionStatus::retraining) return error(409, "session is retraining");
    snap = s->snapshot;
    live = s->live;
  }
  const auto& ready = s->ready(snap);
  const auto task = aggregate_task_explanation(s->data, ready.attributions, top_k);
  json body = to_json(task);
  for (auto& entry : body["entries"]) {
    entry["mark"] = live_state(live, FeedbackScope::task, entry["word"].get<std::string>(), "");
  }
  body["round"] = ready.round;
  return {200, body};
}

Response DebugService::post_feedback(const std::string& session_id, const json& request) {
  auto s = find(session_id);
  if (!s) return error(404, "no session " + session_id);

  FeedbackOp op;
  try {
    op = feedback_op_from_json(request);
  } catch (const std::exception& ex) {
    return error(422, ex.what());
  }

  std::lock_guard lock(s->mu);
  if (s->status == SessionStatus::retraining) return error(409, "session is retraining");
  try {
    validate_op(op, s->data);
  } catch (const ValidationError& ex) {
    return error(422, ex.what());
  }
  if (op.scope == FeedbackScope::task) {
    if (!s->vocab.contains(op.word) || op.word == Vocabulary::kPadToken ||
        op.word == Vocabulary::kUnknownToken) {
      return error(422, "'" + op.word + "' is not in the model vocabulary");
    }
  } else {
    const auto& ready = s->ready(s->snapshot);
    if (!ready.predictions[*s->data.find(op.example_id)].correct) {
      return error(422, "example '" + op.example_id + "' is not correctly predicted");
    }
  }

  op.timestamp = s->log.empty() ? 1 : s->log.back().timestamp + 1;
  append_feedback(op, s->dir / "feedback.jsonl");
  s->log.push_back(op);
  s->live = apply_feedback(s->log);

  json live{{"scope", to_string(op.scope)},
            {"word", op.word},
            {"state", live_state(s->live, op.scope, op.word, op.example_id)}};
  if (!op.example_id.empty()) live["example_id"] = op.example_id;
  return {200, json{{"op", to_json(op)}, {"live", live}, {"live_ops", s->live.size()}}};
}

Response DebugService::start_retrain(const std::string& session_id, const json& request) {
  auto s = find(session_id);
  if (!s) return error(404, "no session " + session_id);

  std::lock_guard lock(s->mu);
  if (s->status == SessionStatus::retraining) return error(409, "a retrain is already running");
  if (s->log.empty()) return error(412, "feedback log is empty");
  try {
    if (request.is_object()) s->apply_settings(request);
  } catch (const std::exception& ex) {
    return error(422, ex.what());
  }
  if (s->job.joinable()) s->job.join();

  s->status = SessionStatus::retraining;
  const auto base = s->snapshot;
  const auto next_round = base->round + 1;
  s->job = std::thread([s, base, next_round, log = s->log, policy = s->policy, cfg = s->er] {
    try {
      auto result = debug_retrain(base->model, s->data, log, policy, cfg, EvalSets{&s->data, {}});
      auto report = to_json(result.report);
      report["round"] = next_round;
      write_file_atomic(model_file(s->dir, next_round),
                        serialize_model(result.model, s->vocab, s->manifest.labels));
      write_file_atomic(s->dir / ("report_round_" + std::to_string(next_round) + ".json"),
                        report.dump(2) + "\n");
      std::lock_guard lock(s->mu);
      s->persist_settings(next_round);
      s->snapshot = std::make_shared<Snapshot>(std::move(result.model), next_round);
      s->last_report = std::move(report);
      s->last_error.clear();
      s->status = SessionStatus::idle;
    } catch (const std::exception& ex) {
      std::lock_guard lock(s->mu);
      s->last_error = ex.what();
      s->last_report = json{{"failed", true}, {"error", ex.what()}, {"round", base->round}};
      s->status = SessionStatus::idle;
    }
  });
  return {202, json{{"job_id", s->id + "-r" + std::to_string(next_round)}, {"round", base->round}}};
}

Response DebugService::status(const std::string& session_id) {
  auto s = find(session_id);
  if (!s) return error(404, "no session " + session_id);
  std::lock_guard lock(s->mu);
  json body{{"status", s->status == SessionStatus::idle ? "idle" : "retraining"},
            {"round", s->snapshot->round},
            {"feedback_ops", s->log.size()},
            {"live_ops", s->live.size()},
            {"report", s->last_report}};
  if (!s->last_error.empty()) body["error"] = s->last_error;
  return {200, body};
}

Response DebugService::export_model(const std::string& session_id) {
  auto s = find(session_id);
  if (!s) return error(404, "no session " + session_id);
  std::size_t round = 0;
  {
    std::lock_guard lock(s->mu);
    if (s->status == SessionStatus::retraining) return error(409, "session is retraining");
    round = s->snapshot->round;
  }
  Response r{200, nullptr, read_file(model_file(s->dir, round)), "application/octet-stream"};
  return r;
}

void DebugService::wait_idle(const std::string& session_id) {
  auto s = find(session_id);
  if (!s) return;
  std::thread job;
  {
    std::lock_guard lock(s->mu);
    if (!s->job.joinable()) return;
    job = std::move(s->job);
  }
  job.join();
}

fs::path resolve_data_dir(const fs::path& fallback) {
  if (const char* env = std::getenv("EXDEBUG_DATA_DIR"); env && *env) return env;
  return fallback;
}

namespace {

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  if (r.is_binary()) {
    res.set_content(r.bytes, r.content_type);
  } else {
    res.set_content(r.body.dump(), "application/json");
  }
}

std::size_t query_size(const httplib::Request& req, const char* key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  return std::stoul(req.get_param_value(key));
}

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    send(res, f());
  } catch (const json::exception& ex) {
    send(res, error(400, std::string("malformed request: ") + ex.what()));
  } catch (const std::invalid_argument& ex) {
    send(res, error(400, ex.what()));
  } catch (const std::out_of_range& ex) {
    send(res, error(400, ex.what()));
  }
}

json body_json(const httplib::Request& req) {
  return req.body.empty() ? json::object() : json::parse(req.body);
}

}  // namespace

void bind_routes(httplib::Server& server, DebugService& service) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  const std::string sid = R"(/sessions/([A-Za-z0-9_-]+))";

  server.Post("/sessions", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.create_session(body_json(req)); });
  });
  server.Get(sid + "/instances", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.instances(req.matches[1], query_size(req, "page", 0)); });
  });
  server.Get(sid + "/task-explanation", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      return service.task_explanation(req.matches[1], query_size(req, "top_k", 20));
    });
  });
  server.Post(sid + "/feedback", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.post_feedback(req.matches[1], body_json(req)); });
  });
  server.Post(sid + "/retrain", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.start_retrain(req.matches[1], body_json(req)); });
  });
  server.Get(sid + "/status", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.status(req.matches[1]); });
  });
  server.Get(sid + "/export", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.export_model(req.matches[1]); });
  });
}

}  // namespace exdebug
