#include <doctest.h>

#include <cstdlib>
#include <thread>

#include "exdebug/attribution.hpp"
#include "exdebug/model_io.hpp"
#include "exdebug/service.hpp"
#include "exdebug/simulation.hpp"
#include "test_support.hpp"

#include <httplib.h>

using namespace exdebug;
using namespace testing;
using nlohmann::json;

namespace {

struct Fixture {
  TempDir dir{"svc"};
  Benchmark bench;
  std::string dataset;
  std::string model;

  Fixture() : bench(make_bench()) {
    dataset = (dir / "train.jsonl").string();
    model = (dir / "model.bin").string();
    save_dataset(bench.data.train, dataset);
    save_manifest(bench.data.manifest, dir / "manifest.json");
    export_model(bench.baseline, bench.vocab, model, bench.data.manifest.labels);
  }

  static Benchmark make_bench() {
    auto spec = default_experiment();
    spec.synthetic.train_size = 120;
    spec.synthetic.id_size = 20;
    spec.synthetic.ood_size = 20;
    spec.model.embed_dim = 12;
    spec.model.hidden_dim = 12;
    spec.baseline.epochs = 15;
    return prepare_benchmark(spec);
  }

  json create_body() const { return {{"dataset_path", dataset}, {"model_path", model}}; }
  std::filesystem::path data_dir() const { return dir / "data"; }
};

json task_remove(const std::string& word) { return {{"scope", "task"}, {"op", "remove"}, {"word", word}}; }

double mean_for(const json& task, const std::string& word) {
  for (const auto& e : task["entries"])
    if (e["word"] == word) return e["mean_importance"].get<double>();
  return -1.0;
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("create session validates its inputs") {
  Fixture f;
  DebugService svc(f.data_dir());
  const auto ok = svc.create_session(f.create_body());
  CHECK(ok.status == 201);
  CHECK(ok.body["round"] == 0);
  CHECK(ok.body["examples"] == 120);

  { std::ofstream(f.dir / "bad.jsonl") << R"({"id":"x","text":"a b","label":5})" << '\n'; }
  const auto bad = svc.create_session({{"dataset_path", (f.dir / "bad.jsonl").string()}, {"model_path", f.model}});
  CHECK(bad.status == 422);
  CHECK(svc.create_session(json{{"model_path", f.model}}).status == 400);
  CHECK(svc.create_session(json{{"dataset_path", f.dataset}}).status == 400);
  CHECK(svc.create_session({{"dataset_path", f.dataset}, {"model_path", (f.dir / "none.bin").string()}}).status ==
        400);
}

TEST_CASE("train-from-scratch session matches a direct library call") {
  Fixture f;
  DebugService svc(f.data_dir());
  const json train{{"d", 8}, {"h", 8}, {"epochs", 4}, {"seed", 3}, {"init_seed", 9}};
  const auto r = svc.create_session({{"dataset_path", f.dataset}, {"train", train}});
  REQUIRE(r.status == 201);
  const auto exported = deserialize_model(svc.export_model(r.body["id"]).bytes);

  auto data = load_dataset(f.dataset);
  const auto vocab = build_vocabulary(data.token_stream(), 1);
  encode(data, vocab);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.embed_dim = mc.hidden_dim = 8;
  TrainConfig tc;
  tc.epochs = 4;
  tc.seed = 3;
  const auto direct = train_baseline(TextClassifier::random(mc, 9), data, tc);
  CHECK(exported.model.params().identical(direct.params()));
  CHECK(exported.vocab.tokens() == vocab.tokens());
}

TEST_CASE("instance explanations show only correct predictions with library scores") {
  Fixture f;
  DebugService svc(f.data_dir());
  const std::string id = svc.create_session(f.create_body()).body["id"];
  const auto page0 = svc.instances(id, 0);
  REQUIRE(page0.status == 200);
  const auto preds = predict_all(f.bench.baseline, f.bench.data.train);
  std::size_t correct = 0;
  for (const auto& p : preds) correct += p.correct;
  CHECK(page0.body["total"] == correct);
  CHECK(page0.body["items"].size() == std::min<std::size_t>(20, correct));

  std::size_t seen = 0;
  for (std::size_t page = 0;; ++page) {
    const auto r = svc.instances(id, page);
    if (r.body["items"].empty()) break;
    for (const auto& item : r.body["items"]) {
      ++seen;
      CHECK(item["gold_label"] == item["predicted_label"]);
      const auto& ex = f.bench.data.train.examples[*f.bench.data.train.find(item["example_id"].get<std::string>())];
      CHECK(item["scores"].get<std::vector<double>>() == explain(f.bench.baseline, ex).scores);
    }
  }
  CHECK(seen == correct);
}

TEST_CASE("a model with no correct predictions shows nothing") {
  Fixture f;
  Dataset ones = f.bench.data.train;
  for (auto& e : ones.examples) e.label = 1;
  save_dataset(ones, f.dir / "ones.jsonl");
  // All-zero parameters predict class 0 everywhere.
  TextClassifier zero(f.bench.baseline.config());
  export_model(zero, f.bench.vocab, f.dir / "zero.bin");
  DebugService svc(f.data_dir());
  const auto r = svc.create_session({{"dataset_path", (f.dir / "ones.jsonl").string()},
                                     {"manifest_path", (f.dir / "manifest.json").string()},
                                     {"model_path", (f.dir / "zero.bin").string()}});
  REQUIRE(r.status == 201);
  const auto page = svc.instances(r.body["id"], 0);
  CHECK(page.body["items"].empty());
  CHECK(page.body["total"] == 0);
}

TEST_CASE("task explanation equals the library and is sorted") {
  Fixture f;
  DebugService svc(f.data_dir());
  const std::string id = svc.create_session(f.create_body()).body["id"];
  const auto r = svc.task_explanation(id, 15);
  REQUIRE(r.status == 200);
  const auto direct = build_task_explanation(f.bench.baseline, f.bench.data.train, {}, 15);
  REQUIRE(r.body["entries"].size() == direct.entries.size());
  for (std::size_t k = 0; k < direct.entries.size(); ++k) {
    CHECK(r.body["entries"][k]["word"] == direct.entries[k].word);
    CHECK(r.body["entries"][k]["mean_importance"].get<double>() == direct.entries[k].mean_importance);
    if (k > 0) CHECK(direct.entries[k - 1].mean_importance >= direct.entries[k].mean_importance);
  }
  const auto top = svc.task_explanation(id, 1);
  REQUIRE(top.body["entries"].size() == 1);
  CHECK(top.body["entries"][0]["word"] == direct.entries[0].word);
  CHECK(svc.task_explanation("nope", 1).status == 404);
}

TEST_CASE("feedback capture and validation") {
  Fixture f;
  DebugService svc(f.data_dir());
  const std::string id = svc.create_session(f.create_body()).body["id"];
  const auto item = svc.instances(id, 0).body["items"][0];
  const std::string ex = item["example_id"];
  const std::string word = item["tokens"][0];

  auto r = svc.post_feedback(id, {{"scope", "instance"}, {"op", "remove"}, {"word", word}, {"example_id", ex}});
  REQUIRE(r.status == 200);
  CHECK(r.body["live"]["state"] == "remove");
  CHECK(r.body["op"]["timestamp"] == 1);
  CHECK(svc.instances(id, 0).body["items"][0]["marks"][word] == "remove");

  r = svc.post_feedback(id, {{"scope", "instance"}, {"op", "reset"}, {"word", word}, {"example_id", ex}});
  CHECK(r.body["live"]["state"] == "none");
  CHECK(r.body["live_ops"] == 0);
  CHECK(svc.instances(id, 0).body["items"][0]["marks"].empty());

  CHECK(svc.post_feedback(id, {{"scope", "task"}, {"op", "add"}, {"word", "zebra"}}).status == 422);
  CHECK(svc.post_feedback(id, {{"scope", "task"}, {"op", "add"}, {"word", "<unk>"}}).status == 422);
  CHECK(svc.post_feedback(id, {{"scope", "task"}, {"op", "fly"}, {"word", "decoy"}}).status == 422);
  CHECK(svc.post_feedback(id, {{"scope", "instance"}, {"op", "add"}, {"word", "zebra"}, {"example_id", ex}}).status ==
        422);

  const auto preds = predict_all(f.bench.baseline, f.bench.data.train);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].correct) continue;
    const auto& wrong = f.bench.data.train.examples[i];
    CHECK(svc.post_feedback(id, {{"scope", "instance"}, {"op", "remove"}, {"word", wrong.raw_tokens[0]},
                                 {"example_id", wrong.id}})
              .status == 422);
    break;
  }
  CHECK(svc.status(id).body["feedback_ops"] == 2);
}

TEST_CASE("retrain state machine") {
  Fixture f;
  DebugService svc(f.data_dir());
  const std::string id = svc.create_session(f.create_body()).body["id"];
  CHECK(svc.start_retrain(id, json::object()).status == 412);

  const auto before = svc.task_explanation(id, 1000).body;
  REQUIRE(svc.post_feedback(id, task_remove("decoy")).status == 200);
  const auto export0 = svc.export_model(id).bytes;
  CHECK(export0 == read_file(f.model));
  CHECK(svc.export_model(id).bytes == export0);

  // Long enough that the follow-up calls land while the job runs.
  const auto started = svc.start_retrain(id, {{"er", {{"epochs", 2000}}}});
  REQUIRE(started.status == 202);
  CHECK(svc.start_retrain(id, json::object()).status == 409);
  CHECK(svc.instances(id, 0).status == 409);
  CHECK(svc.task_explanation(id, 5).status == 409);
  CHECK(svc.export_model(id).status == 409);
  CHECK(svc.post_feedback(id, task_remove("decoy")).status == 409);
  CHECK(svc.status(id).body["status"] == "retraining");
  svc.wait_idle(id);

  auto st = svc.status(id).body;
  CHECK(st["status"] == "idle");
  CHECK(st["round"] == 1);
  CHECK(st["report"]["round"] == 1);
  CHECK(st["report"]["epochs_run"] == 2000);
  const auto after = svc.task_explanation(id, 1000).body;
  CHECK(after["round"] == 1);
  CHECK(mean_for(after, "decoy") < mean_for(before, "decoy"));
  CHECK(svc.export_model(id).bytes != export0);

  const auto round1 = deserialize_model(svc.export_model(id).bytes);
  const auto page = svc.instances(id, 0).body;
  for (const auto& item : page["items"]) {
    const auto& ex = f.bench.data.train.examples[*f.bench.data.train.find(item["example_id"].get<std::string>())];
    CHECK(item["scores"].get<std::vector<double>>() == explain(round1.model, ex).scores);
  }
}

TEST_CASE("divergent retrain reports failure and keeps the snapshot") {
  Fixture f;
  DebugService svc(f.data_dir());
  const std::string id = svc.create_session(f.create_body()).body["id"];
  REQUIRE(svc.post_feedback(id, task_remove("decoy")).status == 200);
  REQUIRE(svc.start_retrain(id, {{"er", {{"epochs", 3}, {"learning_rate", 1e300}}}}).status == 202);
  svc.wait_idle(id);
  const auto st = svc.status(id).body;
  CHECK(st["round"] == 0);
  CHECK(st["report"]["failed"] == true);
  CHECK(st.contains("error"));
  CHECK(svc.export_model(id).bytes == read_file(f.model));
  CHECK(svc.start_retrain(id, {{"er", {{"learning_rate", -1.0}}}}).status == 422);
}

TEST_CASE("restart replays persisted state and ignores uncommitted rounds") {
  Fixture f;
  std::string id;
  json instances, task, status;
  std::string exported;
  {
    DebugService svc(f.data_dir());
    id = svc.create_session(f.create_body()).body["id"];
    const auto item = svc.instances(id, 0).body["items"][1];
    svc.post_feedback(id, {{"scope", "instance"}, {"op", "add"}, {"word", item["tokens"][0]},
                           {"example_id", item["example_id"]}});
    svc.post_feedback(id, task_remove("decoy"));
    REQUIRE(svc.start_retrain(id, {{"er", {{"epochs", 3}}}, {"policy", "correct_only"}}).status == 202);
    svc.wait_idle(id);
    svc.post_feedback(id, {{"scope", "task"}, {"op", "reset"}, {"word", "decoy"}});
    instances = svc.instances(id, 0).body;
    task = svc.task_explanation(id, 50).body;
    status = svc.status(id).body;
    exported = svc.export_model(id).bytes;
  }
  // A crashed job may leave a model file that session.json never committed.
  const auto session_dir = f.data_dir() / "sessions" / id;
  write_file_atomic(session_dir / "model_round_2.bin", read_file(f.model));

  DebugService again(f.data_dir());
  CHECK(again.session_ids() == std::vector<std::string>{id});
  CHECK(again.instances(id, 0).body == instances);
  CHECK(again.task_explanation(id, 50).body == task);
  CHECK(again.status(id).body == status);
  CHECK(again.export_model(id).bytes == exported);

  const auto log = load_feedback_log(session_dir / "feedback.jsonl");
  CHECK(log.size() == 3);
  CHECK(apply_feedback(log).size() == status["live_ops"].get<std::size_t>());
  // New sessions do not reuse ids.
  CHECK(again.create_session(f.create_body()).body["id"] != id);
}

TEST_CASE("HTTP routes") {
  Fixture f;
  DebugService svc(f.data_dir());
  httplib::Server server;
  bind_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread listener([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  auto r = cli.Post("/sessions", f.create_body().dump(), "application/json");
  REQUIRE(r);
  CHECK(r->status == 201);
  const std::string id = json::parse(r->body)["id"];
  const std::string base = "/sessions/" + id;

  r = cli.Get(base + "/instances?page=0");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(json::parse(r->body) == svc.instances(id, 0).body);

  r = cli.Get(base + "/task-explanation?top_k=3");
  CHECK(json::parse(r->body)["entries"].size() == 3);

  r = cli.Post(base + "/retrain", "{}", "application/json");
  CHECK(r->status == 412);
  r = cli.Post(base + "/feedback", task_remove("decoy").dump(), "application/json");
  CHECK(r->status == 200);
  r = cli.Post(base + "/feedback", "{not json", "application/json");
  CHECK(r->status == 400);
  r = cli.Post(base + "/retrain", json{{"er", {{"epochs", 2}}}}.dump(), "application/json");
  CHECK(r->status == 202);
  svc.wait_idle(id);
  r = cli.Get(base + "/status");
  CHECK(json::parse(r->body)["round"] == 1);
  r = cli.Get(base + "/export");
  CHECK(r->status == 200);
  CHECK(r->body == svc.export_model(id).bytes);
  CHECK(cli.Get("/sessions/zzz/status")->status == 404);
  CHECK(cli.Get(base + "/instances?page=x")->status == 400);

  server.stop();
  listener.join();
}

TEST_CASE("data directory override") {
  ::setenv("EXDEBUG_DATA_DIR", "/tmp/override-dir", 1);
  CHECK(resolve_data_dir("fallback") == "/tmp/override-dir");
  ::unsetenv("EXDEBUG_DATA_DIR");
  CHECK(resolve_data_dir("fallback") == "fallback");
}

}  // TEST_SUITE
