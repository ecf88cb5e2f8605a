// Command-line entry point: HTTP service, policy sweeps, budget simulation and
// a few offline helpers around the library.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "exdebug/attribution.hpp"
#include "exdebug/dataset.hpp"
#include "exdebug/model_io.hpp"
#include "exdebug/service.hpp"
#include "exdebug/simulation.hpp"
#include "exdebug/training.hpp"

#include <httplib.h>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace exdebug;

namespace {

ExperimentSpec read_spec(const std::string& path) {
  if (path.empty()) return default_experiment();
  return experiment_from_json(json::parse(read_file(path)));
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
  } else {
    std::ofstream(path) << text;
    std::cerr << "wrote " << path << '\n';
  }
}

int serve(int port, const std::string& host, const std::string& data_dir) {
  const auto dir = resolve_data_dir(data_dir);
  DebugService service(dir);
  httplib::Server server;
  bind_routes(server, service);
  std::cerr << "serving " << service.session_ids().size() << " session(s) from " << dir
            << " on http://" << host << ":" << port << '\n';
  return server.listen(host, port) ? 0 : 1;
}

int run_sweep(const std::string& spec_path, const std::string& out, const std::string& report) {
  const auto spec = read_spec(spec_path);
  const auto bench = prepare_benchmark(spec);
  const auto sim = simulate_task_feedback(spec.lexicon, bench.vocab);
  for (const auto& w : sim.skipped) std::cerr << "lexicon word not in vocabulary: " << w << '\n';
  const EvalSets eval{&bench.data.id_eval, {&bench.data.ood_eval}};
  const auto table = run_policy_sweep(bench.baseline, bench.data.train, eval, sim.log, spec.losses,
                                      spec.policies, spec.er);
  write_or_print(out, to_csv(table));
  if (!report.empty()) {
    auto rows = json::array();
    for (const auto& r : table.rows) {
      rows.push_back({{"policy", r.policy},
                      {"loss", r.loss},
                      {"ok", r.ok},
                      {"error", r.error},
                      {"report", r.policy == "none" ? json() : to_json(r.report)}});
    }
    std::ofstream(report) << json{{"spec", to_json(spec)}, {"rows", rows}}.dump(2) << '\n';
  }
  for (const auto& r : table.rows) {
    if (!r.ok) return 2;
  }
  return 0;
}

int simulate(const std::vector<double>& budgets, double annotators, const std::string& spec_path,
             bool retrain, const std::string& out) {
  std::vector<BudgetPoint> points;
  if (retrain) {
    const auto spec = read_spec(spec_path);
    const auto bench = prepare_benchmark(spec);
    points = simulate_budget(kDefaultAnnotationCosts, budgets,
                             instance_feedback_hook(bench, spec.er), annotators);
  } else {
    points = simulate_budget(kDefaultAnnotationCosts, budgets, {}, annotators);
  }
  write_or_print(out, to_csv(points));
  return 0;
}

int generate(const std::string& spec_path, const std::string& out_dir) {
  const auto spec = read_spec(spec_path);
  const auto data = generate_synthetic(spec.synthetic);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  save_dataset(data.train, dir / "train.jsonl");
  save_dataset(data.id_eval, dir / "id_eval.jsonl");
  save_dataset(data.ood_eval, dir / "ood_eval.jsonl");
  save_manifest(data.manifest, dir / "manifest.json");
  save_rationales(data.rationales, dir / "rationales.jsonl");
  std::ofstream(dir / "lexicon.txt") << spec.synthetic.decoy << '\n';
  std::cerr << "wrote synthetic benchmark to " << dir << '\n';
  return 0;
}

int train(const std::string& data_path, const std::string& out, TrainConfig tc, ModelConfig mc,
          std::uint64_t init_seed, int min_count) {
  auto data = load_dataset(data_path);
  const auto vocab = build_vocabulary(data.token_stream(), min_count);
  encode(data, vocab);
  mc.vocab_size = vocab.size();
  mc.num_classes = data.num_classes;
  TrainHistory history;
  const auto model = train_baseline(TextClassifier::random(mc, init_seed), data, tc, &history);
  export_model(model, vocab, out, load_manifest(find_manifest(data_path)).labels);
  std::fprintf(stderr, "loss %.4f -> %.4f, train accuracy %.4f\n", history.initial_task_loss,
               history.task_loss.empty() ? history.initial_task_loss : history.task_loss.back(),
               evaluate(model, data));
  return 0;
}

int explain_task(const std::string& model_path, const std::string& data_path, std::size_t top_k,
                 const std::string& method) {
  const auto archive = load_model(model_path);
  auto data = load_dataset(data_path);
  encode(data, archive.vocab);
  ExplanationOptions opts;
  opts.method = parse_attribution_method(method);
  std::cout << to_json(build_task_explanation(archive.model, data, opts, top_k)).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explanation-based debugging for text classifiers"};
  app.require_subcommand(1);

  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP debugging service");
  int port = 8080;
  std::string host = "127.0.0.1";
  std::string data_dir = "exdebug-data";
  serve_cmd->add_option("-p,--port", port, "Port to listen on");
  serve_cmd->add_option("--host", host, "Interface to bind");
  serve_cmd->add_option("-d,--data-dir", data_dir,
                        "Session storage directory (EXDEBUG_DATA_DIR overrides)");

  auto* sweep_cmd = app.add_subcommand("run-sweep", "Regularization policy x loss sweep");
  std::string spec_path;
  std::string out;
  std::string report;
  sweep_cmd->add_option("spec", spec_path, "Experiment spec (JSON); defaults when omitted");
  sweep_cmd->add_option("-o,--out", out, "CSV output path (stdout when omitted)");
  sweep_cmd->add_option("--report", report, "Write per-cell debug reports as JSON");

  auto* budget_cmd = app.add_subcommand("simulate-budget", "Annotation time-budget simulation");
  std::vector<double> budgets{900, 1800, 3600, 7200, 10800, 14400};
  double annotators = 2.0;
  bool no_retrain = false;
  budget_cmd->add_option("-b,--budgets", budgets, "Budgets in seconds")->delimiter(',');
  budget_cmd->add_option("--annotators", annotators, "Annotators working in parallel");
  budget_cmd->add_option("--spec", spec_path, "Experiment spec for the retraining hook");
  budget_cmd->add_flag("--no-retrain", no_retrain, "Only compute annotatable counts");
  budget_cmd->add_option("-o,--out", out, "CSV output path");

  auto* gen_cmd = app.add_subcommand("generate-synthetic", "Write the synthetic decoy benchmark");
  std::string out_dir = "synthetic";
  gen_cmd->add_option("--spec", spec_path, "Experiment spec (JSON)");
  gen_cmd->add_option("-o,--out-dir", out_dir, "Output directory");

  auto* train_cmd = app.add_subcommand("train", "Train a baseline model and export it");
  std::string data_path;
  TrainConfig tc;
  ModelConfig mc;
  std::uint64_t init_seed = 1;
  int min_count = 1;
  train_cmd->add_option("data", data_path, "Training JSONL (manifest beside it)")->required();
  train_cmd->add_option("-o,--out", out, "Model archive path")->required();
  train_cmd->add_option("--epochs", tc.epochs);
  train_cmd->add_option("--lr", tc.learning_rate);
  train_cmd->add_option("--batch", tc.batch_size);
  train_cmd->add_option("--seed", tc.seed);
  train_cmd->add_option("--init-seed", init_seed);
  train_cmd->add_option("--dim", mc.embed_dim);
  train_cmd->add_option("--hidden", mc.hidden_dim);
  train_cmd->add_option("--min-count", min_count);

  auto* explain_cmd = app.add_subcommand("explain", "Print the task explanation of a model");
  std::string model_path;
  std::size_t top_k = 20;
  std::string method = "input_x_gradient";
  explain_cmd->add_option("model", model_path)->required();
  explain_cmd->add_option("data", data_path)->required();
  explain_cmd->add_option("-k,--top-k", top_k);
  explain_cmd->add_option("-m,--method", method);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve_cmd) return serve(port, host, data_dir);
    if (*sweep_cmd) return run_sweep(spec_path, out, report);
    if (*budget_cmd) return simulate(budgets, annotators, spec_path, !no_retrain, out);
    if (*gen_cmd) return generate(spec_path, out_dir);
    if (*train_cmd) return train(data_path, out, tc, mc, init_seed, min_count);
    if (*explain_cmd) return explain_task(model_path, data_path, top_k, method);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
