#include "exdebug/simulation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "exdebug/errors.hpp"
#include "exdebug/rng.hpp"

namespace exdebug {

using nlohmann::json;

std::vector<RationaleAnnotation> load_rationales(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open rationale file " + path.string());
  std::vector<RationaleAnnotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("example_id").get<std::string>(), j.at("mask").get<std::vector<int>>()});
    } catch (const json::exception& ex) {
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

void save_rationales(std::span<const RationaleAnnotation> rationales,
                     const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : rationales) {
    out << json{{"example_id", r.example_id}, {"mask", r.mask}}.dump() << '\n';
  }
}

json to_json(const SyntheticSpec& s) {
  return {{"filler_words", s.filler_words},
          {"train_size", s.train_size},
          {"id_size", s.id_size},
          {"ood_size", s.ood_size},
          {"decoy", s.decoy},
          {"rho_train", s.rho_train},
          {"rho_ood", s.rho_ood},
          {"signal_words_per_class", s.signal_words_per_class},
          {"min_length", s.min_length},
          {"max_length", s.max_length},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const json& j, SyntheticSpec s) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
  };
  get("filler_words", s.filler_words);
  get("train_size", s.train_size);
  get("id_size", s.id_size);
  get("ood_size", s.ood_size);
  get("decoy", s.decoy);
  get("rho_train", s.rho_train);
  get("rho_ood", s.rho_ood);
  get("signal_words_per_class", s.signal_words_per_class);
  get("min_length", s.min_length);
  get("max_length", s.max_length);
  get("seed", s.seed);
  return s;
}

namespace {

std::string numbered(char prefix, std::size_t i, int width) {
  std::ostringstream ss;
  ss << prefix << std::setw(width) << std::setfill('0') << i;
  return ss.str();
}

Dataset generate_split(const SyntheticSpec& spec, const SyntheticData& words,
                       const std::vector<std::string>& filler, std::size_t count, double rho,
                       Split split, std::string_view prefix, Rng& rng,
                       std::vector<RationaleAnnotation>* rationales) {
  Dataset d;
  d.num_classes = 2;
  d.split = split;
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % 2);
    const double p_decoy = label == 1 ? rho : 1.0 - rho;
    const std::size_t length =
        spec.min_length + static_cast<std::size_t>(rng.below(spec.max_length - spec.min_length + 1));

    const auto& signals = words.signal_words[label];
    std::vector<std::pair<std::string, int>> toks;
    toks.emplace_back(signals[rng.below(signals.size())], 1);
    if (rng.bernoulli(p_decoy)) toks.emplace_back(spec.decoy, 0);
    while (toks.size() < length) toks.emplace_back(filler[rng.below(filler.size())], 0);
    rng.shuffle(toks);

    Example ex;
    ex.id = std::string(prefix) + std::to_string(i);
    ex.label = label;
    RationaleAnnotation r{ex.id, {}};
    for (auto& [tok, mark] : toks) {
      ex.raw_tokens.push_back(std::move(tok));
      r.mask.push_back(mark);
    }
    d.examples.push_back(std::move(ex));
    if (rationales) rationales->push_back(std::move(r));
  }
  return d;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.rho_train < 0.0 || spec.rho_train > 1.0 || spec.rho_ood < 0.0 || spec.rho_ood > 1.0) {
    throw std::invalid_argument("decoy correlation must lie in [0, 1]");
  }
  if (spec.min_length < 3 || spec.max_length < spec.min_length) {
    throw std::invalid_argument("example length range must satisfy 3 <= min <= max");
  }
  if (spec.filler_words == 0 || spec.signal_words_per_class == 0) {
    throw std::invalid_argument("filler and signal vocabularies must be nonempty");
  }
  const auto decoy_tokens = tokenize(spec.decoy);
  if (decoy_tokens.size() != 1 || decoy_tokens[0] != spec.decoy) {
    throw std::invalid_argument("decoy must be a single lowercase token");
  }

  SyntheticData out;
  std::vector<std::string> filler;
  for (std::size_t i = 0; i < spec.filler_words; ++i) filler.push_back(numbered('f', i, 3));
  for (std::size_t i = 0; i < spec.signal_words_per_class; ++i) {
    out.signal_words[0].push_back(numbered('a', i, 2));
    out.signal_words[1].push_back(numbered('b', i, 2));
  }
  for (const auto& set : out.signal_words) {
    if (std::find(set.begin(), set.end(), spec.decoy) != set.end() ||
        std::find(filler.begin(), filler.end(), spec.decoy) != filler.end()) {
      throw std::invalid_argument("decoy word collides with a generated word");
    }
  }

  Rng rng(spec.seed);
  out.train = generate_split(spec, out, filler, spec.train_size, spec.rho_train, Split::train, "tr",
                             rng, &out.rationales);
  out.id_eval =
      generate_split(spec, out, filler, spec.id_size, spec.rho_train, Split::id_eval, "id", rng, nullptr);
  out.ood_eval = generate_split(spec, out, filler, spec.ood_size, spec.rho_ood, Split::ood_eval,
                                "ood", rng, nullptr);
  out.manifest = Manifest{2, {"negative", "positive"}};
  return out;
}

std::vector<FeedbackOp> simulate_instance_feedback(const TextClassifier& model, const Dataset& train,
                                                   std::span<const RationaleAnnotation> rationales,
                                                   std::size_t budget_instances,
                                                   double salience_threshold,
                                                   std::uint64_t first_timestamp) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < train.size(); ++i) index.emplace(train.examples[i].id, i);

  std::vector<FeedbackOp> log;
  std::uint64_t ts = first_timestamp;
  std::size_t used = 0;
  for (const auto& r : rationales) {
    if (used >= budget_instances) break;
    const auto it = index.find(r.example_id);
    if (it == index.end()) {
      throw ConsistencyError("rationale references unknown example '" + r.example_id + "'");
    }
    const auto& ex = train.examples[it->second];
    if (r.mask.size() != ex.length()) {
      throw ConsistencyError("rationale mask length differs from example '" + ex.id + "'");
    }
    if (!forward(model, ex).correct) continue;
    ++used;

    const auto phi = explain(model, ex).scores;
    std::vector<std::string> seen;
    for (std::size_t i = 0; i < ex.length(); ++i) {
      const auto& w = ex.raw_tokens[i];
      if (std::find(seen.begin(), seen.end(), w) != seen.end()) continue;
      seen.push_back(w);
      bool marked = false;
      bool salient = false;
      for (std::size_t k = i; k < ex.length(); ++k) {
        if (ex.raw_tokens[k] != w) continue;
        marked = marked || r.mask[k] == 1;
        salient = salient || phi[k] > salience_threshold;
      }
      if (marked) {
        log.push_back({FeedbackScope::instance, FeedbackKind::add, w, ex.id, ts++});
      } else if (salient) {
        log.push_back({FeedbackScope::instance, FeedbackKind::remove, w, ex.id, ts++});
      }
    }
  }
  return log;
}

TaskFeedbackSimulation simulate_task_feedback(std::span<const std::string> lexicon,
                                              const Vocabulary& vocab,
                                              std::uint64_t first_timestamp) {
  TaskFeedbackSimulation out;
  std::uint64_t ts = first_timestamp;
  for (const auto& raw : lexicon) {
    const auto w = to_lower(raw);
    if (w == Vocabulary::kPadToken || w == Vocabulary::kUnknownToken || !vocab.contains(w)) {
      out.skipped.push_back(w);
      continue;
    }
    out.log.push_back({FeedbackScope::task, FeedbackKind::remove, w, "", ts++});
  }
  return out;
}

SweepTable run_policy_sweep(const TextClassifier& baseline, const Dataset& train,
                            const EvalSets& eval, std::span<const FeedbackOp> log,
                            std::span<const ErLoss> losses,
                            std::span<const RegularizationPolicy> policies, const ERConfig& config,
                            bool parallel) {
  SweepTable table;
  SweepRow base{"none", "none"};
  if (eval.id_eval) base.id_accuracy = evaluate(baseline, *eval.id_eval);
  for (const auto* d : eval.ood_eval) base.ood_accuracy.push_back(evaluate(baseline, *d));
  table.rows.push_back(std::move(base));

  auto run_cell = [&](RegularizationPolicy policy, ErLoss loss) {
    SweepRow row{std::string(to_string(policy)), std::string(to_string(loss))};
    try {
      ERConfig cfg = config;
      cfg.loss = loss;
      const TextClassifier snapshot = baseline;
      auto result = debug_retrain(snapshot, train, log, policy, cfg, eval);
      row.id_accuracy = result.report.post_id_accuracy;
      row.ood_accuracy = result.report.post_ood_accuracy;
      row.report = std::move(result.report);
    } catch (const std::exception& ex) {
      row.ok = false;
      row.error = ex.what();
    }
    return row;
  };

  std::vector<std::future<SweepRow>> cells;
  for (auto policy : policies) {
    for (auto loss : losses) {
      cells.push_back(std::async(parallel ? std::launch::async : std::launch::deferred, run_cell,
                                 policy, loss));
    }
  }
  for (auto& f : cells) table.rows.push_back(f.get());
  return table;
}

namespace {

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

}  // namespace

std::string to_csv(const SweepTable& table) {
  std::size_t k = 0;
  for (const auto& r : table.rows) k = std::max(k, r.ood_accuracy.size());
  std::string out = "policy,loss,id_acc";
  for (std::size_t i = 0; i < k; ++i) out += ",ood_acc_" + std::to_string(i + 1);
  out += '\n';
  for (const auto& r : table.rows) {
    out += r.policy + "," + r.loss + "," + (r.ok ? fmt(r.id_accuracy) : "error");
    for (std::size_t i = 0; i < k; ++i) {
      out += ",";
      out += r.ok && i < r.ood_accuracy.size() ? fmt(r.ood_accuracy[i]) : "error";
    }
    out += '\n';
  }
  return out;
}

std::vector<BudgetPoint> simulate_budget(std::span<const AnnotationCost> costs,
                                         std::span<const double> budgets, const BudgetHook& hook,
                                         double annotators) {
  if (!(annotators > 0.0)) throw std::invalid_argument("annotator count must be positive");
  std::vector<BudgetPoint> out;
  for (const auto& cost : costs) {
    if (!(cost.seconds_per_instance > 0.0)) {
      throw std::invalid_argument("per-instance cost must be positive");
    }
    for (double budget : budgets) {
      if (budget < 0.0) throw std::invalid_argument("budgets must be nonnegative");
      BudgetPoint p;
      p.method = cost.method;
      p.budget_s = budget;
      p.effective_budget_s = budget * annotators;
      p.instances = static_cast<std::size_t>(std::floor(p.effective_budget_s / cost.seconds_per_instance));
      if (hook) p.accuracy = hook(cost.method, p.instances);
      out.push_back(p);
    }
  }
  return out;
}

std::string to_csv(std::span<const BudgetPoint> points) {
  std::string out = "method,budget_s,instances,accuracy\n";
  for (const auto& p : points) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s,%.0f,%zu,%.4f\n", p.method.c_str(), p.budget_s, p.instances,
                  p.accuracy);
    out += buf;
  }
  return out;
}

ExperimentSpec default_experiment() {
  ExperimentSpec s;
  s.baseline = TrainConfig{20, 0.1, 32, 11};
  s.er.loss = ErLoss::mse;
  s.er.lambda = 1.0;
  s.er.epochs = 20;
  s.er.learning_rate = 0.1;
  s.er.batch_size = 32;
  s.er.seed = 12;
  return s;
}

json to_json(const ExperimentSpec& s) {
  std::vector<std::string> losses;
  for (auto l : s.losses) losses.emplace_back(to_string(l));
  std::vector<std::string> policies;
  for (auto p : s.policies) policies.emplace_back(to_string(p));
  return {{"synthetic", to_json(s.synthetic)},
          {"model",
           {{"d", s.model.embed_dim},
            {"h", s.model.hidden_dim},
            {"nonlinearity", to_string(s.model.nonlinearity)},
            {"init_seed", s.init_seed},
            {"min_count", s.min_count}}},
          {"baseline",
           {{"epochs", s.baseline.epochs},
            {"learning_rate", s.baseline.learning_rate},
            {"batch_size", s.baseline.batch_size},
            {"seed", s.baseline.seed}}},
          {"er", to_json(s.er)},
          {"lexicon", s.lexicon},
          {"losses", losses},
          {"policies", policies}};
}

ExperimentSpec experiment_from_json(const json& j) {
  ExperimentSpec s = default_experiment();
  if (j.contains("synthetic")) s.synthetic = synthetic_spec_from_json(j["synthetic"], s.synthetic);
  if (j.contains("model")) {
    const auto& m = j["model"];
    if (m.contains("d")) s.model.embed_dim = m["d"].get<std::size_t>();
    if (m.contains("h")) s.model.hidden_dim = m["h"].get<std::size_t>();
    if (m.contains("nonlinearity")) {
      s.model.nonlinearity = parse_nonlinearity(m["nonlinearity"].get<std::string>());
    }
    if (m.contains("init_seed")) s.init_seed = m["init_seed"].get<std::uint64_t>();
    if (m.contains("min_count")) s.min_count = m["min_count"].get<int>();
  }
  if (j.contains("baseline")) {
    const auto& b = j["baseline"];
    if (b.contains("epochs")) s.baseline.epochs = b["epochs"].get<int>();
    if (b.contains("learning_rate")) s.baseline.learning_rate = b["learning_rate"].get<double>();
    if (b.contains("batch_size")) s.baseline.batch_size = b["batch_size"].get<std::size_t>();
    if (b.contains("seed")) s.baseline.seed = b["seed"].get<std::uint64_t>();
  }
  if (j.contains("er")) s.er = er_config_from_json(j["er"], s.er);
  if (j.contains("lexicon")) s.lexicon = j["lexicon"].get<std::vector<std::string>>();
  if (j.contains("losses")) {
    s.losses.clear();
    for (const auto& l : j["losses"]) s.losses.push_back(parse_er_loss(l.get<std::string>()));
  }
  if (j.contains("policies")) {
    s.policies.clear();
    for (const auto& p : j["policies"]) s.policies.push_back(parse_policy(p.get<std::string>()));
  }
  return s;
}

Benchmark prepare_benchmark(const ExperimentSpec& spec) {
  SyntheticData data = generate_synthetic(spec.synthetic);
  const auto stream = data.train.token_stream();
  Vocabulary vocab = build_vocabulary(stream, spec.min_count);
  encode(data.train, vocab);
  encode(data.id_eval, vocab);
  encode(data.ood_eval, vocab);

  ModelConfig mc = spec.model;
  mc.vocab_size = vocab.size();
  mc.num_classes = data.train.num_classes;
  TrainHistory history;
  TextClassifier baseline = train_baseline(TextClassifier::random(mc, spec.init_seed), data.train,
                                           spec.baseline, &history);
  return {std::move(data), std::move(vocab), std::move(baseline), std::move(history)};
}

BudgetHook instance_feedback_hook(const Benchmark& bench, const ERConfig& config,
                                  double salience_threshold) {
  return [&bench, config, salience_threshold](const std::string&, std::size_t instances) {
    if (instances == 0) return evaluate(bench.baseline, bench.data.ood_eval);
    const auto log = simulate_instance_feedback(bench.baseline, bench.data.train,
                                                bench.data.rationales, instances, salience_threshold);
    const auto result = debug_retrain(bench.baseline, bench.data.train, log,
                                      RegularizationPolicy::correct_only, config);
    return evaluate(result.model, bench.data.ood_eval);
  };
}

}  // namespace exdebug
