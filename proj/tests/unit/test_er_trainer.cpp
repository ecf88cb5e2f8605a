#include <doctest.h>

#include <random>

#include "exdebug/er_trainer.hpp"
#include "exdebug/errors.hpp"
#include "exdebug/simulation.hpp"
#include "oracles.hpp"

using namespace exdebug;
using namespace testing;

namespace {

using Targets = std::vector<std::pair<std::size_t, double>>;

Targets random_targets(std::size_t n, std::mt19937_64& gen) {
  Targets t;
  for (std::size_t i = 0; i < n; ++i)
    if (gen() % 2) t.push_back({i, static_cast<double>(gen() % 2)});
  if (t.empty()) t.push_back({n - 1, 0.0});
  return t;
}

// The top-scoring token sits at phi == 1; an add target there is a kink of |phi - t|.
Targets away_from_kinks(const TextClassifier& m, const Example& e, Targets t) {
  const auto s = oracle_scores(m, e, argmax(forward(m, e).logits));
  std::size_t top = 0;
  for (std::size_t i = 1; i < s.size(); ++i) top = std::abs(s[i]) > std::abs(s[top]) ? i : top;
  for (auto& [i, v] : t)
    if (i == top) v = 0.0;
  return t;
}

// Small decoy benchmark shared by the retraining tests.
const Benchmark& bench() {
  static const Benchmark b = [] {
    auto spec = default_experiment();
    spec.synthetic.train_size = 300;
    spec.synthetic.id_size = 100;
    spec.synthetic.ood_size = 100;
    spec.model.embed_dim = 16;
    spec.model.hidden_dim = 16;
    return prepare_benchmark(spec);
  }();
  return b;
}

ERConfig short_config() {
  ERConfig c;
  c.epochs = 3;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_SUITE("er_trainer") {

TEST_CASE("er_loss on hand examples") {
  const std::vector<double> phi{0.8};
  const Targets t{{0, 0.0}};
  CHECK(er_loss(phi, t, ErLoss::mse) == doctest::Approx(0.64).epsilon(1e-15));
  CHECK(er_loss(phi, t, ErLoss::mae) == doctest::Approx(0.8).epsilon(1e-15));
  const std::vector<double> exact{0.0, 1.0, 0.3};
  const Targets match{{0, 0.0}, {1, 1.0}};
  CHECK(er_loss(exact, match, ErLoss::mse) == 0.0);
  CHECK(er_loss(exact, match, ErLoss::mae) == 0.0);
  CHECK(er_loss(exact, Targets{}, ErLoss::mse) == 0.0);
  // Mean over targeted positions, not sequence length.
  CHECK(er_loss(std::vector<double>{0.5, 0.9, 0.1, 0.2}, Targets{{1, 0.0}}, ErLoss::mse) ==
        doctest::Approx(0.81).epsilon(1e-15));
  CHECK_THROWS_AS(er_loss(phi, Targets{{1, 0.0}}, ErLoss::mse), ConsistencyError);
}

TEST_CASE("er_loss gradient matches finite differences") {
  std::vector<double> phi{0.2, 0.7, 0.45, 0.9};
  const Targets t{{0, 1.0}, {2, 0.0}, {3, 0.0}};
  const double h = 1e-7;
  for (auto kind : {ErLoss::mse, ErLoss::mae}) {
    const auto g = er_loss_gradient(phi, t, kind);
    for (std::size_t i = 0; i < phi.size(); ++i) {
      auto up = phi, down = phi;
      up[i] += h;
      down[i] -= h;
      CHECK(rel_close(g[i], (er_loss(up, t, kind) - er_loss(down, t, kind)) / (2 * h), 1e-6, 1e-9));
    }
  }
}

TEST_CASE("double backprop matches finite differences for both normalizer treatments") {
  const auto c = small_config(18);
  for (auto normalizer :
       {NormalizerGradient::frozen, NormalizerGradient::exact, NormalizerGradient::straight_through}) {
    for (auto kind : {ErLoss::mse, ErLoss::mae}) {
      FdReport report;
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 gen(seed + 300);
        auto m = random_model(c, seed + 500);
        const auto e = random_example("e", 18, 3 + seed % 6, gen);
        const auto t = away_from_kinks(m, e, random_targets(e.token_ids.size(), gen));
        check_er_gradient(m, e, t, kind, normalizer, 10, gen, report);
      }
      INFO(to_string(normalizer) << " " << to_string(kind) << " worst " << report.worst);
      CHECK(report.checked == 100);
      CHECK(report.failed == 0);
    }
  }
}

TEST_CASE("example_er_loss value agrees with the oracle") {
  std::mt19937_64 gen(9);
  const auto c = small_config(18);
  const auto m = random_model(c, 33);
  for (int trial = 0; trial < 10; ++trial) {
    const auto e = random_example("e", 18, 7, gen);
    const auto t = random_targets(7, gen);
    const auto acts = run_forward(m, e.token_ids);
    const double got = example_er_loss(m, e, acts, t, ErLoss::mse);
    CHECK(rel_close(got, oracle_er_loss(m, e, argmax(acts.logits), t, ErLoss::mse), 1e-12, 1e-15));
  }
}

TEST_CASE("exact normalizer gives no gradient to a lone top-scoring target") {
  std::mt19937_64 gen(4);
  const auto c = small_config(18);
  const auto m = random_model(c, 44);
  const auto e = random_example("e", 18, 5, gen);
  const auto acts = run_forward(m, e.token_ids);
  const auto s = oracle_scores(m, e, argmax(acts.logits));
  std::size_t top = 0;
  for (std::size_t i = 1; i < s.size(); ++i) top = std::abs(s[i]) > std::abs(s[top]) ? i : top;
  const Targets t{{top, 0.0}};
  auto exact = Parameters::zeros(c), frozen = Parameters::zeros(c), st = Parameters::zeros(c);
  CHECK(example_er_loss(m, e, acts, t, ErLoss::mse, 1.0, &exact, NormalizerGradient::exact) == 1.0);
  example_er_loss(m, e, acts, t, ErLoss::mse, 1.0, &frozen, NormalizerGradient::frozen);
  example_er_loss(m, e, acts, t, ErLoss::mse, 1.0, &st, NormalizerGradient::straight_through);
  CHECK(exact.embeddings.cwiseAbs().maxCoeff() <= 1e-14);
  CHECK(frozen.embeddings.cwiseAbs().maxCoeff() > 1e-6);
  CHECK(st.embeddings.cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("ratio backward agrees with exact backward away from the top token") {
  const std::vector<double> s{0.3, -1.2, 0.7, 0.05};
  const std::vector<double> adj{0.4, 0.0, -1.1, 2.0};
  const auto exact = abs_max_backward(s, adj, true);
  const auto ratio = ratio_backward(s, adj);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(rel_close(ratio[i], exact[i], 1e-14, 1e-15));
  // At the top token the ratio uses the runner-up instead.
  const std::vector<double> top{0.0, 1.0, 0.0, 0.0};
  const auto g = ratio_backward(s, top);
  CHECK(g[1] == doctest::Approx(-1.0 / 0.7));
  CHECK(g[2] == doctest::Approx(-1.2 / (0.7 * 0.7)));
  for (double v : ratio_backward(std::vector<double>{2.0}, std::vector<double>{1.0})) CHECK(v == 0.0);
}

TEST_CASE("lambda zero and empty feedback reproduce baseline training bitwise") {
  const auto& b = bench();
  const auto cfg = short_config();
  const auto plain = train_baseline(b.baseline, b.data.train, cfg.train_config());

  auto zero = cfg;
  zero.lambda = 0.0;
  const std::vector<FeedbackOp> log{{FeedbackScope::task, FeedbackKind::remove, "decoy", "", 1}};
  CHECK(debug_retrain(b.baseline, b.data.train, log, RegularizationPolicy::all, zero).model.params().identical(
      plain.params()));
  CHECK(debug_retrain(b.baseline, b.data.train, {}, RegularizationPolicy::all, cfg).model.params().identical(
      plain.params()));
  // A live log that resets to nothing also reduces.
  const std::vector<FeedbackOp> cancelled{{FeedbackScope::task, FeedbackKind::remove, "decoy", "", 1},
                                          {FeedbackScope::task, FeedbackKind::reset, "decoy", "", 2}};
  CHECK(debug_retrain(b.baseline, b.data.train, cancelled, RegularizationPolicy::all, cfg)
            .model.params()
            .identical(plain.params()));
}

TEST_CASE("retraining lowers decoy attribution and fills the report") {
  const auto& b = bench();
  auto cfg = short_config();
  cfg.epochs = 6;
  const std::vector<FeedbackOp> log{{FeedbackScope::task, FeedbackKind::remove, "decoy", "", 1}};
  const EvalSets eval{&b.data.id_eval, {&b.data.ood_eval}};
  const auto before = b.baseline.params();
  const auto r = debug_retrain(b.baseline, b.data.train, log, RegularizationPolicy::all, cfg, eval);
  CHECK(b.baseline.params().identical(before));
  CHECK(r.report.epochs_run == 6);
  CHECK(r.report.task_loss_history.size() == 6);
  CHECK(r.report.er_loss_history.size() == 6);
  CHECK(r.report.initial_targets > 0);
  CHECK(r.report.pre_ood_accuracy.size() == 1);
  CHECK(r.report.pre_id_accuracy == evaluate(b.baseline, b.data.id_eval));
  CHECK(r.report.post_ood_accuracy[0] == evaluate(r.model, b.data.ood_eval));
  CHECK(r.report.post_target_attribution < r.report.pre_target_attribution);
  const auto j = to_json(r.report);
  CHECK(j["task_loss_history"].size() == 6);
  CHECK(j["policy"] == "all");
}

TEST_CASE("divergence leaves the input model intact") {
  const auto& b = bench();
  auto broken = b.baseline;
  broken.params().hidden_bias(0) = std::numeric_limits<double>::quiet_NaN();
  const std::vector<FeedbackOp> log{{FeedbackScope::task, FeedbackKind::remove, "decoy", "", 1}};
  const auto snapshot = broken.params();
  CHECK_THROWS_AS(debug_retrain(broken, b.data.train, log, RegularizationPolicy::all, short_config()),
                  DivergenceError);
  CHECK(broken.params().identical(snapshot));
}

TEST_CASE("config JSON round trip and validation") {
  ERConfig c;
  c.loss = ErLoss::mae;
  c.lambda = 2.5;
  c.epochs = 7;
  c.rebuild_every = 3;
  c.normalizer_gradient = NormalizerGradient::frozen;
  const auto back = er_config_from_json(to_json(c));
  CHECK(back.loss == ErLoss::mae);
  CHECK(back.lambda == 2.5);
  CHECK(back.epochs == 7);
  CHECK(back.rebuild_every == 3);
  CHECK(back.normalizer_gradient == NormalizerGradient::frozen);
  CHECK(ERConfig{}.normalizer_gradient == NormalizerGradient::straight_through);
  CHECK(er_config_from_json(nlohmann::json::object()).lambda == 1.0);
  CHECK_THROWS(er_config_from_json({{"lambda", -1.0}}));
  CHECK_THROWS(er_config_from_json({{"learning_rate", 0.0}}));
  CHECK_THROWS(er_config_from_json({{"loss", "huber"}}));
}

}  // TEST_SUITE
