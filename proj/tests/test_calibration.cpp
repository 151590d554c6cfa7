#include <doctest.h>

#include <limits>

#include "popcal/calibration.hpp"
#include "popcal/synth.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace popcal;
using testsupport::exhaustive_threshold;
using testsupport::min_preactivation;
using testsupport::random_batch;

namespace {

AnalysisRecord rec(int correct, double pc, std::optional<double> pop_q = std::nullopt) {
  AnalysisRecord a;
  a.qa.correct = correct;
  a.qa.confidence = pc;
  a.pop.pop_q = pop_q;
  return a;
}

}  // namespace

TEST_CASE("feature names and sets") {
  CHECK(parse_feature_set("PC+ALL").features ==
        std::vector<Feature>{Feature::PC, Feature::PopQ, Feature::PopGe, Feature::RPopGe});
  CHECK(parse_feature_set("Self:PC+RPop_Ge").features ==
        std::vector<Feature>{Feature::PC, Feature::SelfRPopGe});
  CHECK_THROWS(parse_feature_set("PC++Pop_Q"));
  CHECK_THROWS(parse_feature("Nope"));
  CHECK(make_protocol_row("Verb").kind == RowKind::Direct);
  CHECK(make_protocol_row("PC").kind == RowKind::Threshold);
  CHECK(make_protocol_row("PC+Pop_Q").kind == RowKind::Mlp);
  CHECK(is_popularity_feature(Feature::RPopGe));
  CHECK_FALSE(is_popularity_feature(Feature::Consis));
}

TEST_CASE("normalization uses log1p and training statistics") {
  std::vector<AnalysisRecord> train = {rec(1, 0.9, 0), rec(0, 0.2, std::exp(2.0) - 1)};
  const auto set = parse_feature_set("PC+Pop_Q");
  const auto stats = fit_normalization(train, set);
  CHECK(stats.mean[0] == 0.0);
  CHECK(stats.stddev[0] == 1.0);
  CHECK(stats.mean[1] == doctest::Approx(1.0));
  const auto f = build_features(train[1], set, &stats);
  CHECK(f[0] == doctest::Approx(0.2));
  CHECK(f[1] == doctest::Approx(1.0 / stats.stddev[1]));
  CHECK(build_features(train[1], set)[1] == doctest::Approx(2.0));
  CHECK_THROWS(build_features(rec(1, 0.5), set, &stats));
}

TEST_CASE("split and balance") {
  const auto [tr, te] = split_indices(11, 42);
  CHECK(tr.size() == 6);
  CHECK(te.size() == 5);
  std::vector<std::size_t> all = tr;
  all.insert(all.end(), te.begin(), te.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 11; ++i) CHECK(all[i] == i);
  CHECK(split_indices(11, 42) == split_indices(11, 42));

  const std::vector<int> labels = {1, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  const auto bal = balance_indices(labels, 3);
  REQUIRE(bal.size() == 6);
  int pos = 0;
  for (auto i : bal) pos += labels[i];
  CHECK(pos == 3);
  CHECK(std::set<std::size_t>(bal.begin(), bal.end()).size() == 6);
  CHECK(balance_indices(labels, 3) == bal);
  CHECK_THROWS_AS(balance_indices(std::vector<int>{1, 1}, 0), BalanceError);
}

TEST_CASE("fit_threshold: hand cases") {
  const std::vector<double> xs = {0.1, 0.4, 0.35, 0.8};
  const std::vector<int> ys = {0, 1, 0, 1};
  const auto m = fit_threshold(xs, ys);
  CHECK(m.train_accuracy == 1.0);
  CHECK(m.lambda > 0.35);
  CHECK(m.lambda < 0.4);
  const auto all_pos = fit_threshold(std::vector<double>{1, 2}, std::vector<int>{1, 1});
  CHECK(all_pos.lambda == -std::numeric_limits<double>::infinity());
  const auto all_neg = fit_threshold(std::vector<double>{1, 2}, std::vector<int>{0, 0});
  CHECK(all_neg.lambda == std::numeric_limits<double>::infinity());
  CHECK_THROWS(fit_threshold(std::vector<double>{}, std::vector<int>{}));
}

TEST_CASE("fit_threshold: exhaustive oracle on random fixtures") {
  Rng rng(99);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 200);
    std::vector<double> xs(n);
    std::vector<int> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
      xs[i] = t % 3 == 0 ? static_cast<double>(uniform_index(rng, 10)) : uniform01(rng);
      ys[i] = uniform01(rng) < 0.3 + 0.4 * (xs[i] > 0.5) ? 1 : 0;
    }
    const auto fit = fit_threshold(xs, ys);
    const auto [best, smallest] = exhaustive_threshold(xs, ys);
    CHECK(fit.train_accuracy == best);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < n; ++i) ok += predict_threshold(xs[i], fit.lambda) == ys[i];
    CHECK(static_cast<double>(ok) / static_cast<double>(n) == best);
    CHECK(fit.lambda >= smallest);
  }
}

TEST_CASE("mlp: shapes, zeros and dropout masks") {
  Rng rng(1);
  const auto m = MlpModel::initialize(4, rng);
  CHECK(m.input_dim() == 4);
  CHECK(m.parameter_count() == 4 * 64 + 64 + 64 * 32 + 32 + 32 * 2 + 2);
  const auto z = MlpModel::zeros(3);
  const auto p = mlp_probabilities(z, std::vector<double>{1, 2, 3});
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 0.5);
  CHECK_THROWS_AS(mlp_probabilities(m, std::vector<double>{1, 2}), ShapeError);

  const auto masks = sample_dropout(m, rng);
  REQUIRE(masks.hidden1.size() == 64);
  for (double v : masks.hidden1) CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.6)));
  CHECK(mlp_forward(m, std::vector<double>{1, 2, 3, 4}, true, 5) ==
        mlp_forward(m, std::vector<double>{1, 2, 3, 4}, true, 5));
  CHECK(mlp_forward(m, std::vector<double>{1, 2, 3, 4}, false) ==
        doctest::Approx(mlp_probabilities(m, std::vector<double>{1, 2, 3, 4})[1]));
}

TEST_CASE("mlp: analytic gradient matches central differences") {
  Rng rng(123);
  double worst = 0.0;
  int instances = 0;
  while (instances < 10) {
    const std::size_t dim = 1 + uniform_index(rng, 5);
    auto model = MlpModel::initialize(dim, rng);
    const auto batch = random_batch(rng, dim, 8);
    if (min_preactivation(model, batch) < 1e-3) continue;
    ++instances;
    worst = std::max(worst, testsupport::gradient_check_error(model, batch));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("mlp: training is deterministic and learns a separable problem") {
  Rng rng(4);
  std::vector<CalibrationSample> data;
  for (int i = 0; i < 200; ++i) {
    const double a = standard_normal(rng), b = standard_normal(rng);
    data.push_back({{a, b}, a + b > 0 ? 1 : 0});
  }
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 7;
  const auto r1 = train_mlp(data, cfg);
  const auto r2 = train_mlp(data, cfg);
  CHECK(r1.model == r2.model);
  CHECK(r1.best_epoch >= 1);
  CHECK(r1.best_epoch <= 30);
  CHECK(r1.epoch_accuracy.size() == 30);
  CHECK(r1.train_accuracy == *std::max_element(r1.epoch_accuracy.begin(), r1.epoch_accuracy.end()));
  CHECK(r1.train_accuracy > 0.9);
  const Predictor pred = [&](const CalibrationSample& s) { return mlp_predict(r1.model, s.features); };
  CHECK(evaluate_predictor(pred, data) == doctest::Approx(100.0 * r1.train_accuracy));

  cfg.learning_rate = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(train_mlp(data, cfg), DivergenceError);
}

TEST_CASE("checkpoint round-trip") {
  testsupport::TempDir dir;
  Rng rng(2);
  MlpCheckpoint ck;
  ck.model = MlpModel::initialize(3, rng);
  ck.seed = 42;
  ck.train_accuracy = 0.8125;
  ck.feature_names = {"PC", "Pop_Q", "RPop_Ge"};
  ck.stats = {{0, 1.5, 2.5}, {1, 0.5, 2}};
  save_checkpoint(dir / "m.bin", ck);
  CHECK(std::filesystem::exists(dir / "m.bin.json"));
  const auto back = load_checkpoint(dir / "m.bin");
  CHECK(back.model == ck.model);
  CHECK(back.seed == 42);
  CHECK(back.feature_names == ck.feature_names);
  CHECK(back.stats.mean == ck.stats.mean);
  auto bytes = read_file(dir / "m.bin");
  bytes[20] ^= 1;
  write_file_atomic(dir / "m.bin", bytes);
  CHECK_THROWS(load_checkpoint(dir / "m.bin"));
}

TEST_CASE("protocol: rows, availability and determinism") {
  SynthConfig sc;
  sc.n_samples = 300;
  auto records = synth_generate(sc);
  for (std::size_t i = 0; i < records.size(); i += 50) records[i].consis.reset();

  ProtocolConfig pc;
  pc.seeds = {0, 42};
  pc.train.epochs = 10;
  pc.rows = {make_protocol_row("Verb"), make_protocol_row("Consis"), make_protocol_row("PC"),
             make_protocol_row("PC+ALL")};
  pc.workers = 1;
  const auto r1 = run_protocol(records, pc);
  pc.workers = 4;
  const auto r2 = run_protocol(records, pc);
  CHECK(protocol_result_json(r1) == protocol_result_json(r2));

  CHECK_FALSE(r1.row("Consis")->available);
  CHECK(r1.row("Consis")->unavailable_reason.find("Consis") != std::string::npos);
  REQUIRE(r1.row("Verb")->available);
  REQUIRE(r1.runs.size() == 2);

  // Verb predictions are the verbalized judgment itself.
  const auto& run = r1.runs[0];
  const auto& verb = run.predictions.at("Verb");
  for (std::size_t k = 0; k < run.test_indices.size(); ++k)
    CHECK(verb[k] == *records[r1.used_indices[run.test_indices[k]]].verb);

  // Threshold row accuracy recomputed from the stored predictions.
  const auto& pcp = run.predictions.at("PC");
  std::size_t ok = 0;
  for (std::size_t k = 0; k < run.test_indices.size(); ++k)
    ok += pcp[k] == records[r1.used_indices[run.test_indices[k]]].qa.correct;
  CHECK(r1.row("PC")->seed_accuracy[0] ==
        doctest::Approx(100.0 * static_cast<double>(ok) / static_cast<double>(run.test_indices.size())));

  const auto back = parse_protocol_result_json(protocol_result_json(r1));
  CHECK(protocol_result_json(back) == protocol_result_json(r1));
}

TEST_CASE("protocol: balancing uses equal class counts") {
  SynthConfig sc;
  sc.n_samples = 200;
  const auto records = synth_generate(sc);
  ProtocolConfig pc;
  pc.seeds = {0};
  pc.balance = true;
  pc.rows = {make_protocol_row("PC")};
  const auto r = run_protocol(records, pc);
  int pos = 0;
  for (auto i : r.used_indices) pos += records[i].qa.correct;
  CHECK(static_cast<std::size_t>(2 * pos) == r.used_indices.size());
  CHECK_THROWS_AS(run_protocol(records, ProtocolConfig{.seeds = {}}), ConfigError);
}
