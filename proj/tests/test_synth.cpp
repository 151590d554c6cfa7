#include <doctest.h>

#include "popcal/metrics.hpp"
#include "popcal/synth.hpp"

using namespace popcal;

namespace {

double rho_rpop_accuracy(const std::vector<AnalysisRecord>& recs) {
  std::vector<double> x, y;
  for (const auto& r : recs) {
    x.push_back(*r.pop.rpop_ge);
    y.push_back(r.qa.correct);
  }
  return spearman(x, y);
}

}  // namespace

TEST_CASE("synth: same config gives the same dataset") {
  SynthConfig cfg;
  cfg.n_samples = 500;
  const auto a = synth_generate(cfg);
  CHECK(a == synth_generate(cfg));
  cfg.seed = 1;
  CHECK_FALSE(a == synth_generate(cfg));
}

TEST_CASE("synth: every record is complete and in range") {
  SynthConfig cfg;
  cfg.n_samples = 400;
  for (const auto& r : synth_generate(cfg)) {
    CHECK(r.qa.confidence >= 0.0);
    CHECK(r.qa.confidence <= 1.0);
    CHECK(r.qa.alignment == doctest::Approx(alignment(r.qa.correct, r.qa.confidence)));
    CHECK(r.qa.confidence == doctest::Approx(mean_token_confidence(r.qa.token_probs)));
    CHECK(r.pop.pop_q.has_value());
    CHECK(r.pop.pop_gt.has_value());
    CHECK(r.pop.pop_ge.has_value());
    CHECK(r.pop.rpop_gt.has_value());
    CHECK(r.pop.rpop_ge.has_value());
    REQUIRE(r.self_pop.has_value());
    CHECK(*r.self_pop->pop_q >= 1);
    CHECK(*r.self_pop->pop_q <= 10);
    REQUIRE(r.verb.has_value());
    REQUIRE(r.consis.has_value());
    CHECK(*r.consis >= 0.0);
    CHECK(*r.consis <= 1.0);
    CHECK(judge_correctness(r.qa.generated_answer, r.qa.triple.object) == r.qa.correct);
  }
}

TEST_CASE("synth: planted signal and null construction") {
  SynthConfig cfg;
  CHECK(rho_rpop_accuracy(synth_generate(cfg)) > 0.3);
  cfg.a = 0.0;
  CHECK(std::fabs(rho_rpop_accuracy(synth_generate(cfg))) <= 0.1);
}

TEST_CASE("synth: accuracy is monotone across RPop_Ge deciles") {
  SynthConfig cfg;
  auto recs = synth_generate(cfg);
  std::stable_sort(recs.begin(), recs.end(),
                   [](const auto& a, const auto& b) { return *a.pop.rpop_ge < *b.pop.rpop_ge; });
  std::vector<double> acc(10, 0.0);
  for (std::size_t d = 0; d < 10; ++d) {
    const std::size_t lo = d * recs.size() / 10, hi = (d + 1) * recs.size() / 10;
    for (std::size_t i = lo; i < hi; ++i) acc[d] += recs[i].qa.correct;
    acc[d] /= static_cast<double>(hi - lo);
  }
  // One-decile tolerance: each decile is at least the one two steps below it.
  for (std::size_t d = 2; d < 10; ++d) CHECK(acc[d] >= acc[d - 2]);
  CHECK(acc[9] > acc[0]);
}

TEST_CASE("synth: overconfidence shows in mean confidence") {
  SynthConfig cfg;
  const auto recs = synth_generate(cfg);
  double acc = 0, conf = 0;
  for (const auto& r : recs) {
    acc += r.qa.correct;
    conf += r.qa.confidence;
  }
  CHECK(conf > acc);
}

TEST_CASE("synth: validation and JSON round-trip") {
  SynthConfig cfg;
  cfg.a = 1.5;
  cfg.seed = 9;
  const auto back = SynthConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  cfg.n_samples = 50;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.n_samples = 200;
  cfg.overconfidence_bias = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(logistic(0.0) == 0.5);
  CHECK(logistic(-800.0) >= 0.0);
  CHECK(logistic(800.0) <= 1.0);
}
