// Acceptance checks. One PASS/FAIL line per criterion; exit status is 0 only
// when every selected criterion passes.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstring>
#include <functional>
#include <iostream>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "popcal/calibration.hpp"
#include "popcal/corpus_index.hpp"
#include "popcal/llm_gateway.hpp"
#include "popcal/metrics.hpp"
#include "popcal/pipeline.hpp"
#include "support.hpp"

using namespace popcal;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Thresholds.
constexpr int kSpearmanPairs = 1000;
constexpr double kSpearmanTol = 1e-12;
constexpr double kSpearmanBudgetS = 10.0;

constexpr std::size_t kScanDocs = 1000;
constexpr std::size_t kScanEntities = 200;
constexpr double kScanBudgetS = 30.0;

constexpr std::size_t kThroughputBytes = 100u * 1000u * 1000u;
constexpr std::size_t kThroughputPatterns = 10000;
constexpr double kThroughputBudgetS = 60.0;
constexpr double kMinScaling = 1.5;

constexpr int kGradInstances = 50;
constexpr std::size_t kGradBatch = 8;
constexpr double kGradTol = 1e-4;

constexpr int kThresholdFixtures = 200;
constexpr std::size_t kThresholdMaxN = 200;

constexpr double kNmiTol = 1e-9;
constexpr int kNmiRandomFixtures = 2000;

constexpr std::size_t kFilterSurvivors = 14;

constexpr double kMinRho = 0.3;
constexpr double kMinPcAllGain = 2.0;
constexpr double kSynthBudgetS = 300.0;

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

// 1 -------------------------------------------------------------------------

Verdict spearman_oracle() {
  const auto t0 = Clock::now();
  Rng rng(1);
  double worst = 0.0;
  int invariance_failures = 0;
  for (int done = 0; done < kSpearmanPairs;) {
    const std::size_t n = 2 + uniform_index(rng, 49);
    const bool ties = done % 2 == 0;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = ties ? static_cast<double>(uniform_index(rng, std::max<std::size_t>(2, n / 3)))
                  : standard_normal(rng);
      y[i] = ties ? static_cast<double>(uniform_index(rng, std::max<std::size_t>(2, n / 3)))
                  : standard_normal(rng);
    }
    auto constant = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [&](double a) { return a == v[0]; });
    };
    if (constant(x) || constant(y)) continue;
    ++done;
    const double rho = spearman(x, y);
    worst = std::max(worst, std::fabs(rho - testsupport::brute_spearman(x, y)));
    std::vector<double> fx(n);
    std::transform(x.begin(), x.end(), fx.begin(), [](double v) { return std::exp(v / 4) + 3; });
    if (spearman(fx, y) != rho) ++invariance_failures;
  }
  const double s = seconds_since(t0);
  return {worst <= kSpearmanTol && invariance_failures == 0 && s < kSpearmanBudgetS,
          "max |diff| " + sci(worst) + ", invariance failures " +
              std::to_string(invariance_failures) + ", " + fmt(s) + " s"};
}

// 2 -------------------------------------------------------------------------

Verdict scanner_oracle() {
  const auto t0 = Clock::now();
  const auto f = fixtures::make_scan_fixture(kScanDocs, kScanEntities, 2024);
  std::size_t aliases = 0;
  for (const auto& e : f.catalog.entries()) aliases += e.aliases.size();
  const auto m = build_matcher(f.catalog);
  const auto idx = scan_corpus(f.docs, m, 4);
  std::map<std::string, std::vector<DocId>> got;
  for (const auto& e : idx.entities()) {
    auto p = idx.postings(e);
    got[e] = {p.begin(), p.end()};
  }
  const bool oracle_ok = got == testsupport::naive_scan(f.docs, f.catalog, false);
  const auto ref = scan_corpus(f.docs, m, 1).serialize();
  bool workers_ok = true;
  for (int w : {2, 8}) workers_ok = workers_ok && scan_corpus(f.docs, m, w).serialize() == ref;
  const double s = seconds_since(t0);
  return {oracle_ok && workers_ok && s < kScanBudgetS,
          std::to_string(f.docs.size()) + " docs, " + std::to_string(f.catalog.size()) +
              " entities (" + std::to_string(aliases) + " aliases), oracle " +
              (oracle_ok ? "equal" : "DIFFERENT") + ", workers {1,2,8} " +
              (workers_ok ? "identical" : "DIFFERENT") + ", " + fmt(s) + " s"};
}

// 3 -------------------------------------------------------------------------

Verdict scanner_throughput() {
  const auto f = fixtures::make_throughput_fixture(kThroughputBytes, kThroughputPatterns, 7);
  const auto m = build_matcher(f.catalog);
  auto timed = [&](int workers) {
    const auto t0 = Clock::now();
    const auto idx = scan_corpus(f.docs, m, workers);
    const double s = seconds_since(t0);
    return std::make_pair(s, idx.serialize());
  };
  const auto [t4, out4] = timed(4);
  const auto [t2, out2] = timed(2);
  const double ratio = t2 / t4;
  std::size_t bytes = 0;
  for (const auto& d : f.docs) bytes += d.text.size();
  const unsigned cores = std::thread::hardware_concurrency();
  return {t4 < kThroughputBudgetS && ratio >= kMinScaling && out2 == out4,
          fmt(static_cast<double>(bytes) / 1e6, 1) + " MB, " + std::to_string(f.catalog.size()) +
              " patterns, 4 workers " + fmt(t4) + " s, 2 workers " + fmt(t2) + " s, ratio " +
              fmt(ratio, 2) + " (need >= " + fmt(kMinScaling, 1) + "), " +
              std::to_string(cores) + " hardware thread(s)"};
}

// 4 -------------------------------------------------------------------------

Verdict mlp_gradient() {
  Rng rng(4);
  double worst = 0.0;
  int accepted = 0, rejected = 0;
  while (accepted < kGradInstances) {
    const std::size_t dim = 1 + uniform_index(rng, 8);
    auto model = MlpModel::initialize(dim, rng);
    const auto batch = testsupport::random_batch(rng, dim, kGradBatch);
    if (testsupport::min_preactivation(model, batch) < 1e-3) {
      ++rejected;
      continue;
    }
    ++accepted;
    worst = std::max(worst, testsupport::gradient_check_error(model, batch));
  }
  return {worst < kGradTol, std::to_string(accepted) + " instances (" + std::to_string(rejected) +
                                " redrawn near a ReLU kink), max relative error " +
                                sci(worst)};
}

// 5 -------------------------------------------------------------------------

Verdict threshold_optimality() {
  Rng rng(5);
  int mismatches = 0;
  for (int t = 0; t < kThresholdFixtures; ++t) {
    const std::size_t n = 1 + uniform_index(rng, kThresholdMaxN);
    std::vector<double> xs(n);
    std::vector<int> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
      xs[i] = t % 3 == 0 ? static_cast<double>(uniform_index(rng, 10)) : uniform01(rng);
      ys[i] = uniform01(rng) < 0.3 + 0.4 * (xs[i] > 0.5) ? 1 : 0;
    }
    const auto fit = fit_threshold(xs, ys);
    const auto best = testsupport::exhaustive_threshold(xs, ys).first;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < n; ++i) ok += predict_threshold(xs[i], fit.lambda) == ys[i];
    if (fit.train_accuracy != best || static_cast<double>(ok) / static_cast<double>(n) != best)
      ++mismatches;
  }
  return {mismatches == 0, std::to_string(kThresholdFixtures) + " fixtures, " +
                               std::to_string(mismatches) + " mismatch(es)"};
}

// 6 -------------------------------------------------------------------------

Verdict nmi_properties() {
  const std::vector<PairProbability> coupled = {{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}};
  const std::vector<PairProbability> indep = {{0.5, 0.4, 0.2}, {0.3, 0.5, 0.15}, {0.2, 0.1, 0.02}};
  const double c = nmi(coupled), i = nmi(indep);
  Rng rng(6);
  int outside = 0;
  double lo = 1.0, hi = 0.0;
  for (int t = 0; t < kNmiRandomFixtures; ++t) {
    const std::size_t k = 2 + uniform_index(rng, 8);
    std::vector<double> ps(k), po(k);
    double ss = 0, so = 0;
    for (std::size_t j = 0; j < k; ++j) {
      ps[j] = 0.01 + uniform01(rng);
      po[j] = 0.01 + uniform01(rng);
      ss += ps[j];
      so += po[j];
    }
    std::vector<PairProbability> pairs;
    for (std::size_t j = 0; j < k; ++j) {
      const double s = ps[j] / ss, o = po[j] / so;
      const double a = s * o, b = std::min(s, o);
      pairs.push_back({s, o, a + uniform01(rng) * (b - a)});
    }
    const double v = nmi(pairs);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    if (!(v >= 0.0 && v <= 1.0)) ++outside;
  }
  return {std::fabs(c - 1.0) <= kNmiTol && std::fabs(i) <= kNmiTol && outside == 0,
          "|coupling - 1| " + sci(std::fabs(c - 1.0)) + ", |independence| " + sci(std::fabs(i)) + ", " +
              std::to_string(kNmiRandomFixtures) + " random fixtures in [" + fmt(lo, 4) +
              ", " + fmt(hi, 4) + "], " + std::to_string(outside) + " outside [0, 1]"};
}

// 7 -------------------------------------------------------------------------

Verdict filter_fixture() {
  auto f = fixtures::make_filter_fixture();
  const FilterOptions opts{6000, true};
  const auto res = filter_dataset(f.by_model, f.index, opts);
  bool survivors_ok = res.by_model.size() == 2 && res.by_model[0].size() == f.survivors.size();
  for (std::size_t k = 0; survivors_ok && k < f.survivors.size(); ++k)
    survivors_ok = res.by_model[0][k] == f.by_model[0][f.survivors[k]] &&
                   res.by_model[1][k] == f.by_model[1][f.survivors[k]];
  const auto again = filter_dataset(res.by_model, f.index, opts);
  const bool idempotent = again.by_model == res.by_model;
  const auto& r = res.report;
  return {r.output_count == kFilterSurvivors && r == f.expected && survivors_ok && idempotent,
          "input " + std::to_string(r.input_count) + ", empty " + std::to_string(r.removed_empty) +
              ", unresolved " + std::to_string(r.removed_unresolved_entity) + ", over cap " +
              std::to_string(r.removed_docfreq_over_cap) + ", survivors " +
              std::to_string(r.output_count) + ", idempotent " + (idempotent ? "yes" : "no")};
}

// 8 and 9 ---------------------------------------------------------------------

struct SynthRun {
  testsupport::TempDir dir;
  fs::path run_dir;
  double seconds = 0.0;
  double rho = 0.0;
  double pc = 0.0, pc_all = 0.0, pc_rpop_ge = 0.0, pc_pop_ge = 0.0;

  SynthRun() {
    write_file_atomic(dir / "synth.toml", R"(output_dir = "run"
workers = 4
seeds = [0, 42, 100]

[synth]
n_samples = 2000
a = 2.0
b = -1.0
overconfidence_bias = 0.15
seed = 0
)");
    const auto t0 = Clock::now();
    const auto cfg = PipelineConfig::load(dir / "synth.toml");
    run_synth(cfg);
    run_stage(cfg, Stage::Correlate);
    run_stage(cfg, Stage::Calibrate);
    run_stage(cfg, Stage::Report);
    seconds = seconds_since(t0);
    run_dir = cfg.output_dir;
    const auto corr = parse_correlation_report_json(
        read_file(run_dir / "correlate" / "synthetic__oracle.json"));
    rho = corr.at(PopSignal::RPopGe, Outcome::Accuracy).value_or(-2.0);
    const auto proto =
        parse_protocol_result_json(read_file(run_dir / "calibrate" / "synthetic__oracle.json"));
    auto mean = [&](const char* row) {
      const auto* r = proto.row(row);
      return r && r->available ? r->mean_accuracy : -1.0;
    };
    pc = mean("PC");
    pc_all = mean("PC+ALL");
    pc_rpop_ge = mean("PC+RPop_Ge");
    pc_pop_ge = mean("PC+Pop_Ge");
  }

  std::map<std::string, std::string> report_csvs() const {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(run_dir / "report"))
      if (e.is_regular_file() && e.path().extension() == ".csv")
        out[fs::relative(e.path(), run_dir).string()] = read_file(e.path());
    return out;
  }
};

std::unique_ptr<SynthRun> first_synth;

SynthRun& synth_run() {
  if (!first_synth) first_synth = std::make_unique<SynthRun>();
  return *first_synth;
}

Verdict synthetic_end_to_end() {
  const auto& r = synth_run();
  const bool i = r.rho > kMinRho;
  const bool ii = r.pc_all >= r.pc + kMinPcAllGain;
  const bool iii = r.pc_rpop_ge >= r.pc_pop_ge;
  return {i && ii && iii && r.seconds < kSynthBudgetS,
          "rho(RPop_Ge, acc) " + fmt(r.rho) + ", PC " + fmt(r.pc, 2) + ", PC+ALL " +
              fmt(r.pc_all, 2) + " (gain " + fmt(r.pc_all - r.pc, 2) + "), PC+RPop_Ge " +
              fmt(r.pc_rpop_ge, 2) + " vs PC+Pop_Ge " + fmt(r.pc_pop_ge, 2) + ", " +
              fmt(r.seconds, 1) + " s"};
}

Verdict determinism() {
  const auto a = synth_run().report_csvs();
  SynthRun again;
  const auto b = again.report_csvs();
  std::size_t differing = 0;
  for (const auto& [name, content] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second != content) ++differing;
  }
  return {!a.empty() && a.size() == b.size() && differing == 0,
          std::to_string(a.size()) + " report CSVs compared, " + std::to_string(differing) +
              " differ"};
}

// 10 ------------------------------------------------------------------------

Verdict gateway_replay() {
  testsupport::TempDir dir;
  const auto transcript = dir / "mock.jsonl";
  std::vector<KnowledgeTriple> triples;
  std::vector<std::string> questions;
  for (int i = 0; i < 24; ++i) {
    KnowledgeTriple t;
    t.dataset = DatasetId::Movies;
    t.subject = "Film " + std::to_string(i);
    t.relation = "director";
    t.object = "Director " + std::to_string(i % 7);
    t.question = render_question(t, *default_template(DatasetId::Movies));
    triples.push_back(t);
    questions.push_back(t.question);
  }
  auto build = [&](ChatClient& client) {
    const auto gens = generate_answers(client, questions);
    std::vector<QARecord> out;
    for (std::size_t i = 0; i < gens.size(); ++i)
      out.push_back(make_qa_record(triples[i], gens[i].answer, gens[i].token_probs, std::nullopt));
    return out;
  };

  std::vector<QARecord> recorded;
  ModelEndpoint ep;
  {
    testsupport::MockServer server;
    server.server().Post("/v1/chat/completions", [](const httplib::Request& req,
                                                   httplib::Response& res) {
      const auto p = testsupport::prompt_of(json::parse(req.body));
      const auto h = std::hash<std::string>{}(p);
      // Irrational-looking probabilities so bit-level equality is meaningful.
      std::vector<double> probs = {0.1 + 0.8 * static_cast<double>(h % 997) / 997.0,
                                   std::exp(-static_cast<double>(h % 13) / 7.0), 1.0 / 3.0};
      const auto answer = "Director " + std::to_string(h % 7);
      res.set_content(testsupport::chat_body(answer, probs).dump(), "application/json");
    });
    server.start();
    ep.base_url = server.url("/v1");
    ep.model_name = "mock";
    ChatClient client(ep, std::make_shared<TranscriptCache>(transcript, CacheMode::Record));
    recorded = build(client);
  }
  ChatClient offline(ep, std::make_shared<TranscriptCache>(transcript, CacheMode::Replay));
  const auto replayed = build(offline);
  bool identical = recorded == replayed;
  for (std::size_t i = 0; identical && i < recorded.size(); ++i)
    identical = std::memcmp(&recorded[i].confidence, &replayed[i].confidence, sizeof(double)) == 0;

  std::vector<double> pops;
  for (int v = 1; v <= 100; ++v) pops.push_back(v);
  auto scores = [&](int k) {
    std::vector<int> out;
    for (const auto& e : select_fewshot_examples(pops, k, 0)) out.push_back(e.score);
    return out;
  };
  const bool k3 = scores(3) == std::vector<int>{2, 5, 8};
  const bool k5 = scores(5) == std::vector<int>{1, 3, 5, 7, 9};
  const bool k10 = scores(10) == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto st = offline.stats();
  return {identical && st.upstream_calls == 0 && k3 && k5 && k10,
          std::to_string(recorded.size()) + " records replayed " +
              (identical ? "bit-identical" : "DIFFERENT") + " with " +
              std::to_string(st.upstream_calls) + " upstream calls; buckets k=3 " +
              (k3 ? "ok" : "wrong") + ", k=5 " + (k5 ? "ok" : "wrong") + ", k=10 " +
              (k10 ? "ok" : "wrong")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"popcal acceptance checks"};
  std::vector<int> only, skip;
  app.add_option("--only", only, "Run just these criteria");
  app.add_option("--skip", skip, "Skip these criteria");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::err);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"spearman oracle equivalence", spearman_oracle},
      {"scanner oracle equivalence", scanner_oracle},
      {"scanner throughput and scaling", scanner_throughput},
      {"mlp gradient check", mlp_gradient},
      {"threshold optimality", threshold_optimality},
      {"nmi properties", nmi_properties},
      {"filtering fixture", filter_fixture},
      {"synthetic end-to-end", synthetic_end_to_end},
      {"determinism", determinism},
      {"gateway replay and few-shot buckets", gateway_replay},
  };

  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    if (std::find(skip.begin(), skip.end(), id) != skip.end()) continue;
    Verdict o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& ex) {
      o = {false, std::string("threw: ") + ex.what()};
    }
    all = all && o.pass;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  "
              << criteria[k].first << ": " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
