// popcal command-line driver.
//
//   popcal <stage> --config run.toml
//   popcal synth --config run.toml
//   popcal report --run <dir>
//   popcal scan --corpus <path> --catalog <file> --out <index> --workers N

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <chrono>
#include <iostream>

#include "popcal/corpus_index.hpp"
#include "popcal/pipeline.hpp"

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kDependency = 3, kService = 4 };

struct StageArgs {
  std::string config;
  double rps = 0.0;
  int workers = 0;
};

popcal::PipelineConfig load_config(const StageArgs& args) {
  auto cfg = popcal::PipelineConfig::load(args.config);
  if (args.workers > 0) cfg.workers = args.workers;
  if (args.rps > 0.0 && cfg.sitelinks_endpoint) cfg.sitelinks_endpoint->rps = args.rps;
  return cfg;
}

void report_outcome(const popcal::StageOutcome& out) {
  std::cout << popcal::stage_name(out.stage) << ": "
            << (out.cache_hit ? "up to date (cache hit)" : "done") << ", " << out.outputs.size()
            << " artifact(s)\n";
}

int standalone_scan(const std::string& corpus, const std::string& catalog_path,
                    const std::string& out, int workers, bool case_insensitive) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  popcal::ScanStats stats;
  const auto docs = popcal::load_corpus(corpus, &stats);
  const auto catalog = popcal::EntityCatalog::load(catalog_path);
  const auto matcher = popcal::build_matcher(catalog, {case_insensitive});
  const auto index = popcal::scan_corpus(docs, matcher, workers, &stats);
  index.save(out);
  const double secs = std::chrono::duration<double>(clock::now() - t0).count();
  std::cout << "scanned " << stats.documents << " documents (" << stats.skipped
            << " skipped), " << index.entity_count() << " entities indexed in "
            << popcal::fmt_fixed(secs, 2) << " s -> " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge popularity, QA accuracy and confidence calibration"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  StageArgs stage_args;
  std::vector<std::pair<popcal::Stage, CLI::App*>> stage_cmds;
  const std::vector<std::pair<popcal::Stage, std::string>> stages = {
      {popcal::Stage::Ingest, "Load and validate datasets"},
      {popcal::Stage::Generate, "Query models for answers, Verb and Consis baselines"},
      {popcal::Stage::Popularity, "Filter records and attach corpus popularity"},
      {popcal::Stage::SelfPop, "Ask models to rate their own familiarity"},
      {popcal::Stage::Correlate, "Accuracy, confidence, alignment and Spearman correlations"},
      {popcal::Stage::Calibrate, "Threshold and MLP calibration protocol"},
      {popcal::Stage::Synth, "Write the synthetic oracle dataset"},
  };
  for (const auto& [stage, help] : stages) {
    auto* cmd = app.add_subcommand(std::string(popcal::stage_name(stage)), help);
    cmd->add_option("-c,--config", stage_args.config, "TOML run configuration")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--workers", stage_args.workers, "Override worker count");
    cmd->add_option("--rps", stage_args.rps, "Sitelink endpoint requests per second");
    stage_cmds.emplace_back(stage, cmd);
  }

  auto* scan = app.add_subcommand("scan", "Build the entity occurrence index");
  std::string corpus, catalog, index_out;
  int scan_workers = 4;
  bool case_insensitive = false;
  auto* scan_cfg = scan->add_option("-c,--config", stage_args.config, "TOML run configuration")
                       ->check(CLI::ExistingFile);
  auto* corpus_opt = scan->add_option("--corpus", corpus, "Corpus JSONL file or shard directory");
  scan->add_option("--catalog", catalog, "Entity catalog JSONL");
  scan->add_option("--out", index_out, "Index output path");
  scan->add_option("--workers", scan_workers, "OpenMP threads")->check(CLI::PositiveNumber);
  scan->add_flag("--case-insensitive", case_insensitive, "Match ASCII case-insensitively");
  corpus_opt->excludes(scan_cfg);

  auto* report = app.add_subcommand("report", "Emit tables, curves and flip listings");
  std::string run_dir;
  std::size_t bins = 10;
  auto* report_cfg = report->add_option("-c,--config", stage_args.config, "TOML run configuration")
                         ->check(CLI::ExistingFile);
  auto* run_opt = report->add_option("--run", run_dir, "Run directory")->check(CLI::ExistingDirectory);
  report->add_option("--bins", bins, "Popularity bins per curve")->check(CLI::PositiveNumber);
  run_opt->excludes(report_cfg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");

  try {
    for (const auto& [stage, cmd] : stage_cmds) {
      if (!cmd->parsed()) continue;
      report_outcome(popcal::run_stage(load_config(stage_args), stage));
      return kOk;
    }
    if (scan->parsed()) {
      if (!corpus.empty()) {
        if (catalog.empty() || index_out.empty())
          throw popcal::ConfigError("scan: --corpus needs --catalog and --out");
        return standalone_scan(corpus, catalog, index_out, scan_workers, case_insensitive);
      }
      if (stage_args.config.empty())
        throw popcal::ConfigError("scan: give --config or --corpus/--catalog/--out");
      auto cfg = load_config(stage_args);
      if (scan->count("--workers")) cfg.workers = scan_workers;
      if (case_insensitive) cfg.case_insensitive = true;
      report_outcome(popcal::run_stage(cfg, popcal::Stage::Scan));
      return kOk;
    }
    if (report->parsed()) {
      if (!run_dir.empty()) {
        report_outcome(popcal::run_report(run_dir, bins));
        return kOk;
      }
      if (stage_args.config.empty()) throw popcal::ConfigError("report: give --run or --config");
      auto cfg = load_config(stage_args);
      if (report->count("--bins")) cfg.bins = bins;
      report_outcome(popcal::run_stage(cfg, popcal::Stage::Report));
      return kOk;
    }
  } catch (const popcal::ConfigError& e) {
    spdlog::error("configuration: {}", e.what());
    return kConfig;
  } catch (const popcal::DependencyError& e) {
    spdlog::error("{}", e.what());
    return kDependency;
  } catch (const popcal::ServiceError& e) {
    spdlog::error("upstream service: {}", e.what());
    return kService;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kOther;
  }
  return kOther;
}
