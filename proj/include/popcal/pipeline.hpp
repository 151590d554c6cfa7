#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "popcal/calibration.hpp"
#include "popcal/core_model.hpp"
#include "popcal/llm_gateway.hpp"
#include "popcal/synth.hpp"
#include "popcal/wikidata.hpp"

namespace popcal {

enum class Stage { Ingest, Scan, Generate, Popularity, SelfPop, Correlate, Calibrate, Report, Synth };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);
// Stages that must have completed (or been provided) before `s` runs.
const std::vector<Stage>& stage_dependencies(Stage s);
// Stages whose outputs a completed `s` stands in for.
std::vector<Stage> stage_provides(Stage s);

struct DatasetConfig {
  std::string name;
  DatasetId id = DatasetId::Custom;
  std::filesystem::path path;
  std::string question_template;
  std::optional<bool> apply_cap;  // unset: per-dataset default
  bool balance = false;
};

struct ModelConfig {
  std::string name;
  ModelEndpoint endpoint;
  std::filesystem::path transcript;
  CacheMode cache_mode = CacheMode::Auto;
};

enum class PopularityMode { Corpus, Self, Both };

struct PipelineConfig {
  std::filesystem::path output_dir;
  std::vector<DatasetConfig> datasets;
  std::vector<ModelConfig> models;
  std::optional<ModelConfig> judge;
  PromptTemplates prompts;

  std::filesystem::path corpus;
  std::filesystem::path catalog;
  bool case_insensitive = false;
  int workers = 4;

  std::filesystem::path sitelinks_snapshot;
  std::optional<WikidataEndpoint> sitelinks_endpoint;

  std::uint64_t cap = 6000;
  PopularityMode popularity_source = PopularityMode::Corpus;

  std::vector<std::uint64_t> seeds = {0, 42, 100};
  std::vector<std::string> feature_sets;  // empty: default rows
  TrainConfig train;

  bool verbalized_baseline = true;
  int consistency_samples = 10;
  double consistency_temperature = 1.0;

  int self_pop_shots = 0;
  BucketMode bucket_mode = BucketMode::EqualCount;
  std::uint64_t fewshot_seed = 0;

  std::size_t bins = 10;
  std::optional<SynthConfig> synth;

  // Relative paths in the file resolve against its directory.
  static PipelineConfig load(const std::filesystem::path& path);
  static PipelineConfig parse(std::string_view toml, const std::filesystem::path& base_dir);

  // Canonical JSON of the settings `stage` depends on (hashed for memoization).
  nlohmann::json stage_settings(Stage stage) const;
};

struct ManifestEntry {
  std::string config_hash;
  std::map<std::string, std::string> inputs;   // path -> sha256
  std::map<std::string, std::string> outputs;  // run-relative path -> sha256
  std::vector<std::string> provides;
  std::string timestamp;
  std::size_t cache_hits = 0;
  std::string last_status;  // "run" or "cache_hit"
};

class Manifest {
 public:
  static Manifest load(const std::filesystem::path& run_dir);
  void save() const;

  const std::filesystem::path& run_dir() const { return run_dir_; }
  const ManifestEntry* find(Stage s) const;
  void put(Stage s, ManifestEntry entry);
  // True when `s` or a stage providing it has an entry whose outputs exist.
  bool satisfied(Stage s) const;
  // The entry that satisfies `s` (itself or a provider).
  const ManifestEntry* provider(Stage s) const;
  const std::map<std::string, ManifestEntry>& entries() const { return entries_; }

 private:
  std::filesystem::path run_dir_;
  std::map<std::string, ManifestEntry> entries_;
};

// Every input of a stage must be external or an output of a stage in its
// dependency closure. Returns one message per violation.
std::vector<std::string> audit_manifest(const Manifest& manifest);

struct StageOutcome {
  Stage stage = Stage::Ingest;
  bool cache_hit = false;
  std::vector<std::filesystem::path> outputs;
};

// Throws DependencyError naming the first missing upstream stage.
StageOutcome run_stage(const PipelineConfig& cfg, Stage stage);

// Writes synthetic analysis records as the "synthetic__oracle" unit.
StageOutcome run_synth(const PipelineConfig& cfg);

// Report straight from a run directory's artifacts.
StageOutcome run_report(const std::filesystem::path& run_dir, std::size_t bins = 10);

}  // namespace popcal
