#include "popcal/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <functional>
#include <mutex>
#include <set>

#include "popcal/metrics.hpp"
#include "popcal/report.hpp"
#include "toml.hpp"

namespace popcal {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Stage graph

namespace {

constexpr std::array<std::pair<Stage, std::string_view>, 9> kStageNames = {{
    {Stage::Ingest, "ingest"},
    {Stage::Scan, "scan"},
    {Stage::Generate, "generate"},
    {Stage::Popularity, "popularity"},
    {Stage::SelfPop, "self_pop"},
    {Stage::Correlate, "correlate"},
    {Stage::Calibrate, "calibrate"},
    {Stage::Report, "report"},
    {Stage::Synth, "synth"},
}};

}  // namespace

std::string_view stage_name(Stage s) {
  for (const auto& [stage, name] : kStageNames)
    if (stage == s) return name;
  return "?";
}

Stage parse_stage(std::string_view name) {
  for (const auto& [stage, n] : kStageNames)
    if (n == name) return stage;
  throw ConfigError("unknown stage \"" + std::string(name) + "\"");
}

const std::vector<Stage>& stage_dependencies(Stage s) {
  static const std::map<Stage, std::vector<Stage>> deps = {
      {Stage::Ingest, {}},
      {Stage::Scan, {}},
      {Stage::Generate, {Stage::Ingest}},
      {Stage::Popularity, {Stage::Generate, Stage::Scan}},
      {Stage::SelfPop, {Stage::Generate, Stage::Popularity}},
      {Stage::Correlate, {Stage::Generate, Stage::Popularity}},
      {Stage::Calibrate, {Stage::Generate, Stage::Popularity}},
      {Stage::Report, {Stage::Correlate, Stage::Calibrate}},
      {Stage::Synth, {}},
  };
  return deps.at(s);
}

std::vector<Stage> stage_provides(Stage s) {
  if (s == Stage::Synth) return {Stage::Generate, Stage::Popularity};
  return {};
}

// ---------------------------------------------------------------------------
// Config

namespace {

template <typename T>
T get_or(const toml::table& t, std::string_view key, T fallback) {
  const auto* node = t.get(key);
  if (!node) return fallback;
  auto v = node->value<T>();
  if (!v) throw ConfigError("config: wrong type for \"" + std::string(key) + "\"");
  return *v;
}

fs::path resolve_path(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

ModelConfig parse_model(const toml::table& t, const fs::path& base, const std::string& what) {
  ModelConfig m;
  const toml::table& v = t;
  m.name = get_or<std::string>(v, "name", "");
  if (m.name.empty()) throw ConfigError(what + ": name is required");
  if (m.name.find("__") != std::string::npos)
    throw ConfigError(what + ": name must not contain \"__\"");
  m.endpoint.base_url = get_or<std::string>(v, "base_url", "");
  m.endpoint.model_name = get_or<std::string>(v, "model", m.name);
  m.endpoint.api_key_env = get_or<std::string>(v, "api_key_env", "");
  m.endpoint.max_parallel = static_cast<int>(get_or<std::int64_t>(v, "max_parallel", 4));
  m.endpoint.timeout = std::chrono::milliseconds(
      static_cast<std::int64_t>(get_or<double>(v, "timeout_s", 60.0) * 1000.0));
  m.endpoint.temperature = get_or<double>(v, "temperature", 0.0);
  m.endpoint.max_tokens = static_cast<int>(get_or<std::int64_t>(v, "max_tokens", 64));
  m.endpoint.rps = get_or<double>(v, "rps", 0.0);
  m.endpoint.retry.max_retries = static_cast<int>(get_or<std::int64_t>(v, "retries", 4));
  m.endpoint.retry.base_delay = std::chrono::milliseconds(
      static_cast<std::int64_t>(get_or<double>(v, "backoff_s", 0.2) * 1000.0));
  const auto transcript = get_or<std::string>(v, "transcript", "");
  if (!transcript.empty()) m.transcript = resolve_path(base, transcript);
  m.cache_mode = parse_cache_mode(get_or<std::string>(v, "cache", "auto"));
  if (m.cache_mode == CacheMode::Replay && m.transcript.empty())
    throw ConfigError(what + " " + m.name + ": replay needs a transcript path");
  if (m.cache_mode != CacheMode::Replay) m.endpoint.validate();
  if (m.endpoint.max_parallel < 1) throw ConfigError(what + ": max_parallel must be >= 1");
  return m;
}

const toml::table* table_at(const toml::table& root, std::string_view key) {
  const auto* node = root.get(key);
  if (!node) return nullptr;
  if (!node->is_table()) throw ConfigError("config: [" + std::string(key) + "] must be a table");
  return node->as_table();
}

json endpoint_json(const ModelConfig& m) {
  return {{"name", m.name},
          {"base_url", m.endpoint.base_url},
          {"model", m.endpoint.model_name},
          {"temperature", m.endpoint.temperature},
          {"max_tokens", m.endpoint.max_tokens}};
}

json prompts_json(const PromptTemplates& p) {
  return {{"qa", p.qa},
          {"verbalized", p.verbalized},
          {"judge", p.judge},
          {"entity_familiarity", p.entity_familiarity},
          {"relation_familiarity", p.relation_familiarity}};
}

}  // namespace

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& ex) {
    throw ConfigError(ex.what());
  }
  return parse(text, fs::absolute(path).parent_path());
}

PipelineConfig PipelineConfig::parse(std::string_view text, const fs::path& base) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& ex) {
    throw ConfigError("config: " + std::string(ex.description()) + " at line " +
                      std::to_string(ex.source().begin.line));
  }
  const toml::table& r = root;
  PipelineConfig c;
  c.output_dir = resolve_path(base, get_or<std::string>(r, "output_dir", "run"));
  c.workers = static_cast<int>(get_or<std::int64_t>(r, "workers", 4));
  if (c.workers < 1) throw ConfigError("config: workers must be >= 1");
  c.bins = static_cast<std::size_t>(get_or<std::int64_t>(r, "bins", 10));
  if (c.bins < 2) throw ConfigError("config: bins must be >= 2");

  if (const auto* seeds = root.get_as<toml::array>("seeds")) {
    c.seeds.clear();
    for (const auto& s : *seeds) {
      auto v = s.value<std::int64_t>();
      if (!v || *v < 0) throw ConfigError("config: seeds must be non-negative integers");
      c.seeds.push_back(static_cast<std::uint64_t>(*v));
    }
  }
  if (c.seeds.empty()) throw ConfigError("config: seeds must be non-empty");

  const auto mode = get_or<std::string>(r, "popularity_source", "corpus");
  if (mode == "corpus") {
    c.popularity_source = PopularityMode::Corpus;
  } else if (mode == "self") {
    c.popularity_source = PopularityMode::Self;
  } else if (mode == "both") {
    c.popularity_source = PopularityMode::Both;
  } else {
    throw ConfigError("config: popularity_source must be corpus, self or both");
  }

  if (const auto* t = table_at(root, "corpus")) {
    const toml::table& v = *t;
    c.corpus = resolve_path(base, get_or<std::string>(v, "path", ""));
    c.catalog = resolve_path(base, get_or<std::string>(v, "catalog", ""));
    c.case_insensitive = get_or<bool>(v, "case_insensitive", false);
  }
  if (const auto* t = table_at(root, "sitelinks")) {
    const toml::table& v = *t;
    c.sitelinks_snapshot = resolve_path(base, get_or<std::string>(v, "snapshot", ""));
    const auto url = get_or<std::string>(v, "endpoint", "");
    if (!url.empty()) {
      WikidataEndpoint ep;
      ep.url = url;
      ep.batch = static_cast<std::size_t>(get_or<std::int64_t>(v, "batch", 50));
      ep.rps = get_or<double>(v, "rps", ep.rps);
      ep.max_parallel = static_cast<std::size_t>(get_or<std::int64_t>(v, "max_parallel", 2));
      ep.token_env = get_or<std::string>(v, "token_env", ep.token_env);
      if (ep.batch < 1 || ep.batch > 50) throw ConfigError("config: sitelinks.batch must be 1..50");
      c.sitelinks_endpoint = ep;
    }
  }
  if (const auto* t = table_at(root, "filter")) {
    const toml::table& v = *t;
    const auto cap = get_or<std::int64_t>(v, "cap", 6000);
    if (cap < 0) throw ConfigError("config: filter.cap must be >= 0");
    c.cap = static_cast<std::uint64_t>(cap);
  }
  if (const auto* t = table_at(root, "calibration")) {
    const toml::table& v = *t;
    if (const auto* fsets = t->get_as<toml::array>("feature_sets")) {
      for (const auto& f : *fsets) {
        auto s = f.value<std::string>();
        if (!s) throw ConfigError("config: feature_sets must be strings");
        make_protocol_row(*s);
        c.feature_sets.push_back(*s);
      }
    }
    c.train.epochs = static_cast<std::size_t>(get_or<std::int64_t>(v, "epochs", 100));
    c.train.batch_size = static_cast<std::size_t>(get_or<std::int64_t>(v, "batch_size", 8));
    c.train.learning_rate = get_or<double>(v, "learning_rate", 2e-3);
    c.train.dropout = get_or<double>(v, "dropout", 0.4);
    if (c.train.epochs < 1 || c.train.batch_size < 1 || !(c.train.learning_rate > 0) ||
        c.train.dropout < 0 || c.train.dropout >= 1)
      throw ConfigError("config: invalid [calibration] training settings");
  }
  if (const auto* t = table_at(root, "baselines")) {
    const toml::table& v = *t;
    c.verbalized_baseline = get_or<bool>(v, "verbalized", true);
    c.consistency_samples = static_cast<int>(get_or<std::int64_t>(v, "consistency_samples", 10));
    c.consistency_temperature = get_or<double>(v, "consistency_temperature", 1.0);
    if (c.consistency_samples < 0) throw ConfigError("config: consistency_samples must be >= 0");
  }
  if (const auto* t = table_at(root, "self_pop")) {
    const toml::table& v = *t;
    c.self_pop_shots = static_cast<int>(get_or<std::int64_t>(v, "shots", 0));
    if (c.self_pop_shots != 0 && c.self_pop_shots != 3 && c.self_pop_shots != 5 &&
        c.self_pop_shots != 10)
      throw ConfigError("config: self_pop.shots must be 0, 3, 5 or 10");
    const auto bm = get_or<std::string>(v, "bucket_mode", "equal_count");
    if (bm == "equal_count") {
      c.bucket_mode = BucketMode::EqualCount;
    } else if (bm == "equal_width") {
      c.bucket_mode = BucketMode::EqualWidth;
    } else {
      throw ConfigError("config: self_pop.bucket_mode must be equal_count or equal_width");
    }
    c.fewshot_seed = static_cast<std::uint64_t>(get_or<std::int64_t>(v, "seed", 0));
  }
  if (const auto* t = table_at(root, "prompts")) {
    const toml::table& v = *t;
    c.prompts.qa = get_or<std::string>(v, "qa", c.prompts.qa);
    c.prompts.verbalized = get_or<std::string>(v, "verbalized", c.prompts.verbalized);
    c.prompts.judge = get_or<std::string>(v, "judge", c.prompts.judge);
    c.prompts.entity_familiarity =
        get_or<std::string>(v, "entity_familiarity", c.prompts.entity_familiarity);
    c.prompts.relation_familiarity =
        get_or<std::string>(v, "relation_familiarity", c.prompts.relation_familiarity);
  }

  if (const auto* ds = root.get("datasets")) {
    if (!ds->is_array_of_tables()) throw ConfigError("config: [[datasets]] must be tables");
    std::set<std::string> names;
    for (const auto& node : *ds->as_array()) {
      const auto& t = *node.as_table();
      const toml::table& v = t;
      DatasetConfig d;
      d.name = get_or<std::string>(v, "name", "");
      if (d.name.empty() || d.name.find("__") != std::string::npos)
        throw ConfigError("config: dataset name must be non-empty without \"__\"");
      if (!names.insert(d.name).second) throw ConfigError("config: duplicate dataset " + d.name);
      d.id = parse_dataset_id(get_or<std::string>(v, "kind", "Custom"));
      d.path = resolve_path(base, get_or<std::string>(v, "path", ""));
      d.question_template = get_or<std::string>(v, "template", default_template(d.id).value_or(""));
      if (d.question_template.empty())
        throw ConfigError("config: dataset " + d.name + " needs a question template");
      if (v.contains("apply_cap")) d.apply_cap = get_or<bool>(v, "apply_cap", false);
      d.balance = get_or<bool>(v, "balance", false);
      c.datasets.push_back(std::move(d));
    }
  }
  if (const auto* ms = root.get("models")) {
    if (!ms->is_array_of_tables()) throw ConfigError("config: [[models]] must be tables");
    std::set<std::string> names;
    for (const auto& node : *ms->as_array()) {
      auto m = parse_model(*node.as_table(), base, "model");
      if (!names.insert(m.name).second) throw ConfigError("config: duplicate model " + m.name);
      c.models.push_back(std::move(m));
    }
  }
  if (const auto* t = table_at(root, "judge")) c.judge = parse_model(*t, base, "judge");

  if (const auto* t = table_at(root, "synth")) {
    const toml::table& v = *t;
    SynthConfig s;
    s.n_samples = static_cast<std::size_t>(get_or<std::int64_t>(v, "n_samples", 2000));
    s.a = get_or<double>(v, "a", s.a);
    s.b = get_or<double>(v, "b", s.b);
    s.overconfidence_bias = get_or<double>(v, "overconfidence_bias", s.overconfidence_bias);
    s.noise_sd = get_or<double>(v, "noise_sd", s.noise_sd);
    s.verb_noise_sd = get_or<double>(v, "verb_noise_sd", s.verb_noise_sd);
    s.seed = static_cast<std::uint64_t>(get_or<std::int64_t>(v, "seed", 0));
    s.validate();
    c.synth = s;
  }
  return c;
}

json PipelineConfig::stage_settings(Stage stage) const {
  json j;
  j["stage"] = std::string(stage_name(stage));
  auto datasets_json = [&] {
    json a = json::array();
    for (const auto& d : datasets)
      a.push_back({{"name", d.name},
                   {"kind", std::string(to_string(d.id))},
                   {"template", d.question_template},
                   {"apply_cap", d.apply_cap ? json(*d.apply_cap) : json()},
                   {"balance", d.balance}});
    return a;
  };
  auto models_json = [&] {
    json a = json::array();
    for (const auto& m : models) a.push_back(endpoint_json(m));
    return a;
  };
  switch (stage) {
    case Stage::Ingest: j["datasets"] = datasets_json(); break;
    case Stage::Scan: j["case_insensitive"] = case_insensitive; break;
    case Stage::Generate:
      j["models"] = models_json();
      j["judge"] = judge ? endpoint_json(*judge) : json();
      j["prompts"] = prompts_json(prompts);
      j["verbalized"] = verbalized_baseline;
      j["consistency_samples"] = consistency_samples;
      j["consistency_temperature"] = consistency_temperature;
      break;
    case Stage::Popularity:
      j["datasets"] = datasets_json();
      j["cap"] = cap;
      j["sitelinks_endpoint"] = sitelinks_endpoint ? json(sitelinks_endpoint->url) : json();
      break;
    case Stage::SelfPop:
      j["models"] = models_json();
      j["prompts"] = prompts_json(prompts);
      j["shots"] = self_pop_shots;
      j["bucket_mode"] = bucket_mode == BucketMode::EqualCount ? "equal_count" : "equal_width";
      j["seed"] = fewshot_seed;
      break;
    case Stage::Correlate:
      j["popularity_source"] = static_cast<int>(popularity_source);
      break;
    case Stage::Calibrate:
      j["datasets"] = datasets_json();
      j["seeds"] = seeds;
      j["feature_sets"] = feature_sets;
      j["popularity_source"] = static_cast<int>(popularity_source);
      j["train"] = {{"epochs", train.epochs},
                    {"batch_size", train.batch_size},
                    {"learning_rate", train.learning_rate},
                    {"dropout", train.dropout}};
      break;
    case Stage::Report: j["bins"] = bins; break;
    case Stage::Synth: j["synth"] = synth ? synth->to_json() : json(); break;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path manifest_path(const fs::path& run_dir) { return run_dir / "manifest.json"; }

bool outputs_intact(const fs::path& run_dir, const ManifestEntry& e) {
  for (const auto& [rel, sha] : e.outputs) {
    const auto p = run_dir / rel;
    if (!fs::exists(p) || sha256_file(p) != sha) return false;
  }
  return true;
}

}  // namespace

Manifest Manifest::load(const fs::path& run_dir) {
  Manifest m;
  m.run_dir_ = run_dir;
  const auto path = manifest_path(run_dir);
  if (!fs::exists(path)) return m;
  const auto j = json::parse(read_file(path));
  for (const auto& [name, e] : j.at("stages").items()) {
    ManifestEntry entry;
    entry.config_hash = e.at("config_hash").get<std::string>();
    entry.inputs = e.at("inputs").get<std::map<std::string, std::string>>();
    entry.outputs = e.at("outputs").get<std::map<std::string, std::string>>();
    entry.provides = e.value("provides", std::vector<std::string>{});
    entry.timestamp = e.value("timestamp", "");
    entry.cache_hits = e.value("cache_hits", std::size_t{0});
    entry.last_status = e.value("last_status", "");
    m.entries_[name] = std::move(entry);
  }
  return m;
}

void Manifest::save() const {
  nlohmann::ordered_json stages = nlohmann::ordered_json::object();
  for (const auto& [name, e] : entries_) {
    nlohmann::ordered_json o;
    o["config_hash"] = e.config_hash;
    o["inputs"] = e.inputs;
    o["outputs"] = e.outputs;
    o["provides"] = e.provides;
    o["timestamp"] = e.timestamp;
    o["cache_hits"] = e.cache_hits;
    o["last_status"] = e.last_status;
    stages[name] = o;
  }
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["stages"] = stages;
  fs::create_directories(run_dir_);
  write_file_atomic(manifest_path(run_dir_), j.dump(2) + "\n");
}

const ManifestEntry* Manifest::find(Stage s) const {
  auto it = entries_.find(std::string(stage_name(s)));
  return it == entries_.end() ? nullptr : &it->second;
}

void Manifest::put(Stage s, ManifestEntry entry) { entries_[std::string(stage_name(s))] = std::move(entry); }

const ManifestEntry* Manifest::provider(Stage s) const {
  const auto name = std::string(stage_name(s));
  if (const auto* e = find(s); e && outputs_intact(run_dir_, *e)) return e;
  for (const auto& [other, e] : entries_) {
    if (std::find(e.provides.begin(), e.provides.end(), name) != e.provides.end() &&
        outputs_intact(run_dir_, e))
      return &e;
  }
  return nullptr;
}

bool Manifest::satisfied(Stage s) const { return provider(s) != nullptr; }

std::vector<std::string> audit_manifest(const Manifest& manifest) {
  std::vector<std::string> problems;
  for (const auto& [name, e] : manifest.entries()) {
    const Stage stage = parse_stage(name);
    std::set<std::string> allowed_stages;
    std::function<void(Stage)> close = [&](Stage s) {
      for (auto d : stage_dependencies(s)) {
        if (allowed_stages.insert(std::string(stage_name(d))).second) close(d);
      }
    };
    close(stage);
    // self_pop refines popularity and may feed any stage downstream of it.
    if (allowed_stages.count("popularity")) allowed_stages.insert("self_pop");
    std::set<std::string> allowed_outputs;
    for (const auto& [other, oe] : manifest.entries()) {
      bool ok = allowed_stages.count(other) > 0;
      for (const auto& p : oe.provides) ok = ok || allowed_stages.count(p) > 0;
      if (ok)
        for (const auto& [rel, sha] : oe.outputs) allowed_outputs.insert(rel);
    }
    for (const auto& [input, sha] : e.inputs) {
      if (fs::path(input).is_absolute()) continue;
      if (!allowed_outputs.count(input))
        problems.push_back(name + " reads " + input + ", which no upstream stage produced");
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Stage execution

namespace {

struct Unit {
  std::string dataset;
  std::string model;
  std::string id() const { return unit_id(dataset, model); }
};

std::pair<std::string, std::string> split_unit(const std::string& id) {
  const auto pos = id.find("__");
  if (pos == std::string::npos) return {id, ""};
  return {id.substr(0, pos), id.substr(pos + 2)};
}

constexpr std::string_view kAnalysisSuffix = ".analysis.jsonl";

// unit id -> run-relative analysis path, self_pop overriding popularity.
std::map<std::string, std::string> analysis_files(const Manifest& m) {
  std::map<std::string, std::string> out;
  auto collect = [&](const ManifestEntry* e) {
    if (!e) return;
    for (const auto& [rel, sha] : e->outputs) {
      const std::string name = fs::path(rel).filename().string();
      if (name.size() > kAnalysisSuffix.size() && name.ends_with(kAnalysisSuffix))
        out[name.substr(0, name.size() - kAnalysisSuffix.size())] = rel;
    }
  };
  collect(m.provider(Stage::Popularity));
  if (const auto* sp = m.find(Stage::SelfPop)) {
    if (outputs_intact(m.run_dir(), *sp)) collect(sp);
  }
  return out;
}

void add_outputs_of(const Manifest& m, const ManifestEntry* e,
                    std::map<std::string, std::string>& inputs) {
  (void)m;
  if (!e) return;
  for (const auto& [rel, sha] : e->outputs) inputs[rel] = sha;
}

void add_external(const fs::path& p, std::map<std::string, std::string>& inputs) {
  if (p.empty()) return;
  const auto abs = fs::absolute(p).lexically_normal();
  if (fs::is_directory(abs)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(abs))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) inputs[f.string()] = sha256_file(f);
  } else {
    inputs[abs.string()] = sha256_file(abs);
  }
}

void require_path(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " is not configured");
  if (!fs::exists(p)) throw ConfigError(what + " does not exist: " + p.string());
}

std::string rel_to(const fs::path& run_dir, const fs::path& p) {
  return fs::relative(p, run_dir).generic_string();
}

using Outputs = std::vector<fs::path>;

struct StageContext {
  const PipelineConfig* cfg = nullptr;
  fs::path run_dir;
  const Manifest* manifest = nullptr;
};

void emit(Outputs& outs, const fs::path& p, const std::string& content) {
  write_file_atomic(p, content);
  outs.push_back(p);
}

std::shared_ptr<TranscriptCache> cache_for(const ModelConfig& m, const fs::path& run_dir) {
  if (m.cache_mode == CacheMode::Off) return nullptr;
  const auto path = m.transcript.empty() ? run_dir / "transcripts" / (m.name + ".jsonl")
                                         : m.transcript;
  return std::make_shared<TranscriptCache>(path, m.cache_mode);
}

SitelinkTable load_sitelinks_if_any(const PipelineConfig& cfg) {
  if (cfg.sitelinks_snapshot.empty()) return {};
  return load_sitelinks_snapshot(cfg.sitelinks_snapshot).table;
}

// ingest -------------------------------------------------------------------

Outputs run_ingest(const StageContext& ctx) {
  const auto& cfg = *ctx.cfg;
  if (cfg.datasets.empty()) throw ConfigError("no [[datasets]] configured");
  Outputs outs;
  fs::create_directories(ctx.run_dir / "ingest");
  for (const auto& d : cfg.datasets) {
    auto res = load_triples(d.path, d.id, d.question_template);
    for (const auto& e : res.errors)
      spdlog::warn("{}:{}: {}", d.path.string(), e.line, e.message);
    json issues = json::array();
    for (const auto& e : res.errors) issues.push_back({{"line", e.line}, {"message", e.message}});
    emit(outs, ctx.run_dir / "ingest" / (d.name + ".triples.jsonl"), serialize_triples(res.triples));
    emit(outs, ctx.run_dir / "ingest" / (d.name + ".issues.json"), issues.dump(2) + "\n");
    spdlog::info("ingest {}: {} triples, {} rejected", d.name, res.triples.size(), res.errors.size());
  }
  return outs;
}

// scan ---------------------------------------------------------------------

Outputs run_scan(const StageContext& ctx) {
  const auto& cfg = *ctx.cfg;
  ScanStats stats;
  auto docs = load_corpus(cfg.corpus, &stats);
  const auto catalog = EntityCatalog::load(cfg.catalog);
  const auto matcher = build_matcher(catalog, {cfg.case_insensitive});
  const auto index = scan_corpus(docs, matcher, cfg.workers, &stats);
  Outputs outs;
  fs::create_directories(ctx.run_dir / "scan");
  const auto path = ctx.run_dir / "scan" / "index.bin";
  index.save(path);
  outs.push_back(path);
  outs.push_back(fs::path(path.string() + ".json"));
  emit(outs, ctx.run_dir / "scan" / "stats.json",
       json{{"documents", stats.documents},
            {"skipped", stats.skipped},
            {"entities", index.entities().size()},
            {"doc_count_total", index.doc_count_total()}}
               .dump(2) +
           "\n");
  spdlog::info("scan: {} documents, {} entities indexed", stats.documents, index.entities().size());
  return outs;
}

// generate -----------------------------------------------------------------

Outputs run_generate(const StageContext& ctx) {
  const auto& cfg = *ctx.cfg;
  if (cfg.models.empty()) throw ConfigError("no [[models]] configured");
  const auto catalog = EntityCatalog::load(cfg.catalog);
  const auto sitelinks = load_sitelinks_if_any(cfg);
  CatalogResolver resolver(catalog, &sitelinks);

  std::unique_ptr<ChatClient> judge;
  if (cfg.judge) judge = std::make_unique<ChatClient>(cfg.judge->endpoint, cache_for(*cfg.judge, ctx.run_dir));

  Outputs outs;
  fs::create_directories(ctx.run_dir / "generate");
  for (const auto& m : cfg.models) {
    ChatClient client(m.endpoint, cache_for(m, ctx.run_dir));
    for (const auto& d : cfg.datasets) {
      const auto triples =
          parse_triples(read_file(ctx.run_dir / "ingest" / (d.name + ".triples.jsonl")), d.id,
                        d.question_template)
              .triples;
      std::vector<std::string> questions;
      for (const auto& t : triples) questions.push_back(t.question);
      const auto gens = generate_answers(client, questions, cfg.prompts);

      std::vector<QARecord> records(triples.size());
      std::vector<json> baselines(triples.size());
      parallel_for_bounded(triples.size(), static_cast<std::size_t>(m.endpoint.max_parallel),
                           [&](std::size_t i) {
        std::optional<std::string> entity;
        if (!gens[i].answer.empty()) {
          if (auto hit = resolver.resolve(gens[i].answer)) entity = hit->id;
        }
        records[i] = make_qa_record(triples[i], gens[i].answer, gens[i].token_probs, entity);
        json b = json::object();
        if (cfg.verbalized_baseline) {
          try {
            b["verb"] = verbalized_confidence(client, questions[i], cfg.prompts);
          } catch (const ParseError& ex) {
            spdlog::warn("{} / {} question {}: {}; excluded from Verb", d.name, m.name, i, ex.what());
          }
        }
        if (cfg.consistency_samples > 0 && !gens[i].answer.empty()) {
          auto samples = sample_for_consistency(client, questions[i], cfg.consistency_samples,
                                                cfg.consistency_temperature, cfg.prompts);
          if (samples.available) {
            b["consis"] = consistency_score(
                gens[i].answer, samples.answers, [&](const std::string& a, const std::string& x) {
                  return judge_equivalence(a, x, questions[i], judge.get(), cfg.prompts).equivalent;
                });
          }
        }
        baselines[i] = std::move(b);
      });

      std::string base_lines;
      for (const auto& b : baselines) base_lines += b.dump() + "\n";
      const auto unit = unit_id(d.name, m.name);
      emit(outs, ctx.run_dir / "generate" / (unit + ".qa.jsonl"), serialize_qa_records(records));
      emit(outs, ctx.run_dir / "generate" / (unit + ".baselines.jsonl"), base_lines);
      spdlog::info("generate {}: {} answers ({} upstream calls, {} cache hits)", unit,
                   records.size(), client.stats().upstream_calls, client.stats().cache_hits);
    }
  }
  return outs;
}

// popularity ---------------------------------------------------------------

std::optional<double> sitelink_value(const SitelinkTable& t, const std::optional<std::string>& id) {
  if (!id) return std::nullopt;
  auto v = t.get(*id);
  if (!v) return std::nullopt;
  return static_cast<double>(*v);
}

Outputs run_popularity(const StageContext& ctx) {
  const auto& cfg = *ctx.cfg;
  const auto index = OccurrenceIndex::load(ctx.run_dir / "scan" / "index.bin");
  auto sitelinks = load_sitelinks_if_any(cfg);

  std::map<std::string, std::vector<std::vector<QARecord>>> by_dataset;
  std::map<std::string, std::vector<std::vector<json>>> baselines;
  std::set<std::string> needed;
  for (const auto& d : cfg.datasets) {
    for (const auto& m : cfg.models) {
      const auto unit = unit_id(d.name, m.name);
      by_dataset[d.name].push_back(
          parse_qa_records(read_file(ctx.run_dir / "generate" / (unit + ".qa.jsonl"))));
      std::vector<json> b;
      for (const auto& line : read_lines(ctx.run_dir / "generate" / (unit + ".baselines.jsonl")))
        if (!line.empty()) b.push_back(json::parse(line));
      baselines[d.name].push_back(std::move(b));
      for (const auto& r : by_dataset[d.name].back()) {
        for (const auto& id : {r.triple.subject_entity, r.triple.object_entity, r.generated_entity})
          if (id && !sitelinks.get(*id)) needed.insert(*id);
      }
    }
  }

  Outputs outs;
  fs::create_directories(ctx.run_dir / "popularity");
  if (cfg.sitelinks_endpoint && !needed.empty()) {
    auto fetched = fetch_sitelinks({needed.begin(), needed.end()}, *cfg.sitelinks_endpoint);
    for (const auto& e : fetched.errors) spdlog::warn("sitelinks: {}", e);
    if (!fetched.errors.empty() && fetched.table.counts.empty())
      throw ServiceError("sitelink endpoint failed for every batch");
    sitelinks.counts.merge(fetched.table.counts);
  }
  save_sitelinks_snapshot(ctx.run_dir / "popularity" / "sitelinks.tsv", sitelinks);
  outs.push_back(ctx.run_dir / "popularity" / "sitelinks.tsv");

  for (const auto& d : cfg.datasets) {
    const auto& models = by_dataset[d.name];
    FilterOptions opts;
    opts.cap = cfg.cap;
    opts.apply_cap = d.apply_cap.value_or(default_apply_cap(d.id));
    const auto filtered = filter_dataset(models, index, opts);

    // Recover which questions survived; filtering keeps order.
    std::vector<std::size_t> kept;
    for (std::size_t q = 0, k = 0; q < models[0].size() && k < filtered.by_model[0].size(); ++q) {
      if (models[0][q] == filtered.by_model[0][k]) {
        kept.push_back(q);
        ++k;
      }
    }
    const auto& rep = filtered.report;
    emit(outs, ctx.run_dir / "popularity" / (d.name + ".filter.json"),
         json{{"input_count", rep.input_count},
              {"removed_empty", rep.removed_empty},
              {"removed_unresolved_entity", rep.removed_unresolved_entity},
              {"removed_docfreq_over_cap", rep.removed_docfreq_over_cap},
              {"output_count", rep.output_count},
              {"docfreq_cap", rep.docfreq_cap},
              {"apply_cap", opts.apply_cap}}
                 .dump(2) +
             "\n");

    for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
      std::vector<AnalysisRecord> out;
      for (std::size_t k = 0; k < kept.size(); ++k) {
        AnalysisRecord a;
        a.qa = filtered.by_model[mi][k];
        const auto& t = a.qa.triple;
        a.pop.pop_q = sitelink_value(sitelinks, t.subject_entity);
        a.pop.pop_gt = sitelink_value(sitelinks, t.object_entity);
        a.pop.pop_ge = sitelink_value(sitelinks, a.qa.generated_entity);
        if (t.subject_entity && t.object_entity)
          a.pop.rpop_gt = static_cast<double>(
              cooccurrence_count(index, *t.subject_entity, *t.object_entity));
        if (t.subject_entity && a.qa.generated_entity)
          a.pop.rpop_ge = static_cast<double>(
              cooccurrence_count(index, *t.subject_entity, *a.qa.generated_entity));
        const auto& b = baselines[d.name][mi];
        if (kept[k] < b.size()) {
          if (b[kept[k]].contains("verb")) a.verb = b[kept[k]]["verb"].get<int>();
          if (b[kept[k]].contains("consis")) a.consis = b[kept[k]]["consis"].get<double>();
        }
        out.push_back(std::move(a));
      }
      const auto unit = unit_id(d.name, cfg.models[mi].name);
      emit(outs, ctx.run_dir / "popularity" / (unit + std::string(kAnalysisSuffix)),
           serialize_analysis_records(out));
    }
    spdlog::info("popularity {}: {} of {} questions kept", d.name, rep.output_count, rep.input_count);
  }
  return outs;
}

// self_pop -----------------------------------------------------------------

std::vector<FamiliarityShot> make_shots(const std::vector<AnalysisRecord>& recs, int shots,
                                        BucketMode mode, std::uint64_t seed,
                                        SelfPopTarget target) {
  if (shots == 0) return {};
  std::vector<double> values;
  std::vector<const AnalysisRecord*> owners;
  for (const auto& r : recs) {
    std::optional<double> v = target == SelfPopTarget::QuestionEntity    ? r.pop.pop_q
                              : target == SelfPopTarget::GeneratedEntity ? r.pop.pop_ge
                                                                         : r.pop.rpop_ge;
    if (!v) continue;
    values.push_back(*v);
    owners.push_back(&r);
  }
  std::vector<FamiliarityShot> out;
  for (const auto& ex : select_fewshot_examples(values, shots, seed, mode)) {
    const auto* r = owners[ex.source_index];
    FamiliarityShot s;
    s.score = ex.score;
    if (target == SelfPopTarget::QuestionEntity) {
      s.entity_a = r->qa.triple.subject;
    } else if (target == SelfPopTarget::GeneratedEntity) {
      s.entity_a = r->qa.generated_answer;
    } else {
      s.entity_a = r->qa.triple.subject;
      s.entity_b = r->qa.generated_answer;
    }
    out.push_back(std::move(s));
  }
  return out;
}

Outputs run_self_pop(const StageContext& ctx) {
  const auto& cfg = *ctx.cfg;
  Outputs outs;
  fs::create_directories(ctx.run_dir / "self_pop");
  for (const auto& m : cfg.models) {
    ChatClient client(m.endpoint, cache_for(m, ctx.run_dir));
    for (const auto& d : cfg.datasets) {
      const auto unit = unit_id(d.name, m.name);
      // Always start from the corpus-side records.
      const auto src = ctx.run_dir / "popularity" / (unit + std::string(kAnalysisSuffix));
      if (!fs::exists(src)) throw DependencyError("popularity", "missing " + src.string());
      auto recs = parse_analysis_records(read_file(src));
      const auto shots_q =
          make_shots(recs, cfg.self_pop_shots, cfg.bucket_mode, cfg.fewshot_seed, SelfPopTarget::QuestionEntity);
      const auto shots_g =
          make_shots(recs, cfg.self_pop_shots, cfg.bucket_mode, cfg.fewshot_seed, SelfPopTarget::GeneratedEntity);
      const auto shots_r =
          make_shots(recs, cfg.self_pop_shots, cfg.bucket_mode, cfg.fewshot_seed, SelfPopTarget::RelationPair);
      std::size_t fallbacks = 0;
      std::mutex mu;
      parallel_for_bounded(recs.size(), static_cast<std::size_t>(m.endpoint.max_parallel),
                           [&](std::size_t i) {
        auto& r = recs[i];
        const auto& subj = r.qa.triple.subject;
        const auto& gen = r.qa.generated_answer;
        auto q = self_popularity(client, SelfPopTarget::QuestionEntity, subj, "", shots_q, cfg.prompts);
        auto g = self_popularity(client, SelfPopTarget::GeneratedEntity, gen, "", shots_g, cfg.prompts);
        auto rel = self_popularity(client, SelfPopTarget::RelationPair, subj, gen, shots_r, cfg.prompts);
        PopularityVector v;
        v.source = PopularitySource::SelfEstimated;
        v.pop_q = q.score;
        v.pop_ge = g.score;
        v.rpop_ge = rel.score;
        r.self_pop = v;
        std::lock_guard lock(mu);
        fallbacks += q.fallback + g.fallback + rel.fallback;
      });
      if (fallbacks) spdlog::warn("self_pop {}: {} score(s) fell back to 5", unit, fallbacks);
      emit(outs, ctx.run_dir / "self_pop" / (unit + std::string(kAnalysisSuffix)),
           serialize_analysis_records(recs));
    }
  }
  return outs;
}

// correlate / calibrate ----------------------------------------------------

bool has_self(const std::vector<AnalysisRecord>& recs) {
  return !recs.empty() &&
         std::all_of(recs.begin(), recs.end(), [](const auto& r) { return r.self_pop.has_value(); });
}

Outputs run_correlate(const StageContext& ctx) {
  const auto& cfg = *ctx.cfg;
  Outputs outs;
  fs::create_directories(ctx.run_dir / "correlate");
  for (const auto& [unit, rel] : analysis_files(*ctx.manifest)) {
    const auto recs = parse_analysis_records(read_file(ctx.run_dir / rel));
    if (recs.empty()) {
      spdlog::warn("correlate {}: no records", unit);
      continue;
    }
    emit(outs, ctx.run_dir / "correlate" / (unit + ".json"),
         correlation_report_json(correlation_report(recs, false)));
    if (cfg.popularity_source != PopularityMode::Corpus && has_self(recs))
      emit(outs, ctx.run_dir / "correlate" / (unit + ".self.json"),
           correlation_report_json(correlation_report(recs, true)));
  }
  return outs;
}

Outputs run_calibrate(const StageContext& ctx) {
  const auto& cfg = *ctx.cfg;
  Outputs outs;
  fs::create_directories(ctx.run_dir / "calibrate");
  for (const auto& [unit, rel] : analysis_files(*ctx.manifest)) {
    const auto recs = parse_analysis_records(read_file(ctx.run_dir / rel));
    if (recs.size() < 2) {
      spdlog::warn("calibrate {}: too few records", unit);
      continue;
    }
    ProtocolConfig pc;
    pc.seeds = cfg.seeds;
    pc.train = cfg.train;
    pc.workers = cfg.workers;
    const auto [dataset, model] = split_unit(unit);
    for (const auto& d : cfg.datasets)
      if (d.name == dataset) pc.balance = d.balance;
    if (!cfg.feature_sets.empty()) {
      pc.rows.clear();
      for (const auto& f : cfg.feature_sets) pc.rows.push_back(make_protocol_row(f));
    } else {
      pc.rows = default_protocol_rows(cfg.popularity_source != PopularityMode::Corpus && has_self(recs));
    }
    const auto result = run_protocol(recs, pc);
    for (const auto& r : result.rows)
      if (!r.available) spdlog::info("calibrate {}: {} unavailable ({})", unit, r.name, r.unavailable_reason);
    emit(outs, ctx.run_dir / "calibrate" / (unit + ".json"), protocol_result_json(result));
  }
  return outs;
}

// report -------------------------------------------------------------------

Outputs emit_report_files(const fs::path& run_dir, const Manifest& manifest, std::size_t bins) {
  std::vector<ReportUnit> units;
  for (const auto& [unit, rel] : analysis_files(manifest)) {
    ReportUnit u;
    std::tie(u.dataset, u.model) = split_unit(unit);
    u.records = parse_analysis_records(read_file(run_dir / rel));
    const auto corr = run_dir / "correlate" / (unit + ".json");
    if (fs::exists(corr)) u.correlation = parse_correlation_report_json(read_file(corr));
    const auto cal = run_dir / "calibrate" / (unit + ".json");
    if (fs::exists(cal)) u.protocol = parse_protocol_result_json(read_file(cal));
    units.push_back(std::move(u));
  }
  return write_report(run_dir / "report", units, bins);
}

// synth --------------------------------------------------------------------

Outputs run_synth_stage(const StageContext& ctx) {
  const auto& cfg = *ctx.cfg;
  if (!cfg.synth) throw ConfigError("no [synth] table configured");
  const auto recs = synth_generate(*cfg.synth);
  Outputs outs;
  fs::create_directories(ctx.run_dir / "synth");
  fs::create_directories(ctx.run_dir / "popularity");
  emit(outs, ctx.run_dir / "synth" / "params.json", cfg.synth->to_json().dump(2) + "\n");
  emit(outs, ctx.run_dir / "popularity" / ("synthetic__oracle" + std::string(kAnalysisSuffix)),
       serialize_analysis_records(recs));
  return outs;
}

// driver -------------------------------------------------------------------

std::map<std::string, std::string> stage_inputs(const PipelineConfig* cfg, const Manifest& m,
                                                Stage stage) {
  std::map<std::string, std::string> in;
  for (auto dep : stage_dependencies(stage)) add_outputs_of(m, m.provider(dep), in);
  auto self_pop_outputs = [&] {
    if (const auto* sp = m.find(Stage::SelfPop); sp && outputs_intact(m.run_dir(), *sp))
      add_outputs_of(m, sp, in);
  };
  switch (stage) {
    case Stage::Ingest:
      for (const auto& d : cfg->datasets) add_external(d.path, in);
      break;
    case Stage::Scan:
      add_external(cfg->corpus, in);
      add_external(cfg->catalog, in);
      break;
    case Stage::Generate:
      add_external(cfg->catalog, in);
      add_external(cfg->sitelinks_snapshot, in);
      break;
    case Stage::Popularity: add_external(cfg->sitelinks_snapshot, in); break;
    case Stage::Correlate:
    case Stage::Calibrate: self_pop_outputs(); break;
    case Stage::Report:
      add_outputs_of(m, m.provider(Stage::Popularity), in);
      self_pop_outputs();
      break;
    case Stage::SelfPop:
    case Stage::Synth: break;
  }
  return in;
}

void validate_paths(const PipelineConfig& cfg, Stage stage) {
  switch (stage) {
    case Stage::Ingest:
      for (const auto& d : cfg.datasets) require_path(d.path, "dataset " + d.name);
      break;
    case Stage::Scan:
      require_path(cfg.corpus, "corpus.path");
      require_path(cfg.catalog, "corpus.catalog");
      break;
    case Stage::Generate:
      require_path(cfg.catalog, "corpus.catalog");
      if (!cfg.sitelinks_snapshot.empty()) require_path(cfg.sitelinks_snapshot, "sitelinks.snapshot");
      break;
    case Stage::Popularity:
      if (cfg.sitelinks_snapshot.empty() && !cfg.sitelinks_endpoint)
        throw ConfigError("popularity needs sitelinks.snapshot or sitelinks.endpoint");
      if (!cfg.sitelinks_snapshot.empty()) require_path(cfg.sitelinks_snapshot, "sitelinks.snapshot");
      break;
    default: break;
  }
}

StageOutcome execute(const fs::path& run_dir, Stage stage, const json& settings,
                     const std::function<std::map<std::string, std::string>(const Manifest&)>& inputs_fn,
                     const std::function<Outputs(const Manifest&)>& body) {
  auto manifest = Manifest::load(run_dir);
  for (auto dep : stage_dependencies(stage)) {
    if (!manifest.satisfied(dep))
      throw DependencyError(std::string(stage_name(dep)),
                            "stage " + std::string(stage_name(stage)) + " needs " +
                                std::string(stage_name(dep)) + "; run `popcal " +
                                std::string(stage_name(dep)) + "` first");
  }
  const auto inputs = inputs_fn(manifest);
  const auto config_hash = sha256_hex(settings.dump());

  StageOutcome outcome;
  outcome.stage = stage;
  if (const auto* prev = manifest.find(stage);
      prev && prev->config_hash == config_hash && prev->inputs == inputs &&
      outputs_intact(run_dir, *prev)) {
    ManifestEntry e = *prev;
    ++e.cache_hits;
    e.last_status = "cache_hit";
    for (const auto& [rel, sha] : e.outputs) outcome.outputs.push_back(run_dir / rel);
    manifest.put(stage, std::move(e));
    manifest.save();
    outcome.cache_hit = true;
    spdlog::info("{}: inputs unchanged, skipped", stage_name(stage));
    return outcome;
  }

  const auto outputs = body(manifest);
  ManifestEntry e;
  e.config_hash = config_hash;
  e.inputs = inputs;
  for (const auto& p : outputs) e.outputs[rel_to(run_dir, p)] = sha256_file(p);
  for (auto s : stage_provides(stage)) e.provides.emplace_back(stage_name(s));
  e.timestamp = utc_timestamp();
  e.last_status = "run";
  // A fresh run invalidates whatever a provider stood in for.
  manifest.put(stage, std::move(e));
  manifest.save();
  outcome.outputs = outputs;
  return outcome;
}

}  // namespace

StageOutcome run_stage(const PipelineConfig& cfg, Stage stage) {
  if (stage == Stage::Synth) return run_synth(cfg);
  fs::create_directories(cfg.output_dir);
  const auto settings = cfg.stage_settings(stage);
  return execute(
      cfg.output_dir, stage, settings,
      [&](const Manifest& m) {
        validate_paths(cfg, stage);
        return stage_inputs(&cfg, m, stage);
      },
      [&](const Manifest& m) -> Outputs {
        StageContext ctx{&cfg, cfg.output_dir, &m};
        switch (stage) {
          case Stage::Ingest: return run_ingest(ctx);
          case Stage::Scan: return run_scan(ctx);
          case Stage::Generate: return run_generate(ctx);
          case Stage::Popularity: return run_popularity(ctx);
          case Stage::SelfPop: return run_self_pop(ctx);
          case Stage::Correlate: return run_correlate(ctx);
          case Stage::Calibrate: return run_calibrate(ctx);
          case Stage::Report: return emit_report_files(cfg.output_dir, m, cfg.bins);
          case Stage::Synth: break;
        }
        return {};
      });
}

StageOutcome run_synth(const PipelineConfig& cfg) {
  if (!cfg.synth) throw ConfigError("no [synth] table configured");
  fs::create_directories(cfg.output_dir);
  return execute(
      cfg.output_dir, Stage::Synth, cfg.stage_settings(Stage::Synth),
      [](const Manifest&) { return std::map<std::string, std::string>{}; },
      [&](const Manifest& m) {
        StageContext ctx{&cfg, cfg.output_dir, &m};
        return run_synth_stage(ctx);
      });
}

StageOutcome run_report(const fs::path& run_dir, std::size_t bins) {
  if (!fs::exists(manifest_path(run_dir)))
    throw ConfigError("no manifest in run directory " + run_dir.string());
  json settings = {{"stage", "report"}, {"bins", bins}};
  return execute(
      run_dir, Stage::Report, settings,
      [&](const Manifest& m) { return stage_inputs(nullptr, m, Stage::Report); },
      [&](const Manifest& m) { return emit_report_files(run_dir, m, bins); });
}

}  // namespace popcal
