#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "popcal/corpus_index.hpp"
#include "popcal/http.hpp"
#include "popcal/util.hpp"

namespace popcal {

// Sitelink counts per entity id.
struct SitelinkTable {
  std::map<std::string, std::uint64_t> counts;
  std::string snapshot_date;

  std::optional<std::uint64_t> get(std::string_view id) const {
    auto it = counts.find(std::string(id));
    if (it == counts.end()) return std::nullopt;
    return it->second;
  }
  bool operator==(const SitelinkTable&) const = default;
};

struct SnapshotLoadResult {
  SitelinkTable table;
  std::vector<RecordIssue> errors;
  std::vector<RecordIssue> warnings;
};

// TSV `id<TAB>count` (an optional leading "# snapshot_date: ..." comment)
// or JSONL {"id": ..., "count": ...}. Duplicates are last-wins with a
// warning; malformed rows are skipped and reported.
SnapshotLoadResult load_sitelinks_snapshot(const std::filesystem::path& path);
SnapshotLoadResult parse_sitelinks_snapshot(std::string_view text, bool jsonl);
std::string serialize_sitelinks_snapshot(const SitelinkTable& table);
void save_sitelinks_snapshot(const std::filesystem::path& path, const SitelinkTable& table);

struct WikidataEndpoint {
  // MediaWiki action API, e.g. https://www.wikidata.org/w/api.php
  std::string url;
  std::string token_env = "POPCAL_WD_TOKEN";
  std::size_t batch = 50;
  std::size_t max_parallel = 2;
  double rps = 5.0;
  RetryPolicy retry;
  std::chrono::milliseconds timeout{30000};
};

struct FetchResult {
  SitelinkTable table;
  std::vector<std::string> unresolved;  // sorted
  std::vector<std::string> errors;      // one entry per failed batch
  std::size_t requests = 0;
};

// wbgetentities with props=sitelinks; the count is the size of each
// entity's sitelinks object. Ids are deduplicated first.
FetchResult fetch_sitelinks(const std::vector<std::string>& ids, const WikidataEndpoint& endpoint);

struct ResolvedEntity {
  std::string id;
  std::vector<std::string> aliases;
};

// The resolver could not be consulted at all (as opposed to "not found").
class ResolverUnavailable : public Error {
 public:
  using Error::Error;
};

class EntityResolver {
 public:
  virtual ~EntityResolver() = default;
  virtual std::optional<ResolvedEntity> resolve(std::string_view surface) const = 0;
};

// Surface forms are compared after lowercasing, whitespace collapsing and
// trimming surrounding punctuation.
std::string resolution_key(std::string_view surface);

class CatalogResolver : public EntityResolver {
 public:
  // `popularity` breaks ties between entities sharing a surface form.
  explicit CatalogResolver(const EntityCatalog& catalog, const SitelinkTable* popularity = nullptr);
  std::optional<ResolvedEntity> resolve(std::string_view surface) const override;

 private:
  const EntityCatalog* catalog_;
  std::multimap<std::string, std::size_t> by_label_;
  std::multimap<std::string, std::size_t> by_alias_;
  const SitelinkTable* popularity_;
  std::optional<ResolvedEntity> pick(std::string_view surface,
                                     const std::multimap<std::string, std::size_t>& index,
                                     const std::string& key) const;
};

// wbsearchentities lookup; exact label hits before alias hits.
class EndpointResolver : public EntityResolver {
 public:
  EndpointResolver(WikidataEndpoint endpoint, const SitelinkTable* popularity = nullptr);
  std::optional<ResolvedEntity> resolve(std::string_view surface) const override;

 private:
  WikidataEndpoint endpoint_;
  const SitelinkTable* popularity_;
  mutable RateLimiter limiter_;
};

std::optional<ResolvedEntity> resolve_entity(std::string_view surface,
                                             const EntityResolver& resolver);

}  // namespace popcal
