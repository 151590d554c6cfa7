#include "popcal/wikidata.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <set>
#include <sstream>

#include "json.hpp"

namespace popcal {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::optional<std::uint64_t> parse_count(std::string_view s) {
  s = trim(s);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

void put_count(SnapshotLoadResult& out, std::size_t line, std::string id, std::uint64_t count) {
  auto [it, inserted] = out.table.counts.insert_or_assign(std::move(id), count);
  if (!inserted)
    out.warnings.push_back({line, "duplicate id " + it->first + ", keeping the later row"});
}

void auth_headers_for(const WikidataEndpoint& ep,
                      std::vector<std::pair<std::string, std::string>>& h) {
  h.emplace_back("User-Agent", "popcal/1.0");
  if (!ep.token_env.empty()) {
    if (const char* tok = std::getenv(ep.token_env.c_str()); tok && *tok)
      h.emplace_back("Authorization", std::string("Bearer ") + tok);
  }
}

std::string with_query(const std::string& url, const std::string& query) {
  return url + (url.find('?') == std::string::npos ? "?" : "&") + query;
}

}  // namespace

SnapshotLoadResult parse_sitelinks_snapshot(std::string_view text, bool jsonl) {
  SnapshotLoadResult out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;
    if (line.front() == '#') {
      auto body = trim(line.substr(1));
      constexpr std::string_view kDate = "snapshot_date:";
      if (body.starts_with(kDate)) out.table.snapshot_date = std::string(trim(body.substr(kDate.size())));
      continue;
    }
    if (jsonl) {
      try {
        auto j = json::parse(line);
        const auto& id = j.at("id");
        const auto& count = j.at("count");
        if (!id.is_string() || id.get<std::string>().empty() || !count.is_number_integer() ||
            count.get<std::int64_t>() < 0)
          throw std::invalid_argument("id must be a non-empty string, count a non-negative integer");
        put_count(out, line_no, id.get<std::string>(), count.get<std::uint64_t>());
      } catch (const std::exception& ex) {
        out.errors.push_back({line_no, ex.what()});
      }
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) {
      out.errors.push_back({line_no, "expected id<TAB>count"});
      continue;
    }
    auto id = trim(line.substr(0, tab));
    auto count = parse_count(line.substr(tab + 1));
    if (id.empty() || !count) {
      out.errors.push_back({line_no, "malformed row"});
      continue;
    }
    put_count(out, line_no, std::string(id), *count);
  }
  return out;
}

SnapshotLoadResult load_sitelinks_snapshot(const std::filesystem::path& path) {
  const auto text = read_file(path);
  const bool jsonl = path.extension() == ".jsonl" || path.extension() == ".json";
  auto out = parse_sitelinks_snapshot(text, jsonl);
  for (const auto& w : out.warnings) spdlog::warn("{}:{}: {}", path.string(), w.line, w.message);
  if (!out.errors.empty())
    spdlog::warn("{}: skipped {} malformed row(s)", path.string(), out.errors.size());
  return out;
}

std::string serialize_sitelinks_snapshot(const SitelinkTable& table) {
  std::string out;
  if (!table.snapshot_date.empty()) out += "# snapshot_date: " + table.snapshot_date + "\n";
  for (const auto& [id, count] : table.counts) out += id + "\t" + std::to_string(count) + "\n";
  return out;
}

void save_sitelinks_snapshot(const std::filesystem::path& path, const SitelinkTable& table) {
  write_file_atomic(path, serialize_sitelinks_snapshot(table));
}

FetchResult fetch_sitelinks(const std::vector<std::string>& ids, const WikidataEndpoint& endpoint) {
  if (endpoint.batch == 0) throw ConfigError("fetch_sitelinks: batch must be >= 1");
  std::vector<std::string> unique(ids.begin(), ids.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());

  FetchResult result;
  if (unique.empty()) return result;
  const std::size_t n_batches = (unique.size() + endpoint.batch - 1) / endpoint.batch;

  struct BatchOut {
    std::map<std::string, std::uint64_t> counts;
    std::vector<std::string> unresolved;
    std::string error;
    std::size_t requests = 0;
  };
  std::vector<BatchOut> batches(n_batches);
  RateLimiter limiter(endpoint.rps);
  std::vector<std::pair<std::string, std::string>> headers;
  auth_headers_for(endpoint, headers);

  parallel_for_bounded(n_batches, endpoint.max_parallel, [&](std::size_t b) {
    auto& out = batches[b];
    const auto first = unique.begin() + static_cast<std::ptrdiff_t>(b * endpoint.batch);
    const auto last = unique.begin() +
                      static_cast<std::ptrdiff_t>(std::min(unique.size(), (b + 1) * endpoint.batch));
    std::string joined;
    for (auto it = first; it != last; ++it) joined += (joined.empty() ? "" : "|") + *it;
    HttpRequest req;
    req.method = "GET";
    req.url = with_query(endpoint.url, "action=wbgetentities&props=sitelinks&format=json&ids=" +
                                           url_encode(joined));
    req.headers = headers;
    req.timeout = endpoint.timeout;
    try {
      auto res = send_with_retry(req, endpoint.retry, &limiter);
      out.requests = static_cast<std::size_t>(res.attempts);
      if (res.status != 200) {
        out.error = "batch " + std::to_string(b) + ": HTTP " + std::to_string(res.status);
        return;
      }
      auto body = json::parse(res.body);
      const auto& entities = body.at("entities");
      for (auto it = first; it != last; ++it) {
        auto e = entities.find(*it);
        if (e == entities.end() || e->contains("missing") || !e->contains("sitelinks")) {
          out.unresolved.push_back(*it);
          continue;
        }
        out.counts[*it] = e->at("sitelinks").size();
      }
    } catch (const std::exception& ex) {
      out.error = "batch " + std::to_string(b) + ": " + ex.what();
    }
  });

  for (auto& b : batches) {
    result.table.counts.merge(b.counts);
    result.unresolved.insert(result.unresolved.end(), b.unresolved.begin(), b.unresolved.end());
    if (!b.error.empty()) result.errors.push_back(b.error);
    result.requests += b.requests;
  }
  std::sort(result.unresolved.begin(), result.unresolved.end());
  return result;
}

std::string resolution_key(std::string_view surface) {
  auto norm = normalize_text(surface);
  std::string_view s = norm;
  auto punct = [](char c) {
    return std::ispunct(static_cast<unsigned char>(c)) || std::isspace(static_cast<unsigned char>(c));
  };
  while (!s.empty() && punct(s.front())) s.remove_prefix(1);
  while (!s.empty() && punct(s.back())) s.remove_suffix(1);
  return std::string(s);
}

CatalogResolver::CatalogResolver(const EntityCatalog& catalog, const SitelinkTable* popularity)
    : catalog_(&catalog), popularity_(popularity) {
  const auto& entries = catalog.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    by_label_.emplace(resolution_key(entries[i].label), i);
    for (const auto& a : entries[i].aliases) by_alias_.emplace(resolution_key(a), i);
  }
}

std::optional<ResolvedEntity> CatalogResolver::pick(
    std::string_view surface, const std::multimap<std::string, std::size_t>& index,
    const std::string& key) const {
  auto [lo, hi] = index.equal_range(key);
  if (lo == hi) return std::nullopt;
  const auto& entries = catalog_->entries();
  std::set<std::size_t> candidates;
  for (auto it = lo; it != hi; ++it) candidates.insert(it->second);
  auto pop = [&](std::size_t i) -> std::uint64_t {
    if (!popularity_) return 0;
    return popularity_->get(entries[i].id).value_or(0);
  };
  std::size_t best = *candidates.begin();
  for (auto i : candidates) {
    if (pop(i) > pop(best) || (pop(i) == pop(best) && entries[i].id < entries[best].id)) best = i;
  }
  if (candidates.size() > 1)
    spdlog::info("surface \"{}\" matches {} entities, chose {}", surface, candidates.size(),
                 entries[best].id);
  return ResolvedEntity{entries[best].id, entries[best].aliases};
}

std::optional<ResolvedEntity> CatalogResolver::resolve(std::string_view surface) const {
  const auto key = resolution_key(surface);
  if (key.empty()) return std::nullopt;
  if (auto hit = pick(surface, by_label_, key)) return hit;
  return pick(surface, by_alias_, key);
}

EndpointResolver::EndpointResolver(WikidataEndpoint endpoint, const SitelinkTable* popularity)
    : endpoint_(std::move(endpoint)), popularity_(popularity), limiter_(endpoint_.rps) {}

std::optional<ResolvedEntity> EndpointResolver::resolve(std::string_view surface) const {
  const auto key = resolution_key(surface);
  if (key.empty()) return std::nullopt;
  HttpRequest req;
  req.method = "GET";
  req.url = with_query(endpoint_.url,
                       "action=wbsearchentities&language=en&type=item&limit=20&format=json&search=" +
                           url_encode(surface));
  auth_headers_for(endpoint_, req.headers);
  req.timeout = endpoint_.timeout;
  json body;
  try {
    auto res = send_with_retry(req, endpoint_.retry, &limiter_);
    if (res.status != 200) throw ServiceError("HTTP " + std::to_string(res.status));
    body = json::parse(res.body);
  } catch (const std::exception& ex) {
    throw ResolverUnavailable(std::string("entity resolver unavailable: ") + ex.what());
  }

  std::vector<CatalogEntry> hits;
  for (const auto& r : body.value("search", json::array())) {
    CatalogEntry e;
    e.id = r.value("id", "");
    e.label = r.value("label", "");
    if (r.contains("aliases") && r["aliases"].is_array())
      e.aliases = r["aliases"].get<std::vector<std::string>>();
    if (r.contains("match") && r["match"].value("type", "") == "alias")
      e.aliases.push_back(r["match"].value("text", ""));
    if (!e.id.empty()) hits.push_back(std::move(e));
  }
  auto choose = [&](auto matches) -> std::optional<ResolvedEntity> {
    const CatalogEntry* best = nullptr;
    auto pop = [&](const CatalogEntry& e) -> std::uint64_t {
      return popularity_ ? popularity_->get(e.id).value_or(0) : 0;
    };
    for (const auto& e : hits) {
      if (!matches(e)) continue;
      if (!best || pop(e) > pop(*best) || (pop(e) == pop(*best) && e.id < best->id)) best = &e;
    }
    if (!best) return std::nullopt;
    return ResolvedEntity{best->id, best->aliases};
  };
  if (auto hit = choose([&](const CatalogEntry& e) { return resolution_key(e.label) == key; }))
    return hit;
  return choose([&](const CatalogEntry& e) {
    return std::any_of(e.aliases.begin(), e.aliases.end(),
                       [&](const std::string& a) { return resolution_key(a) == key; });
  });
}

std::optional<ResolvedEntity> resolve_entity(std::string_view surface,
                                             const EntityResolver& resolver) {
  if (trim(surface).empty()) throw std::invalid_argument("resolve_entity: empty surface");
  return resolver.resolve(surface);
}

}  // namespace popcal
