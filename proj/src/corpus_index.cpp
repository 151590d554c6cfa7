#include "popcal/corpus_index.hpp"

#include <omp.h>

#include <algorithm>
#include <cstring>
#include <deque>
#include <map>
#include "json.hpp"
#include <set>

#include <spdlog/spdlog.h>

namespace popcal {

using nlohmann::json;

namespace {

constexpr std::uint32_t kNone = UINT32_MAX;
constexpr char kIndexMagic[4] = {'P', 'C', 'I', 'X'};
constexpr std::uint32_t kIndexVersion = 1;

bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error("occurrence index: truncated input");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

// Turns per-entity unsorted doc lists into the final index.
OccurrenceIndex finish_index(const Matcher& matcher, std::vector<std::vector<DocId>> lists,
                             std::uint64_t doc_total) {
  std::vector<std::pair<std::string, std::vector<DocId>>> postings;
  postings.reserve(lists.size());
  for (std::size_t e = 0; e < lists.size(); ++e) {
    auto& l = lists[e];
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
    postings.emplace_back(matcher.entity_ids()[e], std::move(l));
  }
  return OccurrenceIndex(doc_total, std::move(postings));
}

std::uint64_t doc_total_for(std::span<const Document> docs) {
  std::uint64_t total = docs.size();
  for (const auto& d : docs) total = std::max<std::uint64_t>(total, std::uint64_t{d.id} + 1);
  return total;
}

}  // namespace

// ---------------------------------------------------------------------------
// EntityCatalog

EntityCatalog::EntityCatalog(std::vector<CatalogEntry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.id.empty()) throw Error("catalog entry " + std::to_string(i) + " has an empty id");
    if (e.label.empty()) throw Error("catalog entry " + e.id + " has an empty label");
    for (const auto& a : e.aliases)
      if (a.empty()) throw Error("catalog entry " + e.id + " has an empty alias");
    if (!by_id_.emplace(e.id, i).second) throw Error("duplicate catalog id " + e.id);
  }
}

EntityCatalog EntityCatalog::load(const std::filesystem::path& path) {
  std::vector<CatalogEntry> entries;
  auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    try {
      auto j = json::parse(lines[i]);
      CatalogEntry e;
      e.id = j.at("id").get<std::string>();
      e.label = j.at("label").get<std::string>();
      if (j.contains("aliases")) e.aliases = j.at("aliases").get<std::vector<std::string>>();
      entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw ParseError(i + 1, std::string("catalog: ") + ex.what());
    }
  }
  return EntityCatalog(std::move(entries));
}

std::string EntityCatalog::to_jsonl() const {
  std::string out;
  for (const auto& e : entries_) {
    json j{{"id", e.id}, {"label", e.label}, {"aliases", e.aliases}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

const CatalogEntry* EntityCatalog::find(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  return it == by_id_.end() ? nullptr : &entries_[it->second];
}

// ---------------------------------------------------------------------------
// Matcher

AmbiguousSurfaceError::AmbiguousSurfaceError(std::vector<Collision> collisions)
    : Error([&] {
        std::string msg = "ambiguous surface forms:";
        for (const auto& c : collisions) {
          msg += " \"" + c.surface + "\" ->";
          for (const auto& id : c.entity_ids) msg += " " + id;
          msg += ";";
        }
        return msg;
      }()),
      collisions_(std::move(collisions)) {}

Matcher build_matcher(const EntityCatalog& catalog, const MatcherOptions& options) {
  if (catalog.empty()) throw Error("build_matcher: catalog is empty");

  Matcher m;
  m.case_insensitive_ = options.case_insensitive;

  // surface -> owning entity indexes
  std::map<std::string, std::vector<std::uint32_t>> owners;
  for (std::uint32_t e = 0; e < catalog.size(); ++e) {
    const auto& entry = catalog.entries()[e];
    m.entity_ids_.push_back(entry.id);
    auto add = [&](const std::string& s) {
      auto key = options.case_insensitive ? ascii_lower(s) : s;
      auto& v = owners[key];
      if (v.empty() || v.back() != e) v.push_back(e);
    };
    add(entry.label);
    for (const auto& a : entry.aliases) add(a);
  }

  std::vector<AmbiguousSurfaceError::Collision> collisions;
  for (const auto& [surface, ents] : owners) {
    if (ents.size() > 1) {
      AmbiguousSurfaceError::Collision c{surface, {}};
      for (auto e : ents) c.entity_ids.push_back(m.entity_ids_[e]);
      collisions.push_back(std::move(c));
    }
  }
  if (!collisions.empty()) throw AmbiguousSurfaceError(std::move(collisions));

  for (int c = 0; c < 256; ++c) m.word_byte_[c] = is_word_byte(static_cast<unsigned char>(c));

  // Symbol classes: one per distinct byte used by any pattern.
  std::uint32_t next_class = 1;
  std::size_t total_bytes = 0;
  for (const auto& [surface, ents] : owners) {
    total_bytes += surface.size();
    for (unsigned char c : surface) {
      if (m.byte_class_[c] == 0) {
        if (next_class > 255) throw Error("build_matcher: pattern alphabet exceeds 255 symbols");
        m.byte_class_[c] = static_cast<std::uint8_t>(next_class++);
      }
    }
  }
  if (options.case_insensitive) {
    for (int c = 'A'; c <= 'Z'; ++c) m.byte_class_[c] = m.byte_class_[c - 'A' + 'a'];
  }
  m.class_count_ = next_class;
  const std::uint32_t C = m.class_count_;

  // Trie.
  const std::size_t max_states = total_bytes + 1;
  m.delta_.assign(max_states * C, kNone);
  m.out_pattern_.assign(max_states, kNone);
  std::uint32_t states = 1;
  for (const auto& [surface, ents] : owners) {
    std::uint32_t s = 0;
    for (unsigned char c : surface) {
      auto& next = m.delta_[std::size_t{s} * C + m.byte_class_[c]];
      if (next == kNone) next = states++;
      s = next;
    }
    const auto pid = static_cast<std::uint32_t>(m.pattern_entity_.size());
    m.out_pattern_[s] = pid;
    m.pattern_entity_.push_back(ents.front());
    m.pattern_length_.push_back(static_cast<std::uint32_t>(surface.size()));
    std::uint8_t edges = 0;
    if (is_word_byte(static_cast<unsigned char>(surface.front()))) edges |= 1;
    if (is_word_byte(static_cast<unsigned char>(surface.back()))) edges |= 2;
    m.pattern_edges_.push_back(edges);
  }
  m.state_count_ = states;
  m.delta_.resize(std::size_t{states} * C);
  m.out_pattern_.resize(states);
  m.delta_.shrink_to_fit();

  // Failure links by BFS, folding them into a complete transition table.
  std::vector<std::uint32_t> fail(states, 0);
  m.dict_link_.assign(states, kNone);
  std::deque<std::uint32_t> queue;
  for (std::uint32_t c = 0; c < C; ++c) {
    auto& t = m.delta_[c];
    if (t == kNone) {
      t = 0;
    } else {
      fail[t] = 0;
      queue.push_back(t);
    }
  }
  while (!queue.empty()) {
    auto s = queue.front();
    queue.pop_front();
    const auto f = fail[s];
    m.dict_link_[s] = m.out_pattern_[f] != kNone ? f : m.dict_link_[f];
    for (std::uint32_t c = 0; c < C; ++c) {
      auto& t = m.delta_[std::size_t{s} * C + c];
      const auto via_fail = m.delta_[std::size_t{f} * C + c];
      if (t == kNone) {
        t = via_fail;
      } else {
        fail[t] = via_fail;
        queue.push_back(t);
      }
    }
  }
  return m;
}

void Matcher::match_entities(std::string_view text, std::vector<std::uint32_t>& out) const {
  const auto first = out.size();
  const auto* bytes = reinterpret_cast<const unsigned char*>(text.data());
  const std::size_t n = text.size();
  const std::uint32_t C = class_count_;
  const std::uint32_t* delta = delta_.data();
  std::uint32_t s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    s = delta[std::size_t{s} * C + byte_class_[bytes[i]]];
    std::uint32_t t = out_pattern_[s] != kNone ? s : dict_link_[s];
    for (; t != kNone; t = dict_link_[t]) {
      const auto p = out_pattern_[t];
      const std::size_t end = i + 1;
      const std::size_t begin = end - pattern_length_[p];
      const auto edges = pattern_edges_[p];
      if ((edges & 1) && begin > 0 && word_byte_[bytes[begin - 1]]) continue;
      if ((edges & 2) && end < n && word_byte_[bytes[end]]) continue;
      out.push_back(pattern_entity_[p]);
    }
  }
  std::sort(out.begin() + static_cast<std::ptrdiff_t>(first), out.end());
  out.erase(std::unique(out.begin() + static_cast<std::ptrdiff_t>(first), out.end()), out.end());
}

// ---------------------------------------------------------------------------
// OccurrenceIndex

OccurrenceIndex::OccurrenceIndex(std::uint64_t doc_count_total,
                                 std::vector<std::pair<std::string, std::vector<DocId>>> postings)
    : doc_count_total_(doc_count_total), postings_(std::move(postings)) {
  std::sort(postings_.begin(), postings_.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 0; i < postings_.size(); ++i) {
    if (i > 0 && postings_[i].first == postings_[i - 1].first)
      throw Error("occurrence index: duplicate entity " + postings_[i].first);
    const auto& list = postings_[i].second;
    for (std::size_t k = 0; k < list.size(); ++k) {
      if (k > 0 && list[k] <= list[k - 1])
        throw Error("occurrence index: postings of " + postings_[i].first +
                    " are not strictly increasing");
      if (list[k] >= doc_count_total_)
        throw Error("occurrence index: doc id out of range in " + postings_[i].first);
    }
  }
}

bool OccurrenceIndex::contains(std::string_view entity) const {
  auto it = std::lower_bound(postings_.begin(), postings_.end(), entity,
                             [](const auto& p, std::string_view e) { return p.first < e; });
  return it != postings_.end() && it->first == entity;
}

std::span<const DocId> OccurrenceIndex::postings(std::string_view entity) const {
  auto it = std::lower_bound(postings_.begin(), postings_.end(), entity,
                             [](const auto& p, std::string_view e) { return p.first < e; });
  if (it == postings_.end() || it->first != entity) return {};
  return it->second;
}

std::vector<std::string> OccurrenceIndex::entities() const {
  std::vector<std::string> out;
  out.reserve(postings_.size());
  for (const auto& p : postings_) out.push_back(p.first);
  return out;
}

std::string OccurrenceIndex::serialize() const {
  std::string out(kIndexMagic, 4);
  put_u32(out, kIndexVersion);
  put_u64(out, doc_count_total_);
  put_u32(out, static_cast<std::uint32_t>(postings_.size()));
  for (const auto& [id, list] : postings_) {
    put_u32(out, static_cast<std::uint32_t>(id.size()));
    out += id;
    put_u32(out, static_cast<std::uint32_t>(list.size()));
    for (auto d : list) put_u32(out, d);
  }
  return out;
}

OccurrenceIndex OccurrenceIndex::deserialize(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.take(4) != std::string_view(kIndexMagic, 4)) throw Error("occurrence index: bad magic");
  auto version = r.u32();
  if (version != kIndexVersion)
    throw Error("occurrence index: unsupported version " + std::to_string(version));
  auto total = r.u64();
  auto n = r.u32();
  std::vector<std::pair<std::string, std::vector<DocId>>> postings;
  postings.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string id(r.take(r.u32()));
    auto count = r.u32();
    std::vector<DocId> list(count);
    for (auto& d : list) d = r.u32();
    postings.emplace_back(std::move(id), std::move(list));
  }
  if (!r.done()) throw Error("occurrence index: trailing bytes");
  return OccurrenceIndex(total, std::move(postings));
}

void OccurrenceIndex::save(const std::filesystem::path& path) const {
  auto bytes = serialize();
  write_file_atomic(path, bytes);
  json manifest{{"format_version", kIndexVersion},
                {"entity_count", postings_.size()},
                {"doc_count_total", doc_count_total_},
                {"checksum", sha256_hex(bytes)}};
  auto sidecar = path;
  sidecar += ".json";
  write_file_atomic(sidecar, manifest.dump(2) + "\n");
}

OccurrenceIndex OccurrenceIndex::load(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  auto sidecar = path;
  sidecar += ".json";
  if (std::filesystem::exists(sidecar)) {
    auto manifest = json::parse(read_file(sidecar));
    if (manifest.at("checksum").get<std::string>() != sha256_hex(bytes))
      throw Error("occurrence index: checksum mismatch for " + path.string());
  }
  return deserialize(bytes);
}

// ---------------------------------------------------------------------------
// Scanning

OccurrenceIndex scan_corpus(std::span<const Document> docs, const Matcher& matcher, int workers,
                            ScanStats* stats) {
  if (workers < 1) throw std::invalid_argument("scan_corpus: workers must be >= 1");
  const auto n = static_cast<std::int64_t>(docs.size());
  const std::size_t entity_count = matcher.entity_ids().size();

  // Each worker emits (entity, doc) pairs; the merge below sorts every
  // posting list, so the result does not depend on scheduling.
  std::vector<std::vector<std::pair<std::uint32_t, DocId>>> partial(workers);
#pragma omp parallel num_threads(workers)
  {
    auto& local = partial[omp_get_thread_num()];
    std::vector<std::uint32_t> found;
#pragma omp for schedule(dynamic, 16)
    for (std::int64_t i = 0; i < n; ++i) {
      found.clear();
      matcher.match_entities(docs[i].text, found);
      for (auto e : found) local.emplace_back(e, docs[i].id);
    }
  }

  std::vector<std::size_t> sizes(entity_count, 0);
  for (const auto& part : partial)
    for (const auto& [e, d] : part) ++sizes[e];
  std::vector<std::vector<DocId>> lists(entity_count);
  for (std::size_t e = 0; e < entity_count; ++e) lists[e].reserve(sizes[e]);
  for (auto& part : partial) {
    for (const auto& [e, d] : part) lists[e].push_back(d);
    part = {};
  }

#pragma omp parallel for num_threads(workers) schedule(dynamic, 64)
  for (std::int64_t e = 0; e < static_cast<std::int64_t>(entity_count); ++e) {
    auto& l = lists[e];
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
  }

  if (stats) stats->documents = docs.size();
  return finish_index(matcher, std::move(lists), doc_total_for(docs));
}

OccurrenceIndex scan_corpus_serial(std::span<const Document> docs, const Matcher& matcher,
                                   ScanStats* stats) {
  std::vector<std::vector<DocId>> lists(matcher.entity_ids().size());
  std::vector<std::uint32_t> found;
  for (const auto& doc : docs) {
    found.clear();
    matcher.match_entities(doc.text, found);
    for (auto e : found) lists[e].push_back(doc.id);
  }
  if (stats) stats->documents = docs.size();
  return finish_index(matcher, std::move(lists), doc_total_for(docs));
}

std::vector<Document> load_corpus(const std::filesystem::path& path, ScanStats* stats) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& entry : std::filesystem::directory_iterator(path))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
  } else if (std::filesystem::exists(path)) {
    files.push_back(path);
  } else {
    throw IoError("corpus not found: " + path.string());
  }

  std::vector<Document> docs;
  std::uint64_t skipped = 0;
  for (const auto& f : files) {
    for (auto& line : read_lines(f)) {
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      auto j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("text") ||
          !j["id"].is_number_unsigned() || !j["text"].is_string() ||
          j["id"].get<std::uint64_t>() > UINT32_MAX) {
        ++skipped;
        continue;
      }
      docs.push_back({static_cast<DocId>(j["id"].get<std::uint64_t>()),
                      j["text"].get<std::string>()});
    }
  }
  if (skipped > 0) spdlog::warn("corpus: skipped {} undecodable document(s)", skipped);
  if (stats) stats->skipped += skipped;
  return docs;
}

std::uint64_t intersection_size(std::span<const DocId> a, std::span<const DocId> b) {
  std::uint64_t n = 0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

std::uint64_t doc_count(const OccurrenceIndex& index, std::string_view entity) {
  return index.postings(entity).size();
}

std::uint64_t cooccurrence_count(const OccurrenceIndex& index, std::string_view e1,
                                 std::string_view e2) {
  return intersection_size(index.postings(e1), index.postings(e2));
}

std::vector<PairProbability> pair_probabilities(
    const OccurrenceIndex& index, std::span<const std::pair<std::string, std::string>> pairs) {
  if (index.doc_count_total() == 0)
    throw std::domain_error("pair_probabilities: corpus has no documents");
  const double total = static_cast<double>(index.doc_count_total());
  std::vector<PairProbability> out;
  out.reserve(pairs.size());
  for (const auto& [s, o] : pairs) {
    out.push_back({static_cast<double>(doc_count(index, s)) / total,
                   static_cast<double>(doc_count(index, o)) / total,
                   static_cast<double>(cooccurrence_count(index, s, o)) / total});
  }
  return out;
}

}  // namespace popcal
