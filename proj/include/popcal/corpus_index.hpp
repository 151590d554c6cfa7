#pragma once

// Entity mention scanning and document-level occurrence indexing.
//
// A Matcher is an Aho-Corasick automaton over every surface form in an
// EntityCatalog. Matches are anchored at word boundaries: a byte is a word
// byte if it is an ASCII letter or digit or any byte >= 0x80 (so UTF-8
// letters extend words too). A match [b, e) is accepted when the byte before
// b and the byte at e do not continue a word across the pattern's own edge,
// i.e. the usual regex `\b` rule.
//
// scan_corpus is the OpenMP kernel; scan_corpus_serial is the plain
// single-threaded reference kept for equivalence tests and benchmarking.
// Both produce identical indexes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "popcal/util.hpp"

namespace popcal {

using DocId = std::uint32_t;

struct CatalogEntry {
  std::string id;
  std::string label;
  std::vector<std::string> aliases;
};

class EntityCatalog {
 public:
  EntityCatalog() = default;
  explicit EntityCatalog(std::vector<CatalogEntry> entries);

  // JSONL: {"id": str, "label": str, "aliases": [str]}
  static EntityCatalog load(const std::filesystem::path& path);
  std::string to_jsonl() const;

  const std::vector<CatalogEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const CatalogEntry* find(std::string_view id) const;

 private:
  std::vector<CatalogEntry> entries_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

struct MatcherOptions {
  bool case_insensitive = false;
};

class AmbiguousSurfaceError : public Error {
 public:
  struct Collision {
    std::string surface;
    std::vector<std::string> entity_ids;
  };
  explicit AmbiguousSurfaceError(std::vector<Collision> collisions);
  const std::vector<Collision>& collisions() const { return collisions_; }

 private:
  std::vector<Collision> collisions_;
};

class Matcher {
 public:
  // Entity ids in catalog order; match callbacks report indexes into this.
  const std::vector<std::string>& entity_ids() const { return entity_ids_; }
  std::size_t pattern_count() const { return pattern_entity_.size(); }
  std::size_t state_count() const { return state_count_; }
  bool case_insensitive() const { return case_insensitive_; }

  // Appends the (deduplicated, sorted) entity indexes mentioned in text.
  void match_entities(std::string_view text, std::vector<std::uint32_t>& out) const;

 private:
  friend Matcher build_matcher(const EntityCatalog&, const MatcherOptions&);

  std::vector<std::string> entity_ids_;
  // Byte -> symbol class; class 0 means "byte never appears in a pattern".
  std::uint8_t byte_class_[256]{};
  bool word_byte_[256]{};
  std::uint32_t class_count_ = 1;
  std::uint32_t state_count_ = 0;
  // Dense DFA: delta_[state * class_count_ + cls].
  std::vector<std::uint32_t> delta_;
  // First pattern ending at a state (or kNone) and the next state on the
  // dictionary-suffix chain that has an output.
  std::vector<std::uint32_t> out_pattern_;
  std::vector<std::uint32_t> dict_link_;
  std::vector<std::uint32_t> pattern_entity_;
  std::vector<std::uint32_t> pattern_length_;
  std::vector<std::uint8_t> pattern_edges_;  // bit0: starts with word byte, bit1: ends with one
  bool case_insensitive_ = false;
};

Matcher build_matcher(const EntityCatalog& catalog, const MatcherOptions& options = {});

struct Document {
  DocId id = 0;
  std::string text;
};

class OccurrenceIndex {
 public:
  OccurrenceIndex() = default;
  OccurrenceIndex(std::uint64_t doc_count_total,
                  std::vector<std::pair<std::string, std::vector<DocId>>> postings);

  std::uint64_t doc_count_total() const { return doc_count_total_; }
  std::size_t entity_count() const { return postings_.size(); }
  bool contains(std::string_view entity) const;
  // Empty span for unknown entities.
  std::span<const DocId> postings(std::string_view entity) const;
  // Entity ids in sorted order.
  std::vector<std::string> entities() const;

  // Versioned little-endian binary encoding.
  std::string serialize() const;
  static OccurrenceIndex deserialize(std::string_view bytes);

  // Writes `path` and a JSON sidecar `path + ".json"` with
  // {format_version, entity_count, doc_count_total, checksum}.
  void save(const std::filesystem::path& path) const;
  static OccurrenceIndex load(const std::filesystem::path& path);

  bool operator==(const OccurrenceIndex& other) const = default;

 private:
  std::uint64_t doc_count_total_ = 0;
  // Sorted by entity id.
  std::vector<std::pair<std::string, std::vector<DocId>>> postings_;
};

struct ScanStats {
  std::uint64_t documents = 0;
  std::uint64_t skipped = 0;
};

// Parallel scan over documents with `workers` OpenMP threads.
OccurrenceIndex scan_corpus(std::span<const Document> docs, const Matcher& matcher, int workers,
                            ScanStats* stats = nullptr);

// Single-threaded reference implementation.
OccurrenceIndex scan_corpus_serial(std::span<const Document> docs, const Matcher& matcher,
                                   ScanStats* stats = nullptr);

// Reads corpus JSONL ({"id": int, "text": str}) from a file or from every
// regular file of a directory in name order. Undecodable lines are skipped
// and counted.
std::vector<Document> load_corpus(const std::filesystem::path& path, ScanStats* stats = nullptr);

std::uint64_t doc_count(const OccurrenceIndex& index, std::string_view entity);
std::uint64_t cooccurrence_count(const OccurrenceIndex& index, std::string_view e1,
                                 std::string_view e2);

// Sorted-merge intersection size of two strictly increasing lists.
std::uint64_t intersection_size(std::span<const DocId> a, std::span<const DocId> b);

struct PairProbability {
  double p_subject = 0.0;
  double p_object = 0.0;
  double p_joint = 0.0;
};

std::vector<PairProbability> pair_probabilities(
    const OccurrenceIndex& index, std::span<const std::pair<std::string, std::string>> pairs);

}  // namespace popcal
