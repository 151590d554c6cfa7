#pragma once

// Deterministic fixture builders shared by the unit tests, the acceptance
// binary and the scanner benchmark.

#include <set>
#include <string>
#include <vector>

#include "popcal/core_model.hpp"
#include "popcal/corpus_index.hpp"
#include "popcal/util.hpp"

namespace fixtures {

using popcal::CatalogEntry;
using popcal::Document;
using popcal::EntityCatalog;
using popcal::Rng;

inline const std::vector<std::string>& syllables() {
  static const std::vector<std::string> s = {"ka", "ro", "mi", "ten", "sa", "lu", "vor", "ne",
                                             "di", "pa", "el", "tor", "qua", "zen", "bri", "ho"};
  return s;
}

inline std::string random_word(Rng& rng, std::size_t min_syl, std::size_t max_syl) {
  const auto& syl = syllables();
  const std::size_t n = min_syl + popcal::uniform_index(rng, max_syl - min_syl + 1);
  std::string w;
  for (std::size_t i = 0; i < n; ++i) w += syl[popcal::uniform_index(rng, syl.size())];
  return w;
}

inline std::string capitalize(std::string w) {
  if (!w.empty() && w[0] >= 'a' && w[0] <= 'z') w[0] = static_cast<char>(w[0] - 'a' + 'A');
  return w;
}

// Entities whose surfaces overlap on purpose: some labels extend an earlier
// label by a word ("Karo" / "Karo Mine"), some glue on a syllable ("Karo" /
// "Karomi"), and some aliases end in punctuation ("K.R.").
inline EntityCatalog make_trap_catalog(std::size_t n_entities, Rng& rng) {
  std::set<std::string> used;
  std::vector<CatalogEntry> entries;
  auto unique = [&](std::string s) {
    while (used.count(popcal::ascii_lower(s))) s += capitalize(random_word(rng, 1, 1));
    used.insert(popcal::ascii_lower(s));
    return s;
  };
  for (std::size_t i = 0; i < n_entities; ++i) {
    CatalogEntry e;
    e.id = "Q" + std::to_string(1000 + i);
    if (i > 0 && i % 5 == 1) {
      e.label = unique(entries[i - 1].label + " " + capitalize(random_word(rng, 1, 2)));
    } else if (i > 0 && i % 7 == 3) {
      e.label = unique(entries[i - 1].label + random_word(rng, 1, 1));
    } else {
      e.label = unique(capitalize(random_word(rng, 1, 3)));
    }
    if (i % 3 == 0) {
      std::string initials;
      initials += static_cast<char>(std::toupper(static_cast<unsigned char>(e.label[0])));
      initials += ".";
      initials += static_cast<char>('A' + popcal::uniform_index(rng, 26));
      initials += ".";
      if (!used.count(popcal::ascii_lower(initials))) {
        used.insert(popcal::ascii_lower(initials));
        e.aliases.push_back(initials);
      }
    }
    if (i % 4 == 2) e.aliases.push_back(unique("The " + e.label));
    entries.push_back(std::move(e));
  }
  return EntityCatalog(std::move(entries));
}

inline std::string decorate(const std::string& surface, Rng& rng) {
  switch (popcal::uniform_index(rng, 10)) {
    case 0: return "x" + surface;                  // glued on the left
    case 1: return surface + "s";                  // glued on the right
    case 2: return "(" + surface + ")";
    case 3: return surface + "\xc3\xa9";           // UTF-8 letter continues the word
    case 4: return surface + ",";
    case 5: return "7" + surface;
    default: return surface;
  }
}

struct ScanFixture {
  EntityCatalog catalog;
  std::vector<Document> docs;
};

inline ScanFixture make_scan_fixture(std::size_t n_docs, std::size_t n_entities, std::uint64_t seed,
                                     std::size_t tokens_per_doc = 40) {
  Rng rng(seed);
  ScanFixture f;
  f.catalog = make_trap_catalog(n_entities, rng);
  const auto& entries = f.catalog.entries();
  for (std::size_t d = 0; d < n_docs; ++d) {
    Document doc;
    doc.id = static_cast<popcal::DocId>(d);
    for (std::size_t t = 0; t < tokens_per_doc; ++t) {
      if (t) doc.text += popcal::uniform_index(rng, 8) == 0 ? "  " : " ";
      if (popcal::uniform_index(rng, 4) == 0) {
        const auto& e = entries[popcal::uniform_index(rng, entries.size())];
        const std::size_t pick = popcal::uniform_index(rng, e.aliases.size() + 1);
        doc.text += decorate(pick == 0 ? e.label : e.aliases[pick - 1], rng);
      } else {
        doc.text += random_word(rng, 1, 3);
      }
    }
    f.docs.push_back(std::move(doc));
  }
  return f;
}

// Roughly `target_bytes` of text over a catalog of `n_patterns` single-label
// entities; about one token in eight is an entity mention.
inline ScanFixture make_throughput_fixture(std::size_t target_bytes, std::size_t n_patterns,
                                           std::uint64_t seed, std::size_t doc_bytes = 4096) {
  Rng rng(seed);
  ScanFixture f;
  std::vector<CatalogEntry> entries;
  std::set<std::string> used;
  for (std::size_t i = 0; i < n_patterns; ++i) {
    std::string label;
    do {
      label = capitalize(random_word(rng, 2, 4)) + " " + capitalize(random_word(rng, 1, 3));
    } while (!used.insert(label).second);
    entries.push_back({"Q" + std::to_string(i + 1), label, {}});
  }
  f.catalog = EntityCatalog(entries);
  std::size_t total = 0;
  popcal::DocId id = 0;
  while (total < target_bytes) {
    Document doc;
    doc.id = id++;
    doc.text.reserve(doc_bytes + 64);
    while (doc.text.size() < doc_bytes) {
      if (popcal::uniform_index(rng, 8) == 0) {
        doc.text += entries[popcal::uniform_index(rng, entries.size())].label;
      } else {
        doc.text += random_word(rng, 1, 3);
      }
      doc.text += ' ';
    }
    total += doc.text.size();
    f.docs.push_back(std::move(doc));
  }
  return f;
}

// Twenty questions answered by two models. Hand counts:
//   empty generation        q2 (model A), q5 (model B), q11 (both, also unresolved)
//   unresolved entity       q7 (model B has no entity), q13 (model A entity not indexed)
//   over the 6000-doc cap   q17 (object entity in 6001 documents)
// q19's subject sits exactly at the cap and survives. 14 questions remain.
struct FilterFixture {
  std::vector<std::vector<popcal::QARecord>> by_model;
  popcal::OccurrenceIndex index;
  popcal::FilterReport expected;
  std::vector<std::size_t> survivors;
};

inline FilterFixture make_filter_fixture() {
  FilterFixture f;
  constexpr std::size_t kQuestions = 20;
  constexpr std::uint64_t kDocs = 7000;
  std::vector<std::pair<std::string, std::vector<popcal::DocId>>> postings;
  auto docs_upto = [](std::uint32_t n) {
    std::vector<popcal::DocId> v(n);
    for (std::uint32_t i = 0; i < n; ++i) v[i] = i;
    return v;
  };
  for (std::size_t q = 0; q < kQuestions; ++q) {
    const auto s = std::to_string(q);
    postings.emplace_back("QS" + s, q == 19 ? docs_upto(6000) : docs_upto(10 + q));
    postings.emplace_back("QO" + s, q == 17 ? docs_upto(6001) : docs_upto(5 + q));
    postings.emplace_back("QG" + s, docs_upto(3 + q));
  }
  f.index = popcal::OccurrenceIndex(kDocs, std::move(postings));

  f.by_model.resize(2);
  for (std::size_t q = 0; q < kQuestions; ++q) {
    const auto s = std::to_string(q);
    popcal::KnowledgeTriple t;
    t.dataset = popcal::DatasetId::Movies;
    t.subject = "Subject " + s;
    t.subject_entity = "QS" + s;
    t.relation = "director";
    t.object = "Object " + s;
    t.object_entity = "QO" + s;
    t.question = popcal::render_question(t, *popcal::default_template(popcal::DatasetId::Movies));
    for (std::size_t m = 0; m < 2; ++m) {
      std::string answer = "Object " + s;
      std::optional<std::string> entity = "QO" + s;
      if (q % 2 == 1) {
        answer = "Guess " + s;
        entity = "QG" + s;
      }
      if ((q == 2 && m == 0) || (q == 5 && m == 1) || q == 11) answer = q == 11 ? "  " : "";
      if ((q == 7 && m == 1) || q == 11) entity = std::nullopt;
      if (q == 13 && m == 0) entity = "QX13";
      f.by_model[m].push_back(popcal::make_qa_record(t, answer, {0.5 + 0.02 * q, 0.9}, entity));
    }
  }
  f.expected.input_count = 20;
  f.expected.removed_empty = 3;
  f.expected.removed_unresolved_entity = 2;
  f.expected.removed_docfreq_over_cap = 1;
  f.expected.output_count = 14;
  f.expected.docfreq_cap = 6000;
  for (std::size_t q = 0; q < kQuestions; ++q)
    if (q != 2 && q != 5 && q != 11 && q != 7 && q != 13 && q != 17) f.survivors.push_back(q);
  return f;
}

}  // namespace fixtures
