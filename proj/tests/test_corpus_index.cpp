#include <doctest.h>

#include "fixtures.hpp"
#include "popcal/corpus_index.hpp"
#include "support.hpp"

using namespace popcal;

namespace {

EntityCatalog abc_catalog() {
  return EntityCatalog({{"A", "Alpha", {}}, {"B", "Beta", {}}, {"C", "Gamma", {}}});
}

std::vector<Document> abc_docs() { return {{0, "Alpha Beta"}, {1, "Alpha"}, {2, "Gamma"}}; }

std::vector<std::string> matched(const Matcher& m, std::string_view text) {
  std::vector<std::uint32_t> idx;
  m.match_entities(text, idx);
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(m.entity_ids()[i]);
  return out;
}

std::map<std::string, std::vector<DocId>> as_map(const OccurrenceIndex& idx) {
  std::map<std::string, std::vector<DocId>> out;
  for (const auto& e : idx.entities()) {
    auto p = idx.postings(e);
    out[e] = {p.begin(), p.end()};
  }
  return out;
}

}  // namespace

TEST_CASE("matcher: word boundaries") {
  const auto inception = build_matcher(EntityCatalog(std::vector<CatalogEntry>{{"e1", "Inception", {}}}));
  CHECK(matched(inception, "Inception premiered") == std::vector<std::string>{"e1"});
  const auto nolan = build_matcher(EntityCatalog(std::vector<CatalogEntry>{{"e1", "Nolan", {}}}));
  CHECK(matched(nolan, "Nolans").empty());
  CHECK(matched(nolan, "xNolan").empty());
  CHECK(matched(nolan, "Nolan\xc3\xa9").empty());
  CHECK(matched(nolan, "(Nolan)") == std::vector<std::string>{"e1"});
  CHECK(matched(nolan, "Nolan") == std::vector<std::string>{"e1"});
  CHECK(matched(nolan, "nolan").empty());
}

TEST_CASE("matcher: overlapping and nested surfaces") {
  const auto m = build_matcher(EntityCatalog({{"k", "Karo", {}},
                                              {"km", "Karo Mine", {}},
                                              {"kmi", "Karomi", {}},
                                              {"kr", "Kr", {"K.R."}}}));
  CHECK(matched(m, "the Karo Mine was") == std::vector<std::string>{"k", "km"});
  CHECK(matched(m, "Karomi") == std::vector<std::string>{"kmi"});
  CHECK(matched(m, "see K.R.s") == std::vector<std::string>{"kr"});
}

TEST_CASE("matcher: case-insensitive mode") {
  const auto m = build_matcher(EntityCatalog(std::vector<CatalogEntry>{{"e1", "Nolan", {}}}), {true});
  CHECK(matched(m, "NOLAN directed") == std::vector<std::string>{"e1"});
  CHECK(m.case_insensitive());
}

TEST_CASE("matcher: shared alias is an ambiguity error") {
  EntityCatalog cat({{"Q1", "Queen (band)", {"Queen"}}, {"Q2", "Queen (chess)", {"Queen"}}});
  try {
    build_matcher(cat);
    FAIL("expected an ambiguity error");
  } catch (const AmbiguousSurfaceError& e) {
    REQUIRE(e.collisions().size() == 1);
    CHECK(e.collisions()[0].surface == "Queen");
    CHECK(e.collisions()[0].entity_ids == std::vector<std::string>{"Q1", "Q2"});
  }
}

TEST_CASE("scan: three-document fixture") {
  const auto m = build_matcher(abc_catalog());
  const auto docs = abc_docs();
  const auto idx = scan_corpus(docs, m, 2);
  CHECK(idx.doc_count_total() == 3);
  CHECK(as_map(idx) == std::map<std::string, std::vector<DocId>>{{"A", {0, 1}}, {"B", {0}}, {"C", {2}}});
  CHECK(doc_count(idx, "A") == 2);
  CHECK(doc_count(idx, "Z") == 0);
  CHECK(cooccurrence_count(idx, "A", "B") == 1);
  CHECK(cooccurrence_count(idx, "A", "A") == 2);
  CHECK(cooccurrence_count(idx, "B", "C") == 0);

  const std::vector<std::pair<std::string, std::string>> pairs = {{"A", "B"}, {"X", "Y"}, {"A", "A"}};
  const auto p = pair_probabilities(idx, pairs);
  CHECK(p[0].p_subject == doctest::Approx(2.0 / 3));
  CHECK(p[0].p_object == doctest::Approx(1.0 / 3));
  CHECK(p[0].p_joint == doctest::Approx(1.0 / 3));
  CHECK(p[1].p_subject == 0.0);
  CHECK(p[1].p_joint == 0.0);
  CHECK(p[2].p_joint == doctest::Approx(2.0 / 3));
}

TEST_CASE("scan: entity in every document of a five-document corpus") {
  const auto m = build_matcher(EntityCatalog(std::vector<CatalogEntry>{{"E", "Everywhere", {}}}));
  std::vector<Document> docs;
  for (DocId i = 0; i < 5; ++i) docs.push_back({i, "text Everywhere " + std::to_string(i)});
  CHECK(doc_count(scan_corpus(docs, m, 3), "E") == 5);
}

TEST_CASE("scan: empty corpus") {
  const auto m = build_matcher(abc_catalog());
  const auto idx = scan_corpus(std::vector<Document>{}, m, 4);
  CHECK(idx.doc_count_total() == 0);
  for (const auto& e : idx.entities()) CHECK(idx.postings(e).empty());
  CHECK_THROWS(pair_probabilities(idx, std::vector<std::pair<std::string, std::string>>{{"A", "B"}}));
}

TEST_CASE("scan: worker counts give byte-identical indexes") {
  const auto f = fixtures::make_scan_fixture(300, 80, 5);
  const auto m = build_matcher(f.catalog);
  const auto ref = scan_corpus_serial(f.docs, m).serialize();
  for (int w : {1, 2, 8}) CHECK(scan_corpus(f.docs, m, w).serialize() == ref);
  CHECK_THROWS_AS(scan_corpus(f.docs, m, 0), std::invalid_argument);
}

TEST_CASE("scan: equals the naive oracle on trap-laden corpora") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto f = fixtures::make_scan_fixture(200, 120, seed);
    for (bool ci : {false, true}) {
      const auto m = build_matcher(f.catalog, {ci});
      const auto got = as_map(scan_corpus(f.docs, m, 4));
      CHECK(got == testsupport::naive_scan(f.docs, f.catalog, ci));
    }
  }
}

TEST_CASE("scan: document order does not change the result") {
  auto f = fixtures::make_scan_fixture(150, 60, 9);
  const auto m = build_matcher(f.catalog);
  const auto before = scan_corpus(f.docs, m, 2);
  Rng rng(4);
  shuffle_in_place(f.docs, rng);
  CHECK(scan_corpus(f.docs, m, 2) == before);
}

TEST_CASE("cooccurrence bounds and symmetry") {
  const auto f = fixtures::make_scan_fixture(200, 40, 12);
  const auto idx = scan_corpus(f.docs, build_matcher(f.catalog), 2);
  const auto ids = idx.entities();
  for (std::size_t i = 0; i < ids.size(); i += 3) {
    for (std::size_t j = 0; j < ids.size(); j += 5) {
      const auto c = cooccurrence_count(idx, ids[i], ids[j]);
      CHECK(c == cooccurrence_count(idx, ids[j], ids[i]));
      CHECK(c <= std::min(doc_count(idx, ids[i]), doc_count(idx, ids[j])));
    }
  }
}

TEST_CASE("intersection_size matches std::set_intersection") {
  Rng rng(21);
  for (int t = 0; t < 200; ++t) {
    std::set<DocId> sa, sb;
    const auto na = uniform_index(rng, 60), nb = uniform_index(rng, 60);
    for (std::size_t i = 0; i < na; ++i) sa.insert(static_cast<DocId>(uniform_index(rng, 100)));
    for (std::size_t i = 0; i < nb; ++i) sb.insert(static_cast<DocId>(uniform_index(rng, 100)));
    std::vector<DocId> a(sa.begin(), sa.end()), b(sb.begin(), sb.end()), both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    CHECK(intersection_size(a, b) == both.size());
  }
}

TEST_CASE("index persistence round-trips and detects corruption") {
  testsupport::TempDir dir;
  const auto f = fixtures::make_scan_fixture(100, 30, 2);
  const auto idx = scan_corpus(f.docs, build_matcher(f.catalog), 2);
  CHECK(OccurrenceIndex::deserialize(idx.serialize()) == idx);

  const auto path = dir / "index.bin";
  idx.save(path);
  CHECK(std::filesystem::exists(dir / "index.bin.json"));
  const auto sidecar = nlohmann::json::parse(read_file(dir / "index.bin.json"));
  CHECK(sidecar.at("entity_count") == idx.entity_count());
  CHECK(sidecar.at("doc_count_total") == idx.doc_count_total());
  CHECK(OccurrenceIndex::load(path) == idx);

  auto bytes = read_file(path);
  bytes[bytes.size() / 2] ^= 0x5a;
  write_file_atomic(path, bytes);
  CHECK_THROWS(OccurrenceIndex::load(path));
  CHECK_THROWS(OccurrenceIndex::deserialize("junk"));
}

TEST_CASE("load_corpus: files, shard directories and undecodable lines") {
  testsupport::TempDir dir;
  std::filesystem::create_directories(dir / "shards");
  write_file_atomic(dir / "shards" / "b.jsonl", R"({"id": 2, "text": "Gamma"})" "\n");
  write_file_atomic(dir / "shards" / "a.jsonl",
                    R"({"id": 0, "text": "Alpha Beta"})" "\n" R"({"id": 1, "text": "Alpha"})" "\n"
                    "not json\n" R"({"id": -4, "text": "x"})" "\n");
  ScanStats stats;
  const auto docs = load_corpus(dir / "shards", &stats);
  REQUIRE(docs.size() == 3);
  CHECK(docs[0].id == 0);
  CHECK(docs[2].text == "Gamma");
  CHECK(stats.skipped == 2);
  CHECK(as_map(scan_corpus(docs, build_matcher(abc_catalog()), 1)) ==
        std::map<std::string, std::vector<DocId>>{{"A", {0, 1}}, {"B", {0}}, {"C", {2}}});
  CHECK_THROWS_AS(load_corpus(dir / "nope"), IoError);
}

TEST_CASE("catalog JSONL round-trip") {
  testsupport::TempDir dir;
  EntityCatalog cat({{"Q1", "Alpha", {"A1", "A2"}}, {"Q2", "Beta", {}}});
  write_file_atomic(dir / "c.jsonl", cat.to_jsonl());
  const auto back = EntityCatalog::load(dir / "c.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back.find("Q1")->aliases == std::vector<std::string>{"A1", "A2"});
  CHECK(back.find("Q3") == nullptr);
}
