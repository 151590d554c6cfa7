// Serial reference scanner against the OpenMP kernel.

#include <benchmark/benchmark.h>

#include "fixtures.hpp"
#include "popcal/corpus_index.hpp"

namespace {

using popcal::Matcher;

struct Corpus {
  fixtures::ScanFixture fixture;
  Matcher matcher;
  std::size_t bytes = 0;

  Corpus(std::size_t target_bytes, std::size_t patterns)
      : fixture(fixtures::make_throughput_fixture(target_bytes, patterns, 11)),
        matcher(popcal::build_matcher(fixture.catalog)) {
    for (const auto& d : fixture.docs) bytes += d.text.size();
  }
};

const Corpus& corpus() {
  static const Corpus c(32u * 1000u * 1000u, 10000);
  return c;
}

void BM_ScanSerial(benchmark::State& state) {
  const auto& c = corpus();
  for (auto _ : state) {
    auto idx = popcal::scan_corpus_serial(c.fixture.docs, c.matcher);
    benchmark::DoNotOptimize(idx);
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * c.bytes));
}

void BM_ScanOpenMP(benchmark::State& state) {
  const auto& c = corpus();
  const int workers = static_cast<int>(state.range(0));
  for (auto _ : state) {
    auto idx = popcal::scan_corpus(c.fixture.docs, c.matcher, workers);
    benchmark::DoNotOptimize(idx);
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * c.bytes));
}

void BM_BuildMatcher(benchmark::State& state) {
  const auto& c = corpus();
  for (auto _ : state) {
    auto m = popcal::build_matcher(c.fixture.catalog);
    benchmark::DoNotOptimize(m);
  }
}

void BM_PairProbabilities(benchmark::State& state) {
  const auto& c = corpus();
  const auto idx = popcal::scan_corpus(c.fixture.docs, c.matcher, 1);
  const auto ids = idx.entities();
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = 0; i + 1 < ids.size() && pairs.size() < 5000; i += 2)
    pairs.emplace_back(ids[i], ids[i + 1]);
  for (auto _ : state) {
    auto p = popcal::pair_probabilities(idx, pairs);
    benchmark::DoNotOptimize(p);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * pairs.size()));
}

}  // namespace

BENCHMARK(BM_ScanSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_ScanOpenMP)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_BuildMatcher)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PairProbabilities)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
