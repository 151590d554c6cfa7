#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "popcal/corpus_index.hpp"

namespace popcal {

struct AnalysisRecord;
struct PopularityVector;

// Mean of per-token probabilities over the whole generation.
double mean_token_confidence(std::span<const double> token_probs);

// 1 - |correct - confidence|.
double alignment(int correct, double confidence);

// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> values);

// Pearson correlation of average ranks. Throws std::invalid_argument on
// length mismatch or fewer than two points and std::domain_error when either
// input is constant.
double spearman(std::span<const double> xs, std::span<const double> ys);

// Normalized mutual information over subject/object pairs with the
// convention that only matched pairs (s_i, o_i) carry joint mass.
// 0 * log 0 terms vanish. Throws std::domain_error on zero entropy.
double nmi(std::span<const PairProbability> pairs);

using EquivalenceJudge = std::function<int(const std::string& a, const std::string& b)>;

// Fraction of samples the judge deems equivalent to the greedy answer.
double consistency_score(const std::string& greedy, std::span<const std::string> samples,
                         const EquivalenceJudge& judge);

enum class PopSignal { PopQ, PopGT, RPopGT, PopGe, RPopGe };
inline constexpr std::array<PopSignal, 5> kAllSignals = {
    PopSignal::PopQ, PopSignal::PopGT, PopSignal::RPopGT, PopSignal::PopGe, PopSignal::RPopGe};
std::string_view signal_name(PopSignal s);
std::optional<double> signal_value(const PopularityVector& p, PopSignal s);

enum class Outcome { Accuracy, Confidence, Alignment };
inline constexpr std::array<Outcome, 3> kAllOutcomes = {Outcome::Accuracy, Outcome::Confidence,
                                                        Outcome::Alignment};
std::string_view outcome_name(Outcome o);

struct BinPoint {
  double popularity = 0.0;
  int correct = 0;
  double confidence = 0.0;
  double alignment = 0.0;
};

struct Bin {
  double pop_min = 0.0;
  double pop_max = 0.0;
  double mean_accuracy = 0.0;
  double mean_confidence = 0.0;
  double mean_alignment = 0.0;
  std::size_t count = 0;
};

struct BinnedCurve {
  std::string signal;
  std::size_t requested_bins = 0;
  std::vector<Bin> bins;
  bool degenerate = false;  // all popularity values equal
};

// Equal-count bins over sorted popularity. Bin edges never split a run of
// equal values, so the realised bin count can be below n_bins.
BinnedCurve bin_by_popularity(std::span<const BinPoint> points, std::size_t n_bins);

std::string binned_curve_csv(const BinnedCurve& curve);
std::string binned_curve_svg(const BinnedCurve& curve, std::string_view title);

struct CorrelationReport {
  std::size_t samples = 0;
  double accuracy_pct = 0.0;
  double confidence_pct = 0.0;
  double alignment_pct = 0.0;
  // rho[signal][outcome]; unset when the signal is missing or constant.
  std::array<std::array<std::optional<double>, 3>, 5> rho{};

  std::optional<double> at(PopSignal s, Outcome o) const {
    return rho[static_cast<int>(s)][static_cast<int>(o)];
  }
};

CorrelationReport correlation_report(std::span<const AnalysisRecord> records,
                                     bool use_self_popularity = false);

// One row per (signal, outcome) cell.
std::string correlation_cells_csv(const CorrelationReport& report);
std::string correlation_report_json(const CorrelationReport& report);
CorrelationReport parse_correlation_report_json(std::string_view text);

}  // namespace popcal
