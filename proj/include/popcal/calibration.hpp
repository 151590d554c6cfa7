#pragma once

// Answer-correctness prediction from confidence and popularity features:
// a single-feature threshold classifier and a small MLP (d -> 64 -> 32 -> 2,
// ReLU, dropout on hidden activations while training, softmax output)
// trained with Adam on cross-entropy.

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "popcal/core_model.hpp"
#include "popcal/util.hpp"

namespace popcal {

enum class Feature {
  PC,
  Verb,
  Consis,
  PopQ,
  PopGT,
  PopGe,
  RPopGT,
  RPopGe,
  SelfPopQ,
  SelfPopGe,
  SelfRPopGe,
};

std::string_view feature_name(Feature f);
Feature parse_feature(std::string_view name);
// Popularity features get log1p + z-scoring; PC, Verb and Consis pass through.
bool is_popularity_feature(Feature f);

struct FeatureSet {
  std::string name;
  std::vector<Feature> features;
};

// "PC+Pop_Q" style name -> set. "ALL" expands to Pop_Q, Pop_Ge, RPop_Ge and
// a "Self:" prefix selects self-estimated popularity.
FeatureSet parse_feature_set(std::string_view name);

class FeatureError : public Error {
 public:
  using Error::Error;
};

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

std::optional<double> raw_feature(const AnalysisRecord& record, Feature f);

// Training-set statistics of the transformed popularity dimensions;
// pass-through dimensions get mean 0 / stddev 1.
NormalizationStats fit_normalization(std::span<const AnalysisRecord> train, const FeatureSet& set);

// Without stats the popularity dimensions are only log1p-transformed.
std::vector<double> build_features(const AnalysisRecord& record, const FeatureSet& set,
                                   const NormalizationStats* stats = nullptr);

struct CalibrationSample {
  std::vector<double> features;
  int label = 0;
};

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_train_test(const std::vector<T>& records,
                                                           std::uint64_t seed) {
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  shuffle_in_place(order, rng);
  const std::size_t n_train = (records.size() + 1) / 2;
  std::pair<std::vector<T>, std::vector<T>> out;
  out.first.reserve(n_train);
  out.second.reserve(records.size() - n_train);
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_train ? out.first : out.second).push_back(records[order[i]]);
  return out;
}

// Same permutation as split_train_test, as index lists.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n,
                                                                            std::uint64_t seed);

class BalanceError : public Error {
 public:
  using Error::Error;
};

// Keeps every positive, samples as many negatives uniformly without
// replacement, then shuffles the union. Both draws use `seed`.
std::vector<std::size_t> balance_indices(std::span<const int> labels, std::uint64_t seed);

template <typename T, typename LabelFn>
std::vector<T> balance_classes(const std::vector<T>& records, std::uint64_t seed, LabelFn label) {
  std::vector<int> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(label(r));
  std::vector<T> out;
  for (auto i : balance_indices(labels, seed)) out.push_back(records[i]);
  return out;
}

struct ThresholdModel {
  double lambda = -std::numeric_limits<double>::infinity();
  double train_accuracy = 0.0;  // fraction in [0,1]
};

// Chooses lambda among -inf, midpoints of consecutive distinct values and
// +inf to maximise training accuracy of (x > lambda); ties go to the
// smallest lambda.
ThresholdModel fit_threshold(std::span<const double> xs, std::span<const int> ys);

inline int predict_threshold(double x, double lambda) { return x > lambda ? 1 : 0; }

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;  // out x in, row-major
  std::vector<double> bias;    // out

  bool operator==(const DenseLayer&) const = default;
};

struct MlpModel {
  static constexpr std::array<std::size_t, 3> kWidths = {64, 32, 2};

  std::array<DenseLayer, 3> layers;
  double dropout = 0.4;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  static MlpModel initialize(std::size_t input_dim, Rng& rng);
  // Every weight and bias zero.
  static MlpModel zeros(std::size_t input_dim);

  std::size_t input_dim() const { return layers[0].in; }
  std::size_t parameter_count() const;

  bool operator==(const MlpModel&) const = default;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Dropout keep-masks for the two hidden layers (already scaled by 1/(1-p)).
struct DropoutMasks {
  std::vector<double> hidden1;
  std::vector<double> hidden2;
};

DropoutMasks sample_dropout(const MlpModel& model, Rng& rng);

// Class probabilities {P(0), P(1)}.
std::array<double, 2> mlp_probabilities(const MlpModel& model, std::span<const double> x,
                                        const DropoutMasks* masks = nullptr);

// P(class 1). With training=true, dropout masks are drawn from `seed`.
double mlp_forward(const MlpModel& model, std::span<const double> x, bool training,
                   std::uint64_t seed = 0);

inline int mlp_predict(const MlpModel& model, std::span<const double> x) {
  auto p = mlp_probabilities(model, x);
  return p[1] > p[0] ? 1 : 0;
}

// Same layout as MlpModel, holding dLoss/dParameter.
using MlpGradient = std::array<DenseLayer, 3>;

// Mean cross-entropy over the batch; fills `grad` when non-null. `masks`
// holds one entry per sample, or is empty for no dropout.
double mlp_loss(const MlpModel& model, std::span<const CalibrationSample> batch,
                MlpGradient* grad = nullptr, std::span<const DropoutMasks> masks = {});

struct TrainConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 8;
  std::size_t epochs = 100;
  double dropout = 0.4;
  std::uint64_t seed = 0;
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t epoch, const std::string& what)
      : Error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

struct TrainResult {
  MlpModel model;
  std::size_t best_epoch = 0;  // 1-based
  double train_accuracy = 0.0;
  std::vector<double> epoch_accuracy;
};

// Adam on mean cross-entropy; returns the epoch checkpoint with the highest
// training accuracy (earliest on ties). Deterministic for a given seed.
TrainResult train_mlp(std::span<const CalibrationSample> train, const TrainConfig& cfg);

using Predictor = std::function<int(const CalibrationSample&)>;

// Accuracy in percent.
double evaluate_predictor(const Predictor& predictor, std::span<const CalibrationSample> test);

// Checkpoint file: binary weights + JSON manifest sidecar.
struct MlpCheckpoint {
  MlpModel model;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  std::vector<std::string> feature_names;
  NormalizationStats stats;
};
void save_checkpoint(const std::filesystem::path& path, const MlpCheckpoint& ckpt);
MlpCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Experimental protocol

enum class RowKind { Direct, Threshold, Mlp };

struct ProtocolRow {
  std::string name;
  RowKind kind = RowKind::Threshold;
  FeatureSet features;
};

// Verb, Consis, PC, single popularity rows, PC+X rows and PC+ALL; self-
// estimated variants are appended when `include_self` is set.
std::vector<ProtocolRow> default_protocol_rows(bool include_self);
ProtocolRow make_protocol_row(std::string_view name);

struct ProtocolConfig {
  std::vector<std::uint64_t> seeds = {0, 42, 100};
  bool balance = false;
  std::uint64_t balance_seed = 0;
  TrainConfig train;
  std::vector<ProtocolRow> rows = default_protocol_rows(false);
  int workers = 1;
};

struct RowResult {
  std::string name;
  bool available = true;
  std::string unavailable_reason;
  std::vector<double> seed_accuracy;  // percent, one per seed
  double mean_accuracy = 0.0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  // Indexes into the (balanced) record list used for this run.
  std::vector<std::size_t> test_indices;
  // Row name -> test predictions aligned with test_indices.
  std::map<std::string, std::vector<int>> predictions;
  // Row name -> fitted threshold, for threshold rows.
  std::map<std::string, double> thresholds;
};

struct ProtocolResult {
  std::vector<RowResult> rows;
  std::vector<SeedRun> runs;
  // The records the protocol actually used (after optional balancing).
  std::vector<std::size_t> used_indices;

  const RowResult* row(std::string_view name) const;
};

ProtocolResult run_protocol(const std::vector<AnalysisRecord>& records, const ProtocolConfig& cfg);

std::string protocol_result_json(const ProtocolResult& result);
ProtocolResult parse_protocol_result_json(std::string_view text);

}  // namespace popcal
